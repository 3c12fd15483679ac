#pragma once

#include <ostream>
#include <span>
#include <vector>

#include "popmeta/agents.hpp"
#include "popmeta/world.hpp"

namespace popmeta {

inline constexpr double kRewardCorrect = 1.0;
inline constexpr double kRewardWrong = -0.1;

inline double reward_for(std::size_t prediction, std::size_t target_index) {
  return prediction == target_index ? kRewardCorrect : kRewardWrong;
}

/// Targets with their shuffled candidate lists. Episode b's candidates occupy
/// [b * per_episode, (b + 1) * per_episode); target_index[b] is the slot
/// holding the target after shuffling.
struct CandidateBatch {
  std::vector<Object> targets;
  std::vector<Object> candidates;
  std::vector<std::size_t> target_index;
  std::size_t per_episode = 1;

  std::size_t size() const { return targets.size(); }
  std::span<const Object> candidates_of(std::size_t b) const {
    return std::span<const Object>(candidates).subspan(b * per_episode, per_episode);
  }
};

/// Fresh distractors for each target, drawn from `pool`, shuffled together
/// with the target.
CandidateBatch make_candidates(const World& world, std::span<const Object> targets, std::size_t k,
                               const DistractorSpec& spec, std::span<const Object> pool, Rng& rng);

/// `batch` targets drawn uniformly with replacement from `pool`, plus candidates.
CandidateBatch sample_game(const World& world, std::span<const Object> pool, std::size_t batch,
                           std::size_t k, const DistractorSpec& spec, Rng& rng);

enum class PlayMode {
  kTrain,  // speaker samples, listener samples its prediction
  kEval,   // greedy decoding, argmax prediction
};

struct Episode {
  Object target;
  std::vector<Object> distractors;
  std::vector<Object> candidates;
  std::size_t target_index = 0;
  Message message;
  std::vector<double> listener_probs;
  std::size_t prediction = 0;
  double reward = 0.0;
};

struct EpisodeBatch {
  std::size_t k = 0;
  std::vector<Episode> episodes;

  double accuracy() const;
  double mean_reward() const;
};

/// Index of the largest value, lowest index on ties.
std::size_t argmax(std::span<const double> v);

Episode play(const Model& speaker, const Model& listener, const Object& target,
             std::span<const Object> distractors, PlayMode mode, Rng& rng);

EpisodeBatch play_batch(const Model& speaker, const Model& listener, const World& world,
                        std::span<const Object> targets, std::size_t k, const DistractorSpec& spec,
                        std::span<const Object> pool, PlayMode mode, Rng& rng);

/// One JSON object per line: target, distractors, tokens, prediction, reward.
void write_trace(std::ostream& out, const EpisodeBatch& batch);

}  // namespace popmeta
