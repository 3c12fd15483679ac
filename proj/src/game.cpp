#include "popmeta/game.hpp"

#include <algorithm>
#include <stdexcept>

namespace popmeta {

CandidateBatch make_candidates(const World& world, std::span<const Object> targets, std::size_t k,
                               const DistractorSpec& spec, std::span<const Object> pool, Rng& rng) {
  CandidateBatch cb;
  cb.per_episode = k + 1;
  cb.targets.assign(targets.begin(), targets.end());
  cb.candidates.reserve(targets.size() * cb.per_episode);
  cb.target_index.reserve(targets.size());
  for (const auto& t : targets) {
    auto d = world.sample_distractors(t, k, spec, pool, rng);
    const std::size_t slot = rng.below(cb.per_episode);
    std::size_t di = 0;
    for (std::size_t s = 0; s < cb.per_episode; ++s) {
      cb.candidates.push_back(s == slot ? t : d[di++]);
    }
    cb.target_index.push_back(slot);
  }
  return cb;
}

CandidateBatch sample_game(const World& world, std::span<const Object> pool, std::size_t batch,
                           std::size_t k, const DistractorSpec& spec, Rng& rng) {
  if (pool.empty()) throw std::invalid_argument("sample_game: empty object pool");
  std::vector<Object> targets;
  targets.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) targets.push_back(pool[rng.below(pool.size())]);
  return make_candidates(world, targets, k, spec, pool, rng);
}

double EpisodeBatch::accuracy() const {
  if (episodes.empty()) return 0.0;
  std::size_t hits = 0;
  for (const auto& e : episodes) hits += e.prediction == e.target_index;
  return static_cast<double>(hits) / static_cast<double>(episodes.size());
}

double EpisodeBatch::mean_reward() const {
  if (episodes.empty()) return 0.0;
  double s = 0.0;
  for (const auto& e : episodes) s += e.reward;
  return s / static_cast<double>(episodes.size());
}

std::size_t argmax(std::span<const double> v) {
  if (v.empty()) throw std::invalid_argument("argmax of empty vector");
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

namespace {

EpisodeBatch run_batch(const Model& speaker, const Model& listener, const CandidateBatch& cb,
                       PlayMode mode, Rng& rng) {
  EpisodeBatch out;
  out.k = cb.per_episode - 1;
  if (cb.size() == 0) return out;
  const DecodeMode dm = mode == PlayMode::kTrain ? DecodeMode::kSample : DecodeMode::kGreedy;
  auto messages = speak(speaker, cb.targets, dm, &rng);
  Tensor probs = listen_batch(listener, messages, cb.candidates, cb.per_episode);
  out.episodes.reserve(cb.size());
  for (std::size_t b = 0; b < cb.size(); ++b) {
    Episode e;
    e.target = cb.targets[b];
    e.candidates.assign(cb.candidates_of(b).begin(), cb.candidates_of(b).end());
    for (std::size_t s = 0; s < cb.per_episode; ++s) {
      if (s != cb.target_index[b]) e.distractors.push_back(e.candidates[s]);
    }
    e.target_index = cb.target_index[b];
    e.message = std::move(messages[b]);
    e.listener_probs.assign(probs.row(b), probs.row(b) + cb.per_episode);
    e.prediction = mode == PlayMode::kTrain ? rng.categorical(e.listener_probs)
                                            : argmax(e.listener_probs);
    e.reward = reward_for(e.prediction, e.target_index);
    out.episodes.push_back(std::move(e));
  }
  return out;
}

}  // namespace

Episode play(const Model& speaker, const Model& listener, const Object& target,
             std::span<const Object> distractors, PlayMode mode, Rng& rng) {
  if (std::find(distractors.begin(), distractors.end(), target) != distractors.end()) {
    throw std::invalid_argument("play: target appears among the distractors");
  }
  CandidateBatch cb;
  cb.per_episode = distractors.size() + 1;
  cb.targets = {target};
  const std::size_t slot = rng.below(cb.per_episode);
  std::size_t di = 0;
  for (std::size_t s = 0; s < cb.per_episode; ++s) {
    cb.candidates.push_back(s == slot ? target : distractors[di++]);
  }
  cb.target_index = {slot};
  return std::move(run_batch(speaker, listener, cb, mode, rng).episodes.front());
}

EpisodeBatch play_batch(const Model& speaker, const Model& listener, const World& world,
                        std::span<const Object> targets, std::size_t k, const DistractorSpec& spec,
                        std::span<const Object> pool, PlayMode mode, Rng& rng) {
  if (targets.empty()) throw std::invalid_argument("play_batch: batch size must be >= 1");
  auto cb = make_candidates(world, targets, k, spec, pool, rng);
  return run_batch(speaker, listener, cb, mode, rng);
}

void write_trace(std::ostream& out, const EpisodeBatch& batch) {
  for (const auto& e : batch.episodes) {
    nlohmann::json d = nlohmann::json::array();
    for (const auto& o : e.distractors) d.push_back(o.values);
    nlohmann::json j = {{"target", e.target.values},
                        {"distractors", d},
                        {"target_index", e.target_index},
                        {"tokens", e.message.tokens},
                        {"prediction", e.prediction},
                        {"reward", e.reward}};
    out << j.dump() << "\n";
  }
}

}  // namespace popmeta
