#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "popmeta/params.hpp"
#include "popmeta/rng.hpp"
#include "popmeta/tape.hpp"
#include "popmeta/world.hpp"

namespace popmeta {

enum class AgentKind { kSpeaker, kListener };

const char* to_string(AgentKind k);

/// Architecture descriptor shared by checkpoints and the forward passes.
struct AgentArch {
  AgentKind kind = AgentKind::kSpeaker;
  int attributes = 4;
  int values = 6;
  int vocab = 26;
  int hidden = 64;
  int embed = 32;
  int max_len = 5;

  static AgentArch for_world(AgentKind kind, const World& world, int hidden, int embed);
  int input_dim() const { return attributes * values; }
  nlohmann::json to_json() const;
  static AgentArch from_json(const nlohmann::json& j);
  bool operator==(const AgentArch&) const = default;
};

/// A network's architecture plus its parameters (theta for speakers, phi for
/// listeners). Copies are independent.
struct Model {
  AgentArch arch;
  ParameterStore params;

  /// Uniform(+-1/sqrt(fan_in)) weights, orthogonal recurrent blocks.
  static Model init(const AgentArch& arch, Rng& rng);
};

// ---------------------------------------------------------------------------
// Speaker

enum class DecodeMode { kSample, kGreedy, kTopK };

/// Messages produced by a speaker together with the per-step quantities
/// needed for the losses. Step vectors are indexed [step] and each Var is a
/// B x 1 column; masks are 1 while the sample is still emitting.
struct SpeakerRollout {
  std::vector<Message> messages;
  std::vector<ad::Var> step_logp;
  std::vector<ad::Var> step_entropy;
  std::vector<ad::Var> step_log_dist;  // B x (vocab - 1), column j is token j + 1
  std::vector<Tensor> step_mask;
  std::vector<double> lengths;
};

/// Runs the speaker on `targets`. In kSample mode tokens are drawn from each
/// step's distribution; kGreedy takes the argmax (lowest token on ties);
/// kTopK samples from the k most likely tokens. PAD is never emitted;
/// decoding stops at EOS or after max_len tokens.
SpeakerRollout speaker_rollout(const AgentArch& arch, std::span<const ad::Var> params,
                               std::span<const Object> targets, DecodeMode mode, Rng* rng,
                               int top_k = 0);

/// Conditions on the given token sequences (teacher forcing).
SpeakerRollout speaker_teacher_forced(const AgentArch& arch, std::span<const ad::Var> params,
                                      std::span<const Object> targets,
                                      std::span<const Message> messages);

/// Step-1 distribution over the vocabulary for each target (rows sum to 1,
/// PAD column is 0). Mostly for tests.
Tensor speaker_first_step_distribution(const Model& speaker, std::span<const Object> targets);

/// Convenience wrappers that evaluate without recording gradients.
std::vector<Message> speak(const Model& speaker, std::span<const Object> targets, DecodeMode mode,
                           Rng* rng, int top_k = 0);
Message speak_one(const Model& speaker, const Object& target, DecodeMode mode, Rng* rng);
/// Total teacher-forced log-likelihood of `m` (EOS included).
double teacher_forced_log_likelihood(const Model& speaker, const Object& target, const Message& m);
/// Beam search over complete messages; returns the highest-scoring one.
Message beam_search(const Model& speaker, const Object& target, int beam_width);

// ---------------------------------------------------------------------------
// Listener

/// Log-distribution over candidates, B x C where C = candidates per episode.
/// `candidates` is row-major: episode b's candidates are
/// [b*C, (b+1)*C).
ad::Var listener_log_probs(const AgentArch& arch, std::span<const ad::Var> params,
                           std::span<const Message> messages, std::span<const Object> candidates,
                           std::size_t per_episode);

/// Probability distribution over candidates for one message.
std::vector<double> listen(const Model& listener, const Message& m, std::span<const Object> candidates);
/// Batched no-grad version of listen; returns B x C probabilities.
Tensor listen_batch(const Model& listener, std::span<const Message> messages,
                    std::span<const Object> candidates, std::size_t per_episode);

// ---------------------------------------------------------------------------
// Entropy helpers

/// Categorical entropy of every row of a B x n log-probability matrix, as a
/// B x 1 column.
ad::Var row_entropy(ad::Var log_probs);
double entropy(std::span<const double> probs);
/// Mean over steps of the per-step entropies (H_S).
double speaker_entropy(std::span<const std::vector<double>> step_distributions);

}  // namespace popmeta
