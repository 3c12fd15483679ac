#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "popmeta/agents.hpp"
#include "popmeta/game.hpp"
#include "popmeta/world.hpp"

namespace popmeta {

// ---------------------------------------------------------------------------
// Players

/// Evaluation-mode speaker: one message per target.
using SpeakerFn = std::function<std::vector<Message>(std::span<const Object>)>;
/// Evaluation-mode listener: one predicted slot per episode of the batch.
using ListenerFn = std::function<std::vector<std::size_t>(std::span<const Message>, const CandidateBatch&)>;

SpeakerFn model_speaker(const Model& m);    // greedy decoding
ListenerFn model_listener(const Model& m);  // argmax, lowest slot on ties
SpeakerFn oracle_speaker(const World& w);   // canonical descriptions
ListenerFn oracle_listener(const World& w);
/// Uniformly random slot; owns its generator.
ListenerFn random_listener(std::uint64_t seed);

struct Accuracy {
  double accuracy = 0.0;
  std::size_t episodes = 0;
  std::size_t correct = 0;
};

/// Fraction of correct episodes with targets drawn uniformly (with
/// replacement) from `objects` and distractors from the same set.
Accuracy referential_accuracy(const SpeakerFn& speaker, const ListenerFn& listener, const World& world,
                              std::span<const Object> objects, std::size_t k,
                              const DistractorSpec& spec, std::size_t episodes, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Language metrics

/// Corpus BLEU against one reference per hypothesis. Precisions are
/// (matches + eps) / (candidates + eps); a zero-length corpus scores 0.
double bleu(std::span<const Message> hypotheses, std::span<const Message> references, int max_n = 4,
            double eps = 1e-9);

struct CorpusStats {
  double length_ratio = 0.0;  // mean len(hyp) / len(ref)
  double unique_ratio = 0.0;  // mean |unique(hyp)| / |unique(ref)|
  std::size_t samples = 0;
};

CorpusStats corpus_stats(std::span<const Message> hypotheses, std::span<const Message> references);

/// Greedy messages of `speaker` and canonical references for `objects`.
std::pair<std::vector<Message>, std::vector<Message>> speaker_corpus(const Model& speaker, const World& world,
                                                                     std::span<const Object> objects);

// ---------------------------------------------------------------------------
// Population measurements

struct CrossPlay {
  std::vector<std::vector<double>> accuracy;  // [speaker][listener]
  std::size_t episodes_per_cell = 0;
  double diag_mean = 0.0;
  std::optional<double> offdiag_mean;  // absent for a 1 x 1 matrix
  std::optional<double> offdiag_std;
};

/// Every speaker against every listener on the same episode stream.
CrossPlay crossplay(std::span<const Model> speakers, std::span<const Model> listeners, const World& world,
                    std::span<const Object> objects, std::size_t k, const DistractorSpec& spec,
                    std::size_t episodes, std::uint64_t seed);

struct DiversityPoint {
  std::size_t iteration = 0;
  std::size_t members = 0;
  double mean = 0.0;
  double std = 0.0;  // population standard deviation over members
  double min = 0.0;
  double max = 0.0;
};

/// Accuracy of a fixed meta-listener with each speaker in the buffer after
/// every iteration. `buffer_history[i]` lists snapshot indices.
std::vector<DiversityPoint> diversity_curve(const Model& meta_listener, std::span<const Model> speaker_snapshots,
                                            std::span<const std::vector<std::size_t>> buffer_history,
                                            const World& world, std::span<const Object> objects,
                                            std::size_t k, const DistractorSpec& spec,
                                            std::size_t episodes, std::uint64_t seed);

/// Meta-speaker analogue: the meta-speaker with each buffered listener.
std::vector<DiversityPoint> speaker_diversity_curve(
    const Model& meta_speaker, std::span<const Model> listener_snapshots,
    std::span<const std::vector<std::size_t>> buffer_history, const World& world,
    std::span<const Object> objects, std::size_t k, const DistractorSpec& spec, std::size_t episodes,
    std::uint64_t seed);

/// BLEU (vs canonical) of each buffered speaker, summarised per iteration.
std::vector<DiversityPoint> buffer_bleu_curve(std::span<const Model> speaker_snapshots,
                                              std::span<const std::vector<std::size_t>> buffer_history,
                                              const World& world, std::span<const Object> objects);

struct OracleEval {
  double agent_speaker_oracle_listener = 0.0;
  double oracle_speaker_agent_listener = 0.0;
  double oracle_oracle = 0.0;
  std::size_t episodes = 0;
};

OracleEval oracle_eval(const Model& speaker, const Model& listener, const World& world,
                       std::span<const Object> objects, std::size_t k, const DistractorSpec& spec,
                       std::size_t episodes, std::uint64_t seed);

/// Cross-task (trained on world A) and within-task (trained on world B)
/// accuracies, all measured on world B's test objects. Absent models give
/// absent numbers.
struct RobustnessInputs {
  const Model* ours_speaker_a = nullptr;
  const Model* ours_listener_a = nullptr;
  const Model* ours_speaker_b = nullptr;
  const Model* ours_listener_b = nullptr;
  const Model* pretrained_speaker_a = nullptr;
  const Model* pretrained_listener_a = nullptr;
  const Model* pretrained_speaker_b = nullptr;
  const Model* pretrained_listener_b = nullptr;
};

struct Robustness {
  std::optional<double> ours_cross;
  std::optional<double> ours_within;
  std::optional<double> pretrained_cross;
  std::optional<double> pretrained_within;
};

Robustness robustness_eval(const RobustnessInputs& in, const World& world_b, std::span<const Object> test_b,
                           std::size_t k, const DistractorSpec& spec, std::size_t episodes,
                           std::uint64_t seed);

// ---------------------------------------------------------------------------
// Statistics

struct MeanStd {
  double mean = 0.0;
  double std = 0.0;  // sample standard deviation (n - 1), 0 for n < 2
  std::size_t n = 0;
};

MeanStd mean_std(std::span<const double> xs);

struct TTest {
  double t = 0.0;
  double df = 0.0;
  double p = 1.0;  // two-sided
};

/// Welch's unequal-variance two-sample t-test.
TTest welch_t_test(std::span<const double> a, std::span<const double> b);

}  // namespace popmeta
