#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "popmeta/agents.hpp"
#include "popmeta/config.hpp"
#include "popmeta/game.hpp"
#include "popmeta/optim.hpp"
#include "popmeta/world.hpp"

namespace popmeta {

// ---------------------------------------------------------------------------
// Losses

struct LossOptions {
  double lambda_hs = 0.01;
  double lambda_hl = 0.03;
  double lambda_s = 0.8;
  SignConvention entropy_sign = SignConvention::kRegularizer;
  SignConvention supervised_sign = SignConvention::kRegularizer;
  ListenerSupLoss sup_loss = ListenerSupLoss::kProbability;
  bool reward_baseline = false;

  static LossOptions from_config(const TrainConfig& c);
};

/// Teacher-forced cross-entropy of the descriptions, each sequence averaged
/// over its own length, then averaged over the batch.
ad::Var speaker_supervised_loss(const AgentArch& arch, std::span<const ad::Var> params,
                                std::span<const GroundingPair> batch);

/// -p(target) (or -log p(target)) averaged over the batch. `messages[b]` is
/// read against candidates_of(b).
ad::Var listener_supervised_loss(const AgentArch& arch, std::span<const ad::Var> params,
                                 std::span<const Message> messages, const CandidateBatch& cb,
                                 ListenerSupLoss kind);

struct GameLosses {
  ad::Var speaker;
  ad::Var listener;
  std::vector<double> rewards;
  double mean_reward = 0.0;
  double accuracy = 0.0;
};

/// One batch of training-mode games between a speaker and a listener bound
/// on the same tape. Either side may be bound as constants (a frozen
/// partner); both losses are always built. The speaker samples its message,
/// the listener samples t'; rewards enter as constants.
GameLosses game_losses(const AgentArch& speaker_arch, std::span<const ad::Var> speaker,
                       const AgentArch& listener_arch, std::span<const ad::Var> listener,
                       const CandidateBatch& cb, const LossOptions& opts, Rng& rng);

/// Mean per-token KL(reference || current) on teacher-forced descriptions.
ad::Var speaker_kl_to_reference(const AgentArch& arch, std::span<const ad::Var> params,
                                const Model& reference, std::span<const GroundingPair> batch);

/// Mean KL(reference || current) between candidate distributions.
ad::Var listener_kl_to_reference(const AgentArch& arch, std::span<const ad::Var> params,
                                 const Model& reference, std::span<const Message> messages,
                                 const CandidateBatch& cb);

// ---------------------------------------------------------------------------
// Single training steps

/// A model with its own optimizer state.
struct Trainee {
  Model model;
  AdamState opt;

  Trainee() = default;
  Trainee(Model m, double lr) : model(std::move(m)), opt(AdamState::for_store(model.params, lr)) {}
};

/// Where targets and distractors come from.
struct GameSource {
  const World* world = nullptr;
  std::span<const Object> objects;
  std::size_t k = 4;
  DistractorSpec spec;

  CandidateBatch sample(std::size_t batch, Rng& rng) const;
};

/// Random batch of `size` pairs (with replacement) from the dataset.
std::vector<GroundingPair> sample_pairs(const GroundingDataset& d, std::size_t size, Rng& rng);

double supervised_speaker_step(Trainee& speaker, std::span<const GroundingPair> batch);

/// Candidates for each pair are drawn from `pool`.
double supervised_listener_step(Trainee& listener, std::span<const GroundingPair> batch,
                                const GameSource& pool, ListenerSupLoss kind, Rng& rng);

/// Optional KL anchoring that replaces the separate supervised phase.
struct KlAnchor {
  const Model* speaker_reference = nullptr;
  const Model* listener_reference = nullptr;
  const GroundingDataset* dataset = nullptr;
  double lambda_int = 0.1;
  std::size_t batch = 64;
};

struct InteractiveStats {
  double speaker_loss = 0.0;
  double listener_loss = 0.0;
  double reward = 0.0;
  double accuracy = 0.0;
};

/// One batch of games. A side whose optimizer pointer is null is a frozen
/// partner; otherwise it takes one Adam step on its own loss.
InteractiveStats interactive_step(Model& speaker, AdamState* speaker_opt, Model& listener,
                                  AdamState* listener_opt, const GameSource& games,
                                  std::size_t batch, const LossOptions& opts, Rng& rng,
                                  const KlAnchor* anchor = nullptr);

// ---------------------------------------------------------------------------
// Population buffer

/// Fixed-capacity reservoir (Algorithm R): the first `capacity` items are
/// kept, item n > capacity replaces a uniform slot with probability
/// capacity / n.
template <class T>
class ReservoirBuffer {
public:
  struct Entry {
    std::size_t index;  // 0-based insertion index
    T item;
  };

  explicit ReservoirBuffer(std::size_t capacity) : capacity_(capacity) {
    if (capacity == 0) throw std::invalid_argument("reservoir capacity must be >= 1");
  }

  /// Returns the slot written, or nullopt when the item was discarded.
  std::optional<std::size_t> insert(T item, Rng& rng) {
    const std::size_t n = seen_++;
    if (entries_.size() < capacity_) {
      entries_.push_back({n, std::move(item)});
      return entries_.size() - 1;
    }
    const std::size_t j = rng.below(n + 1);
    if (j < capacity_) {
      entries_[j] = {n, std::move(item)};
      return j;
    }
    return std::nullopt;
  }

  std::size_t capacity() const { return capacity_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  std::size_t seen() const { return seen_; }
  const std::vector<Entry>& entries() const { return entries_; }
  const T& operator[](std::size_t i) const { return entries_[i].item; }

  std::vector<std::size_t> indices() const {
    std::vector<std::size_t> out;
    for (const auto& e : entries_) out.push_back(e.index);
    return out;
  }

private:
  std::size_t capacity_;
  std::size_t seen_ = 0;
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Meta steps

struct MetaStepOptions {
  MetaVariant variant = MetaVariant::kMaml;
  double alpha = 0.1;
  std::size_t batch = 32;
  bool parallel = false;  // OpenMP over buffer members
};

struct MetaStepStats {
  double inner_loss = 0.0;  // summed over buffer
  double outer_loss = 0.0;
};

/// Meta-gradient of the summed per-partner objective (inner step on
/// `inner`, outer loss on `outer`) for a meta-speaker; no update applied.
/// MAML/FOMAML return the summed gradient; Reptile the mean of
/// (initial - adapted) after SGD on the inner then the outer batch.
MetaGrad meta_speaker_gradient(const Model& meta, std::span<const Model* const> listeners,
                               const GameSource& inner, const GameSource& outer,
                               const LossOptions& loss, const MetaStepOptions& opts,
                               std::uint64_t stream);
MetaGrad meta_listener_gradient(const Model& meta, std::span<const Model* const> speakers,
                                const GameSource& inner, const GameSource& outer,
                                const LossOptions& loss, const MetaStepOptions& opts,
                                std::uint64_t stream);

/// Gradient plus one Adam step. Throws on an empty buffer.
MetaStepStats meta_speaker_step(Trainee& meta, std::span<const Model* const> listeners,
                                const GameSource& inner, const GameSource& outer,
                                const LossOptions& loss, const MetaStepOptions& opts,
                                std::uint64_t stream);
MetaStepStats meta_listener_step(Trainee& meta, std::span<const Model* const> speakers,
                                 const GameSource& inner, const GameSource& outer,
                                 const LossOptions& loss, const MetaStepOptions& opts,
                                 std::uint64_t stream);

// ---------------------------------------------------------------------------
// Runs

/// World, splits and grounding dataset shared by every run of a config.
/// They depend on data_seed only, so runs with different seeds share them.
struct Experiment {
  TrainConfig config;
  World world;
  WorldSplit split;
  GroundingDataset dataset;

  explicit Experiment(const TrainConfig& c);
  AgentArch speaker_arch() const;
  AgentArch listener_arch() const;
  GameSource train_games() const;
  GameSource games(std::span<const Object> objects) const;
};

/// Column-named numeric table; one row per outer iteration or round.
struct MetricsTable {
  std::vector<std::string> columns;
  std::vector<std::vector<double>> rows;

  void add_row(std::vector<double> row);
  double at(std::size_t row, const std::string& column) const;
  bool has_column(const std::string& column) const;
};

class NumericalAbort : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Everything a run produces.
struct RunResult {
  std::string method;
  Model speaker;  // the evaluated pair (meta-agents for population methods)
  Model listener;
  MetricsTable history;
  std::optional<Model> pretrained_speaker;
  std::optional<Model> pretrained_listener;
  // Population methods: every inserted agent by insertion index and the
  // buffer contents after each outer iteration.
  std::vector<Model> speaker_snapshots;
  std::vector<Model> listener_snapshots;
  std::vector<std::vector<std::size_t>> speaker_buffer_history;
  std::vector<std::vector<std::size_t>> listener_buffer_history;
  std::vector<std::uint64_t> meta_reset_hashes;  // meta-speaker hash at each meta-phase start
  double final_val_accuracy = 0.0;
};

enum class Ablation { kNone, kNoMetaAgents, kNoAdaptiveMetaI, kNoAdaptiveMetaII, kKlGrounding };
Ablation parse_ablation(const std::string& name);
const char* to_string(Ablation a);

using ProgressFn = std::function<void(const std::string&)>;

/// Supervised pretraining of a fresh pair (n_pretrain steps each).
std::pair<Model, Model> pretrain_pair(const Experiment& ex, std::uint64_t init_stream,
                                      MetricsTable* history = nullptr);

RunResult run_algorithm1(const Experiment& ex, Ablation ablation = Ablation::kNone,
                         const ProgressFn& progress = {});
RunResult run_ablation(const Experiment& ex, Ablation ablation, const ProgressFn& progress = {});

/// pretrained | emecom | s2p_like | static_pop_meta | gen_trans
RunResult run_baseline(const Experiment& ex, const std::string& kind, const ProgressFn& progress = {});

/// Dispatches --method names: ours | pretrained | emecom | s2p | l2c | gentrans.
RunResult run_method(const Experiment& ex, const std::string& method, Ablation ablation,
                     const ProgressFn& progress = {});

/// Greedy/argmax accuracy over a fixed episode stream.
double pair_accuracy(const Experiment& ex, const Model& speaker, const Model& listener,
                     std::span<const Object> objects, std::size_t episodes, std::uint64_t stream);

}  // namespace popmeta
