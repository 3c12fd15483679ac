#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "popmeta/optim.hpp"
#include "popmeta/world.hpp"

namespace popmeta {

enum class ListenerSupLoss { kProbability, kLogProbability };
enum class SignConvention { kRegularizer, kLiteral };

/// Every hyperparameter of a run. Field names are the config-file keys.
struct TrainConfig {
  // [world]
  int attributes = 4;
  int values = 6;
  double bias_zipf = 0.0;  // 0 = uniform world
  int synonyms = 1;
  std::uint64_t data_seed = 0;  // splits and dataset; shared across run seeds
  int test_size = 200;
  int val_size = 100;
  int train_size = 0;  // 0 = every object not in test/val
  int dataset_size = 300;
  int distractors = 4;  // K
  std::string distractor_mode = "uniform";
  double hard_threshold = 0.75;

  // [model]
  int hidden = 64;
  int embed = 32;

  // [train]
  int batch_size = 128;
  int meta_batch_size = 32;
  int buffer_capacity = 32;
  int n_pretrain = 200;
  int n_meta = 20;
  int n_int = 30;
  int n_sup = 10;
  int n_finetune = 100;
  double lambda_hs = 0.01;
  double lambda_hl = 0.03;
  double lambda_s = 0.8;
  double lambda_int = 0.1;
  double lr = 1e-3;        // agent optimiser (supervised + interactive)
  double outer_lr = 1e-3;  // meta-agent optimiser
  double inner_lr = 0.1;   // alpha, one plain SGD step
  std::string meta_variant = "maml";
  std::string meta_init = "pretrained";  // random | pretrained
  int patience = 5;
  double min_delta = 0.005;
  int max_outer = 40;
  std::string listener_sup_loss = "prob";  // prob (as printed) | log
  std::string entropy_sign = "regularizer";  // regularizer | literal
  std::string supervised_term_sign = "regularizer";  // regularizer | literal
  bool reinforce_baseline = false;

  // [baselines]
  int population_size = 4;
  int baseline_rounds = 10;
  int emecom_steps = 1500;
  int population_steps = 1000;  // self-play steps per static-population pair
  double selfplay_lr = 3e-3;
  bool selfplay_baseline = true;  // batch-mean reward baseline during self-play
  int gen_trans_period = 5;

  // [eval]
  int val_episodes = 1000;
  int test_episodes = 5000;

  // [run]
  std::uint64_t seed = 1;
  int threads = 1;
  bool deterministic = true;
  bool trace = false;
  bool save_iteration_checkpoints = true;

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;

  WorldSpec world_spec() const;
  DistractorSpec distractor_spec() const;
  MetaVariant variant() const { return parse_meta_variant(meta_variant); }
  ListenerSupLoss listener_loss() const;

  /// Sets a field from its textual value; throws listing valid keys when the
  /// key is unknown.
  void set(const std::string& key, const std::string& value);
  std::map<std::string, std::string> to_map() const;
  static std::vector<std::string> keys();

  /// Config-file text ([section] headers, key = value lines).
  std::string to_text() const;
  static TrainConfig parse_text(const std::string& text);
  static TrainConfig load(const std::string& path);

  std::uint64_t hash() const;
};

}  // namespace popmeta
