#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "popmeta/config.hpp"

namespace popmeta::cli {

/// Bad flags, bad config, incompatible inputs. Maps to exit code 2.
class UsageError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

inline constexpr const char* kToolVersion = "popmeta 0.3.0";

struct TrainRequest {
  std::string config_path;  // empty = built-in defaults
  std::vector<std::string> overrides;  // key=value
  std::optional<std::uint64_t> seed;
  std::string method = "ours";
  std::string ablation = "none";
  std::string out_root;  // empty = $POPMETA_OUT or ./runs
  bool quiet = false;
};

/// Resolves the config (file, then --seed, then overrides).
TrainConfig resolve_config(const TrainRequest& req);

/// Runs one (method, seed) and returns the run directory.
std::string cmd_train(const TrainRequest& req, std::ostream& log);

/// Writes eval_<suite>.json/.csv into `out_dir` (default: the run dir) and
/// returns the JSON report.
nlohmann::json cmd_eval(const std::string& run_dir, const std::string& suite, std::optional<int> episodes,
                        const std::string& out_dir);

struct RobustnessRequest {
  std::string ours_a, ours_b, pretrained_a, pretrained_b;  // run dirs, any may be empty
  std::optional<int> episodes;
  std::string out_dir;
};
nlohmann::json cmd_robustness(const RobustnessRequest& req);

/// Meta-speakers of every run against meta-listeners of every run.
nlohmann::json cmd_crossplay(const std::vector<std::string>& run_dirs, const std::string& out_dir,
                             std::optional<int> episodes, std::ostream& log);

/// Per-method mean and std of test accuracy, sorted best first.
nlohmann::json cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir);

/// Full command line; returns the process exit code.
int run(int argc, char** argv, std::ostream& out, std::ostream& err);

}  // namespace popmeta::cli
