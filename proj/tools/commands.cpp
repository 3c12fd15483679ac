#include "commands.hpp"

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <iostream>
#include <map>

#include <CLI11.hpp>

#include "popmeta/checkpoint.hpp"
#include "popmeta/eval.hpp"
#include "popmeta/hash.hpp"
#include "popmeta/report.hpp"
#include "popmeta/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace popmeta::cli {

namespace {

const std::vector<std::string> kMethods = {"ours", "pretrained", "emecom", "s2p", "l2c", "gentrans"};
const std::vector<std::string> kSuites = {"accuracy", "bleu", "oracle", "stats", "robustness"};

std::string utc_now() {
  const std::time_t t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Shared by every method and seed of a data_seed, so accuracies are paired.
std::uint64_t test_seed(const TrainConfig& c) { return Rng::substream(c.data_seed, 0x7e57).next(); }
std::uint64_t eval_seed(const TrainConfig& c) { return Rng::substream(c.data_seed, 0xe7a1).next(); }

void write_json(const fs::path& p, const json& j) { write_file_atomic(p.string(), j.dump(2) + "\n"); }

json objects_json(std::span<const Object> objs) {
  json a = json::array();
  for (const auto& o : objs) a.push_back(o.values);
  return a;
}

std::string run_label(const std::string& method, const std::string& ablation) {
  return ablation == "none" ? method : method + "+" + ablation;
}

void save_model(const fs::path& p, const Model& m, std::uint64_t world_hash, const json& meta) {
  save_checkpoint(p.string(), Checkpoint{m, world_hash, meta});
}

struct LoadedRun {
  fs::path dir;
  TrainConfig config;
  json summary;
  std::unique_ptr<Experiment> ex;
  std::uint64_t world_hash = 0;

  Model load(const std::string& name) const {
    const fs::path p = dir / "checkpoints" / (name + ".ckpt");
    if (!fs::exists(p)) throw UsageError("run " + dir.string() + " has no checkpoint " + name);
    Checkpoint ck = load_checkpoint(p.string());
    if (ck.world_hash != world_hash) {
      throw UsageError("checkpoint " + p.string() + " was trained on a different world (" + hex64(ck.world_hash) +
                       " vs " + hex64(world_hash) + ")");
    }
    return std::move(ck.model);
  }
};

LoadedRun load_run(const std::string& dir) {
  LoadedRun r;
  r.dir = dir;
  if (!fs::exists(r.dir / "summary.json")) throw UsageError("not a finished run directory: " + dir);
  r.config = TrainConfig::load((r.dir / "config.toml").string());
  r.summary = json::parse(read_file((r.dir / "summary.json").string()));
  r.ex = std::make_unique<Experiment>(r.config);
  r.world_hash = r.ex->world.spec().hash();
  if (r.summary.value("world_hash", std::string()) != hex64(r.world_hash)) {
    throw UsageError("run " + dir + " summary does not match its config's world");
  }
  return r;
}

json stat_json(const Accuracy& a) {
  return {{"accuracy", a.accuracy}, {"episodes", a.episodes}, {"correct", a.correct}};
}

CsvTable key_value_csv(const json& flat) {
  CsvTable t;
  t.columns = {"metric", "value", "n"};
  for (const auto& [k, v] : flat.items()) {
    if (v.is_object() && v.contains("value")) {
      t.rows.push_back({k, format_number(v["value"].get<double>()), std::to_string(v.value("n", 0))});
    }
  }
  return t;
}

std::vector<DiversityPoint> point_list(const json& a) {
  std::vector<DiversityPoint> out;
  for (const auto& p : a) {
    out.push_back({p.at("iteration").get<std::size_t>(), p.at("members").get<std::size_t>(), p.at("mean").get<double>(),
                   p.at("std").get<double>(), p.at("min").get<double>(), p.at("max").get<double>()});
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

TrainConfig resolve_config(const TrainRequest& req) {
  TrainConfig c;
  if (!req.config_path.empty()) {
    if (!fs::exists(req.config_path)) throw UsageError("config file not found: " + req.config_path);
    c = TrainConfig::load(req.config_path);
  }
  if (req.seed) c.seed = *req.seed;
  for (const auto& kv : req.overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got '" + kv + "'");
    c.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  c.validate();
  return c;
}

std::string cmd_train(const TrainRequest& req, std::ostream& log) {
  if (std::find(kMethods.begin(), kMethods.end(), req.method) == kMethods.end()) {
    throw UsageError("unknown method '" + req.method + "' (expected ours|pretrained|emecom|s2p|l2c|gentrans)");
  }
  const Ablation ablation = parse_ablation(req.ablation);
  if (ablation != Ablation::kNone && req.method != "ours") throw UsageError("--ablation applies to --method ours only");
  const TrainConfig cfg = resolve_config(req);

  std::string root = req.out_root;
  if (root.empty()) {
    const char* env = std::getenv("POPMETA_OUT");
    root = env != nullptr && *env != '\0' ? env : "runs";
  }
  const std::string label = run_label(req.method, to_string(ablation));
  std::string name = label + "_seed" + std::to_string(cfg.seed);
  std::replace(name.begin(), name.end(), '+', '_');
  const fs::path dir = fs::path(root) / name;
  if (fs::exists(dir) && !fs::is_empty(dir)) {
    throw UsageError("run directory already exists: " + dir.string());
  }
  fs::create_directories(dir / "checkpoints");

  const Experiment ex(cfg);
  const std::uint64_t chash = cfg.hash();
  const std::uint64_t whash = ex.world.spec().hash();
  json manifest = {{"tool_version", kToolVersion},
                   {"config_hash", hex64(chash)},
                   {"world_hash", hex64(whash)},
                   {"config", cfg.to_map()},
                   {"method", req.method},
                   {"ablation", to_string(ablation)},
                   {"seeds", {cfg.seed}},
                   {"started", utc_now()},
                   {"finished", nullptr},
                   {"status", "running"},
                   {"outputs", json::object()}};
  write_json(dir / "manifest.json", manifest);
  write_file_atomic((dir / "config.toml").string(), cfg.to_text());
  ex.dataset.save((dir / "dataset.json").string());
  write_json(dir / "split.json", {{"config_hash", hex64(chash)},
                                  {"train", objects_json(ex.split.train)},
                                  {"validation", objects_json(ex.split.validation)},
                                  {"test", objects_json(ex.split.test)}});

  const auto t0 = std::chrono::steady_clock::now();
  ProgressFn progress;
  if (!req.quiet) {
    progress = [&](const std::string& msg) {
      const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      log << "[" << format_number(std::round(s * 10) / 10) << "s] " << msg << std::endl;
    };
  }

  RunResult res;
  try {
    res = run_method(ex, req.method, ablation, progress);
  } catch (const NumericalAbort& e) {
    manifest["status"] = "numerical_abort";
    manifest["diagnostics"] = e.what();
    manifest["finished"] = utc_now();
    write_json(dir / "manifest.json", manifest);
    throw;
  }

  const json meta = {{"config_hash", hex64(chash)}, {"method", label}, {"seed", cfg.seed}};
  json outputs = {{"manifest", "manifest.json"}, {"config", "config.toml"}, {"dataset", "dataset.json"},
                  {"split", "split.json"}};
  save_model(dir / "checkpoints" / "speaker.ckpt", res.speaker, whash, meta);
  save_model(dir / "checkpoints" / "listener.ckpt", res.listener, whash, meta);
  outputs["checkpoints"] = {"checkpoints/speaker.ckpt", "checkpoints/listener.ckpt"};
  if (res.pretrained_speaker && res.pretrained_listener) {
    save_model(dir / "checkpoints" / "pretrained_speaker.ckpt", *res.pretrained_speaker, whash, meta);
    save_model(dir / "checkpoints" / "pretrained_listener.ckpt", *res.pretrained_listener, whash, meta);
    outputs["checkpoints"].push_back("checkpoints/pretrained_speaker.ckpt");
    outputs["checkpoints"].push_back("checkpoints/pretrained_listener.ckpt");
  }
  if (cfg.save_iteration_checkpoints && !res.speaker_snapshots.empty()) {
    fs::create_directories(dir / "snapshots");
    for (std::size_t i = 0; i < res.speaker_snapshots.size(); ++i) {
      save_model(dir / "snapshots" / ("speaker_" + std::to_string(i) + ".ckpt"), res.speaker_snapshots[i], whash, meta);
    }
    for (std::size_t i = 0; i < res.listener_snapshots.size(); ++i) {
      save_model(dir / "snapshots" / ("listener_" + std::to_string(i) + ".ckpt"), res.listener_snapshots[i], whash,
                 meta);
    }
    outputs["snapshots"] = "snapshots";
  }
  if (!res.speaker_buffer_history.empty() || !res.meta_reset_hashes.empty()) {
    json hashes = json::array();
    for (auto h : res.meta_reset_hashes) hashes.push_back(hex64(h));
    write_json(dir / "buffers.json", {{"config_hash", hex64(chash)},
                                      {"speaker_buffer_history", res.speaker_buffer_history},
                                      {"listener_buffer_history", res.listener_buffer_history},
                                      {"meta_reset_hashes", hashes}});
    outputs["buffers"] = "buffers.json";
  }
  write_file_atomic((dir / "metrics.csv").string(), metrics_csv(res.history).to_string(chash));
  outputs["metrics"] = "metrics.csv";

  // Held-out numbers.
  const auto k = static_cast<std::size_t>(cfg.distractors);
  const auto spec = cfg.distractor_spec();
  const Accuracy test = referential_accuracy(model_speaker(res.speaker), model_listener(res.listener), ex.world,
                                             ex.split.test, k, spec, static_cast<std::size_t>(cfg.test_episodes),
                                             test_seed(cfg));
  auto [hyps, refs] = speaker_corpus(res.speaker, ex.world, ex.split.test);
  json summary = {{"config_hash", hex64(chash)},
                  {"world_hash", hex64(whash)},
                  {"method", req.method},
                  {"ablation", to_string(ablation)},
                  {"label", label},
                  {"seed", cfg.seed},
                  {"final_val_accuracy", res.final_val_accuracy},
                  {"test_accuracy", test.accuracy},
                  {"test_episodes", test.episodes},
                  {"test_bleu", bleu(hyps, refs)},
                  {"test_bleu_samples", hyps.size()},
                  {"history_rows", res.history.rows.size()}};

  if (!res.speaker_buffer_history.empty()) {
    const auto episodes = static_cast<std::size_t>(cfg.val_episodes);
    const auto acc = diversity_curve(res.listener, res.speaker_snapshots, res.speaker_buffer_history, ex.world,
                                     ex.split.test, k, spec, episodes, eval_seed(cfg));
    const auto spk = speaker_diversity_curve(res.speaker, res.listener_snapshots, res.listener_buffer_history,
                                             ex.world, ex.split.test, k, spec, episodes, eval_seed(cfg));
    const auto bl = buffer_bleu_curve(res.speaker_snapshots, res.speaker_buffer_history, ex.world, ex.split.test);
    json d = {{"config_hash", hex64(chash)}, {"episodes", episodes}};
    CsvTable csv;
    csv.columns = {"curve", "iteration", "members", "mean", "std", "min", "max"};
    for (const auto& [key, curve] : {std::pair{"listener_accuracy", &acc}, std::pair{"speaker_accuracy", &spk},
                                     std::pair{"speaker_bleu", &bl}}) {
      d[key] = json::array();
      for (const auto& p : *curve) {
        d[key].push_back(to_json(p));
        csv.rows.push_back({key, std::to_string(p.iteration), std::to_string(p.members), format_number(p.mean),
                            format_number(p.std), format_number(p.min), format_number(p.max)});
      }
    }
    write_json(dir / "diversity.json", d);
    write_file_atomic((dir / "diversity.csv").string(), csv.to_string(chash));
    write_file_atomic((dir / "diversity.svg").string(),
                      svg_band_chart(acc, "meta-listener vs buffered speakers (" + label + ")", "accuracy"));
    outputs["diversity"] = {"diversity.json", "diversity.csv", "diversity.svg"};
    summary["diversity_std_first"] = acc.front().std;
    summary["diversity_std_last"] = acc.back().std;
  }
  write_json(dir / "summary.json", summary);
  outputs["summary"] = "summary.json";

  manifest["status"] = "complete";
  manifest["finished"] = utc_now();
  manifest["outputs"] = outputs;
  write_json(dir / "manifest.json", manifest);
  if (!req.quiet) log << "test accuracy " << format_number(test.accuracy) << " -> " << dir.string() << std::endl;
  return dir.string();
}

// ---------------------------------------------------------------------------

json cmd_eval(const std::string& run_dir, const std::string& suite, std::optional<int> episodes,
              const std::string& out_dir) {
  if (std::find(kSuites.begin(), kSuites.end(), suite) == kSuites.end()) {
    throw UsageError("unknown suite '" + suite + "' (expected accuracy|bleu|oracle|stats|robustness)");
  }
  if (suite == "robustness") {
    throw UsageError("the robustness suite takes --ours-a/--ours-b/--pretrained-a/--pretrained-b instead of --run");
  }
  if (episodes && *episodes < 1) throw UsageError("--episodes must be >= 1");
  const LoadedRun run = load_run(run_dir);
  const TrainConfig& c = run.config;
  const Experiment& ex = *run.ex;
  const Model s = run.load("speaker"), l = run.load("listener");
  const auto k = static_cast<std::size_t>(c.distractors);
  const auto spec = c.distractor_spec();
  const auto n = static_cast<std::size_t>(episodes.value_or(c.test_episodes));
  const std::uint64_t chash = c.hash();

  json report = {{"config_hash", hex64(chash)}, {"world_hash", hex64(run.world_hash)}, {"suite", suite},
                 {"run", run_dir}};
  json flat = json::object();  // metric -> {value, n}
  if (suite == "accuracy") {
    const Accuracy test = referential_accuracy(model_speaker(s), model_listener(l), ex.world, ex.split.test, k, spec,
                                               n, test_seed(c));
    const Accuracy val = referential_accuracy(model_speaker(s), model_listener(l), ex.world, ex.split.validation, k,
                                              spec, static_cast<std::size_t>(c.val_episodes), eval_seed(c));
    report["test"] = stat_json(test);
    report["validation"] = stat_json(val);
    report["in_run_validation"] = run.summary.value("final_val_accuracy", 0.0);
    flat["test_accuracy"] = {{"value", test.accuracy}, {"n", test.episodes}};
    flat["validation_accuracy"] = {{"value", val.accuracy}, {"n", val.episodes}};
  } else if (suite == "bleu") {
    auto [h, r] = speaker_corpus(s, ex.world, ex.split.test);
    const double b = bleu(h, r);
    const CorpusStats cs = corpus_stats(h, r);
    report["bleu"] = b;
    report["samples"] = h.size();
    report["length_ratio"] = cs.length_ratio;
    report["unique_ratio"] = cs.unique_ratio;
    flat["bleu"] = {{"value", b}, {"n", h.size()}};
    flat["length_ratio"] = {{"value", cs.length_ratio}, {"n", cs.samples}};
    flat["unique_ratio"] = {{"value", cs.unique_ratio}, {"n", cs.samples}};
  } else if (suite == "oracle") {
    const OracleEval o = oracle_eval(s, l, ex.world, ex.split.test, k, spec, n, eval_seed(c));
    report["agent_speaker_oracle_listener"] = o.agent_speaker_oracle_listener;
    report["oracle_speaker_agent_listener"] = o.oracle_speaker_agent_listener;
    report["oracle_oracle"] = o.oracle_oracle;
    report["episodes"] = o.episodes;
    flat["agent_speaker_oracle_listener"] = {{"value", o.agent_speaker_oracle_listener}, {"n", n}};
    flat["oracle_speaker_agent_listener"] = {{"value", o.oracle_speaker_agent_listener}, {"n", n}};
    flat["oracle_oracle"] = {{"value", o.oracle_oracle}, {"n", n}};
  } else {  // stats
    auto [h, r] = speaker_corpus(s, ex.world, ex.split.test);
    const CorpusStats cs = corpus_stats(h, r);
    report["length_ratio"] = cs.length_ratio;
    report["unique_ratio"] = cs.unique_ratio;
    report["samples"] = cs.samples;
    flat["length_ratio"] = {{"value", cs.length_ratio}, {"n", cs.samples}};
    flat["unique_ratio"] = {{"value", cs.unique_ratio}, {"n", cs.samples}};
    const fs::path div = run.dir / "diversity.json";
    if (fs::exists(div)) {
      const json d = json::parse(read_file(div.string()));
      report["diversity"] = d;
      const auto acc = point_list(d.at("listener_accuracy"));
      if (!acc.empty()) {
        flat["diversity_std_first"] = {{"value", acc.front().std}, {"n", acc.front().members}};
        flat["diversity_std_last"] = {{"value", acc.back().std}, {"n", acc.back().members}};
      }
    }
  }

  const fs::path out = out_dir.empty() ? run.dir : fs::path(out_dir);
  fs::create_directories(out);
  write_json(out / ("eval_" + suite + ".json"), report);
  write_file_atomic((out / ("eval_" + suite + ".csv")).string(), key_value_csv(flat).to_string(chash));
  return report;
}

json cmd_robustness(const RobustnessRequest& req) {
  if (req.ours_b.empty() && req.pretrained_b.empty()) {
    throw UsageError("robustness needs at least one run trained on world B (--ours-b or --pretrained-b)");
  }
  if (req.episodes && *req.episodes < 1) throw UsageError("--episodes must be >= 1");
  std::map<std::string, LoadedRun> runs;
  for (const auto& [key, dir] : {std::pair{"ours_a", &req.ours_a}, std::pair{"ours_b", &req.ours_b},
                                 std::pair{"pretrained_a", &req.pretrained_a},
                                 std::pair{"pretrained_b", &req.pretrained_b}}) {
    if (!dir->empty()) runs.emplace(key, load_run(*dir));
  }
  const LoadedRun& b = runs.count("ours_b") ? runs.at("ours_b") : runs.at("pretrained_b");
  for (const auto& [key, r] : runs) {
    if (key.ends_with("_b") && r.world_hash != b.world_hash) {
      throw UsageError("world-B runs disagree on the world: " + r.dir.string());
    }
    if (r.ex->world.vocab_size() != b.ex->world.vocab_size()) {
      throw UsageError("run " + r.dir.string() + " does not share world B's token map");
    }
  }
  std::map<std::string, Model> models;
  for (const auto& [key, r] : runs) {
    models.emplace(key + "_s", r.load("speaker"));
    models.emplace(key + "_l", r.load("listener"));
  }
  auto ptr = [&](const std::string& k) -> const Model* {
    auto it = models.find(k);
    return it == models.end() ? nullptr : &it->second;
  };
  RobustnessInputs in{ptr("ours_a_s"), ptr("ours_a_l"), ptr("ours_b_s"), ptr("ours_b_l"),
                      ptr("pretrained_a_s"), ptr("pretrained_a_l"), ptr("pretrained_b_s"), ptr("pretrained_b_l")};
  const TrainConfig& c = b.config;
  const auto n = static_cast<std::size_t>(req.episodes.value_or(c.test_episodes));
  const Robustness r = robustness_eval(in, b.ex->world, b.ex->split.test, static_cast<std::size_t>(c.distractors),
                                       c.distractor_spec(), n, test_seed(c));
  auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
  const json report = {{"config_hash", hex64(c.hash())},
                       {"world_hash", hex64(b.world_hash)},
                       {"suite", "robustness"},
                       {"episodes", n},
                       {"ours_cross", opt(r.ours_cross)},
                       {"ours_within", opt(r.ours_within)},
                       {"pretrained_cross", opt(r.pretrained_cross)},
                       {"pretrained_within", opt(r.pretrained_within)}};
  json flat = json::object();
  for (const char* key : {"ours_cross", "ours_within", "pretrained_cross", "pretrained_within"}) {
    if (!report[key].is_null()) flat[key] = {{"value", report[key]}, {"n", n}};
  }
  const fs::path out = req.out_dir.empty() ? b.dir : fs::path(req.out_dir);
  fs::create_directories(out);
  write_json(out / "eval_robustness.json", report);
  write_file_atomic((out / "eval_robustness.csv").string(), key_value_csv(flat).to_string(c.hash()));
  return report;
}

json cmd_crossplay(const std::vector<std::string>& run_dirs, const std::string& out_dir, std::optional<int> episodes,
                   std::ostream& log) {
  if (run_dirs.empty()) throw UsageError("crossplay needs at least one run");
  if (run_dirs.size() == 1) log << "warning: a single run gives a 1x1 matrix with no off-diagonal entries\n";
  if (episodes && *episodes < 1) throw UsageError("--episodes must be >= 1");
  std::vector<LoadedRun> runs;
  for (const auto& d : run_dirs) runs.push_back(load_run(d));
  std::vector<Model> speakers, listeners;
  for (const auto& r : runs) {
    if (r.world_hash != runs.front().world_hash) {
      throw UsageError("world-spec hash mismatch between " + runs.front().dir.string() + " and " + r.dir.string());
    }
    speakers.push_back(r.load("speaker"));
    listeners.push_back(r.load("listener"));
  }
  const TrainConfig& c = runs.front().config;
  const Experiment& ex = *runs.front().ex;
  const auto n = static_cast<std::size_t>(episodes.value_or(c.test_episodes));
  CrossPlay m;
  try {
    m = crossplay(speakers, listeners, ex.world, ex.split.test, static_cast<std::size_t>(c.distractors),
                  c.distractor_spec(), n, test_seed(c));
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  json report = to_json(m);
  report["config_hash"] = hex64(c.hash());
  report["world_hash"] = hex64(runs.front().world_hash);
  report["runs"] = run_dirs;

  CsvTable csv;
  csv.columns = {"speaker_run", "listener_run", "accuracy", "episodes"};
  for (std::size_t i = 0; i < m.accuracy.size(); ++i) {
    for (std::size_t j = 0; j < m.accuracy.size(); ++j) {
      csv.rows.push_back({std::to_string(i), std::to_string(j), format_number(m.accuracy[i][j]),
                          std::to_string(m.episodes_per_cell)});
    }
  }
  const fs::path out = out_dir.empty() ? fs::path(".") : fs::path(out_dir);
  fs::create_directories(out);
  write_json(out / "crossplay.json", report);
  write_file_atomic((out / "crossplay.csv").string(), csv.to_string(c.hash()));
  write_file_atomic((out / "crossplay.svg").string(),
                    svg_heatmap(m.accuracy, "cross-play accuracy", "meta-speaker (run)", "meta-listener (run)"));
  return report;
}

json cmd_report(const std::vector<std::string>& run_dirs, const std::string& out_dir) {
  if (run_dirs.empty()) throw UsageError("report needs at least one run");
  std::map<std::string, std::vector<double>> acc, bl;
  std::map<std::string, std::vector<std::uint64_t>> seeds;
  std::vector<std::pair<std::string, std::vector<DiversityPoint>>> curves;
  Fnv1a combined;
  for (const auto& d : run_dirs) {
    const fs::path dir(d);
    if (!fs::exists(dir / "summary.json")) throw UsageError("not a finished run directory: " + d);
    const json s = json::parse(read_file((dir / "summary.json").string()));
    const std::string label = s.at("label");
    acc[label].push_back(s.at("test_accuracy").get<double>());
    bl[label].push_back(s.at("test_bleu").get<double>());
    seeds[label].push_back(s.at("seed").get<std::uint64_t>());
    combined.update(s.at("config_hash").get<std::string>());
    if (fs::exists(dir / "diversity.json")) {
      const json div = json::parse(read_file((dir / "diversity.json").string()));
      curves.emplace_back(label + " seed " + std::to_string(s.at("seed").get<std::uint64_t>()),
                          point_list(div.at("listener_accuracy")));
    }
  }
  struct Row {
    std::string label;
    MeanStd a, b;
  };
  std::vector<Row> rows;
  for (const auto& [label, xs] : acc) rows.push_back({label, mean_std(xs), mean_std(bl.at(label))});
  std::stable_sort(rows.begin(), rows.end(), [](const Row& x, const Row& y) { return x.a.mean > y.a.mean; });

  const std::uint64_t h = combined.digest();
  json report = {{"config_hash", hex64(h)}, {"methods", json::array()}};
  CsvTable csv;
  csv.columns = {"method", "n", "test_accuracy_mean", "test_accuracy_std", "bleu_mean", "bleu_std"};
  std::vector<BarSpec> bars;
  for (const auto& r : rows) {
    report["methods"].push_back({{"method", r.label},
                                 {"n", r.a.n},
                                 {"seeds", seeds.at(r.label)},
                                 {"test_accuracy_mean", r.a.mean},
                                 {"test_accuracy_std", r.a.std},
                                 {"bleu_mean", r.b.mean},
                                 {"bleu_std", r.b.std}});
    csv.rows.push_back({r.label, std::to_string(r.a.n), format_number(r.a.mean), format_number(r.a.std),
                        format_number(r.b.mean), format_number(r.b.std)});
    bars.push_back({r.label, r.a.mean, r.a.std});
  }
  const fs::path out = out_dir.empty() ? fs::path(".") : fs::path(out_dir);
  fs::create_directories(out);
  write_json(out / "report.json", report);
  write_file_atomic((out / "report.csv").string(), csv.to_string(h));
  write_file_atomic((out / "report.svg").string(), svg_bar_chart(bars, "test accuracy by method", "accuracy"));
  for (std::size_t i = 0; i < curves.size(); ++i) {
    write_file_atomic((out / ("diversity_" + std::to_string(i) + ".svg")).string(),
                      svg_band_chart(curves[i].second, curves[i].first, "accuracy"));
  }
  return report;
}

// ---------------------------------------------------------------------------

int run(int argc, char** argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dynamic population-based meta-learning for referential games"};
  app.set_version_flag("--version", kToolVersion);
  app.require_subcommand(1);

  TrainRequest treq;
  std::uint64_t seed = 0;
  auto* train = app.add_subcommand("train", "Train one method for one seed");
  train->add_option("--config", treq.config_path, "Config file");
  auto* seed_opt = train->add_option("--seed", seed, "Run seed (overrides the config)");
  train->add_option("--method", treq.method, "ours|pretrained|emecom|s2p|l2c|gentrans");
  train->add_option("--ablation", treq.ablation,
                    "none|no_meta_agents|no_adaptive_meta_i|no_adaptive_meta_ii|kl_grounding");
  train->add_option("--set", treq.overrides, "Config override key=value (repeatable)");
  train->add_option("--out", treq.out_root, "Output root (default $POPMETA_OUT or ./runs)");
  train->add_flag("--quiet", treq.quiet, "No progress output");

  std::string eval_run, suite = "accuracy", eval_out;
  std::optional<int> eval_episodes;
  RobustnessRequest rreq;
  auto* ev = app.add_subcommand("eval", "Evaluate a finished run");
  ev->add_option("--run", eval_run, "Run directory");
  ev->add_option("--suite", suite, "accuracy|bleu|oracle|stats|robustness");
  ev->add_option("--episodes", eval_episodes, "Episodes per accuracy estimate");
  ev->add_option("--out", eval_out, "Output directory (default: the run directory)");
  ev->add_option("--ours-a", rreq.ours_a, "robustness: ours trained on world A");
  ev->add_option("--ours-b", rreq.ours_b, "robustness: ours trained on world B");
  ev->add_option("--pretrained-a", rreq.pretrained_a, "robustness: pretrained on world A");
  ev->add_option("--pretrained-b", rreq.pretrained_b, "robustness: pretrained on world B");

  std::vector<std::string> cp_runs;
  std::string cp_out;
  std::optional<int> cp_episodes;
  auto* cp = app.add_subcommand("crossplay", "Pair every run's meta-speaker with every run's meta-listener");
  cp->add_option("--run", cp_runs, "Run directories")->required();
  cp->add_option("--out", cp_out, "Output directory");
  cp->add_option("--episodes", cp_episodes, "Episodes per cell");

  std::vector<std::string> rep_runs;
  std::string rep_out;
  auto* rep = app.add_subcommand("report", "Aggregate runs into a method comparison");
  rep->add_option("--run", rep_runs, "Run directories");
  rep->add_option("--out", rep_out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::CallForVersion&) {
    out << kToolVersion << "\n";
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  }

  try {
    if (train->parsed()) {
      if (seed_opt->count() > 0) treq.seed = seed;
      out << cmd_train(treq, err) << "\n";
    } else if (ev->parsed()) {
      if (suite == "robustness") {
        rreq.episodes = eval_episodes;
        rreq.out_dir = eval_out;
        out << cmd_robustness(rreq).dump(2) << "\n";
      } else {
        if (eval_run.empty()) throw UsageError("eval needs --run");
        out << cmd_eval(eval_run, suite, eval_episodes, eval_out).dump(2) << "\n";
      }
    } else if (cp->parsed()) {
      out << cmd_crossplay(cp_runs, cp_out, cp_episodes, err).dump(2) << "\n";
    } else if (rep->parsed()) {
      out << cmd_report(rep_runs, rep_out).dump(2) << "\n";
    }
  } catch (const NumericalAbort& e) {
    err << "numerical abort: " << e.what() << "\n";
    return 3;
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace popmeta::cli
