#include "popmeta/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <variant>

#include "popmeta/hash.hpp"

namespace popmeta {

namespace {

using Member = std::variant<int TrainConfig::*, double TrainConfig::*, std::string TrainConfig::*,
                            bool TrainConfig::*, std::uint64_t TrainConfig::*>;

struct Field {
  const char* section;
  const char* key;
  Member member;
};

const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      {"world", "attributes", &TrainConfig::attributes},
      {"world", "values", &TrainConfig::values},
      {"world", "bias_zipf", &TrainConfig::bias_zipf},
      {"world", "synonyms", &TrainConfig::synonyms},
      {"world", "data_seed", &TrainConfig::data_seed},
      {"world", "test_size", &TrainConfig::test_size},
      {"world", "val_size", &TrainConfig::val_size},
      {"world", "train_size", &TrainConfig::train_size},
      {"world", "dataset_size", &TrainConfig::dataset_size},
      {"world", "distractors", &TrainConfig::distractors},
      {"world", "distractor_mode", &TrainConfig::distractor_mode},
      {"world", "hard_threshold", &TrainConfig::hard_threshold},
      {"model", "hidden", &TrainConfig::hidden},
      {"model", "embed", &TrainConfig::embed},
      {"train", "batch_size", &TrainConfig::batch_size},
      {"train", "meta_batch_size", &TrainConfig::meta_batch_size},
      {"train", "buffer_capacity", &TrainConfig::buffer_capacity},
      {"train", "n_pretrain", &TrainConfig::n_pretrain},
      {"train", "n_meta", &TrainConfig::n_meta},
      {"train", "n_int", &TrainConfig::n_int},
      {"train", "n_sup", &TrainConfig::n_sup},
      {"train", "n_finetune", &TrainConfig::n_finetune},
      {"train", "lambda_hs", &TrainConfig::lambda_hs},
      {"train", "lambda_hl", &TrainConfig::lambda_hl},
      {"train", "lambda_s", &TrainConfig::lambda_s},
      {"train", "lambda_int", &TrainConfig::lambda_int},
      {"train", "lr", &TrainConfig::lr},
      {"train", "outer_lr", &TrainConfig::outer_lr},
      {"train", "inner_lr", &TrainConfig::inner_lr},
      {"train", "meta_variant", &TrainConfig::meta_variant},
      {"train", "meta_init", &TrainConfig::meta_init},
      {"train", "patience", &TrainConfig::patience},
      {"train", "min_delta", &TrainConfig::min_delta},
      {"train", "max_outer", &TrainConfig::max_outer},
      {"train", "listener_sup_loss", &TrainConfig::listener_sup_loss},
      {"train", "entropy_sign", &TrainConfig::entropy_sign},
      {"train", "supervised_term_sign", &TrainConfig::supervised_term_sign},
      {"train", "reinforce_baseline", &TrainConfig::reinforce_baseline},
      {"baselines", "population_size", &TrainConfig::population_size},
      {"baselines", "baseline_rounds", &TrainConfig::baseline_rounds},
      {"baselines", "emecom_steps", &TrainConfig::emecom_steps},
      {"baselines", "population_steps", &TrainConfig::population_steps},
      {"baselines", "selfplay_lr", &TrainConfig::selfplay_lr},
      {"baselines", "selfplay_baseline", &TrainConfig::selfplay_baseline},
      {"baselines", "gen_trans_period", &TrainConfig::gen_trans_period},
      {"eval", "val_episodes", &TrainConfig::val_episodes},
      {"eval", "test_episodes", &TrainConfig::test_episodes},
      {"run", "seed", &TrainConfig::seed},
      {"run", "threads", &TrainConfig::threads},
      {"run", "deterministic", &TrainConfig::deterministic},
      {"run", "trace", &TrainConfig::trace},
      {"run", "save_iteration_checkpoints", &TrainConfig::save_iteration_checkpoints},
  };
  return f;
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::string unquote(const std::string& s) {
  if (s.size() >= 2 && s.front() == '"' && s.back() == '"') return s.substr(1, s.size() - 2);
  return s;
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T v{};
  const char* b = text.data();
  const char* e = text.data() + text.size();
  auto [ptr, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || ptr != e) {
    throw std::invalid_argument("config: bad value '" + text + "' for key '" + key + "'");
  }
  return v;
}

// Shortest text that round-trips.
std::string format_double(double v) {
  char buf[32];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

const Field& find_field(const std::string& key) {
  for (const auto& f : fields()) {
    if (key == f.key) return f;
  }
  std::string msg = "config: unknown key '" + key + "'; valid keys:";
  for (const auto& f : fields()) msg += std::string(" ") + f.key;
  throw std::invalid_argument(msg);
}

std::string get_text(const TrainConfig& c, const Field& f) {
  return std::visit(
      [&](auto m) -> std::string {
        using T = std::decay_t<decltype(c.*m)>;
        if constexpr (std::is_same_v<T, std::string>) {
          return "\"" + c.*m + "\"";
        } else if constexpr (std::is_same_v<T, bool>) {
          return c.*m ? "true" : "false";
        } else if constexpr (std::is_same_v<T, double>) {
          return format_double(c.*m);
        } else {
          return std::to_string(c.*m);
        }
      },
      f.member);
}

}  // namespace

void TrainConfig::set(const std::string& key, const std::string& raw) {
  const Field& f = find_field(key);
  const std::string value = unquote(trim(raw));
  std::visit(
      [&](auto m) {
        using T = std::decay_t<decltype(this->*m)>;
        if constexpr (std::is_same_v<T, std::string>) {
          this->*m = value;
        } else if constexpr (std::is_same_v<T, bool>) {
          if (value == "true" || value == "1") {
            this->*m = true;
          } else if (value == "false" || value == "0") {
            this->*m = false;
          } else {
            throw std::invalid_argument("config: bad boolean '" + value + "' for key '" + key + "'");
          }
        } else {
          this->*m = parse_number<T>(key, value);
        }
      },
      f.member);
}

std::map<std::string, std::string> TrainConfig::to_map() const {
  std::map<std::string, std::string> out;
  for (const auto& f : fields()) out[f.key] = unquote(get_text(*this, f));
  return out;
}

std::vector<std::string> TrainConfig::keys() {
  std::vector<std::string> k;
  for (const auto& f : fields()) k.emplace_back(f.key);
  return k;
}

std::string TrainConfig::to_text() const {
  std::string out;
  std::string section;
  for (const auto& f : fields()) {
    if (section != f.section) {
      if (!section.empty()) out += "\n";
      section = f.section;
      out += "[" + section + "]\n";
    }
    out += std::string(f.key) + " = " + get_text(*this, f) + "\n";
  }
  return out;
}

TrainConfig TrainConfig::parse_text(const std::string& text) {
  TrainConfig c;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw std::invalid_argument("config line " + std::to_string(lineno) + ": bad section header");
      }
      continue;
    }
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected key = value");
    }
    c.set(trim(line.substr(0, eq)), line.substr(eq + 1));
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_text(ss.str());
}

void TrainConfig::validate() const {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw std::invalid_argument("config: " + what);
  };
  require(lambda_hs >= 0 && lambda_hl >= 0 && lambda_s >= 0 && lambda_int >= 0,
          "all lambda coefficients must be >= 0");
  require(inner_lr >= 0, "inner_lr must be >= 0");
  require(lr > 0 && outer_lr > 0 && selfplay_lr > 0, "learning rates must be > 0");
  require(batch_size >= 1 && meta_batch_size >= 1, "batch sizes must be >= 1");
  require(buffer_capacity >= 1, "buffer_capacity must be >= 1");
  require(n_meta >= 0 && n_int >= 0 && n_sup >= 0 && n_pretrain >= 0 && n_finetune >= 0 &&
              emecom_steps >= 0 && population_steps >= 0,
          "step counts must be >= 0");
  require(max_outer >= 1 && patience >= 1, "max_outer and patience must be >= 1");
  require(distractors >= 0, "distractors must be >= 0");
  require(dataset_size >= 1, "dataset_size must be >= 1");
  require(hidden >= 1 && embed >= 1, "model sizes must be >= 1");
  require(population_size >= 1 && baseline_rounds >= 1 && gen_trans_period >= 1,
          "baseline counts must be >= 1");
  require(val_episodes >= 1 && test_episodes >= 1, "episode counts must be >= 1");
  require(distractor_mode == "uniform" || distractor_mode == "hard",
          "distractor_mode must be uniform or hard");
  require(listener_sup_loss == "prob" || listener_sup_loss == "log", "listener_sup_loss must be prob or log");
  require(entropy_sign == "regularizer" || entropy_sign == "literal",
          "entropy_sign must be regularizer or literal");
  require(supervised_term_sign == "regularizer" || supervised_term_sign == "literal",
          "supervised_term_sign must be regularizer or literal");
  require(meta_init == "random" || meta_init == "pretrained", "meta_init must be random or pretrained");
  (void)parse_meta_variant(meta_variant);
  world_spec().validate();
}

WorldSpec TrainConfig::world_spec() const {
  WorldSpec w;
  w.attributes = attributes;
  w.values = values;
  w.synonyms = synonyms;
  w.seed = data_seed;
  if (bias_zipf > 0.0) w.bias = zipf_bias(attributes, values, bias_zipf);
  return w;
}

DistractorSpec TrainConfig::distractor_spec() const {
  DistractorSpec d;
  d.mode = distractor_mode == "hard" ? DistractorMode::kHard : DistractorMode::kUniform;
  d.threshold = hard_threshold;
  return d;
}

ListenerSupLoss TrainConfig::listener_loss() const {
  return listener_sup_loss == "log" ? ListenerSupLoss::kLogProbability : ListenerSupLoss::kProbability;
}

std::uint64_t TrainConfig::hash() const {
  Fnv1a h;
  h.update(to_text());
  return h.digest();
}

}  // namespace popmeta
