#include "popmeta/world.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "popmeta/hash.hpp"

namespace popmeta {

void WorldSpec::validate() const {
  if (attributes < 1) throw std::invalid_argument("world: attributes must be >= 1");
  if (values < 2) throw std::invalid_argument("world: values per attribute must be >= 2");
  if (synonyms < 1) throw std::invalid_argument("world: synonyms must be >= 1");
  if (!bias.empty()) {
    if (bias.size() != static_cast<std::size_t>(attributes)) {
      throw std::invalid_argument("world: bias needs one row per attribute");
    }
    for (const auto& row : bias) {
      if (row.size() != static_cast<std::size_t>(values)) {
        throw std::invalid_argument("world: bias row length must equal values per attribute");
      }
      double s = 0.0;
      for (double p : row) {
        if (p < 0.0) throw std::invalid_argument("world: negative bias probability");
        s += p;
      }
      if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("world: bias rows must sum to 1");
    }
  }
  double u = std::pow(static_cast<double>(values), attributes);
  if (u > 1e8) throw std::invalid_argument("world: universe too large");
}

std::size_t WorldSpec::universe_size() const {
  std::size_t n = 1;
  for (int a = 0; a < attributes; ++a) n *= static_cast<std::size_t>(values);
  return n;
}

std::uint64_t WorldSpec::hash() const {
  // The seed does not change the token map, so it is left out.
  Fnv1a h;
  h.update("world");
  h.update_pod(attributes);
  h.update_pod(values);
  h.update_pod(synonyms);
  for (const auto& row : bias) {
    for (double p : row) h.update_pod(p);
  }
  return h.digest();
}

nlohmann::json WorldSpec::to_json() const {
  return {{"attributes", attributes}, {"values", values}, {"bias", bias},
          {"synonyms", synonyms},     {"seed", seed}};
}

WorldSpec WorldSpec::from_json(const nlohmann::json& j) {
  WorldSpec s;
  s.attributes = j.at("attributes").get<int>();
  s.values = j.at("values").get<int>();
  s.bias = j.value("bias", std::vector<std::vector<double>>{});
  s.synonyms = j.value("synonyms", 1);
  s.seed = j.value("seed", std::uint64_t{0});
  s.validate();
  return s;
}

std::vector<std::vector<double>> zipf_bias(int attributes, int values, double exponent) {
  std::vector<double> row(static_cast<std::size_t>(values));
  for (int v = 0; v < values; ++v) row[static_cast<std::size_t>(v)] = 1.0 / std::pow(v + 1.0, exponent);
  const double s = std::accumulate(row.begin(), row.end(), 0.0);
  for (double& p : row) p /= s;
  return std::vector<std::vector<double>>(static_cast<std::size_t>(attributes), row);
}

std::vector<int> Message::content() const {
  std::vector<int> out;
  for (int t : tokens) {
    if (t != kPad && t != kEos) out.push_back(t);
  }
  return out;
}

World::World(WorldSpec spec) : spec_(std::move(spec)) {
  spec_.validate();
  universe_ = spec_.universe_size();
}

Object World::object_at(std::size_t index) const {
  if (index >= universe_) throw std::out_of_range("object index out of range");
  Object o;
  o.values.resize(static_cast<std::size_t>(spec_.attributes));
  for (int a = spec_.attributes - 1; a >= 0; --a) {
    o.values[static_cast<std::size_t>(a)] = static_cast<int>(index % static_cast<std::size_t>(spec_.values));
    index /= static_cast<std::size_t>(spec_.values);
  }
  return o;
}

std::size_t World::index_of(const Object& o) const {
  if (!valid(o)) throw std::invalid_argument("object does not belong to this world");
  std::size_t idx = 0;
  for (int v : o.values) idx = idx * static_cast<std::size_t>(spec_.values) + static_cast<std::size_t>(v);
  return idx;
}

bool World::valid(const Object& o) const {
  if (o.values.size() != static_cast<std::size_t>(spec_.attributes)) return false;
  return std::all_of(o.values.begin(), o.values.end(),
                     [&](int v) { return v >= 0 && v < spec_.values; });
}

int World::token_for(int attribute, int value, int synonym) const {
  return 2 + (attribute * spec_.values + value) * spec_.synonyms + synonym;
}

std::optional<std::pair<int, int>> World::decode_token(int token) const {
  if (token < 2 || token >= vocab_size()) return std::nullopt;
  const int pair = (token - 2) / spec_.synonyms;
  return std::make_pair(pair / spec_.values, pair % spec_.values);
}

std::vector<int> World::emission_order() const {
  std::vector<int> order(static_cast<std::size_t>(spec_.attributes));
  std::iota(order.begin(), order.end(), 0);
  return order;
}

Message World::canonical_describe(const Object& t) const {
  if (!valid(t)) throw std::invalid_argument("canonical_describe: invalid object");
  Message m;
  for (int a : emission_order()) m.tokens.push_back(token_for(a, t.values[static_cast<std::size_t>(a)]));
  m.tokens.push_back(kEos);
  return m;
}

Message World::noisy_describe(const Object& t, Rng& rng) const {
  if (!valid(t)) throw std::invalid_argument("noisy_describe: invalid object");
  Message m;
  for (int a : emission_order()) {
    const int s = static_cast<int>(rng.below(static_cast<std::size_t>(spec_.synonyms)));
    m.tokens.push_back(token_for(a, t.values[static_cast<std::size_t>(a)], s));
  }
  m.tokens.push_back(kEos);
  return m;
}

std::vector<int> World::parse(const Message& m) const {
  std::vector<int> parsed(static_cast<std::size_t>(spec_.attributes), -1);
  for (int tok : m.tokens) {
    if (auto av = decode_token(tok)) parsed[static_cast<std::size_t>(av->first)] = av->second;
  }
  return parsed;
}

std::size_t World::oracle_listener(const Message& m, std::span<const Object> candidates) const {
  if (candidates.empty()) throw std::invalid_argument("oracle_listener: no candidates");
  const auto parsed = parse(m);
  std::size_t best = 0;
  int best_score = -1;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    int score = 0;
    for (std::size_t a = 0; a < parsed.size(); ++a) {
      if (parsed[a] >= 0 && candidates[i].values[a] == parsed[a]) ++score;
    }
    if (score > best_score) {
      best_score = score;
      best = i;
    }
  }
  return best;
}

double World::similarity(const Object& a, const Object& b) const {
  if (a.values.size() != b.values.size()) throw std::invalid_argument("similarity: objects differ in arity");
  int match = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) match += a.values[i] == b.values[i];
  return static_cast<double>(match) / static_cast<double>(a.values.size());
}

std::vector<Object> World::sample_distractors(const Object& t, std::size_t k,
                                              const DistractorSpec& mode,
                                              std::span<const Object> pool, Rng& rng) const {
  if (k == 0) return {};
  if (universe_ < k + 1) {
    throw std::invalid_argument("sample_distractors: universe of " + std::to_string(universe_) +
                                " objects cannot supply " + std::to_string(k) + " distractors");
  }
  std::size_t eligible = 0;
  for (const auto& o : pool) eligible += !(o == t);
  if (eligible < k) {
    throw std::invalid_argument("sample_distractors: pool has only " + std::to_string(eligible) +
                                " objects besides the target, need " + std::to_string(k));
  }

  std::vector<Object> out;
  out.reserve(k);
  if (mode.mode == DistractorMode::kUniform) {
    if (k * 4 < pool.size()) {
      // Sparse rejection sampling over pool indices.
      std::vector<std::size_t> taken;
      while (out.size() < k) {
        const std::size_t i = rng.below(pool.size());
        if (pool[i] == t || std::find(taken.begin(), taken.end(), i) != taken.end()) continue;
        taken.push_back(i);
        out.push_back(pool[i]);
      }
    } else {
      std::vector<std::size_t> idx;
      for (std::size_t i = 0; i < pool.size(); ++i) {
        if (!(pool[i] == t)) idx.push_back(i);
      }
      // Partial Fisher-Yates.
      for (std::size_t i = 0; i < k; ++i) {
        std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
        out.push_back(pool[idx[i]]);
      }
    }
    return out;
  }

  std::vector<std::size_t> hard;
  std::vector<std::size_t> rest;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i] == t) continue;
    (similarity(pool[i], t) >= mode.threshold ? hard : rest).push_back(i);
  }
  if (hard.size() >= k) {
    for (std::size_t i = 0; i < k; ++i) {
      std::swap(hard[i], hard[i + rng.below(hard.size() - i)]);
      out.push_back(pool[hard[i]]);
    }
    return out;
  }
  // Not enough above threshold: the K most similar, random among ties.
  std::vector<std::size_t> all = hard;
  all.insert(all.end(), rest.begin(), rest.end());
  rng.shuffle(all);
  std::stable_sort(all.begin(), all.end(), [&](std::size_t a, std::size_t b) {
    return similarity(pool[a], t) > similarity(pool[b], t);
  });
  for (std::size_t i = 0; i < k; ++i) out.push_back(pool[all[i]]);
  return out;
}

double World::weight(const Object& o) const {
  if (spec_.bias.empty()) return 1.0;
  double w = 1.0;
  for (std::size_t a = 0; a < o.values.size(); ++a) {
    w *= spec_.bias[a][static_cast<std::size_t>(o.values[a])];
  }
  return w;
}

WorldSplit make_split(const World& world, std::size_t test_size, std::size_t validation_size,
                      std::size_t train_size, Rng& rng) {
  const std::size_t n = world.universe_size();
  if (test_size + validation_size + train_size > n || test_size + validation_size >= n) {
    throw std::invalid_argument("make_split: split sizes exceed the universe of " +
                                std::to_string(n) + " objects");
  }
  // Weighted sampling without replacement: order by key u^(1/w), largest first
  // (Efraimidis-Spirakis), computed in log space.
  std::vector<std::pair<double, std::size_t>> keyed;
  keyed.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double w = world.weight(world.object_at(i));
    double u = rng.uniform();
    while (u <= 0.0) u = rng.uniform();
    const double key = w > 0.0 ? std::log(u) / w : -INFINITY;
    keyed.emplace_back(key, i);
  }
  std::stable_sort(keyed.begin(), keyed.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  WorldSplit s;
  std::size_t pos = 0;
  for (; pos < test_size; ++pos) s.test.push_back(world.object_at(keyed[pos].second));
  for (std::size_t i = 0; i < validation_size; ++i, ++pos) {
    s.validation.push_back(world.object_at(keyed[pos].second));
  }
  const std::size_t remaining = n - pos;
  const std::size_t ntrain = train_size == 0 ? remaining : train_size;
  for (std::size_t i = 0; i < ntrain; ++i, ++pos) s.train.push_back(world.object_at(keyed[pos].second));
  return s;
}

std::pair<std::vector<Object>, std::vector<Object>> split_inner_outer(
    std::span<const Object> train, Rng& rng) {
  std::vector<Object> shuffled(train.begin(), train.end());
  rng.shuffle(shuffled);
  const std::size_t half = shuffled.size() / 2;
  std::vector<Object> inner(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(half));
  std::vector<Object> outer(shuffled.begin() + static_cast<std::ptrdiff_t>(half), shuffled.end());
  return {std::move(inner), std::move(outer)};
}

nlohmann::json GroundingDataset::to_json() const {
  nlohmann::json pairs_json = nlohmann::json::array();
  for (const auto& p : pairs) {
    pairs_json.push_back({{"object", p.object.values}, {"tokens", p.description.tokens}});
  }
  return {{"format", "popmeta-grounding-dataset/1"}, {"world", world.to_json()}, {"pairs", pairs_json}};
}

GroundingDataset GroundingDataset::from_json(const nlohmann::json& j) {
  GroundingDataset d;
  d.world = WorldSpec::from_json(j.at("world"));
  World w(d.world);
  for (const auto& p : j.at("pairs")) {
    GroundingPair gp;
    gp.object.values = p.at("object").get<std::vector<int>>();
    gp.description.tokens = p.at("tokens").get<std::vector<int>>();
    if (!w.valid(gp.object)) throw std::invalid_argument("dataset: object outside the world");
    d.pairs.push_back(std::move(gp));
  }
  return d;
}

void GroundingDataset::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << to_json().dump(1) << "\n";
}

GroundingDataset GroundingDataset::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return from_json(nlohmann::json::parse(in));
}

GroundingDataset build_dataset(const World& world, std::span<const Object> train, std::size_t size,
                               Rng& rng) {
  if (size > train.size()) {
    throw std::invalid_argument("build_dataset: requested " + std::to_string(size) +
                                " pairs but the training split has " + std::to_string(train.size()));
  }
  std::vector<std::size_t> idx(train.size());
  std::iota(idx.begin(), idx.end(), 0);
  for (std::size_t i = 0; i < size; ++i) std::swap(idx[i], idx[i + rng.below(idx.size() - i)]);
  GroundingDataset d;
  d.world = world.spec();
  d.pairs.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    const Object& o = train[idx[i]];
    d.pairs.push_back({o, world.spec().synonyms > 1 ? world.noisy_describe(o, rng)
                                                    : world.canonical_describe(o)});
  }
  return d;
}

}  // namespace popmeta
