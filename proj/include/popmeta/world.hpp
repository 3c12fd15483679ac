#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "popmeta/rng.hpp"

namespace popmeta {

inline constexpr int kPad = 0;
inline constexpr int kEos = 1;

/// Shape of the synthetic object universe and its value distribution.
struct WorldSpec {
  int attributes = 4;
  int values = 6;
  /// Per-attribute categorical distribution over values. Empty means uniform.
  std::vector<std::vector<double>> bias;
  /// Tokens per (attribute, value) pair. 1 disables synonym noise.
  int synonyms = 1;
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t universe_size() const;
  std::uint64_t hash() const;
  nlohmann::json to_json() const;
  static WorldSpec from_json(const nlohmann::json& j);
};

/// Zipf(s) value distribution for every attribute; s = 0 is uniform.
std::vector<std::vector<double>> zipf_bias(int attributes, int values, double exponent);

struct Object {
  std::vector<int> values;
  bool operator==(const Object&) const = default;
  auto operator<=>(const Object&) const = default;
};

/// A token sequence, optionally annotated with the producing policy's
/// per-token log-probabilities and per-step entropies.
struct Message {
  std::vector<int> tokens;
  std::vector<double> log_probs;
  std::vector<double> entropies;

  /// Tokens with EOS and PAD removed.
  std::vector<int> content() const;
  bool operator==(const Message& o) const { return tokens == o.tokens; }
};

enum class DistractorMode { kUniform, kHard };

struct DistractorSpec {
  DistractorMode mode = DistractorMode::kUniform;
  double threshold = 0.75;
};

/// Canonical compositional language plus the oracle agents that use it.
class World {
public:
  explicit World(WorldSpec spec);

  const WorldSpec& spec() const { return spec_; }
  int attributes() const { return spec_.attributes; }
  int values() const { return spec_.values; }
  std::size_t universe_size() const { return universe_; }
  int vocab_size() const { return 2 + spec_.attributes * spec_.values * spec_.synonyms; }
  /// Longest message: one token per attribute plus EOS.
  int max_len() const { return spec_.attributes + 1; }

  Object object_at(std::size_t index) const;
  std::size_t index_of(const Object& o) const;
  bool valid(const Object& o) const;

  int token_for(int attribute, int value, int synonym = 0) const;
  /// (attribute, value) encoded by a token, or nullopt for PAD/EOS/out-of-range.
  std::optional<std::pair<int, int>> decode_token(int token) const;

  /// Canonical description: one token per attribute in emission order, then EOS.
  Message canonical_describe(const Object& t) const;
  /// Same as canonical_describe but with a random synonym per attribute.
  Message noisy_describe(const Object& t, Rng& rng) const;
  /// Attribute values mentioned in a message (-1 where unmentioned); later
  /// mentions override earlier ones.
  std::vector<int> parse(const Message& m) const;

  /// Oracle listener: index of the candidate matching the most parsed
  /// attributes, lowest index on ties. Candidates must be non-empty.
  std::size_t oracle_listener(const Message& m, std::span<const Object> candidates) const;

  double similarity(const Object& a, const Object& b) const;

  /// K distinct objects from `pool`, none equal to t.
  std::vector<Object> sample_distractors(const Object& t, std::size_t k, const DistractorSpec& mode,
                                         std::span<const Object> pool, Rng& rng) const;

  /// Probability weight of an object under the world's bias.
  double weight(const Object& o) const;

  std::vector<int> emission_order() const;

private:
  WorldSpec spec_;
  std::size_t universe_ = 0;
};

struct WorldSplit {
  std::vector<Object> train;
  std::vector<Object> validation;
  std::vector<Object> test;
};

/// Draws disjoint splits without replacement, weighted by the world's bias.
/// train_size = 0 puts every remaining object in the training split.
WorldSplit make_split(const World& world, std::size_t test_size, std::size_t validation_size,
                      std::size_t train_size, Rng& rng);

/// Random halving of the training objects for the inner/outer meta losses.
std::pair<std::vector<Object>, std::vector<Object>> split_inner_outer(
    std::span<const Object> train, Rng& rng);

struct GroundingPair {
  Object object;
  Message description;
};

struct GroundingDataset {
  WorldSpec world;
  std::vector<GroundingPair> pairs;

  std::size_t size() const { return pairs.size(); }
  nlohmann::json to_json() const;
  static GroundingDataset from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static GroundingDataset load(const std::string& path);
};

/// `size` distinct training objects with their descriptions. Canonical
/// descriptions unless the world has synonyms, in which case one synonym per
/// attribute is drawn at random.
GroundingDataset build_dataset(const World& world, std::span<const Object> train, std::size_t size,
                               Rng& rng);

}  // namespace popmeta
