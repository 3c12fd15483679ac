#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>
#include <set>

#include <boost/math/distributions/chi_squared.hpp>

#include "popmeta/game.hpp"
#include "popmeta/world.hpp"

using namespace popmeta;

namespace {

World make_world(int a, int v, std::uint64_t seed = 0) {
  WorldSpec s;
  s.attributes = a;
  s.values = v;
  s.seed = seed;
  return World(s);
}

std::vector<Object> universe(const World& w) {
  std::vector<Object> out;
  for (std::size_t i = 0; i < w.universe_size(); ++i) out.push_back(w.object_at(i));
  return out;
}

Message tokens(std::vector<int> t) {
  Message m;
  m.tokens = std::move(t);
  return m;
}

double chi_square_p(const std::vector<double>& observed, double expected) {
  double x2 = 0.0;
  for (double o : observed) x2 += (o - expected) * (o - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(observed.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, x2));
}

}  // namespace

TEST_CASE("canonical descriptions") {
  CHECK(make_world(2, 3).canonical_describe({{1, 2}}).tokens == std::vector<int>{3, 7, kEos});
  CHECK(make_world(1, 2).canonical_describe({{0}}).tokens == std::vector<int>{2, kEos});
  CHECK(make_world(4, 6).vocab_size() == 26);
}

TEST_CASE("parse inverts canonical_describe over the whole universe") {
  const World w = make_world(4, 6);
  std::set<std::vector<int>> seen;
  for (const auto& o : universe(w)) {
    const Message m = w.canonical_describe(o);
    CHECK(w.parse(m) == o.values);
    seen.insert(m.tokens);
  }
  CHECK(seen.size() == 1296);
}

TEST_CASE("token map is a bijection onto [2, 2 + A Va)") {
  const World w = make_world(3, 5);
  std::set<int> toks;
  for (int a = 0; a < 3; ++a) {
    for (int v = 0; v < 5; ++v) {
      const int t = w.token_for(a, v);
      CHECK(w.decode_token(t) == std::make_pair(a, v));
      toks.insert(t);
    }
  }
  CHECK(*toks.begin() == 2);
  CHECK(*toks.rbegin() == 16);
  CHECK(toks.size() == 15);
  CHECK_FALSE(w.decode_token(kPad).has_value());
  CHECK_FALSE(w.decode_token(kEos).has_value());
}

TEST_CASE("oracle listener") {
  const World w = make_world(2, 3);
  const std::vector<Object> cands = {{{1, 0}}, {{1, 2}}, {{0, 0}}};
  SUBCASE("canonical message picks its object") {
    for (std::size_t i = 0; i < cands.size(); ++i) CHECK(w.oracle_listener(w.canonical_describe(cands[i]), cands) == i);
  }
  SUBCASE("empty message falls to index 0") { CHECK(w.oracle_listener(tokens({kEos}), cands) == 0); }
  SUBCASE("partial mention ties break low") { CHECK(w.oracle_listener(tokens({w.token_for(0, 1), kEos}), cands) == 0); }
  SUBCASE("later mention overrides earlier") {
    const Message m = tokens({w.token_for(1, 2), w.token_for(0, 0), w.token_for(0, 1), kEos});
    CHECK(w.oracle_listener(m, cands) == 1);
  }
}

TEST_CASE("oracle-oracle accuracy is 1 on distinct candidates") {
  const World w = make_world(4, 6);
  const auto all = universe(w);
  Rng rng(4);
  auto cb = sample_game(w, all, 2000, 9, {}, rng);
  for (std::size_t b = 0; b < cb.size(); ++b) {
    CHECK(w.oracle_listener(w.canonical_describe(cb.targets[b]), cb.candidates_of(b)) == cb.target_index[b]);
  }
}

TEST_CASE("similarity") {
  const World w = make_world(4, 6);
  CHECK(w.similarity({{1, 2, 3, 4}}, {{1, 2, 3, 4}}) == 1.0);
  CHECK(w.similarity({{1, 2, 3, 4}}, {{0, 0, 0, 0}}) == 0.0);
  CHECK(w.similarity({{1, 2, 3, 4}}, {{1, 2, 0, 0}}) == 0.5);
}

TEST_CASE("distractor sampling") {
  const World w = make_world(4, 6);
  const auto pool = universe(w);
  const Object t{{1, 2, 3, 4}};
  Rng rng(1);
  CHECK(w.sample_distractors(t, 0, {}, pool, rng).empty());

  Rng a(7), b(7);
  CHECK(w.sample_distractors(t, 9, {}, pool, a) == w.sample_distractors(t, 9, {}, pool, b));

  for (int trial = 0; trial < 200; ++trial) {
    auto d = w.sample_distractors(t, 9, {}, pool, rng);
    CHECK(d.size() == 9);
    CHECK(std::find(d.begin(), d.end(), t) == d.end());
    CHECK(std::set<Object>(d.begin(), d.end()).size() == 9);
  }

  const DistractorSpec hard{DistractorMode::kHard, 0.75};
  for (int trial = 0; trial < 50; ++trial) {
    for (const auto& o : w.sample_distractors(t, 9, hard, pool, rng)) CHECK(w.similarity(o, t) >= 0.75);
  }

  const World tiny = make_world(1, 3);
  CHECK_THROWS_AS(tiny.sample_distractors({{0}}, 3, {}, universe(tiny), rng), std::invalid_argument);
}

TEST_CASE("splits and grounding dataset") {
  const World w = make_world(4, 6, 11);
  Rng rng(2);
  const WorldSplit s = make_split(w, 200, 100, 0, rng);
  CHECK(s.test.size() == 200);
  CHECK(s.validation.size() == 100);
  CHECK(s.train.size() == 996);
  std::set<Object> all;
  for (const auto* part : {&s.train, &s.validation, &s.test}) all.insert(part->begin(), part->end());
  CHECK(all.size() == 1296);

  auto [in, out] = split_inner_outer(s.train, rng);
  std::set<Object> uni(in.begin(), in.end());
  for (const auto& o : out) CHECK(uni.insert(o).second);
  CHECK(uni == std::set<Object>(s.train.begin(), s.train.end()));

  Rng r1(5), r2(5);
  const auto d = build_dataset(w, s.train, 300, r1);
  CHECK(d.size() == 300);
  std::set<Object> objs;
  for (const auto& p : d.pairs) {
    objs.insert(p.object);
    CHECK(p.description == w.canonical_describe(p.object));
  }
  CHECK(objs.size() == 300);
  const auto d2 = build_dataset(w, s.train, 300, r2);
  CHECK(d2.to_json() == d.to_json());

  const auto full = build_dataset(w, s.train, s.train.size(), r1);
  std::set<Object> covered;
  for (const auto& p : full.pairs) covered.insert(p.object);
  CHECK(covered == std::set<Object>(s.train.begin(), s.train.end()));
  CHECK_THROWS_AS(build_dataset(w, s.train, s.train.size() + 1, r1), std::invalid_argument);

  const auto path = (std::filesystem::temp_directory_path() / "popmeta_dataset_test.json").string();
  d.save(path);
  CHECK(GroundingDataset::load(path).to_json() == d.to_json());
  std::filesystem::remove(path);
}

TEST_CASE("world spec validation and hashing") {
  WorldSpec s;
  s.values = 1;
  CHECK_THROWS(s.validate());
  s.values = 3;
  s.bias = {{0.5, 0.5, 0.1}};
  s.attributes = 1;
  CHECK_THROWS(s.validate());
  WorldSpec a, b;
  b.seed = 99;
  CHECK(a.hash() == b.hash());
  b.bias = zipf_bias(b.attributes, b.values, 1.0);
  CHECK(a.hash() != b.hash());
  CHECK(WorldSpec::from_json(b.to_json()).hash() == b.hash());
}

TEST_CASE("zipf worlds skew splits toward low values") {
  WorldSpec s;
  s.bias = zipf_bias(4, 6, 1.0);
  const World w(s);
  Rng rng(3);
  const auto split = make_split(w, 200, 100, 0, rng);
  double low = 0.0, high = 0.0;
  for (const auto& o : split.test) {
    low += o.values[0] == 0;
    high += o.values[0] == 5;
  }
  CHECK(low > 2 * high);
}

// ---------------------------------------------------------------------------
// Game

TEST_CASE("rewards") {
  CHECK(reward_for(2, 2) == 1.0);
  CHECK(reward_for(1, 2) == -0.1);
}

TEST_CASE("K = 0 games are always won") {
  const World w = make_world(2, 3);
  Rng rng(1);
  AgentArch sa = AgentArch::for_world(AgentKind::kSpeaker, w, 8, 4);
  AgentArch la = AgentArch::for_world(AgentKind::kListener, w, 8, 4);
  const Model s = Model::init(sa, rng), l = Model::init(la, rng);
  const auto e = play(s, l, {{1, 1}}, {}, PlayMode::kTrain, rng);
  CHECK(e.listener_probs == std::vector<double>{1.0});
  CHECK(e.reward == 1.0);
}

TEST_CASE("batch of one equals a single play on the same draws") {
  const World w = make_world(3, 4);
  Rng init(8);
  const Model s = Model::init(AgentArch::for_world(AgentKind::kSpeaker, w, 16, 8), init);
  const Model l = Model::init(AgentArch::for_world(AgentKind::kListener, w, 16, 8), init);
  const auto pool = universe(w);
  const Object t{{1, 2, 3}};
  Rng r1(42), r2(42);
  const auto batch = play_batch(s, l, w, std::vector<Object>{t}, 4, {}, pool, PlayMode::kTrain, r1);
  const auto d = w.sample_distractors(t, 4, {}, pool, r2);
  const auto single = play(s, l, t, d, PlayMode::kTrain, r2);
  CHECK(batch.episodes.front().message == single.message);
  CHECK(batch.episodes.front().target_index == single.target_index);
  CHECK(batch.episodes.front().prediction == single.prediction);
}

TEST_CASE("rewards take two values and a random listener scores 1/(K+1)") {
  const World w = make_world(4, 6);
  const auto pool = universe(w);
  Rng rng(17);
  for (std::size_t k : {4u, 9u, 14u}) {
    auto cb = sample_game(w, pool, 10000, k, {}, rng);
    std::size_t hits = 0;
    for (std::size_t b = 0; b < cb.size(); ++b) {
      const double r = reward_for(rng.below(k + 1), cb.target_index[b]);
      CHECK((r == 1.0 || r == -0.1));
      hits += r == 1.0;
    }
    CHECK(std::abs(static_cast<double>(hits) / 1e4 - 1.0 / static_cast<double>(k + 1)) < 0.01);
  }
}

TEST_CASE("target slot is uniform over candidate positions") {
  const World w = make_world(4, 6);
  const auto pool = universe(w);
  Rng rng(23);
  auto cb = sample_game(w, pool, 20000, 9, {}, rng);
  std::vector<double> counts(10, 0.0);
  for (auto i : cb.target_index) counts[i] += 1;
  CHECK(chi_square_p(counts, 2000.0) > 0.01);
}
