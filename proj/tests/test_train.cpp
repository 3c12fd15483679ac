#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <numeric>

#include <boost/math/distributions/chi_squared.hpp>

#include "popmeta/config.hpp"
#include "popmeta/kernels.hpp"
#include "popmeta/train.hpp"
#include "reinforce_oracle.hpp"

using namespace popmeta;
using ad::NoGradGuard;
using ad::Tape;
using ad::Var;

namespace {

World small_world() {
  WorldSpec s;
  s.attributes = 3;
  s.values = 4;
  return World(s);
}

Model make(AgentKind kind, const World& w, std::uint64_t seed, int hidden = 8, int embed = 4) {
  Rng rng(seed);
  return Model::init(AgentArch::for_world(kind, w, hidden, embed), rng);
}

std::vector<Object> universe(const World& w) {
  std::vector<Object> out;
  for (std::size_t i = 0; i < w.universe_size(); ++i) out.push_back(w.object_at(i));
  return out;
}

TrainConfig tiny_config() {
  TrainConfig c;
  c.attributes = 3;
  c.values = 4;
  c.test_size = 10;
  c.val_size = 10;
  c.dataset_size = 20;
  c.distractors = 3;
  c.hidden = 8;
  c.embed = 4;
  c.batch_size = 8;
  c.meta_batch_size = 4;
  c.buffer_capacity = 2;
  c.n_pretrain = 4;
  c.n_meta = 2;
  c.n_int = 2;
  c.n_sup = 2;
  c.n_finetune = 2;
  c.max_outer = 4;
  c.patience = 10;
  c.population_size = 2;
  c.baseline_rounds = 2;
  c.emecom_steps = 4;
  c.population_steps = 3;
  c.gen_trans_period = 1;
  c.val_episodes = 20;
  c.test_episodes = 20;
  return c;
}

double scalar(const Model& m, const std::function<Var(Tape&, std::span<const Var>)>& f) {
  Tape t;
  NoGradGuard ng(t);
  return f(t, m.params.bind(t, false)).value().item();
}

FlatVector add(FlatVector a, const FlatVector& b, double scale = 1.0) {
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += scale * b[i];
  return a;
}

}  // namespace

// ---------------------------------------------------------------------------
// Losses

TEST_CASE("listener supervised loss on degenerate candidate sets") {
  const World w = small_world();
  const Model l = make(AgentKind::kListener, w, 3);
  const Object t{{1, 2, 3}};
  const std::vector<Message> msgs{w.canonical_describe(t)};
  Rng rng(1);
  auto loss = [&](const CandidateBatch& cb, ListenerSupLoss kind) {
    return scalar(l, [&](Tape&, std::span<const Var> v) { return listener_supervised_loss(l.arch, v, msgs, cb, kind); });
  };

  const CandidateBatch k0 = make_candidates(w, std::vector<Object>{t}, 0, {}, universe(w), rng);
  CHECK(loss(k0, ListenerSupLoss::kProbability) == doctest::Approx(-1.0).epsilon(1e-12));
  CHECK(loss(k0, ListenerSupLoss::kLogProbability) == doctest::Approx(0.0).epsilon(1e-12));

  // Ten identical candidates: whatever the slot, p(target) = 1/10.
  CandidateBatch k9 = make_candidates(w, std::vector<Object>{t}, 9, {}, universe(w), rng);
  for (auto& c : k9.candidates) c = t;
  CHECK(loss(k9, ListenerSupLoss::kProbability) == doctest::Approx(-0.1).epsilon(1e-12));
  CHECK(loss(k9, ListenerSupLoss::kLogProbability) == doctest::Approx(std::log(10.0)).epsilon(1e-12));
}

TEST_CASE("KL to the reference is zero at the reference and shrinks under descent") {
  const World w = small_world();
  const auto objs = universe(w);
  std::vector<GroundingPair> pairs;
  std::vector<Message> msgs;
  for (std::size_t i = 0; i < 8; ++i) {
    pairs.push_back({objs[i * 5], w.canonical_describe(objs[i * 5])});
    msgs.push_back(pairs.back().description);
  }
  Rng rng(2);
  const CandidateBatch cb = make_candidates(w, std::vector<Object>(objs.begin(), objs.begin() + 8), 3, {}, objs, rng);

  const Model sref = make(AgentKind::kSpeaker, w, 5), lref = make(AgentKind::kListener, w, 6);
  auto skl = [&](const Model& m) {
    return scalar(m, [&](Tape&, std::span<const Var> v) { return speaker_kl_to_reference(m.arch, v, sref, pairs); });
  };
  auto lkl = [&](const Model& m) {
    return scalar(m, [&](Tape&, std::span<const Var> v) { return listener_kl_to_reference(m.arch, v, lref, msgs, cb); });
  };
  CHECK(std::abs(skl(sref)) < 1e-12);
  CHECK(std::abs(lkl(lref)) < 1e-12);

  Model s = make(AgentKind::kSpeaker, w, 15), l = make(AgentKind::kListener, w, 16);
  const double s0 = skl(s), l0 = lkl(l);
  CHECK(s0 > 0.0);
  CHECK(l0 > 0.0);
  for (int i = 0; i < 30; ++i) {
    auto gs = plain_gradient(s.params, [&](Tape&, std::span<const Var> v) {
                return speaker_kl_to_reference(s.arch, v, sref, pairs);
              }).grad;
    s.params.set_flat(add(s.params.flat(), gs, -0.5));
    auto gl = plain_gradient(l.params, [&](Tape&, std::span<const Var> v) {
                return listener_kl_to_reference(l.arch, v, lref, msgs, cb);
              }).grad;
    l.params.set_flat(add(l.params.flat(), gl, -0.5));
  }
  CHECK(skl(s) < s0);
  CHECK(lkl(l) < l0);
}

TEST_CASE("supervised training memorises a handful of pairs") {
  const World w = small_world();
  const auto objs = universe(w);
  std::vector<GroundingPair> pairs;
  for (std::size_t i = 0; i < 10; ++i) pairs.push_back({objs[i * 6], w.canonical_describe(objs[i * 6])});
  Trainee s(make(AgentKind::kSpeaker, w, 7, 16, 8), 1e-2);
  std::vector<double> losses;
  for (int i = 0; i < 200; ++i) losses.push_back(supervised_speaker_step(s, pairs));
  auto window = [&](std::size_t from) {
    return std::accumulate(losses.begin() + static_cast<long>(from), losses.begin() + static_cast<long>(from + 50), 0.0) / 50;
  };
  CHECK(window(50) < window(0));
  CHECK(window(100) < window(50));
  CHECK(window(150) < window(100));
  CHECK(window(150) < 0.25 * window(0));
}

TEST_CASE("REINFORCE speaker gradient is unbiased on an enumerable game") {
  const auto g = popmeta::testing::tiny_game(3);
  const auto r = popmeta::testing::reinforce_check(g, 400, 64, 3, 17);
  for (double z : r.z) CHECK(z < 4.0);
}

// ---------------------------------------------------------------------------
// Reservoir

TEST_CASE("reservoir keeps the first items and counts every insert") {
  ReservoirBuffer<int> b(3);
  Rng rng(1);
  for (int i = 0; i < 3; ++i) CHECK(b.insert(i, rng) == static_cast<std::size_t>(i));
  CHECK(b.indices() == std::vector<std::size_t>{0, 1, 2});
  b.insert(3, rng);
  CHECK(b.size() == 3);
  CHECK(b.seen() == 4);
  CHECK_THROWS_AS(ReservoirBuffer<int>(0), std::invalid_argument);
}

TEST_CASE("reservoir retention is uniform over the stream") {
  const std::size_t cap = 8, n = 64, trials = 10000;
  std::vector<double> kept(n, 0.0);
  Rng rng(99);
  for (std::size_t t = 0; t < trials; ++t) {
    ReservoirBuffer<std::size_t> b(cap);
    for (std::size_t i = 0; i < n; ++i) b.insert(i, rng);
    for (const auto& e : b.entries()) kept[e.item] += 1;
  }
  const double expected = static_cast<double>(trials * cap) / static_cast<double>(n);
  double x2 = 0.0;
  for (double k : kept) x2 += (k - expected) * (k - expected) / expected;
  boost::math::chi_squared dist(static_cast<double>(n - 1));
  CHECK(boost::math::cdf(boost::math::complement(dist, x2)) > 0.01);

  // Capacity one: the last of five items survives with probability 1/5.
  std::size_t last = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    ReservoirBuffer<std::size_t> b(1);
    for (std::size_t i = 0; i < 5; ++i) b.insert(i, rng);
    last += b[0] == 4;
  }
  const double p = static_cast<double>(last) / static_cast<double>(trials);
  CHECK(std::abs(p - 0.2) < 3 * std::sqrt(0.2 * 0.8 / static_cast<double>(trials)));
}

// ---------------------------------------------------------------------------
// Meta steps

namespace {

struct MetaFixture {
  World world = small_world();
  std::vector<Object> objs = universe(world);
  std::vector<Object> inner_objs{objs.begin(), objs.begin() + 32};
  std::vector<Object> outer_objs{objs.begin() + 32, objs.end()};
  GameSource inner{&world, inner_objs, 3, {}};
  GameSource outer{&world, outer_objs, 3, {}};
  Model meta_speaker = make(AgentKind::kSpeaker, world, 40);
  Model meta_listener = make(AgentKind::kListener, world, 41);
  Model listener_a = make(AgentKind::kListener, world, 42);
  Model listener_b = make(AgentKind::kListener, world, 43);
  Model speaker_a = make(AgentKind::kSpeaker, world, 44);
  LossOptions loss;
};

MetaStepOptions opts_for(MetaVariant v, double alpha = 0.1) {
  MetaStepOptions o;
  o.variant = v;
  o.alpha = alpha;
  o.batch = 6;
  return o;
}

}  // namespace

TEST_CASE("duplicated partners sum for MAML/FOMAML and average for Reptile") {
  MetaFixture f;
  const Model* one[] = {&f.listener_a};
  const Model* two[] = {&f.listener_a, &f.listener_a};
  for (auto v : {MetaVariant::kMaml, MetaVariant::kFomaml, MetaVariant::kReptile}) {
    const auto o = opts_for(v);
    const auto g1 = meta_speaker_gradient(f.meta_speaker, one, f.inner, f.outer, f.loss, o, 5).grad;
    const auto g2 = meta_speaker_gradient(f.meta_speaker, two, f.inner, f.outer, f.loss, o, 5).grad;
    const double factor = v == MetaVariant::kReptile ? 1.0 : 2.0;
    for (std::size_t i = 0; i < g1.size(); ++i) CHECK(g2[i] == doctest::Approx(factor * g1[i]).epsilon(1e-12));
  }
  const Model* spk[] = {&f.speaker_a, &f.speaker_a};
  const Model* spk1[] = {&f.speaker_a};
  const auto o = opts_for(MetaVariant::kMaml);
  const auto h1 = meta_listener_gradient(f.meta_listener, spk1, f.inner, f.outer, f.loss, o, 8).grad;
  const auto h2 = meta_listener_gradient(f.meta_listener, spk, f.inner, f.outer, f.loss, o, 8).grad;
  for (std::size_t i = 0; i < h1.size(); ++i) CHECK(h2[i] == doctest::Approx(2 * h1[i]).epsilon(1e-12));
}

TEST_CASE("meta gradients against direct reconstructions") {
  MetaFixture f;
  const Model* buf[] = {&f.listener_a};
  const std::uint64_t stream = 77;
  // The batches and sampling streams a member uses.
  Rng rng = Rng::substream(stream, 0);
  const CandidateBatch cbi = f.inner.sample(6, rng);
  const CandidateBatch cbo = f.outer.sample(6, rng);
  auto outer_grad_at = [&](const ParameterStore& p) {
    Rng ro = Rng::substream(stream, 2);
    return plain_gradient(p, [&](Tape& tape, std::span<const Var> v) {
             const auto q = f.listener_a.params.bind(tape, false);
             return game_losses(f.meta_speaker.arch, v, f.listener_a.arch, q, cbo, f.loss, ro).speaker;
           }).grad;
  };

  SUBCASE("alpha = 0: MAML, FOMAML and the plain outer gradient coincide") {
    const auto maml = meta_speaker_gradient(f.meta_speaker, buf, f.inner, f.outer, f.loss, opts_for(MetaVariant::kMaml, 0.0), stream).grad;
    const auto fo = meta_speaker_gradient(f.meta_speaker, buf, f.inner, f.outer, f.loss, opts_for(MetaVariant::kFomaml, 0.0), stream).grad;
    const auto plain = outer_grad_at(f.meta_speaker.params);
    CHECK(maml == fo);
    for (std::size_t i = 0; i < plain.size(); ++i) CHECK(maml[i] == doctest::Approx(plain[i]).epsilon(1e-12));
  }

  SUBCASE("FOMAML is the outer gradient at the adapted parameters") {
    const double alpha = 0.1;
    Rng ri = Rng::substream(stream, 1);
    const auto gi = plain_gradient(f.meta_speaker.params, [&](Tape& tape, std::span<const Var> v) {
                      const auto q = f.listener_a.params.bind(tape, false);
                      return game_losses(f.meta_speaker.arch, v, f.listener_a.arch, q, cbi, f.loss, ri).speaker;
                    }).grad;
    ParameterStore adapted = f.meta_speaker.params;
    adapted.set_flat(add(adapted.flat(), gi, -alpha));
    const auto expected = outer_grad_at(adapted);
    const auto fo = meta_speaker_gradient(f.meta_speaker, buf, f.inner, f.outer, f.loss, opts_for(MetaVariant::kFomaml, alpha), stream).grad;
    for (std::size_t i = 0; i < fo.size(); ++i) CHECK(fo[i] == doctest::Approx(expected[i]).epsilon(1e-10));
  }
}

TEST_CASE("parallel meta gradients equal serial ones") {
  MetaFixture f;
  const Model* buf[] = {&f.listener_a, &f.listener_b, &f.listener_a};
  kernels::set_num_threads(2);
  for (auto v : {MetaVariant::kMaml, MetaVariant::kReptile}) {
    auto serial = opts_for(v), parallel = opts_for(v);
    parallel.parallel = true;
    CHECK(meta_speaker_gradient(f.meta_speaker, buf, f.inner, f.outer, f.loss, serial, 3).grad ==
          meta_speaker_gradient(f.meta_speaker, buf, f.inner, f.outer, f.loss, parallel, 3).grad);
  }
  kernels::set_num_threads(1);
}

TEST_CASE("meta step on an empty buffer throws") {
  MetaFixture f;
  Trainee t(f.meta_speaker, 1e-3);
  std::vector<const Model*> none;
  CHECK_THROWS_AS(meta_speaker_step(t, none, f.inner, f.outer, f.loss, opts_for(MetaVariant::kMaml), 1),
                  std::invalid_argument);
}

// ---------------------------------------------------------------------------
// Runs

TEST_CASE("runs are deterministic and independent of the thread count") {
  TrainConfig c = tiny_config();
  const Experiment ex(c);
  const RunResult a = run_method(ex, "ours", Ablation::kNone);
  const RunResult b = run_method(ex, "ours", Ablation::kNone);
  CHECK(a.speaker.params == b.speaker.params);
  CHECK(a.listener.params == b.listener.params);
  CHECK(a.history.rows == b.history.rows);
  CHECK(a.history.rows.size() == static_cast<std::size_t>(c.max_outer));
  for (std::size_t i = 0; i < a.history.rows.size(); ++i) CHECK(a.history.at(i, "iteration") == static_cast<double>(i + 1));

  c.threads = 2;
  const RunResult p = run_method(Experiment(c), "ours", Ablation::kNone);
  CHECK(p.speaker.params == a.speaker.params);
  CHECK(p.listener.params == a.listener.params);
  kernels::set_num_threads(1);
}

TEST_CASE("without meta steps or fine-tuning the meta pair is the pretrained pair") {
  TrainConfig c = tiny_config();
  c.n_meta = 0;
  c.n_finetune = 0;
  const RunResult r = run_method(Experiment(c), "ours", Ablation::kNone);
  CHECK(r.speaker.params == r.pretrained_speaker->params);
  CHECK(r.listener.params == r.pretrained_listener->params);
}

TEST_CASE("ablations") {
  TrainConfig c = tiny_config();
  const Experiment ex(c);
  const RunResult reset = run_method(ex, "ours", Ablation::kNoAdaptiveMetaI);
  REQUIRE(reset.meta_reset_hashes.size() >= 2);
  for (auto h : reset.meta_reset_hashes) CHECK(h == reset.meta_reset_hashes.front());
  const RunResult normal = run_method(ex, "ours", Ablation::kNone);
  CHECK(normal.meta_reset_hashes.back() != normal.meta_reset_hashes.front());

  c.n_pretrain = 0;
  CHECK_THROWS_AS(run_method(Experiment(c), "ours", Ablation::kKlGrounding), std::invalid_argument);
  CHECK_THROWS_AS(run_method(ex, "emecom", Ablation::kNoMetaAgents), std::invalid_argument);
  CHECK_THROWS_AS(parse_ablation("bogus"), std::invalid_argument);
}

TEST_CASE("baselines") {
  TrainConfig c = tiny_config();
  const Experiment ex(c);
  const RunResult e = run_method(ex, "emecom", Ablation::kNone);
  for (const auto& col : e.history.columns) CHECK(col.rfind("sup_", 0) != 0);
  CHECK_FALSE(e.pretrained_speaker.has_value());
  CHECK_THROWS(run_baseline(ex, "nonsense"));

  c.population_size = 1;
  const RunResult l2c = run_method(Experiment(c), "l2c", Ablation::kNone);
  CHECK(l2c.history.rows.size() == static_cast<std::size_t>(c.max_outer));
  CHECK(l2c.speaker_snapshots.size() == 1);
  for (const char* m : {"pretrained", "s2p", "gentrans"}) CHECK_NOTHROW(run_method(ex, m, Ablation::kNone));
}

// ---------------------------------------------------------------------------
// Config

TEST_CASE("config text round trip and hashing") {
  TrainConfig c;
  c.lambda_s = 0.25;
  c.meta_variant = "reptile";
  const TrainConfig back = TrainConfig::parse_text(c.to_text());
  CHECK(back.to_map() == c.to_map());
  CHECK(back.hash() == c.hash());
  TrainConfig d = c;
  d.seed = 2;
  CHECK(d.hash() != c.hash());
}

TEST_CASE("config rejects bad input") {
  TrainConfig c;
  CHECK_THROWS_WITH(c.set("no_such_key", "1"), doctest::Contains("lambda_hs"));
  CHECK_THROWS(c.set("batch_size", "many"));
  CHECK_THROWS(TrainConfig::parse_text("[train]\nlambda_s = -1\n"));
  CHECK_THROWS(TrainConfig::parse_text("[train]\nmeta_variant = sgd\n"));
  CHECK_THROWS_AS(TrainConfig::load("/nonexistent/popmeta.toml"), std::invalid_argument);
  c.set("inner_lr", "0.5");
  CHECK(c.inner_lr == 0.5);
}
