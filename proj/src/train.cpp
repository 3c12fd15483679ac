#include "popmeta/train.hpp"

#include "popmeta/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace popmeta {

using namespace ad;

namespace {

double sign_of(SignConvention c) { return c == SignConvention::kRegularizer ? -1.0 : 1.0; }

Tape& tape_of(std::span<const Var> params) {
  if (params.empty() || params[0].tape == nullptr) throw std::invalid_argument("unbound parameters");
  return *params[0].tape;
}

void check_finite(double v, const char* what) {
  if (!std::isfinite(v)) throw NumericalAbort(std::string("non-finite ") + what);
}

// Mean over the batch of per-sequence averages of `steps` (each B x 1).
Var masked_sequence_mean(Tape& tape, const std::vector<Var>& steps, const std::vector<Tensor>& masks,
                         std::span<const double> lengths, std::span<const double> weights) {
  const std::size_t batch = lengths.size();
  Var total = tape.scalar(0.0);
  for (std::size_t j = 0; j < steps.size(); ++j) {
    Tensor coef(batch, 1);
    for (std::size_t b = 0; b < batch; ++b) {
      if (lengths[b] > 0) coef[b] = masks[j][b] * weights[b] / (lengths[b] * static_cast<double>(batch));
    }
    total = add(total, sum(mul(steps[j], tape.constant(std::move(coef)))));
  }
  return total;
}

}  // namespace

LossOptions LossOptions::from_config(const TrainConfig& c) {
  LossOptions o;
  o.lambda_hs = c.lambda_hs;
  o.lambda_hl = c.lambda_hl;
  o.lambda_s = c.lambda_s;
  o.entropy_sign = c.entropy_sign == "literal" ? SignConvention::kLiteral : SignConvention::kRegularizer;
  o.supervised_sign =
      c.supervised_term_sign == "literal" ? SignConvention::kLiteral : SignConvention::kRegularizer;
  o.sup_loss = c.listener_loss();
  o.reward_baseline = c.reinforce_baseline;
  return o;
}

Var speaker_supervised_loss(const AgentArch& arch, std::span<const Var> params,
                            std::span<const GroundingPair> batch) {
  if (batch.empty()) throw std::invalid_argument("supervised speaker loss: empty batch");
  Tape& tape = tape_of(params);
  std::vector<Object> targets;
  std::vector<Message> messages;
  for (const auto& p : batch) {
    targets.push_back(p.object);
    messages.push_back(p.description);
  }
  auto r = speaker_teacher_forced(arch, params, targets, messages);
  const std::vector<double> weights(batch.size(), -1.0);
  return masked_sequence_mean(tape, r.step_logp, r.step_mask, r.lengths, weights);
}

Var listener_supervised_loss(const AgentArch& arch, std::span<const Var> params,
                             std::span<const Message> messages, const CandidateBatch& cb,
                             ListenerSupLoss kind) {
  if (messages.empty()) throw std::invalid_argument("supervised listener loss: empty batch");
  Var lp = listener_log_probs(arch, params, messages, cb.candidates, cb.per_episode);
  Var target = pick(lp, make_indices(cb.target_index));
  const double inv = -1.0 / static_cast<double>(messages.size());
  if (kind == ListenerSupLoss::kLogProbability) return scale(sum(target), inv);
  return scale(sum(exp(target)), inv);
}

GameLosses game_losses(const AgentArch& speaker_arch, std::span<const Var> speaker,
                       const AgentArch& listener_arch, std::span<const Var> listener,
                       const CandidateBatch& cb, const LossOptions& opts, Rng& rng) {
  Tape& tape = tape_of(speaker);
  const std::size_t batch = cb.size();
  if (batch == 0) throw std::invalid_argument("game_losses: empty batch");
  auto ro = speaker_rollout(speaker_arch, speaker, cb.targets, DecodeMode::kSample, &rng);
  Var lp = listener_log_probs(listener_arch, listener, ro.messages, cb.candidates, cb.per_episode);

  GameLosses out;
  std::vector<std::size_t> chosen(batch);
  out.rewards.resize(batch);
  std::size_t hits = 0;
  for (std::size_t b = 0; b < batch; ++b) {
    std::vector<double> p(cb.per_episode);
    for (std::size_t c = 0; c < cb.per_episode; ++c) p[c] = std::exp(lp.value()(b, c));
    chosen[b] = rng.categorical(p);
    out.rewards[b] = reward_for(chosen[b], cb.target_index[b]);
    hits += chosen[b] == cb.target_index[b];
    out.mean_reward += out.rewards[b];
  }
  out.mean_reward /= static_cast<double>(batch);
  out.accuracy = static_cast<double>(hits) / static_cast<double>(batch);

  std::vector<double> adv = out.rewards;
  if (opts.reward_baseline) {
    for (double& a : adv) a -= out.mean_reward;
  }

  // Speaker: -(r/l) sum_j log p(m_j) -/+ lambda_hs H_S
  std::vector<double> neg_adv(batch);
  for (std::size_t b = 0; b < batch; ++b) neg_adv[b] = -adv[b];
  Var pg = masked_sequence_mean(tape, ro.step_logp, ro.step_mask, ro.lengths, neg_adv);
  const std::vector<double> ones(batch, 1.0);
  Var hs = masked_sequence_mean(tape, ro.step_entropy, ro.step_mask, ro.lengths, ones);
  out.speaker = add(pg, scale(hs, sign_of(opts.entropy_sign) * opts.lambda_hs));

  // Listener: -r log p(t') -/+ lambda_s log p(t) -/+ lambda_hl H_L
  const double inv = 1.0 / static_cast<double>(batch);
  Tensor coef(batch, 1);
  for (std::size_t b = 0; b < batch; ++b) coef[b] = -adv[b] * inv;
  Var pg_l = sum(mul(pick(lp, make_indices(chosen)), tape.constant(std::move(coef))));
  Var sup = scale(sum(pick(lp, make_indices(cb.target_index))), inv);
  Var hl = scale(sum(row_entropy(lp)), inv);
  out.listener = add(add(pg_l, scale(sup, sign_of(opts.supervised_sign) * opts.lambda_s)),
                     scale(hl, sign_of(opts.entropy_sign) * opts.lambda_hl));
  return out;
}

Var speaker_kl_to_reference(const AgentArch& arch, std::span<const Var> params,
                            const Model& reference, std::span<const GroundingPair> batch) {
  if (batch.empty()) throw std::invalid_argument("KL: empty batch");
  Tape& tape = tape_of(params);
  std::vector<Object> targets;
  std::vector<Message> messages;
  for (const auto& p : batch) {
    targets.push_back(p.object);
    messages.push_back(p.description);
  }
  std::vector<Tensor> ref;
  {
    Tape rt;
    NoGradGuard guard(rt);
    auto rv = reference.params.bind(rt, false);
    auto rr = speaker_teacher_forced(reference.arch, rv, targets, messages);
    for (const auto& v : rr.step_log_dist) ref.push_back(v.value());
  }
  auto cur = speaker_teacher_forced(arch, params, targets, messages);
  double tokens = 0.0;
  for (double l : cur.lengths) tokens += l;
  Var total = tape.scalar(0.0);
  double constant = 0.0;
  for (std::size_t j = 0; j < cur.step_log_dist.size(); ++j) {
    Tensor w(ref[j].rows(), ref[j].cols());
    for (std::size_t b = 0; b < w.rows(); ++b) {
      const double m = cur.step_mask[j][b];
      if (m == 0.0) continue;
      for (std::size_t c = 0; c < w.cols(); ++c) {
        const double p = std::exp(ref[j](b, c));
        w(b, c) = -p / tokens;
        constant += p * ref[j](b, c) / tokens;
      }
    }
    total = add(total, sum(mul(cur.step_log_dist[j], tape.constant(std::move(w)))));
  }
  return add_scalar(total, constant);
}

Var listener_kl_to_reference(const AgentArch& arch, std::span<const Var> params,
                             const Model& reference, std::span<const Message> messages,
                             const CandidateBatch& cb) {
  if (messages.empty()) throw std::invalid_argument("KL: empty batch");
  Tape& tape = tape_of(params);
  Tensor ref;
  {
    Tape rt;
    NoGradGuard guard(rt);
    auto rv = reference.params.bind(rt, false);
    ref = listener_log_probs(reference.arch, rv, messages, cb.candidates, cb.per_episode).value();
  }
  Var cur = listener_log_probs(arch, params, messages, cb.candidates, cb.per_episode);
  const double inv = 1.0 / static_cast<double>(messages.size());
  Tensor w(ref.rows(), ref.cols());
  double constant = 0.0;
  for (std::size_t i = 0; i < ref.size(); ++i) {
    const double p = std::exp(ref[i]);
    w[i] = -p * inv;
    constant += p * ref[i] * inv;
  }
  return add_scalar(sum(mul(cur, tape.constant(std::move(w)))), constant);
}

// ---------------------------------------------------------------------------

CandidateBatch GameSource::sample(std::size_t batch, Rng& rng) const {
  return sample_game(*world, objects, batch, k, spec, rng);
}

std::vector<GroundingPair> sample_pairs(const GroundingDataset& d, std::size_t size, Rng& rng) {
  if (d.pairs.empty()) throw std::invalid_argument("empty grounding dataset");
  std::vector<GroundingPair> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) out.push_back(d.pairs[rng.below(d.pairs.size())]);
  return out;
}

double supervised_speaker_step(Trainee& speaker, std::span<const GroundingPair> batch) {
  Tape tape;
  auto vars = speaker.model.params.bind(tape);
  Var loss = speaker_supervised_loss(speaker.model.arch, vars, batch);
  check_finite(loss.value().item(), "supervised speaker loss");
  auto g = ParameterStore::flatten(tape.gradients(loss, vars));
  adam_step(speaker.model.params, g, speaker.opt);
  return loss.value().item();
}

double supervised_listener_step(Trainee& listener, std::span<const GroundingPair> batch,
                                const GameSource& pool, ListenerSupLoss kind, Rng& rng) {
  if (batch.empty()) throw std::invalid_argument("supervised listener step: empty batch");
  std::vector<Object> targets;
  std::vector<Message> messages;
  for (const auto& p : batch) {
    targets.push_back(p.object);
    messages.push_back(p.description);
  }
  auto cb = make_candidates(*pool.world, targets, pool.k, pool.spec, pool.objects, rng);
  Tape tape;
  auto vars = listener.model.params.bind(tape);
  Var loss = listener_supervised_loss(listener.model.arch, vars, messages, cb, kind);
  check_finite(loss.value().item(), "supervised listener loss");
  auto g = ParameterStore::flatten(tape.gradients(loss, vars));
  adam_step(listener.model.params, g, listener.opt);
  return loss.value().item();
}

InteractiveStats interactive_step(Model& speaker, AdamState* speaker_opt, Model& listener,
                                  AdamState* listener_opt, const GameSource& games,
                                  std::size_t batch, const LossOptions& opts, Rng& rng,
                                  const KlAnchor* anchor) {
  auto cb = games.sample(batch, rng);
  Tape tape;
  auto sv = speaker.params.bind(tape, speaker_opt != nullptr);
  auto lv = listener.params.bind(tape, listener_opt != nullptr);
  GameLosses gl = game_losses(speaker.arch, sv, listener.arch, lv, cb, opts, rng);
  Var sl = gl.speaker;
  Var ll = gl.listener;
  if (anchor != nullptr) {
    auto pairs = sample_pairs(*anchor->dataset, anchor->batch, rng);
    if (speaker_opt != nullptr) {
      if (anchor->speaker_reference == nullptr) throw std::invalid_argument("KL anchor without a speaker reference");
      sl = add(scale(sl, anchor->lambda_int),
               speaker_kl_to_reference(speaker.arch, sv, *anchor->speaker_reference, pairs));
    }
    if (listener_opt != nullptr) {
      if (anchor->listener_reference == nullptr) throw std::invalid_argument("KL anchor without a listener reference");
      std::vector<Object> targets;
      std::vector<Message> messages;
      for (const auto& p : pairs) {
        targets.push_back(p.object);
        messages.push_back(p.description);
      }
      auto kcb = make_candidates(*games.world, targets, games.k, games.spec, games.objects, rng);
      ll = add(scale(ll, anchor->lambda_int),
               listener_kl_to_reference(listener.arch, lv, *anchor->listener_reference, messages, kcb));
    }
  }
  InteractiveStats st;
  st.speaker_loss = sl.value().item();
  st.listener_loss = ll.value().item();
  st.reward = gl.mean_reward;
  st.accuracy = gl.accuracy;
  if (speaker_opt != nullptr) {
    check_finite(st.speaker_loss, "interactive speaker loss");
    auto g = ParameterStore::flatten(tape.gradients(sl, sv));
    adam_step(speaker.params, g, *speaker_opt);
  }
  if (listener_opt != nullptr) {
    check_finite(st.listener_loss, "interactive listener loss");
    auto g = ParameterStore::flatten(tape.gradients(ll, lv));
    adam_step(listener.params, g, *listener_opt);
  }
  return st;
}

// ---------------------------------------------------------------------------
// Meta steps

namespace {

enum class MetaSide { kSpeaker, kListener };

MetaGrad member_gradient(MetaSide side, const Model& meta, const Model& partner,
                         const GameSource& inner, const GameSource& outer, const LossOptions& loss,
                         const MetaStepOptions& opts, std::uint64_t stream) {
  // Every member sees the same t^i, t^o and the same sampling streams.
  Rng rng = Rng::substream(stream, 0);
  const CandidateBatch cbi = inner.sample(opts.batch, rng);
  const CandidateBatch cbo = outer.sample(opts.batch, rng);
  Rng ri = Rng::substream(stream, 1);
  Rng ro = Rng::substream(stream, 2);
  auto make = [&](const CandidateBatch& cb, Rng& r) -> LossFn {
    return [&, side](Tape& tape, std::span<const Var> p) {
      auto q = partner.params.bind(tape, false);
      if (side == MetaSide::kSpeaker) {
        return game_losses(meta.arch, p, partner.arch, q, cb, loss, r).speaker;
      }
      return game_losses(partner.arch, q, meta.arch, p, cb, loss, r).listener;
    };
  };
  const LossFn fi = make(cbi, ri);
  const LossFn fo = make(cbo, ro);
  if (opts.variant == MetaVariant::kReptile) {
    const LossFn fs[] = {fi, fo};
    return reptile_direction(meta.params, fs, opts.alpha);
  }
  return grad_through_update(meta.params, fi, fo, opts.alpha, opts.variant == MetaVariant::kFomaml);
}

MetaGrad meta_gradient(MetaSide side, const Model& meta, std::span<const Model* const> partners,
                       const GameSource& inner, const GameSource& outer, const LossOptions& loss,
                       const MetaStepOptions& opts, std::uint64_t stream) {
  if (partners.empty()) throw std::invalid_argument("meta step: empty partner buffer");
  const std::size_t n = partners.size();
  std::vector<MetaGrad> parts(n);
  std::exception_ptr error;
#pragma omp parallel for schedule(dynamic) if (opts.parallel && n > 1)
  for (std::size_t i = 0; i < n; ++i) {
    try {
      parts[i] = member_gradient(side, meta, *partners[i], inner, outer, loss, opts, stream);
    } catch (...) {
#pragma omp critical(popmeta_meta_error)
      if (!error) error = std::current_exception();
    }
  }
  if (error) std::rethrow_exception(error);

  // Fixed buffer-order summation keeps the result thread-count independent.
  MetaGrad out;
  out.grad.assign(parts[0].grad.size(), 0.0);
  for (const auto& p : parts) {
    for (std::size_t k = 0; k < out.grad.size(); ++k) out.grad[k] += p.grad[k];
    out.inner_loss += p.inner_loss;
    out.outer_loss += p.outer_loss;
  }
  if (opts.variant == MetaVariant::kReptile) {
    for (double& g : out.grad) g /= static_cast<double>(n);
  }
  return out;
}

MetaStepStats apply_meta(Trainee& meta, const MetaGrad& g) {
  check_finite(g.outer_loss, "meta outer loss");
  for (double v : g.grad) check_finite(v, "meta gradient");
  adam_step(meta.model.params, g.grad, meta.opt);
  return {g.inner_loss, g.outer_loss};
}

}  // namespace

MetaGrad meta_speaker_gradient(const Model& meta, std::span<const Model* const> listeners,
                               const GameSource& inner, const GameSource& outer,
                               const LossOptions& loss, const MetaStepOptions& opts,
                               std::uint64_t stream) {
  return meta_gradient(MetaSide::kSpeaker, meta, listeners, inner, outer, loss, opts, stream);
}

MetaGrad meta_listener_gradient(const Model& meta, std::span<const Model* const> speakers,
                                const GameSource& inner, const GameSource& outer,
                                const LossOptions& loss, const MetaStepOptions& opts,
                                std::uint64_t stream) {
  return meta_gradient(MetaSide::kListener, meta, speakers, inner, outer, loss, opts, stream);
}

MetaStepStats meta_speaker_step(Trainee& meta, std::span<const Model* const> listeners,
                                const GameSource& inner, const GameSource& outer,
                                const LossOptions& loss, const MetaStepOptions& opts,
                                std::uint64_t stream) {
  return apply_meta(meta, meta_speaker_gradient(meta.model, listeners, inner, outer, loss, opts, stream));
}

MetaStepStats meta_listener_step(Trainee& meta, std::span<const Model* const> speakers,
                                 const GameSource& inner, const GameSource& outer,
                                 const LossOptions& loss, const MetaStepOptions& opts,
                                 std::uint64_t stream) {
  return apply_meta(meta, meta_listener_gradient(meta.model, speakers, inner, outer, loss, opts, stream));
}

// ---------------------------------------------------------------------------
// Experiment plumbing

Experiment::Experiment(const TrainConfig& c) : config(c), world(c.world_spec()) {
  config.validate();
  Rng rng = Rng::substream(c.data_seed, 0xda7a);
  split = make_split(world, static_cast<std::size_t>(c.test_size), static_cast<std::size_t>(c.val_size),
                     static_cast<std::size_t>(c.train_size), rng);
  dataset = build_dataset(world, split.train, static_cast<std::size_t>(c.dataset_size), rng);
}

AgentArch Experiment::speaker_arch() const {
  return AgentArch::for_world(AgentKind::kSpeaker, world, config.hidden, config.embed);
}

AgentArch Experiment::listener_arch() const {
  return AgentArch::for_world(AgentKind::kListener, world, config.hidden, config.embed);
}

GameSource Experiment::games(std::span<const Object> objects) const {
  GameSource g;
  g.world = &world;
  g.objects = objects;
  g.k = static_cast<std::size_t>(config.distractors);
  g.spec = config.distractor_spec();
  return g;
}

GameSource Experiment::train_games() const { return games(split.train); }

void MetricsTable::add_row(std::vector<double> row) {
  if (row.size() != columns.size()) throw std::logic_error("metrics row width mismatch");
  rows.push_back(std::move(row));
}

bool MetricsTable::has_column(const std::string& column) const {
  return std::find(columns.begin(), columns.end(), column) != columns.end();
}

double MetricsTable::at(std::size_t row, const std::string& column) const {
  const auto it = std::find(columns.begin(), columns.end(), column);
  if (it == columns.end()) throw std::out_of_range("no metrics column '" + column + "'");
  return rows.at(row)[static_cast<std::size_t>(it - columns.begin())];
}

Ablation parse_ablation(const std::string& name) {
  if (name.empty() || name == "none") return Ablation::kNone;
  if (name == "no_meta_agents") return Ablation::kNoMetaAgents;
  if (name == "no_adaptive_meta_i") return Ablation::kNoAdaptiveMetaI;
  if (name == "no_adaptive_meta_ii") return Ablation::kNoAdaptiveMetaII;
  if (name == "kl_grounding") return Ablation::kKlGrounding;
  throw std::invalid_argument("unknown ablation '" + name +
                              "' (expected no_meta_agents|no_adaptive_meta_i|no_adaptive_meta_ii|kl_grounding)");
}

const char* to_string(Ablation a) {
  switch (a) {
    case Ablation::kNone: return "none";
    case Ablation::kNoMetaAgents: return "no_meta_agents";
    case Ablation::kNoAdaptiveMetaI: return "no_adaptive_meta_i";
    case Ablation::kNoAdaptiveMetaII: return "no_adaptive_meta_ii";
    case Ablation::kKlGrounding: return "kl_grounding";
  }
  return "?";
}

double pair_accuracy(const Experiment& ex, const Model& speaker, const Model& listener,
                     std::span<const Object> objects, std::size_t episodes, std::uint64_t stream) {
  Rng rng = Rng::substream(stream, 0xacc);
  const GameSource g = ex.games(objects);
  const std::size_t chunk = 500;
  std::size_t hits = 0;
  for (std::size_t done = 0; done < episodes; done += chunk) {
    auto cb = g.sample(std::min(chunk, episodes - done), rng);
    auto messages = speak(speaker, cb.targets, DecodeMode::kGreedy, nullptr);
    Tensor p = listen_batch(listener, messages, cb.candidates, cb.per_episode);
    for (std::size_t b = 0; b < cb.size(); ++b) {
      hits += argmax(std::span<const double>(p.row(b), cb.per_episode)) == cb.target_index[b];
    }
  }
  return static_cast<double>(hits) / static_cast<double>(episodes);
}

// ---------------------------------------------------------------------------
// Runs

namespace {

// Substream ids; every random decision of a run hangs off config.seed.
enum Stream : std::uint64_t {
  kInitSpeaker = 1,
  kInitListener = 2,
  kInitMetaSpeaker = 3,
  kInitMetaListener = 4,
  kPretrain = 5,
  kLoop = 6,
  kFinetune = 7,
  kValidation = 8,
  kPopulation = 100,
};

std::uint64_t sub(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return Rng::substream(seed, a, b).next();
}

Model fresh(const Experiment& ex, AgentKind kind, std::uint64_t stream) {
  Rng rng(stream);
  return Model::init(kind == AgentKind::kSpeaker ? ex.speaker_arch() : ex.listener_arch(), rng);
}

struct Supervisor {
  const Experiment& ex;
  LossOptions loss;
  GameSource pool;

  explicit Supervisor(const Experiment& e)
      : ex(e), loss(LossOptions::from_config(e.config)), pool(e.train_games()) {}

  std::pair<double, double> step(Trainee* s, Trainee* l, Rng& rng) const {
    const auto bs = static_cast<std::size_t>(ex.config.batch_size);
    double ls = 0.0, ll = 0.0;
    if (s != nullptr) ls = supervised_speaker_step(*s, sample_pairs(ex.dataset, bs, rng));
    if (l != nullptr) {
      ll = supervised_listener_step(*l, sample_pairs(ex.dataset, bs, rng), pool, loss.sup_loss, rng);
    }
    return {ls, ll};
  }

  double validate(const Model& s, const Model& l) const {
    return pair_accuracy(ex, s, l, ex.split.validation, static_cast<std::size_t>(ex.config.val_episodes),
                         sub(ex.config.seed, kValidation));
  }
};

void say(const ProgressFn& progress, const std::string& msg) {
  if (progress) progress(msg);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

// Supervised fine-tuning of a pair with fresh optimizers.
void finetune(const Experiment& ex, Model& s, Model& l, std::uint64_t stream) {
  Supervisor sup(ex);
  Trainee ts(s, ex.config.lr), tl(l, ex.config.lr);
  Rng rng(stream);
  for (int i = 0; i < ex.config.n_finetune; ++i) sup.step(&ts, &tl, rng);
  s = std::move(ts.model);
  l = std::move(tl.model);
}

MetaStepOptions meta_options(const TrainConfig& c) {
  MetaStepOptions o;
  o.variant = c.variant();
  o.alpha = c.inner_lr;
  o.batch = static_cast<std::size_t>(c.meta_batch_size);
  o.parallel = c.threads > 1;
  return o;
}

}  // namespace

std::pair<Model, Model> pretrain_pair(const Experiment& ex, std::uint64_t init_stream,
                                      MetricsTable* history) {
  const auto& c = ex.config;
  Supervisor sup(ex);
  Trainee s(fresh(ex, AgentKind::kSpeaker, sub(init_stream, kInitSpeaker)), c.lr);
  Trainee l(fresh(ex, AgentKind::kListener, sub(init_stream, kInitListener)), c.lr);
  Rng rng(sub(init_stream, kPretrain));
  if (history != nullptr) history->columns = {"step", "sup_speaker_loss", "sup_listener_loss", "val_accuracy"};
  const int every = std::max(1, c.n_pretrain / 10);
  for (int i = 1; i <= c.n_pretrain; ++i) {
    auto [ls, ll] = sup.step(&s, &l, rng);
    if (history != nullptr && (i % every == 0 || i == c.n_pretrain)) {
      history->add_row({static_cast<double>(i), ls, ll, sup.validate(s.model, l.model)});
    }
  }
  return {std::move(s.model), std::move(l.model)};
}

RunResult run_algorithm1(const Experiment& ex, Ablation ablation, const ProgressFn& progress) {
  const auto& c = ex.config;
  if (ablation == Ablation::kKlGrounding && c.n_pretrain == 0) {
    throw std::invalid_argument("kl_grounding needs a pretrained checkpoint (n_pretrain > 0)");
  }
  const LossOptions loss = LossOptions::from_config(c);
  const MetaStepOptions mopts = meta_options(c);
  const auto batch = static_cast<std::size_t>(c.batch_size);
  const bool random_partner = ablation == Ablation::kNoMetaAgents || ablation == Ablation::kNoAdaptiveMetaII;
  const bool reset_meta = ablation == Ablation::kNoAdaptiveMetaI || ablation == Ablation::kNoAdaptiveMetaII;
  const bool kl = ablation == Ablation::kKlGrounding;
  Supervisor sup(ex);

  RunResult res;
  res.method = ablation == Ablation::kNone ? "ours" : to_string(ablation);
  auto [s1, l1] = pretrain_pair(ex, c.seed);
  res.pretrained_speaker = s1;
  res.pretrained_listener = l1;
  say(progress, "pretrained pair: val accuracy " + fmt(sup.validate(s1, l1)));

  auto meta_init = [&](AgentKind kind) {
    if (c.meta_init == "pretrained") return kind == AgentKind::kSpeaker ? s1 : l1;
    return fresh(ex, kind, sub(c.seed, kind == AgentKind::kSpeaker ? kInitMetaSpeaker : kInitMetaListener));
  };
  Trainee ms(meta_init(AgentKind::kSpeaker), c.outer_lr);
  Trainee ml(meta_init(AgentKind::kListener), c.outer_lr);
  Trainee spk(s1, c.lr), lis(l1, c.lr);
  ReservoirBuffer<std::size_t> bs(static_cast<std::size_t>(c.buffer_capacity));
  ReservoirBuffer<std::size_t> bl(static_cast<std::size_t>(c.buffer_capacity));
  Rng rng(sub(c.seed, kLoop));

  KlAnchor anchor;
  anchor.speaker_reference = &*res.pretrained_speaker;
  anchor.listener_reference = &*res.pretrained_listener;
  anchor.dataset = &ex.dataset;
  anchor.lambda_int = c.lambda_int;
  anchor.batch = batch;

  res.history.columns = {"iteration",         "meta_speaker_inner", "meta_speaker_outer",
                         "meta_listener_inner", "meta_listener_outer", "int_speaker_loss",
                         "int_listener_loss", "int_reward",         "sup_speaker_loss",
                         "sup_listener_loss", "val_accuracy",       "buffer_speakers",
                         "buffer_listeners",  "buffer_seen"};
  double best = -1.0;
  int stale = 0;
  for (int it = 1; it <= c.max_outer; ++it) {
    // Buffer insert.
    res.speaker_snapshots.push_back(spk.model);
    res.listener_snapshots.push_back(lis.model);
    bs.insert(res.speaker_snapshots.size() - 1, rng);
    bl.insert(res.listener_snapshots.size() - 1, rng);
    res.speaker_buffer_history.push_back(bs.indices());
    res.listener_buffer_history.push_back(bl.indices());
    std::vector<const Model*> speakers, listeners;
    for (const auto& e : bs.entries()) speakers.push_back(&res.speaker_snapshots[e.item]);
    for (const auto& e : bl.entries()) listeners.push_back(&res.listener_snapshots[e.item]);

    // Meta phase.
    if (reset_meta) {
      ms = Trainee(meta_init(AgentKind::kSpeaker), c.outer_lr);
      ml = Trainee(meta_init(AgentKind::kListener), c.outer_lr);
    }
    res.meta_reset_hashes.push_back(ms.model.params.hash());
    auto [oi, oo] = split_inner_outer(ex.split.train, rng);
    const GameSource gi = ex.games(oi), go = ex.games(oo);
    MetaStepStats mss, msl;
    for (int j = 0; j < c.n_meta; ++j) {
      mss = meta_speaker_step(ms, listeners, gi, go, loss, mopts, rng.next());
      msl = meta_listener_step(ml, speakers, gi, go, loss, mopts, rng.next());
    }

    // Interactive phase: the new agents against the frozen meta-partners.
    const GameSource games = ex.train_games();
    InteractiveStats is, il;
    for (int j = 0; j < c.n_int; ++j) {
      Model& lpartner = random_partner ? const_cast<Model&>(*listeners[rng.below(listeners.size())]) : ml.model;
      is = interactive_step(spk.model, &spk.opt, lpartner, nullptr, games, batch, loss, rng,
                            kl ? &anchor : nullptr);
      Model& spartner = random_partner ? const_cast<Model&>(*speakers[rng.below(speakers.size())]) : ms.model;
      il = interactive_step(spartner, nullptr, lis.model, &lis.opt, games, batch, loss, rng,
                            kl ? &anchor : nullptr);
    }

    // Supervised phase on the new pair.
    std::pair<double, double> sl{0.0, 0.0};
    if (!kl) {
      for (int j = 0; j < c.n_sup; ++j) sl = sup.step(&spk, &lis, rng);
    }

    const double val = sup.validate(ms.model, ml.model);
    res.history.add_row({static_cast<double>(it), mss.inner_loss, mss.outer_loss, msl.inner_loss,
                         msl.outer_loss, is.speaker_loss, il.listener_loss,
                         0.5 * (is.reward + il.reward), sl.first, sl.second, val,
                         static_cast<double>(bs.size()), static_cast<double>(bl.size()),
                         static_cast<double>(bs.seen())});
    say(progress, "iteration " + std::to_string(it) + ": val accuracy " + fmt(val) + ", reward " +
                      fmt(0.5 * (is.reward + il.reward)) + ", buffer " + std::to_string(bs.size()));
    if (val > best + c.min_delta) {
      best = val;
      stale = 0;
    } else if (++stale >= c.patience) {
      break;
    }
  }

  res.speaker = ms.model;
  res.listener = ml.model;
  finetune(ex, res.speaker, res.listener, sub(c.seed, kFinetune));
  res.final_val_accuracy = sup.validate(res.speaker, res.listener);
  say(progress, "fine-tuned meta pair: val accuracy " + fmt(res.final_val_accuracy));
  return res;
}

RunResult run_ablation(const Experiment& ex, Ablation ablation, const ProgressFn& progress) {
  if (ablation == Ablation::kNone) throw std::invalid_argument("run_ablation: no ablation selected");
  return run_algorithm1(ex, ablation, progress);
}

namespace {

// Pure self-play from scratch: both agents learn from the same games.
std::pair<Model, Model> self_play(const Experiment& ex, std::uint64_t stream, int steps,
                                  MetricsTable* history, const ProgressFn& progress) {
  const auto& c = ex.config;
  LossOptions loss = LossOptions::from_config(c);
  loss.reward_baseline = loss.reward_baseline || c.selfplay_baseline;
  Supervisor sup(ex);
  Trainee s(fresh(ex, AgentKind::kSpeaker, sub(stream, kInitSpeaker)), c.selfplay_lr);
  Trainee l(fresh(ex, AgentKind::kListener, sub(stream, kInitListener)), c.selfplay_lr);
  Rng rng(sub(stream, kLoop));
  const GameSource games = ex.train_games();
  const int every = std::max(1, steps / c.baseline_rounds);
  InteractiveStats st;
  for (int i = 1; i <= steps; ++i) {
    st = interactive_step(s.model, &s.opt, l.model, &l.opt, games, static_cast<std::size_t>(c.batch_size),
                          loss, rng);
    if (history != nullptr && (i % every == 0 || i == steps)) {
      const double val = sup.validate(s.model, l.model);
      history->add_row({static_cast<double>(history->rows.size() + 1), static_cast<double>(i),
                        st.speaker_loss, st.listener_loss, st.reward, val});
      say(progress, "step " + std::to_string(i) + ": val accuracy " + fmt(val) + ", reward " + fmt(st.reward));
    }
  }
  return {std::move(s.model), std::move(l.model)};
}

RunResult baseline_pretrained(const Experiment& ex, const ProgressFn& progress) {
  RunResult res;
  res.method = "pretrained";
  auto [s, l] = pretrain_pair(ex, ex.config.seed, &res.history);
  res.speaker = s;
  res.listener = l;
  res.pretrained_speaker = s;
  res.pretrained_listener = l;
  res.final_val_accuracy = Supervisor(ex).validate(s, l);
  say(progress, "pretrained pair: val accuracy " + fmt(res.final_val_accuracy));
  return res;
}

RunResult baseline_emecom(const Experiment& ex, const ProgressFn& progress) {
  RunResult res;
  res.method = "emecom";
  res.history.columns = {"round", "step", "int_speaker_loss", "int_listener_loss", "int_reward", "val_accuracy"};
  auto [s, l] = self_play(ex, ex.config.seed, ex.config.emecom_steps, &res.history, progress);
  res.speaker = std::move(s);
  res.listener = std::move(l);
  res.final_val_accuracy = Supervisor(ex).validate(res.speaker, res.listener);
  return res;
}

RunResult baseline_s2p(const Experiment& ex, const ProgressFn& progress) {
  const auto& c = ex.config;
  const LossOptions loss = LossOptions::from_config(c);
  Supervisor sup(ex);
  RunResult res;
  res.method = "s2p";
  auto [s1, l1] = pretrain_pair(ex, c.seed);
  res.pretrained_speaker = s1;
  res.pretrained_listener = l1;
  Trainee s(s1, c.lr), l(l1, c.lr);
  Rng rng(sub(c.seed, kLoop));
  const GameSource games = ex.train_games();
  res.history.columns = {"round", "int_speaker_loss", "int_listener_loss", "int_reward",
                         "sup_speaker_loss", "sup_listener_loss", "val_accuracy"};
  for (int r = 1; r <= c.baseline_rounds; ++r) {
    InteractiveStats st;
    for (int j = 0; j < c.n_int; ++j) {
      st = interactive_step(s.model, &s.opt, l.model, &l.opt, games, static_cast<std::size_t>(c.batch_size),
                            loss, rng);
    }
    std::pair<double, double> sl;
    for (int j = 0; j < c.n_sup; ++j) sl = sup.step(&s, &l, rng);
    const double val = sup.validate(s.model, l.model);
    res.history.add_row({static_cast<double>(r), st.speaker_loss, st.listener_loss, st.reward, sl.first,
                         sl.second, val});
    say(progress, "round " + std::to_string(r) + ": val accuracy " + fmt(val));
  }
  res.speaker = std::move(s.model);
  res.listener = std::move(l.model);
  res.final_val_accuracy = sup.validate(res.speaker, res.listener);
  return res;
}

RunResult baseline_static_pop(const Experiment& ex, const ProgressFn& progress) {
  const auto& c = ex.config;
  const LossOptions loss = LossOptions::from_config(c);
  const MetaStepOptions mopts = meta_options(c);
  Supervisor sup(ex);
  RunResult res;
  res.method = "l2c";
  auto [s1, l1] = pretrain_pair(ex, c.seed);
  res.pretrained_speaker = s1;
  res.pretrained_listener = l1;

  // Fixed population of independently seeded self-play pairs.
  for (int p = 0; p < c.population_size; ++p) {
    auto [s, l] = self_play(ex, sub(c.seed, kPopulation, static_cast<std::uint64_t>(p)), c.population_steps,
                            nullptr, {});
    say(progress, "population pair " + std::to_string(p) + ": val accuracy " + fmt(sup.validate(s, l)));
    res.speaker_snapshots.push_back(std::move(s));
    res.listener_snapshots.push_back(std::move(l));
  }
  std::vector<const Model*> speakers, listeners;
  std::vector<std::size_t> all;
  for (std::size_t p = 0; p < res.speaker_snapshots.size(); ++p) {
    speakers.push_back(&res.speaker_snapshots[p]);
    listeners.push_back(&res.listener_snapshots[p]);
    all.push_back(p);
  }

  auto meta_init = [&](AgentKind kind) {
    if (c.meta_init == "pretrained") return kind == AgentKind::kSpeaker ? s1 : l1;
    return fresh(ex, kind, sub(c.seed, kind == AgentKind::kSpeaker ? kInitMetaSpeaker : kInitMetaListener));
  };
  Trainee ms(meta_init(AgentKind::kSpeaker), c.outer_lr);
  Trainee ml(meta_init(AgentKind::kListener), c.outer_lr);
  Rng rng(sub(c.seed, kLoop));
  res.history.columns = {"round", "meta_speaker_inner", "meta_speaker_outer", "meta_listener_inner",
                         "meta_listener_outer", "val_accuracy"};
  double best = -1.0;
  int stale = 0;
  for (int r = 1; r <= c.max_outer; ++r) {
    res.speaker_buffer_history.push_back(all);
    res.listener_buffer_history.push_back(all);
    auto [oi, oo] = split_inner_outer(ex.split.train, rng);
    const GameSource gi = ex.games(oi), go = ex.games(oo);
    MetaStepStats mss, msl;
    for (int j = 0; j < c.n_meta; ++j) {
      mss = meta_speaker_step(ms, listeners, gi, go, loss, mopts, rng.next());
      msl = meta_listener_step(ml, speakers, gi, go, loss, mopts, rng.next());
    }
    const double val = sup.validate(ms.model, ml.model);
    res.history.add_row({static_cast<double>(r), mss.inner_loss, mss.outer_loss, msl.inner_loss,
                         msl.outer_loss, val});
    say(progress, "round " + std::to_string(r) + ": val accuracy " + fmt(val));
    if (val > best + c.min_delta) {
      best = val;
      stale = 0;
    } else if (++stale >= c.patience) {
      break;
    }
  }
  res.speaker = ms.model;
  res.listener = ml.model;
  finetune(ex, res.speaker, res.listener, sub(c.seed, kFinetune));
  res.final_val_accuracy = sup.validate(res.speaker, res.listener);
  say(progress, "fine-tuned meta pair: val accuracy " + fmt(res.final_val_accuracy));
  return res;
}

RunResult baseline_gen_trans(const Experiment& ex, const ProgressFn& progress) {
  const auto& c = ex.config;
  const LossOptions loss = LossOptions::from_config(c);
  Supervisor sup(ex);
  RunResult res;
  res.method = "gentrans";
  auto [s1, l1] = pretrain_pair(ex, c.seed);
  res.pretrained_speaker = s1;
  res.pretrained_listener = l1;
  const auto n = static_cast<std::size_t>(c.population_size);
  std::vector<Trainee> ss, ls;
  std::vector<int> last_reset(n, 0);
  for (std::size_t p = 0; p < n; ++p) {
    ss.emplace_back(s1, c.lr);
    ls.emplace_back(l1, c.lr);
  }
  Rng rng(sub(c.seed, kLoop));
  const GameSource games = ex.train_games();
  res.history.columns = {"round", "int_reward", "sup_speaker_loss", "sup_listener_loss", "reset_pair",
                         "val_accuracy"};
  for (int r = 1; r <= c.baseline_rounds; ++r) {
    double reward = 0.0;
    for (int j = 0; j < c.n_int; ++j) {
      for (std::size_t p = 0; p < n; ++p) {
        auto& l = ls[rng.below(n)];
        reward += interactive_step(ss[p].model, &ss[p].opt, l.model, &l.opt, games,
                                   static_cast<std::size_t>(c.batch_size), loss, rng)
                      .reward;
      }
    }
    std::pair<double, double> sl;
    for (int j = 0; j < c.n_sup; ++j) {
      for (std::size_t p = 0; p < n; ++p) sl = sup.step(&ss[p], &ls[p], rng);
    }
    double reset = -1.0;
    if (r % c.gen_trans_period == 0) {
      // The pair that has gone longest without a reset returns to the pretrained weights.
      const std::size_t p = static_cast<std::size_t>(
          std::min_element(last_reset.begin(), last_reset.end()) - last_reset.begin());
      ss[p] = Trainee(s1, c.lr);
      ls[p] = Trainee(l1, c.lr);
      last_reset[p] = r;
      reset = static_cast<double>(p);
    }
    double best = -1.0;
    for (std::size_t p = 0; p < n; ++p) best = std::max(best, sup.validate(ss[p].model, ls[p].model));
    res.history.add_row({static_cast<double>(r), reward / std::max(1.0, static_cast<double>(c.n_int * n)),
                         sl.first, sl.second, reset, best});
    say(progress, "round " + std::to_string(r) + ": best val accuracy " + fmt(best));
  }
  std::size_t pick_p = 0;
  double best = -1.0;
  for (std::size_t p = 0; p < n; ++p) {
    const double v = sup.validate(ss[p].model, ls[p].model);
    if (v > best) {
      best = v;
      pick_p = p;
    }
  }
  res.speaker = ss[pick_p].model;
  res.listener = ls[pick_p].model;
  res.final_val_accuracy = best;
  return res;
}

}  // namespace

RunResult run_baseline(const Experiment& ex, const std::string& kind, const ProgressFn& progress) {
  if (kind == "pretrained") return baseline_pretrained(ex, progress);
  if (kind == "emecom") return baseline_emecom(ex, progress);
  if (kind == "s2p_like" || kind == "s2p") return baseline_s2p(ex, progress);
  if (kind == "static_pop_meta" || kind == "l2c") return baseline_static_pop(ex, progress);
  if (kind == "gen_trans" || kind == "gentrans") return baseline_gen_trans(ex, progress);
  throw std::invalid_argument("unknown baseline '" + kind +
                              "' (expected pretrained|emecom|s2p_like|static_pop_meta|gen_trans)");
}

RunResult run_method(const Experiment& ex, const std::string& method, Ablation ablation,
                     const ProgressFn& progress) {
  kernels::set_num_threads(ex.config.threads);
  if (method == "ours") return run_algorithm1(ex, ablation, progress);
  if (ablation != Ablation::kNone) throw std::invalid_argument("ablations apply to --method ours only");
  return run_baseline(ex, method, progress);
}

}  // namespace popmeta
