#include "popmeta/agents.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace popmeta {

using namespace ad;

const char* to_string(AgentKind k) { return k == AgentKind::kSpeaker ? "speaker" : "listener"; }

AgentArch AgentArch::for_world(AgentKind kind, const World& world, int hidden, int embed) {
  AgentArch a;
  a.kind = kind;
  a.attributes = world.attributes();
  a.values = world.values();
  a.vocab = world.vocab_size();
  a.hidden = hidden;
  a.embed = embed;
  a.max_len = world.max_len();
  return a;
}

nlohmann::json AgentArch::to_json() const {
  return {{"kind", to_string(kind)}, {"attributes", attributes}, {"values", values},
          {"vocab", vocab},          {"hidden", hidden},         {"embed", embed},
          {"max_len", max_len},      {"cell", "gru"}};
}

AgentArch AgentArch::from_json(const nlohmann::json& j) {
  AgentArch a;
  const auto kind = j.at("kind").get<std::string>();
  if (kind == "speaker") {
    a.kind = AgentKind::kSpeaker;
  } else if (kind == "listener") {
    a.kind = AgentKind::kListener;
  } else {
    throw std::invalid_argument("unknown agent kind '" + kind + "'");
  }
  a.attributes = j.at("attributes").get<int>();
  a.values = j.at("values").get<int>();
  a.vocab = j.at("vocab").get<int>();
  a.hidden = j.at("hidden").get<int>();
  a.embed = j.at("embed").get<int>();
  a.max_len = j.at("max_len").get<int>();
  return a;
}

namespace {

std::size_t sz(int v) { return static_cast<std::size_t>(v); }

Tensor uniform_tensor(std::size_t r, std::size_t c, double bound, Rng& rng) {
  Tensor t(r, c);
  for (double& v : t.data()) v = (2.0 * rng.uniform() - 1.0) * bound;
  return t;
}

Tensor orthogonal(std::size_t n, Rng& rng) {
  // Modified Gram-Schmidt on a Gaussian matrix, rows orthonormalised.
  Tensor q(n, n);
  for (double& v : q.data()) v = rng.normal();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < i; ++j) {
      double d = 0.0;
      for (std::size_t k = 0; k < n; ++k) d += q(i, k) * q(j, k);
      for (std::size_t k = 0; k < n; ++k) q(i, k) -= d * q(j, k);
    }
    double norm = 0.0;
    for (std::size_t k = 0; k < n; ++k) norm += q(i, k) * q(i, k);
    norm = std::sqrt(norm);
    for (std::size_t k = 0; k < n; ++k) q(i, k) /= norm;
  }
  return q;
}

Tensor gru_recurrent_init(std::size_t h, Rng& rng) {
  Tensor w(h, 3 * h);
  for (std::size_t block = 0; block < 3; ++block) {
    Tensor q = orthogonal(h, rng);
    for (std::size_t i = 0; i < h; ++i) {
      for (std::size_t j = 0; j < h; ++j) w(i, block * h + j) = q(i, j);
    }
  }
  return w;
}

struct Gru {
  Var wx, wh, bx, bh;
};

Var gru_step(const Gru& g, Var x, Var h, std::size_t hidden) {
  Var gx = add_row(matmul(x, g.wx), g.bx);
  Var gh = add_row(matmul(h, g.wh), g.bh);
  Var r = sigmoid(add(slice_cols(gx, 0, hidden), slice_cols(gh, 0, hidden)));
  Var z = sigmoid(add(slice_cols(gx, hidden, hidden), slice_cols(gh, hidden, hidden)));
  Var n = tanh(add(slice_cols(gx, 2 * hidden, hidden), mul(r, slice_cols(gh, 2 * hidden, hidden))));
  // (1 - z) * n + z * h
  return add(n, mul(z, sub(h, n)));
}

Tensor one_hot_objects(const AgentArch& arch, std::span<const Object> objs) {
  Tensor x(objs.size(), sz(arch.input_dim()));
  for (std::size_t i = 0; i < objs.size(); ++i) {
    if (objs[i].values.size() != sz(arch.attributes)) {
      throw std::invalid_argument("object arity does not match the agent architecture");
    }
    for (std::size_t a = 0; a < objs[i].values.size(); ++a) {
      const int v = objs[i].values[a];
      if (v < 0 || v >= arch.values) throw std::invalid_argument("object value out of range");
      x(i, a * sz(arch.values) + sz(v)) = 1.0;
    }
  }
  return x;
}

void check_params(const AgentArch& arch, std::span<const Var> p, AgentKind kind, std::size_t n) {
  if (arch.kind != kind) throw std::invalid_argument("agent architecture has the wrong kind");
  if (p.size() != n) throw std::invalid_argument("wrong number of parameter segments");
}

struct SpeakerVars {
  Var obj_w, obj_b, emb;
  Gru gru;
  Var out_w, out_b;
};

SpeakerVars speaker_vars(const AgentArch& arch, std::span<const Var> p) {
  check_params(arch, p, AgentKind::kSpeaker, 9);
  return {p[0], p[1], p[2], {p[3], p[4], p[5], p[6]}, p[7], p[8]};
}

struct ListenerVars {
  Var emb;
  Gru gru;
  Var obj_w, obj_b;
};

ListenerVars listener_vars(const AgentArch& arch, std::span<const Var> p) {
  check_params(arch, p, AgentKind::kListener, 7);
  return {p[0], {p[1], p[2], p[3], p[4]}, p[5], p[6]};
}

// Output column j corresponds to token j + 1 (PAD has no column).
int column_to_token(std::size_t col) { return static_cast<int>(col) + 1; }

std::size_t token_to_column(int token) {
  if (token < 1) throw std::invalid_argument("PAD cannot be scored by the speaker");
  return static_cast<std::size_t>(token - 1);
}

}  // namespace

Model Model::init(const AgentArch& arch, Rng& rng) {
  Model m;
  m.arch = arch;
  const std::size_t h = sz(arch.hidden), e = sz(arch.embed), v = sz(arch.vocab);
  const std::size_t in = sz(arch.input_dim());
  const double bh = 1.0 / std::sqrt(static_cast<double>(h));
  auto& p = m.params;
  if (arch.kind == AgentKind::kSpeaker) {
    p.add("obj_w", uniform_tensor(in, h, 1.0 / std::sqrt(static_cast<double>(arch.attributes)), rng));
    p.add("obj_b", uniform_tensor(1, h, bh, rng));
    p.add("emb", uniform_tensor(v, e, 1.0, rng));
    p.add("gru_wx", uniform_tensor(e, 3 * h, 1.0 / std::sqrt(static_cast<double>(e)), rng));
    p.add("gru_wh", gru_recurrent_init(h, rng));
    p.add("gru_bx", uniform_tensor(1, 3 * h, bh, rng));
    p.add("gru_bh", uniform_tensor(1, 3 * h, bh, rng));
    p.add("out_w", uniform_tensor(h, v - 1, bh, rng));
    p.add("out_b", uniform_tensor(1, v - 1, bh, rng));
  } else {
    p.add("emb", uniform_tensor(v, e, 1.0, rng));
    p.add("gru_wx", uniform_tensor(e, 3 * h, 1.0 / std::sqrt(static_cast<double>(e)), rng));
    p.add("gru_wh", gru_recurrent_init(h, rng));
    p.add("gru_bx", uniform_tensor(1, 3 * h, bh, rng));
    p.add("gru_bh", uniform_tensor(1, 3 * h, bh, rng));
    p.add("obj_w", uniform_tensor(in, h, 1.0 / std::sqrt(static_cast<double>(arch.attributes)), rng));
    p.add("obj_b", uniform_tensor(1, h, bh, rng));
  }
  return m;
}

Var row_entropy(Var log_probs) {
  return scale(sum_cols(mul(exp(log_probs), log_probs)), -1.0);
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h -= p * std::log(p);
  }
  return h;
}

double speaker_entropy(std::span<const std::vector<double>> step_distributions) {
  if (step_distributions.empty()) return 0.0;
  double s = 0.0;
  for (const auto& d : step_distributions) s += entropy(d);
  return s / static_cast<double>(step_distributions.size());
}

namespace {

// Shared decoding loop. When `forced` is non-empty it supplies the tokens.
SpeakerRollout run_speaker(const AgentArch& arch, std::span<const Var> params,
                           std::span<const Object> targets, std::span<const Message> forced,
                           DecodeMode mode, Rng* rng, int top_k) {
  const SpeakerVars sv = speaker_vars(arch, params);
  Tape& tape = *sv.obj_w.tape;
  const std::size_t batch = targets.size();
  const std::size_t hidden = sz(arch.hidden);
  const bool teacher = !forced.empty();
  if (teacher && forced.size() != batch) {
    throw std::invalid_argument("teacher forcing needs one message per target");
  }
  if (!teacher && mode != DecodeMode::kGreedy && rng == nullptr) {
    throw std::invalid_argument("sampling decode requires an rng");
  }

  SpeakerRollout out;
  out.messages.resize(batch);
  out.lengths.assign(batch, 0.0);
  if (batch == 0) return out;

  Var x = tape.constant(one_hot_objects(arch, targets));
  Var h = tanh(add_row(matmul(x, sv.obj_w), sv.obj_b));

  std::vector<std::size_t> prev(batch, static_cast<std::size_t>(kPad));
  std::vector<bool> alive(batch, true);
  std::size_t steps = sz(arch.max_len);
  if (teacher) {
    steps = 0;
    for (const auto& m : forced) {
      if (m.tokens.size() > sz(arch.max_len)) throw std::invalid_argument("message longer than max_len");
      steps = std::max(steps, m.tokens.size());
    }
    for (std::size_t b = 0; b < batch; ++b) alive[b] = !forced[b].tokens.empty();
  }

  const std::size_t ncols = sz(arch.vocab) - 1;
  for (std::size_t step = 0; step < steps; ++step) {
    if (std::none_of(alive.begin(), alive.end(), [](bool a) { return a; })) break;
    Var emb = gather_rows(sv.emb, make_indices(prev));
    h = gru_step(sv.gru, emb, h, hidden);
    Var lp = log_softmax(add_row(matmul(h, sv.out_w), sv.out_b));
    const Tensor& lpv = lp.value();

    std::vector<std::size_t> chosen(batch, 0);
    Tensor mask(batch, 1);
    for (std::size_t b = 0; b < batch; ++b) {
      if (!alive[b]) continue;
      mask[b] = 1.0;
      const double* row = lpv.row(b);
      std::size_t col = 0;
      if (teacher) {
        col = token_to_column(forced[b].tokens[step]);
        if (col >= ncols) throw std::invalid_argument("token outside the vocabulary");
      } else if (mode == DecodeMode::kGreedy) {
        col = static_cast<std::size_t>(std::max_element(row, row + ncols) - row);
      } else {
        std::vector<double> w(ncols);
        for (std::size_t j = 0; j < ncols; ++j) w[j] = std::exp(row[j]);
        if (mode == DecodeMode::kTopK && top_k > 0 && sz(top_k) < ncols) {
          std::vector<std::size_t> order(ncols);
          std::iota(order.begin(), order.end(), 0);
          std::stable_sort(order.begin(), order.end(),
                           [&](std::size_t a, std::size_t c) { return w[a] > w[c]; });
          for (std::size_t j = sz(top_k); j < ncols; ++j) w[order[j]] = 0.0;
        }
        col = rng->categorical(w);
      }
      chosen[b] = col;
    }

    Var logp = pick(lp, make_indices(chosen));
    Var ent = row_entropy(lp);
    const Tensor& logpv = logp.value();
    const Tensor& entv = ent.value();
    for (std::size_t b = 0; b < batch; ++b) {
      if (!alive[b]) continue;
      const int tok = column_to_token(chosen[b]);
      auto& msg = out.messages[b];
      msg.tokens.push_back(tok);
      msg.log_probs.push_back(logpv[b]);
      msg.entropies.push_back(entv[b]);
      out.lengths[b] += 1.0;
      prev[b] = static_cast<std::size_t>(tok);
      if (teacher) {
        alive[b] = step + 1 < forced[b].tokens.size();
      } else if (tok == kEos) {
        alive[b] = false;
      }
    }
    out.step_logp.push_back(logp);
    out.step_entropy.push_back(ent);
    out.step_log_dist.push_back(lp);
    out.step_mask.push_back(std::move(mask));
  }
  return out;
}

}  // namespace

SpeakerRollout speaker_rollout(const AgentArch& arch, std::span<const Var> params,
                               std::span<const Object> targets, DecodeMode mode, Rng* rng,
                               int top_k) {
  return run_speaker(arch, params, targets, {}, mode, rng, top_k);
}

SpeakerRollout speaker_teacher_forced(const AgentArch& arch, std::span<const Var> params,
                                      std::span<const Object> targets,
                                      std::span<const Message> messages) {
  if (messages.empty() && !targets.empty()) {
    throw std::invalid_argument("teacher forcing needs one message per target");
  }
  return run_speaker(arch, params, targets, messages, DecodeMode::kGreedy, nullptr, 0);
}

std::vector<Message> speak(const Model& speaker, std::span<const Object> targets, DecodeMode mode,
                           Rng* rng, int top_k) {
  Tape tape;
  NoGradGuard guard(tape);
  auto vars = speaker.params.bind(tape, false);
  return speaker_rollout(speaker.arch, vars, targets, mode, rng, top_k).messages;
}

Message speak_one(const Model& speaker, const Object& target, DecodeMode mode, Rng* rng) {
  return speak(speaker, std::span<const Object>(&target, 1), mode, rng).front();
}

double teacher_forced_log_likelihood(const Model& speaker, const Object& target, const Message& m) {
  Tape tape;
  NoGradGuard guard(tape);
  auto vars = speaker.params.bind(tape, false);
  auto r = speaker_teacher_forced(speaker.arch, vars, std::span<const Object>(&target, 1),
                                  std::span<const Message>(&m, 1));
  double s = 0.0;
  for (double lp : r.messages[0].log_probs) s += lp;
  return s;
}

Tensor speaker_first_step_distribution(const Model& speaker, std::span<const Object> targets) {
  Tape tape;
  NoGradGuard guard(tape);
  auto vars = speaker.params.bind(tape, false);
  const SpeakerVars sv = speaker_vars(speaker.arch, vars);
  const std::size_t batch = targets.size();
  Var x = tape.constant(one_hot_objects(speaker.arch, targets));
  Var h = tanh(add_row(matmul(x, sv.obj_w), sv.obj_b));
  Var emb = gather_rows(sv.emb, make_indices(std::vector<std::size_t>(batch, kPad)));
  h = gru_step(sv.gru, emb, h, sz(speaker.arch.hidden));
  Var p = softmax(add_row(matmul(h, sv.out_w), sv.out_b));
  Tensor out(batch, sz(speaker.arch.vocab));
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t j = 0; j + 1 < sz(speaker.arch.vocab); ++j) out(b, j + 1) = p.value()(b, j);
  }
  return out;
}

Message beam_search(const Model& speaker, const Object& target, int beam_width) {
  if (beam_width < 1) throw std::invalid_argument("beam width must be >= 1");
  struct Beam {
    std::vector<int> tokens;
    std::vector<double> log_probs;
    double score = 0.0;
    bool done = false;
  };
  std::vector<Beam> beams{Beam{}};
  const std::size_t ncols = sz(speaker.arch.vocab) - 1;
  for (int step = 0; step < speaker.arch.max_len; ++step) {
    std::vector<Beam> next;
    for (const auto& b : beams) {
      if (b.done) {
        next.push_back(b);
        continue;
      }
      // Re-run the prefix; messages are at most a handful of tokens long.
      Tape tape;
      NoGradGuard guard(tape);
      auto vars = speaker.params.bind(tape, false);
      const SpeakerVars sv = speaker_vars(speaker.arch, vars);
      Var x = tape.constant(one_hot_objects(speaker.arch, std::span<const Object>(&target, 1)));
      Var h = tanh(add_row(matmul(x, sv.obj_w), sv.obj_b));
      std::size_t prev = kPad;
      Var lp;
      for (std::size_t j = 0; j <= b.tokens.size(); ++j) {
        Var emb = gather_rows(sv.emb, make_indices({prev}));
        h = gru_step(sv.gru, emb, h, sz(speaker.arch.hidden));
        if (j < b.tokens.size()) {
          prev = static_cast<std::size_t>(b.tokens[j]);
        } else {
          lp = log_softmax(add_row(matmul(h, sv.out_w), sv.out_b));
        }
      }
      for (std::size_t c = 0; c < ncols; ++c) {
        Beam nb = b;
        const int tok = column_to_token(c);
        nb.tokens.push_back(tok);
        nb.log_probs.push_back(lp.value()[c]);
        nb.score += lp.value()[c];
        nb.done = tok == kEos;
        next.push_back(std::move(nb));
      }
    }
    std::stable_sort(next.begin(), next.end(),
                     [](const Beam& a, const Beam& c) { return a.score > c.score; });
    if (next.size() > sz(beam_width)) next.resize(sz(beam_width));
    beams = std::move(next);
    if (std::all_of(beams.begin(), beams.end(), [](const Beam& b) { return b.done; })) break;
  }
  Message m;
  m.tokens = beams.front().tokens;
  m.log_probs = beams.front().log_probs;
  return m;
}

// ---------------------------------------------------------------------------
// Listener

Var listener_log_probs(const AgentArch& arch, std::span<const Var> params,
                       std::span<const Message> messages, std::span<const Object> candidates,
                       std::size_t per_episode) {
  const ListenerVars lv = listener_vars(arch, params);
  Tape& tape = *lv.emb.tape;
  const std::size_t batch = messages.size();
  const std::size_t hidden = sz(arch.hidden);
  if (per_episode == 0 || candidates.size() != batch * per_episode) {
    throw std::invalid_argument("listener: expected " + std::to_string(per_episode) +
                                " candidates per message");
  }

  std::size_t steps = 0;
  for (const auto& m : messages) steps = std::max(steps, m.tokens.size());

  Var h = tape.constant(Tensor(batch, hidden));
  for (std::size_t step = 0; step < steps; ++step) {
    std::vector<std::size_t> tok(batch, kPad);
    Tensor mask(batch, hidden);
    for (std::size_t b = 0; b < batch; ++b) {
      if (step < messages[b].tokens.size()) {
        const int t = messages[b].tokens[step];
        if (t < 0 || t >= arch.vocab) throw std::invalid_argument("listener: token outside vocabulary");
        tok[b] = static_cast<std::size_t>(t);
        std::fill(mask.row(b), mask.row(b) + hidden, 1.0);
      }
    }
    Var x = gather_rows(lv.emb, make_indices(std::move(tok)));
    Var hn = gru_step(lv.gru, x, h, hidden);
    // Finished messages keep their last state.
    h = add(h, mul(tape.constant(std::move(mask)), sub(hn, h)));
  }

  Var cx = tape.constant(one_hot_objects(arch, candidates));
  Var cand = tanh(add_row(matmul(cx, lv.obj_w), lv.obj_b));
  std::vector<std::size_t> rep(batch * per_episode);
  for (std::size_t i = 0; i < rep.size(); ++i) rep[i] = i / per_episode;
  Var msg_rep = gather_rows(h, make_indices(std::move(rep)));
  Var scores = reshape(sum_cols(mul(msg_rep, cand)), batch, per_episode);
  return log_softmax(scores);
}

Tensor listen_batch(const Model& listener, std::span<const Message> messages,
                    std::span<const Object> candidates, std::size_t per_episode) {
  Tape tape;
  NoGradGuard guard(tape);
  auto vars = listener.params.bind(tape, false);
  Var lp = listener_log_probs(listener.arch, vars, messages, candidates, per_episode);
  Tensor p = lp.value();
  for (double& v : p.data()) v = std::exp(v);
  return p;
}

std::vector<double> listen(const Model& listener, const Message& m, std::span<const Object> candidates) {
  if (candidates.empty()) throw std::invalid_argument("listen: no candidates");
  Tensor p = listen_batch(listener, std::span<const Message>(&m, 1), candidates, candidates.size());
  return p.data();
}

}  // namespace popmeta
