#include "popmeta/eval.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <stdexcept>

#include <boost/math/distributions/students_t.hpp>

namespace popmeta {

SpeakerFn model_speaker(const Model& m) {
  return [&m](std::span<const Object> targets) { return speak(m, targets, DecodeMode::kGreedy, nullptr); };
}

ListenerFn model_listener(const Model& m) {
  return [&m](std::span<const Message> messages, const CandidateBatch& cb) {
    Tensor p = listen_batch(m, messages, cb.candidates, cb.per_episode);
    std::vector<std::size_t> out(cb.size());
    for (std::size_t b = 0; b < cb.size(); ++b) out[b] = argmax(std::span<const double>(p.row(b), cb.per_episode));
    return out;
  };
}

SpeakerFn oracle_speaker(const World& w) {
  return [&w](std::span<const Object> targets) {
    std::vector<Message> out;
    out.reserve(targets.size());
    for (const auto& t : targets) out.push_back(w.canonical_describe(t));
    return out;
  };
}

ListenerFn oracle_listener(const World& w) {
  return [&w](std::span<const Message> messages, const CandidateBatch& cb) {
    std::vector<std::size_t> out(cb.size());
    for (std::size_t b = 0; b < cb.size(); ++b) out[b] = w.oracle_listener(messages[b], cb.candidates_of(b));
    return out;
  };
}

ListenerFn random_listener(std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [rng](std::span<const Message>, const CandidateBatch& cb) {
    std::vector<std::size_t> out(cb.size());
    for (auto& o : out) o = rng->below(cb.per_episode);
    return out;
  };
}

Accuracy referential_accuracy(const SpeakerFn& speaker, const ListenerFn& listener, const World& world,
                              std::span<const Object> objects, std::size_t k,
                              const DistractorSpec& spec, std::size_t episodes, std::uint64_t seed) {
  if (episodes == 0) throw std::invalid_argument("referential_accuracy: episodes must be >= 1");
  Rng rng(seed);
  Accuracy acc;
  const std::size_t chunk = 500;
  while (acc.episodes < episodes) {
    const std::size_t n = std::min(chunk, episodes - acc.episodes);
    auto cb = sample_game(world, objects, n, k, spec, rng);
    auto messages = speaker(cb.targets);
    auto pred = listener(messages, cb);
    for (std::size_t b = 0; b < n; ++b) acc.correct += pred[b] == cb.target_index[b];
    acc.episodes += n;
  }
  acc.accuracy = static_cast<double>(acc.correct) / static_cast<double>(acc.episodes);
  return acc;
}

// ---------------------------------------------------------------------------

namespace {

using Ngram = std::vector<int>;

std::map<Ngram, std::size_t> ngram_counts(const std::vector<int>& toks, std::size_t n) {
  std::map<Ngram, std::size_t> out;
  for (std::size_t i = 0; i + n <= toks.size(); ++i) ++out[Ngram(toks.begin() + i, toks.begin() + i + n)];
  return out;
}

}  // namespace

double bleu(std::span<const Message> hypotheses, std::span<const Message> references, int max_n, double eps) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("bleu: hypothesis and reference counts differ");
  }
  if (max_n < 1) throw std::invalid_argument("bleu: max_n must be >= 1");
  std::vector<double> matches(static_cast<std::size_t>(max_n), 0.0), totals(static_cast<std::size_t>(max_n), 0.0);
  double hyp_len = 0.0, ref_len = 0.0;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto h = hypotheses[i].content();
    const auto r = references[i].content();
    hyp_len += static_cast<double>(h.size());
    ref_len += static_cast<double>(r.size());
    for (std::size_t n = 1; n <= static_cast<std::size_t>(max_n); ++n) {
      const auto hc = ngram_counts(h, n);
      const auto rc = ngram_counts(r, n);
      for (const auto& [g, c] : hc) {
        const auto it = rc.find(g);
        if (it != rc.end()) matches[n - 1] += static_cast<double>(std::min(c, it->second));
        totals[n - 1] += static_cast<double>(c);
      }
    }
  }
  if (hyp_len == 0.0) return 0.0;
  double log_p = 0.0;
  for (std::size_t n = 0; n < matches.size(); ++n) {
    const double p = totals[n] > 0 ? (matches[n] + eps) / (totals[n] + eps) : eps;
    log_p += std::log(p);
  }
  log_p /= static_cast<double>(max_n);
  const double bp = hyp_len > ref_len ? 1.0 : std::exp(1.0 - ref_len / hyp_len);
  return std::clamp(bp * std::exp(log_p), 0.0, 1.0);
}

CorpusStats corpus_stats(std::span<const Message> hypotheses, std::span<const Message> references) {
  if (hypotheses.size() != references.size()) {
    throw std::invalid_argument("corpus_stats: hypothesis and reference counts differ");
  }
  CorpusStats s;
  for (std::size_t i = 0; i < hypotheses.size(); ++i) {
    const auto h = hypotheses[i].content();
    const auto r = references[i].content();
    if (r.empty()) continue;
    std::vector<int> hu = h, ru = r;
    std::sort(hu.begin(), hu.end());
    hu.erase(std::unique(hu.begin(), hu.end()), hu.end());
    std::sort(ru.begin(), ru.end());
    ru.erase(std::unique(ru.begin(), ru.end()), ru.end());
    s.length_ratio += static_cast<double>(h.size()) / static_cast<double>(r.size());
    s.unique_ratio += static_cast<double>(hu.size()) / static_cast<double>(ru.size());
    ++s.samples;
  }
  if (s.samples > 0) {
    s.length_ratio /= static_cast<double>(s.samples);
    s.unique_ratio /= static_cast<double>(s.samples);
  }
  return s;
}

std::pair<std::vector<Message>, std::vector<Message>> speaker_corpus(const Model& speaker, const World& world,
                                                                     std::span<const Object> objects) {
  auto hyps = speak(speaker, objects, DecodeMode::kGreedy, nullptr);
  std::vector<Message> refs;
  refs.reserve(objects.size());
  for (const auto& o : objects) refs.push_back(world.canonical_describe(o));
  return {std::move(hyps), std::move(refs)};
}

// ---------------------------------------------------------------------------

MeanStd mean_std(std::span<const double> xs) {
  MeanStd m;
  m.n = xs.size();
  if (xs.empty()) return m;
  m.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  if (xs.size() > 1) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.std = std::sqrt(ss / static_cast<double>(xs.size() - 1));
  }
  return m;
}

namespace {

double population_std(std::span<const double> xs, double mean) {
  if (xs.empty()) return 0.0;
  double ss = 0.0;
  for (double x : xs) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(xs.size()));
}

DiversityPoint summarize(std::size_t iteration, std::span<const double> xs) {
  DiversityPoint d;
  d.iteration = iteration;
  d.members = xs.size();
  if (xs.empty()) return d;
  d.mean = std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
  d.std = population_std(xs, d.mean);
  d.min = *std::min_element(xs.begin(), xs.end());
  d.max = *std::max_element(xs.begin(), xs.end());
  return d;
}

}  // namespace

CrossPlay crossplay(std::span<const Model> speakers, std::span<const Model> listeners, const World& world,
                    std::span<const Object> objects, std::size_t k, const DistractorSpec& spec,
                    std::size_t episodes, std::uint64_t seed) {
  if (speakers.empty() || speakers.size() != listeners.size()) {
    throw std::invalid_argument("crossplay: need the same non-zero number of speakers and listeners");
  }
  for (const auto& m : speakers) {
    if (m.arch.vocab != speakers[0].arch.vocab || m.arch.attributes != speakers[0].arch.attributes) {
      throw std::invalid_argument("crossplay: speakers do not share a vocabulary");
    }
  }
  for (const auto& m : listeners) {
    if (m.arch.vocab != speakers[0].arch.vocab || m.arch.attributes != speakers[0].arch.attributes) {
      throw std::invalid_argument("crossplay: listeners do not share the speakers' vocabulary");
    }
  }
  const std::size_t s = speakers.size();
  CrossPlay cp;
  cp.episodes_per_cell = episodes;
  cp.accuracy.assign(s, std::vector<double>(s, 0.0));
  // Every cell sees the same episode stream, so cells are order independent.
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) {
      cp.accuracy[i][j] = referential_accuracy(model_speaker(speakers[i]), model_listener(listeners[j]), world,
                                               objects, k, spec, episodes, seed)
                              .accuracy;
    }
  }
  std::vector<double> diag, off;
  for (std::size_t i = 0; i < s; ++i) {
    for (std::size_t j = 0; j < s; ++j) (i == j ? diag : off).push_back(cp.accuracy[i][j]);
  }
  cp.diag_mean = std::accumulate(diag.begin(), diag.end(), 0.0) / static_cast<double>(diag.size());
  if (!off.empty()) {
    const double m = std::accumulate(off.begin(), off.end(), 0.0) / static_cast<double>(off.size());
    cp.offdiag_mean = m;
    cp.offdiag_std = population_std(off, m);
  }
  return cp;
}

std::vector<DiversityPoint> diversity_curve(const Model& meta_listener, std::span<const Model> speaker_snapshots,
                                            std::span<const std::vector<std::size_t>> buffer_history,
                                            const World& world, std::span<const Object> objects,
                                            std::size_t k, const DistractorSpec& spec,
                                            std::size_t episodes, std::uint64_t seed) {
  std::map<std::size_t, double> cache;
  std::vector<DiversityPoint> out;
  for (std::size_t it = 0; it < buffer_history.size(); ++it) {
    std::vector<double> accs;
    for (std::size_t idx : buffer_history[it]) {
      if (idx >= speaker_snapshots.size()) throw std::out_of_range("diversity_curve: unknown snapshot");
      auto [pos, fresh] = cache.try_emplace(idx, 0.0);
      if (fresh) {
        pos->second = referential_accuracy(model_speaker(speaker_snapshots[idx]), model_listener(meta_listener),
                                           world, objects, k, spec, episodes, seed)
                          .accuracy;
      }
      accs.push_back(pos->second);
    }
    out.push_back(summarize(it + 1, accs));
  }
  return out;
}

std::vector<DiversityPoint> speaker_diversity_curve(
    const Model& meta_speaker, std::span<const Model> listener_snapshots,
    std::span<const std::vector<std::size_t>> buffer_history, const World& world,
    std::span<const Object> objects, std::size_t k, const DistractorSpec& spec, std::size_t episodes,
    std::uint64_t seed) {
  std::map<std::size_t, double> cache;
  std::vector<DiversityPoint> out;
  for (std::size_t it = 0; it < buffer_history.size(); ++it) {
    std::vector<double> accs;
    for (std::size_t idx : buffer_history[it]) {
      if (idx >= listener_snapshots.size()) throw std::out_of_range("speaker_diversity_curve: unknown snapshot");
      auto [pos, fresh] = cache.try_emplace(idx, 0.0);
      if (fresh) {
        pos->second = referential_accuracy(model_speaker(meta_speaker), model_listener(listener_snapshots[idx]),
                                           world, objects, k, spec, episodes, seed)
                          .accuracy;
      }
      accs.push_back(pos->second);
    }
    out.push_back(summarize(it + 1, accs));
  }
  return out;
}

std::vector<DiversityPoint> buffer_bleu_curve(std::span<const Model> speaker_snapshots,
                                              std::span<const std::vector<std::size_t>> buffer_history,
                                              const World& world, std::span<const Object> objects) {
  std::map<std::size_t, double> cache;
  std::vector<DiversityPoint> out;
  for (std::size_t it = 0; it < buffer_history.size(); ++it) {
    std::vector<double> scores;
    for (std::size_t idx : buffer_history[it]) {
      if (idx >= speaker_snapshots.size()) throw std::out_of_range("buffer_bleu_curve: unknown snapshot");
      auto [pos, fresh] = cache.try_emplace(idx, 0.0);
      if (fresh) {
        auto [h, r] = speaker_corpus(speaker_snapshots[idx], world, objects);
        pos->second = bleu(h, r);
      }
      scores.push_back(pos->second);
    }
    out.push_back(summarize(it + 1, scores));
  }
  return out;
}

OracleEval oracle_eval(const Model& speaker, const Model& listener, const World& world,
                       std::span<const Object> objects, std::size_t k, const DistractorSpec& spec,
                       std::size_t episodes, std::uint64_t seed) {
  OracleEval o;
  o.episodes = episodes;
  o.agent_speaker_oracle_listener =
      referential_accuracy(model_speaker(speaker), oracle_listener(world), world, objects, k, spec, episodes, seed)
          .accuracy;
  o.oracle_speaker_agent_listener =
      referential_accuracy(oracle_speaker(world), model_listener(listener), world, objects, k, spec, episodes, seed)
          .accuracy;
  o.oracle_oracle =
      referential_accuracy(oracle_speaker(world), oracle_listener(world), world, objects, k, spec, episodes, seed)
          .accuracy;
  return o;
}

Robustness robustness_eval(const RobustnessInputs& in, const World& world_b, std::span<const Object> test_b,
                           std::size_t k, const DistractorSpec& spec, std::size_t episodes,
                           std::uint64_t seed) {
  auto score = [&](const Model* s, const Model* l) -> std::optional<double> {
    if (s == nullptr || l == nullptr) return std::nullopt;
    if (s->arch.vocab != world_b.vocab_size() || l->arch.vocab != world_b.vocab_size()) {
      throw std::invalid_argument("robustness_eval: model vocabulary does not match world B");
    }
    return referential_accuracy(model_speaker(*s), model_listener(*l), world_b, test_b, k, spec, episodes, seed)
        .accuracy;
  };
  Robustness r;
  r.ours_cross = score(in.ours_speaker_a, in.ours_listener_a);
  r.ours_within = score(in.ours_speaker_b, in.ours_listener_b);
  r.pretrained_cross = score(in.pretrained_speaker_a, in.pretrained_listener_a);
  r.pretrained_within = score(in.pretrained_speaker_b, in.pretrained_listener_b);
  return r;
}

TTest welch_t_test(std::span<const double> a, std::span<const double> b) {
  if (a.size() < 2 || b.size() < 2) throw std::invalid_argument("t-test needs at least two samples per group");
  const MeanStd ma = mean_std(a), mb = mean_std(b);
  const double va = ma.std * ma.std / static_cast<double>(a.size());
  const double vb = mb.std * mb.std / static_cast<double>(b.size());
  TTest t;
  if (va + vb == 0.0) {
    t.t = ma.mean == mb.mean ? 0.0 : std::copysign(INFINITY, ma.mean - mb.mean);
    t.df = static_cast<double>(a.size() + b.size() - 2);
    t.p = ma.mean == mb.mean ? 1.0 : 0.0;
    return t;
  }
  t.t = (ma.mean - mb.mean) / std::sqrt(va + vb);
  t.df = (va + vb) * (va + vb) /
         (va * va / static_cast<double>(a.size() - 1) + vb * vb / static_cast<double>(b.size() - 1));
  boost::math::students_t dist(t.df);
  t.p = 2.0 * boost::math::cdf(boost::math::complement(dist, std::fabs(t.t)));
  return t;
}

}  // namespace popmeta
