#include "popmeta/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace popmeta {

AdamState AdamState::for_store(const ParameterStore& store, double lr) {
  AdamState s;
  s.m.assign(store.flat_size(), 0.0);
  s.v.assign(store.flat_size(), 0.0);
  s.lr = lr;
  return s;
}

void adam_step(ParameterStore& store, std::span<const double> grads, AdamState& state) {
  const std::size_t n = store.flat_size();
  if (grads.size() != n) {
    throw std::invalid_argument("adam_step: gradient length " + std::to_string(grads.size()) +
                                " != parameter length " + std::to_string(n));
  }
  if (state.m.size() != n || state.v.size() != n) {
    throw std::invalid_argument("adam_step: optimizer state does not match parameters");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  std::size_t k = 0;
  for (auto& seg : store.segments()) {
    for (double& p : seg.value.data()) {
      const double g = grads[k];
      state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
      state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
      const double mhat = state.m[k] / c1;
      const double vhat = state.v[k] / c2;
      p -= state.lr * mhat / (std::sqrt(vhat) + state.eps);
      ++k;
    }
  }
}

MetaVariant parse_meta_variant(const std::string& name) {
  if (name == "maml" || name == "MAML") return MetaVariant::kMaml;
  if (name == "fomaml" || name == "FOMAML") return MetaVariant::kFomaml;
  if (name == "reptile" || name == "Reptile") return MetaVariant::kReptile;
  throw std::invalid_argument("unknown meta variant '" + name + "' (expected maml|fomaml|reptile)");
}

const char* to_string(MetaVariant v) {
  switch (v) {
    case MetaVariant::kMaml: return "maml";
    case MetaVariant::kFomaml: return "fomaml";
    case MetaVariant::kReptile: return "reptile";
  }
  return "?";
}

MetaGrad plain_gradient(const ParameterStore& params, const LossFn& loss) {
  ad::Tape tape;
  auto vars = params.bind(tape);
  ad::Var l = loss(tape, vars);
  auto g = tape.gradients(l, vars);
  return {ParameterStore::flatten(g), l.value().item(), l.value().item()};
}

MetaGrad grad_through_update(const ParameterStore& params, const LossFn& inner, const LossFn& outer,
                             double alpha, bool first_order) {
  if (alpha < 0.0) throw std::invalid_argument("grad_through_update: alpha must be >= 0");
  ad::Tape tape;
  auto theta = params.bind(tape);
  ad::Var inner_loss = inner(tape, theta);
  auto g = tape.gradients(inner_loss, theta, /*create_graph=*/!first_order);

  std::vector<ad::Var> adapted;
  adapted.reserve(theta.size());
  for (std::size_t i = 0; i < theta.size(); ++i) {
    // The first-order variant sees the inner gradient as data.
    ad::Var gi = first_order ? tape.constant(g[i].value()) : g[i];
    adapted.push_back(ad::sub(theta[i], ad::scale(gi, alpha)));
  }
  ad::Var outer_loss = outer(tape, adapted);
  auto mg = tape.gradients(outer_loss, theta);
  return {ParameterStore::flatten(mg), inner_loss.value().item(), outer_loss.value().item()};
}

MetaGrad reptile_direction(const ParameterStore& params, std::span<const LossFn> losses,
                           double alpha) {
  if (alpha < 0.0) throw std::invalid_argument("reptile_direction: alpha must be >= 0");
  ParameterStore adapted = params;
  MetaGrad out;
  bool first = true;
  for (const auto& loss : losses) {
    ad::Tape tape;
    auto vars = adapted.bind(tape);
    ad::Var l = loss(tape, vars);
    auto g = ParameterStore::flatten(tape.gradients(l, vars));
    if (first) out.inner_loss = l.value().item();
    out.outer_loss = l.value().item();
    first = false;
    auto flat = adapted.flat();
    for (std::size_t i = 0; i < flat.size(); ++i) flat[i] -= alpha * g[i];
    adapted.set_flat(flat);
  }
  const auto a = adapted.flat();
  const auto p = params.flat();
  out.grad.resize(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) out.grad[i] = p[i] - a[i];
  return out;
}

}  // namespace popmeta
