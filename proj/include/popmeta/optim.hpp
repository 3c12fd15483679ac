#pragma once

#include <cstdint>
#include <functional>
#include <span>

#include "popmeta/params.hpp"

namespace popmeta {

struct AdamState {
  FlatVector m;
  FlatVector v;
  std::uint64_t step = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double lr = 1e-3;

  static AdamState for_store(const ParameterStore& store, double lr);
};

/// One bias-corrected Adam update of `store` in place.
void adam_step(ParameterStore& store, std::span<const double> grads, AdamState& state);

enum class MetaVariant { kMaml, kFomaml, kReptile };

MetaVariant parse_meta_variant(const std::string& name);
const char* to_string(MetaVariant v);

/// A loss evaluated at parameters bound on a tape (one Var per segment).
using LossFn = std::function<ad::Var(ad::Tape&, std::span<const ad::Var>)>;

struct MetaGrad {
  FlatVector grad;
  double inner_loss = 0.0;
  double outer_loss = 0.0;
};

/// Gradient of outer(p - alpha * grad inner(p)) with respect to p, for one
/// inner step. With first_order the inner gradient is treated as a constant
/// (FOMAML); otherwise the Hessian-vector term is kept by differentiating
/// through the recorded inner backward pass.
MetaGrad grad_through_update(const ParameterStore& params, const LossFn& inner, const LossFn& outer,
                             double alpha, bool first_order);

/// Reptile pseudo-gradient: runs plain SGD with step `alpha` over `losses` in
/// order, starting at `params`, and returns (initial - adapted). Feeding it
/// to an optimizer moves the parameters toward the adapted weights.
MetaGrad reptile_direction(const ParameterStore& params, std::span<const LossFn> losses,
                           double alpha);

/// Plain gradient of a loss at params.
MetaGrad plain_gradient(const ParameterStore& params, const LossFn& loss);

}  // namespace popmeta
