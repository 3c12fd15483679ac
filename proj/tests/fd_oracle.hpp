#pragma once

// Central finite-difference oracle. Kept test-only and independent of the
// reverse-mode code it checks: it only ever evaluates losses forward.

#include <algorithm>
#include <cmath>
#include <functional>

#include "popmeta/params.hpp"

namespace popmeta::testing {

using ForwardFn = std::function<double(const ParameterStore&)>;

inline FlatVector central_differences(const ParameterStore& at, const ForwardFn& f, double h = 1e-5) {
  ParameterStore p = at;
  FlatVector x = p.flat();
  FlatVector g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + h;
    p.set_flat(x);
    const double fp = f(p);
    x[i] = orig - h;
    p.set_flat(x);
    const double fm = f(p);
    x[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). The floor keeps components
/// that are numerically zero from dominating.
inline double max_relative_error(const FlatVector& a, const FlatVector& b, double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

/// ||a - b|| / max(||a||, ||b||).
inline double norm_relative_error(const FlatVector& a, const FlatVector& b) {
  double d = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    d += (a[i] - b[i]) * (a[i] - b[i]);
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  const double denom = std::max({std::sqrt(na), std::sqrt(nb), 1e-300});
  return std::sqrt(d) / denom;
}

}  // namespace popmeta::testing
