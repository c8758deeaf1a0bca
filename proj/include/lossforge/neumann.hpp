#pragma once

#include <functional>
#include <string>

#include "lossforge/errors.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge::bilevel {

using HvpOracle = std::function<Tensor(const Tensor&)>;

// Truncated Neumann approximation of H^{-1} v:
//   p = sum_{j=0}^{order} (I - eta*H)^j v,
// computed by the recursion cur <- cur - eta*H(cur). With eta_scaling the
// result is eta*p (the actual inverse-HVP estimate); without it the raw sum
// is returned. Convergence needs spectral_radius(I - eta*H) < 1, which the
// caller must arrange.
inline Tensor neumann_ihvp(const HvpOracle& hvp, const Tensor& v, int order, double eta,
                           bool eta_scaling = true) {
  if (order < 0) throw ConfigError("neumann: order must be nonnegative");
  if (!(eta > 0.0)) throw ConfigError("neumann: step must be positive");
  Tensor cur = v;
  Tensor acc = v;
  for (int j = 1; j <= order; ++j) {
    Tensor h;
    try {
      h = hvp(cur);
    } catch (const NumericalError& e) {
      throw NumericalError("neumann: oracle failed at iteration " + std::to_string(j) + ": " +
                           e.what());
    }
    if (!same_shape(h, v)) throw ShapeError("neumann: oracle changed the shape");
    for (size_t i = 0; i < cur.data.size(); ++i) cur.data[i] -= eta * h.data[i];
    if (!cur.all_finite())
      throw NumericalError("neumann: non-finite iterate at iteration " + std::to_string(j));
    for (size_t i = 0; i < acc.data.size(); ++i) acc.data[i] += cur.data[i];
  }
  if (eta_scaling)
    for (double& x : acc.data) x *= eta;
  return acc;
}

}  // namespace lossforge::bilevel
