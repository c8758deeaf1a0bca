#pragma once

#include <cmath>

#include "lossforge/errors.hpp"
#include "lossforge/tensor.hpp"

namespace lossforge::optim {

struct SgdState {
  Tensor velocity;
};

// v <- momentum*v + grad + weight_decay*theta;  theta <- theta - eta*v
inline void sgd_step(Tensor& theta, const Tensor& grad, SgdState& state, double eta,
                     double momentum, double weight_decay) {
  if (!same_shape(theta, grad)) throw ShapeError("sgd: gradient shape mismatch");
  if (state.velocity.data.empty()) state.velocity = Tensor::zeros(theta.shape);
  if (!same_shape(theta, state.velocity)) throw ShapeError("sgd: velocity shape mismatch");
  for (size_t i = 0; i < theta.data.size(); ++i) {
    state.velocity.data[i] =
        momentum * state.velocity.data[i] + grad.data[i] + weight_decay * theta.data[i];
    theta.data[i] -= eta * state.velocity.data[i];
  }
}

enum class LrSchedule { kConstant, kStep, kCosine };

// step: x0.1 at 73% and again at 87% of the run; cosine: half-cosine to zero
inline double scheduled_lr(LrSchedule schedule, double base, int it, int total) {
  switch (schedule) {
    case LrSchedule::kConstant: return base;
    case LrSchedule::kStep: {
      double lr = base;
      if (it >= static_cast<int>(0.73 * total)) lr *= 0.1;
      if (it >= static_cast<int>(0.87 * total)) lr *= 0.1;
      return lr;
    }
    case LrSchedule::kCosine:
      return base * 0.5 * (1.0 + std::cos(M_PI * static_cast<double>(it) / total));
  }
  return base;
}

}  // namespace lossforge::optim
