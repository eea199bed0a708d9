#pragma once

#include <vector>

#include "da/tape.hpp"

namespace da {

struct SgdOptimizer {
  double learning_rate = 1e-3;
  double weight_decay = 0.0;
};

/// p <- p - lr * (g + wd * p), elementwise, for every parameter whose last
/// backward pass reached it. Parameters outside the step's graph (disabled
/// adaptors, an empty proposal side) are left untouched, decay included.
inline void sgd_step(const std::vector<Parameter*>& params, const SgdOptimizer& opt) {
  for (Parameter* p : params) {
    if (!p->reached) continue;
    p->value.array() -=
        opt.learning_rate * (p->grad.array() + opt.weight_decay * p->value.array());
  }
}

/// Resets reach flags (and drops stale gradients) before a new step.
inline void clear_grads(const std::vector<Parameter*>& params) {
  for (Parameter* p : params) {
    p->reached = false;
    p->grad = Tensor{};
  }
}

}  // namespace da
