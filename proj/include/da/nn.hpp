#pragma once

#include <algorithm>
#include <string>
#include <vector>

#include "da/ops.hpp"
#include "da/rng.hpp"
#include "da/tape.hpp"

namespace da::nn {

/// Fills `w` with draws from U(-a, a), a = sqrt(6/fan_in).
void he_uniform(Tensor& w, Index fan_in, Rng& rng);

/// Discriminator width schedule: halve, but keep at least sixteen channels.
/// A relu bottleneck of only a few units can die wholesale under large
/// early updates, freezing the branch at a constant output for good.
inline Index half_width(Index c) { return c / 2 > 16 ? c / 2 : std::min<Index>(c, 16); }

struct Conv2d {
  Parameter w, b;
  int stride = 1;
  int padding = 0;

  Conv2d() = default;
  Conv2d(const std::string& name, Index in_ch, Index out_ch, Index k, int stride,
         int padding, Rng& rng);

  Var forward(TapeSession& s, Var x) {
    return ops::conv2d(x, s.param(w), s.param(b), stride, padding);
  }
  void collect(std::vector<Parameter*>& ps) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
  Index out_channels() const { return w.value.dim(0); }
};

struct Linear {
  Parameter w, b;

  Linear() = default;
  Linear(const std::string& name, Index in, Index out, Rng& rng);

  Var forward(TapeSession& s, Var x) {
    return ops::fully_connected(x, s.param(w), s.param(b));
  }
  void collect(std::vector<Parameter*>& ps) {
    ps.push_back(&w);
    ps.push_back(&b);
  }
  Index out_features() const { return w.value.dim(1); }
};

struct BatchNorm {
  Parameter gamma, beta;

  BatchNorm() = default;
  explicit BatchNorm(const std::string& name, Index f);

  Var forward(TapeSession& s, Var x) {
    return ops::batch_norm(x, s.param(gamma), s.param(beta));
  }
  void collect(std::vector<Parameter*>& ps) {
    ps.push_back(&gamma);
    ps.push_back(&beta);
  }
};

}  // namespace da::nn
