#include "da/nn.hpp"

#include <cmath>

namespace da::nn {

// He-style bound: keeps activation variance level through stacked relu
// layers, where the two-fan bound decays it by roughly half per layer. At
// this scale and learning rate the smaller draw is not a rounding concern
// but a survival one: layers a few channels wide die outright.
void he_uniform(Tensor& w, Index fan_in, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in));
  for (Index i = 0; i < w.numel(); ++i) w[i] = rng.uniform(-a, a);
}

Conv2d::Conv2d(const std::string& name, Index in_ch, Index out_ch, Index k,
               int stride_, int padding_, Rng& rng)
    : w(name + ".w", Tensor({out_ch, in_ch, k, k})),
      b(name + ".b", Tensor({out_ch})),
      stride(stride_),
      padding(padding_) {
  he_uniform(w.value, in_ch * k * k, rng);
}

Linear::Linear(const std::string& name, Index in, Index out, Rng& rng)
    : w(name + ".w", Tensor({in, out})), b(name + ".b", Tensor({out})) {
  he_uniform(w.value, in, rng);
}

BatchNorm::BatchNorm(const std::string& name, Index f)
    : gamma(name + ".gamma", Tensor::ones({f})), beta(name + ".beta", Tensor({f})) {}

}  // namespace da::nn
