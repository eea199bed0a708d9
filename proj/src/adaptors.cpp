#include "da/adaptors.hpp"

#include <cmath>

namespace da {

using nn::half_width;

LocalDiscriminator::LocalDiscriminator(const std::string& name, Index in_ch, Rng& rng) {
  const Index h1 = half_width(in_ch), h2 = half_width(h1);
  c1 = nn::Conv2d(name + ".c1", in_ch, h1, 1, 1, 0, rng);
  c2 = nn::Conv2d(name + ".c2", h1, h2, 1, 1, 0, rng);
  c3 = nn::Conv2d(name + ".c3", h2, 1, 1, 1, 0, rng);
}

Var LocalDiscriminator::forward(TapeSession& s, Var z) {
  Var h = ops::relu(c1.forward(s, z));
  h = ops::relu(c2.forward(s, h));
  return ops::sigmoid(c3.forward(s, h));
}

void LocalDiscriminator::collect(std::vector<Parameter*>& ps) {
  c1.collect(ps);
  c2.collect(ps);
  c3.collect(ps);
}

GlobalDiscriminator::GlobalDiscriminator(const std::string& name, Index in_ch, Rng& rng) {
  const Index h1 = half_width(in_ch), h2 = half_width(h1), h3 = half_width(h2);
  c1 = nn::Conv2d(name + ".c1", in_ch, h1, 3, 2, 1, rng);
  c2 = nn::Conv2d(name + ".c2", h1, h2, 3, 2, 1, rng);
  c3 = nn::Conv2d(name + ".c3", h2, h3, 3, 2, 1, rng);
  f1 = nn::Linear(name + ".f1", h3, half_width(h3), rng);
  f2 = nn::Linear(name + ".f2", half_width(h3), 1, rng);
}

Var GlobalDiscriminator::forward(TapeSession& s, Var z) {
  Var h = ops::relu(c1.forward(s, z));
  h = ops::relu(c2.forward(s, h));
  h = c3.forward(s, h);
  h = ops::avg_pool_global(h);
  h = ops::relu(f1.forward(s, h));
  return ops::sigmoid(f2.forward(s, h));
}

void GlobalDiscriminator::collect(std::vector<Parameter*>& ps) {
  c1.collect(ps);
  c2.collect(ps);
  c3.collect(ps);
  f1.collect(ps);
  f2.collect(ps);
}

TransitionDiscriminator::TransitionDiscriminator(const std::string& name, Index in_ch,
                                                 Rng& rng) {
  const Index h1 = half_width(in_ch), h2 = half_width(h1), h3 = half_width(h2);
  b1 = nn::Conv2d(name + ".b1", in_ch, h1, 3, 2, 1, rng);
  b2 = nn::Conv2d(name + ".b2", h1, h2, 3, 2, 1, rng);
  b3 = nn::Conv2d(name + ".b3", h2, h3, 3, 2, 1, rng);
  local_head = nn::Conv2d(name + ".local", h3, 1, 1, 1, 0, rng);
  f1 = nn::Linear(name + ".f1", h3, half_width(h3), rng);
  f2 = nn::Linear(name + ".f2", half_width(h3), 1, rng);
}

TransitionDiscriminator::Out TransitionDiscriminator::forward(TapeSession& s, Var z) {
  Var h = ops::relu(b1.forward(s, z));
  h = ops::relu(b2.forward(s, h));
  Var shared = b3.forward(s, h);
  Var local_map = ops::sigmoid(local_head.forward(s, shared));
  Var g = ops::avg_pool_global(shared);
  g = ops::relu(f1.forward(s, g));
  Var global_p = ops::sigmoid(f2.forward(s, g));
  return Out{local_map, global_p};
}

void TransitionDiscriminator::collect(std::vector<Parameter*>& ps) {
  b1.collect(ps);
  b2.collect(ps);
  b3.collect(ps);
  local_head.collect(ps);
  f1.collect(ps);
  f2.collect(ps);
}

Tensor dmi_mask(const Tensor& prob_map, double eta) {
  if (eta < 0.0) {
    throw ValueError("dmi_mask: eta must be non-negative, got " + std::to_string(eta));
  }
  Tensor mask(prob_map.shape());
  for (Index i = 0; i < prob_map.numel(); ++i) {
    const double p = prob_map[i];
    if (p < 0.0 || p > 1.0) {
      throw ValueError("dmi_mask: probability " + std::to_string(p) + " at position " +
                       std::to_string(i) + " outside [0,1]");
    }
    mask[i] = eta * std::abs(p - 0.5) + 1.0;
  }
  return mask;
}

Var local_loss_unmasked(Var prob_map, int domain) {
  if (prob_map.value().numel() == 0) {
    throw ShapeError("local alignment loss on an empty probability map");
  }
  return ops::mean(ops::binary_cross_entropy(prob_map, domain));
}

Var local_loss_masked(Var prob_map, const Tensor& mask, int domain) {
  if (prob_map.value().numel() == 0) {
    throw ShapeError("local alignment loss on an empty probability map");
  }
  if (!prob_map.value().same_shape(mask)) {
    throw ShapeError("mask shape " + shape_to_string(mask.shape()) +
                     " does not match probability map " +
                     shape_to_string(prob_map.value().shape()));
  }
  Var ce = ops::binary_cross_entropy(prob_map, domain);
  Var m = prob_map.tape->leaf(mask, false);
  return ops::mean(ops::mul(ce, m));
}

Var global_loss(Var p, int domain) {
  if (p.value().numel() != 1) {
    throw ShapeError("global alignment loss expects a single probability, got shape " +
                     shape_to_string(p.value().shape()));
  }
  return ops::mean(ops::binary_cross_entropy(p, domain));
}

Var transition_loss(Var local_map, const Tensor& local_mask, Var global_p, int domain) {
  return ops::add(local_loss_masked(local_map, local_mask, domain),
                  global_loss(global_p, domain));
}

FeatLossResult feat_loss(TapeSession& s, Var z1, Var z2, Var z3,
                         LocalDiscriminator& d_local, TransitionDiscriminator& d_transition,
                         GlobalDiscriminator& d_global, int domain, double grl_scale,
                         double eta, const AlignFlags& flags,
                         const MaskOverride* frozen_masks) {
  if (!flags.local && !flags.transition && !flags.global_align) {
    throw ConfigError(
        "image-level alignment needs at least one of the local, transition or "
        "global adaptors enabled");
  }
  FeatLossResult r;
  Var total{};
  auto accumulate = [&](Var term) {
    total = total.valid() ? ops::add(total, term) : term;
  };

  if (flags.local) {
    Var map = d_local.forward(s, ops::gradient_reversal(z1, grl_scale));
    r.probes.local_map = map.value();
    Tensor mask = flags.mask
                      ? (frozen_masks ? frozen_masks->local_mask
                                      : dmi_mask(map.value(), eta))
                      : Tensor::ones(map.value().shape());
    Var term = local_loss_masked(map, mask, domain);
    r.local_value = term.value().item();
    accumulate(term);
  }
  if (flags.transition) {
    auto out = d_transition.forward(s, ops::gradient_reversal(z2, grl_scale));
    r.probes.transition_map = out.local_map.value();
    r.probes.transition_global = out.global_p.value().item();
    const bool masked = flags.mask && flags.mask_transition_branch;
    Tensor mask = masked ? (frozen_masks ? frozen_masks->transition_mask
                                         : dmi_mask(out.local_map.value(), eta))
                         : Tensor::ones(out.local_map.value().shape());
    Var term = transition_loss(out.local_map, mask, out.global_p, domain);
    r.transition_value = term.value().item();
    accumulate(term);
  }
  if (flags.global_align) {
    Var p = d_global.forward(s, ops::gradient_reversal(z3, grl_scale));
    r.probes.global_p = p.value().item();
    Var term = global_loss(p, domain);
    r.global_value = term.value().item();
    accumulate(term);
  }
  r.loss = total;
  return r;
}

}  // namespace da
