#pragma once

#include <string>
#include <vector>

#include "da/grl.hpp"
#include "da/nn.hpp"

namespace da {

/// Per-position domain discriminator on an early feature map: three 1x1
/// convolutions with halving channel widths, ReLU after the first two,
/// sigmoid on the output. Spatial size is preserved.
struct LocalDiscriminator {
  nn::Conv2d c1, c2, c3;

  LocalDiscriminator() = default;
  LocalDiscriminator(const std::string& name, Index in_ch, Rng& rng);

  /// (1,C,H,W) -> (1,1,H,W) probability map.
  Var forward(TapeSession& s, Var z);
  void collect(std::vector<Parameter*>& ps);
};

/// Whole-image domain discriminator: three 3x3 stride-2 convolutions,
/// global average pooling, two fully-connected layers, sigmoid scalar.
struct GlobalDiscriminator {
  nn::Conv2d c1, c2, c3;
  nn::Linear f1, f2;

  GlobalDiscriminator() = default;
  GlobalDiscriminator(const std::string& name, Index in_ch, Rng& rng);

  /// (1,C,H,W) -> (1,1) probability.
  Var forward(TapeSession& s, Var z);
  void collect(std::vector<Parameter*>& ps);
};

/// Y-shaped discriminator for the middle feature map: a shared stride-2
/// convolutional block feeds both a per-position branch (1x1 conv + sigmoid)
/// and a whole-image branch (average pool + two FC + sigmoid). The shared
/// block therefore accumulates gradient from both branches.
struct TransitionDiscriminator {
  nn::Conv2d b1, b2, b3;  // shared block
  nn::Conv2d local_head;
  nn::Linear f1, f2;

  TransitionDiscriminator() = default;
  TransitionDiscriminator(const std::string& name, Index in_ch, Rng& rng);

  struct Out {
    Var local_map;  // (1,1,h,w)
    Var global_p;   // (1,1)
  };
  Out forward(TapeSession& s, Var z);
  void collect(std::vector<Parameter*>& ps);
};

/// Per-position loss weight eta*|p-0.5|+1 computed from a probability map.
/// The result is a plain value, deliberately outside any tape: the weights
/// emphasize confidently classified positions without themselves receiving
/// gradient (letting gradient flow through them would reward pushing
/// probabilities away from 0.5).
Tensor dmi_mask(const Tensor& prob_map, double eta);

/// Mean adversarial cross-entropy over all map positions.
Var local_loss_unmasked(Var prob_map, int domain);

/// Position-weighted mean: (1/HW) * sum mask .* ce(p, d). The mask enters
/// as a constant; with an all-ones mask this is bit-identical to the
/// unmasked loss.
Var local_loss_masked(Var prob_map, const Tensor& mask, int domain);

/// Adversarial cross-entropy of a single whole-image probability.
Var global_loss(Var p, int domain);

/// Masked per-position loss of the transition local branch plus the
/// whole-image loss of its global branch, equally weighted.
Var transition_loss(Var local_map, const Tensor& local_mask, Var global_p, int domain);

struct AlignFlags {
  bool local = true;
  bool transition = true;
  bool global_align = true;
  bool mask = true;                   // position reweighting on the local adaptor
  bool mask_transition_branch = true; // also on the transition local branch
};

/// Probability values extracted during a feature-alignment forward, for
/// metrics, histogram export and discriminator-accuracy tracking.
struct AdaptorProbes {
  Tensor local_map;       // empty when the local adaptor is off
  Tensor transition_map;  // empty when the transition adaptor is off
  double transition_global = -1.0;
  double global_p = -1.0;
};

/// Frozen masks for finite-difference runs: the mask normally recomputes
/// from the current probabilities each call, which would make the loss a
/// different function at each FD evaluation point.
struct MaskOverride {
  Tensor local_mask;
  Tensor transition_mask;
};

struct FeatLossResult {
  Var loss;  // scalar; sum of enabled adaptor terms
  AdaptorProbes probes;
  double local_value = 0.0;
  double transition_value = 0.0;
  double global_value = 0.0;
};

/// Image-level alignment loss for one image: each enabled discriminator sees
/// its feature map through a gradient-reversal node with the given scale.
/// Throws ConfigError when local, transition and global are all disabled.
FeatLossResult feat_loss(TapeSession& s, Var z1, Var z2, Var z3,
                         LocalDiscriminator& d_local, TransitionDiscriminator& d_transition,
                         GlobalDiscriminator& d_global, int domain, double grl_scale,
                         double eta, const AlignFlags& flags,
                         const MaskOverride* frozen_masks = nullptr);

}  // namespace da
