#pragma once

#include <limits>
#include <vector>

#include "da/box.hpp"
#include "da/tape.hpp"

namespace da {

/// Probabilities are clamped into [kClampEps, 1-kClampEps] before any log.
inline constexpr double kClampEps = 1e-7;

/// Thread-local op instrumentation: counts probability clamps and, when the
/// finite-difference driver enables it, tracks the distance to the nearest
/// non-smooth point (relu zero, pooling tie, smooth-l1 transition, clamp
/// boundary) seen during a forward pass.
struct OpStats {
  long clamp_events = 0;
  bool track_margins = false;
  double min_margin = std::numeric_limits<double>::infinity();

  void note_margin(double m) {
    if (m < min_margin) min_margin = m;
  }
  void reset() {
    clamp_events = 0;
    min_margin = std::numeric_limits<double>::infinity();
  }
};

OpStats& op_stats();

namespace ops {

// Elementwise arithmetic (same-shape operands).
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double k);
Var add_scalar(Var a, double k);

// Reductions and shape plumbing.
Var sum(Var a);
Var mean(Var a);
Var reshape(Var a, std::vector<Index> shape);
Var concat_rows(const std::vector<Var>& xs);
Var gather_rows(Var x, const std::vector<Index>& rows);
Var slice_rows(Var x, Index begin, Index count);

// Activations.
Var relu(Var x);
Var sigmoid(Var x);

/// Cross-correlation of NCHW input with OIKhKw weights plus per-channel bias.
/// Output spatial size is floor((H + 2*padding - Kh)/stride) + 1.
Var conv2d(Var x, Var w, Var b, int stride, int padding);

/// Affine map: (N,F) x (F,G) + (G).
Var fully_connected(Var x, Var w, Var b);

/// Per-feature batch standardization over rows, then gamma * xhat + beta.
/// Requires N >= 2 (variance is undefined for a single row).
// eps bounds the backward inv-std factor at 1/sqrt(eps). Proposal batches
// routinely carry near-duplicate rows (overlapping boxes pooled from a 4x4
// map), so a small eps turns variance collapse into exploding gradients.
Var batch_norm(Var x, Var gamma, Var beta, double eps = 1e-2);

/// (N,C,H,W) -> (N,C) spatial mean.
Var avg_pool_global(Var x);

/// Elementwise -d*log(p) - (1-d)*log(1-p) with clamped p; same shape as p.
Var binary_cross_entropy(Var p, int domain_label);

/// Mean over elements of the Huber penalty with transition point 1.
Var smooth_l1(Var pred, const Tensor& target);

/// Mean over rows of softmax cross-entropy against integer labels.
Var softmax_ce(Var logits, const std::vector<int>& labels);

/// Classic max-pool ROI pooling: boxes in image coordinates are mapped to
/// feature coordinates via `image_to_feature_scale`, split into an
/// out_h x out_w grid, max over each cell. Feature must be (1,C,H,W);
/// result is (R,C,out_h,out_w).
Var roi_pool(Var feature, const std::vector<Box>& boxes, int out_h, int out_w,
             double image_to_feature_scale);

}  // namespace ops

/// Row-wise softmax of an (N,K) tensor, value-level (used by inference paths).
Tensor softmax_rows(const Tensor& logits);

}  // namespace da
