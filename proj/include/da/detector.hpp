#pragma once

#include <string>
#include <vector>

#include "da/box.hpp"
#include "da/nn.hpp"

namespace da {

/// Three-stage feature extractor; each stage is two 3x3 convolutions with
/// ReLU, the first at stride 2, so the stage outputs sit at strides 2, 4, 8.
/// All three intermediate maps are exposed: the alignment adaptors attach to
/// them individually.
struct Backbone {
  nn::Conv2d g1a, g1b, g2a, g2b, g3a, g3b;

  Backbone() = default;
  Backbone(const std::string& name, Index in_ch, Index c1, Index c2, Index c3, Rng& rng);

  struct Maps {
    Var z1, z2, z3;
  };
  /// image (1,C,H,W) with H and W divisible by 8.
  Maps forward(TapeSession& s, Var image);
  void collect(std::vector<Parameter*>& ps);
};

/// Per-proposal prediction from flattened pooled features: two shared FC
/// layers with ReLU, then a (K+1)-way class head (background first) and a
/// 4-way box-offset head shared across classes.
struct PredictionHead {
  nn::Linear fc1, fc2, cls, box;

  PredictionHead() = default;
  PredictionHead(const std::string& name, Index in_features, Index hidden,
                 Index num_classes, Rng& rng);

  struct Out {
    Var cls_logits;  // (R, K+1)
    Var box_deltas;  // (R, 4)
  };
  Out forward(TapeSession& s, Var pooled_flat);
  void collect(std::vector<Parameter*>& ps);
};

struct ProposalConfig {
  int budget = 16;            // proposals per image
  double fg_fraction = 0.33;  // share of the budget spent on jittered seed copies
  double jitter_frac = 0.2;  // jitter amplitude as a fraction of box size
  double min_random_size = 6.0;
  double max_random_frac = 0.8;  // random box max side as a fraction of the image
  double jitter_keep_iou = 0.55;  // jittered copies stay at least this close to the seed
  double bg_max_iou = 0.3;        // random rectangles stay at most this close to any seed
  int resample_tries = 12;
};

/// Fixed-budget proposal stream: an fg_fraction share of the budget jitters
/// the seed boxes (cycling through them), the rest are uniform random
/// rectangles kept clear of the seeds. With no seeds the whole budget is
/// random. Purely a function of (seeds, rng state).
std::vector<Box> generate_proposals(const std::vector<Box>& seeds,
                                    const ProposalConfig& cfg, double image_size,
                                    Rng& rng);

/// Box-offset encoding between a proposal and a target box:
/// (dx, dy) center shift normalized by proposal size, (dw, dh) log scale.
Tensor encode_offsets(const Box& proposal, const Box& gt);
Box decode_offsets(const Box& proposal, const double* deltas);

struct MatchedTargets {
  std::vector<int> labels;  // per proposal: 0 = background, 1..K = object class
  Tensor box_targets;       // (R,4), zero rows for background proposals
  std::vector<Index> fg_rows;
};

/// Assigns each proposal its best-IoU ground-truth box: label and offsets if
/// the IoU reaches the threshold, background otherwise.
MatchedTargets match_proposals(const std::vector<Box>& proposals,
                               const std::vector<Box>& gt_boxes,
                               const std::vector<int>& gt_classes,
                               double iou_threshold = 0.5);

struct DetectionLoss {
  Var loss;  // cls_weight * ce + box_weight * smooth-l1 (foreground rows only)
  double cls_value = 0.0;
  double box_value = 0.0;
};

DetectionLoss detection_loss(TapeSession& s, Var cls_logits, Var box_deltas,
                             const MatchedTargets& targets, double cls_weight = 1.0,
                             double box_weight = 1.0);

struct Detection {
  Box box;
  int class_id = 0;  // object class in [0, K)
  double score = 0.0;
};

/// Greedy per-class non-maximum suppression. Ties are broken by coordinates
/// so the result is deterministic regardless of input order.
std::vector<Detection> nms_per_class(std::vector<Detection> dets, double iou_threshold);

/// Square candidate boxes of the given sizes centered on a regular lattice,
/// clamped to the image.
std::vector<Box> dense_grid_boxes(double image_size, int stride,
                                  const std::vector<double>& sizes);

}  // namespace da
