#pragma once

#include <string>
#include <vector>

#include "da/box.hpp"
#include "da/nn.hpp"

namespace da {

struct Proposal {
  Box box;
  double objectness = 0.0;
  std::vector<double> class_scores;  // softmax over [background, K object classes]
};

struct PartitionedProposals {
  std::vector<Proposal> fg, bg;
  std::vector<Index> fg_rows, bg_rows;  // positions in the input list
  int dropped = 0;                      // proposals excluded from alignment
};

/// Source-domain split: a proposal is foreground iff its best IoU against any
/// ground-truth box reaches the threshold; everything else is background.
PartitionedProposals partition_source(const std::vector<Proposal>& proposals,
                                      const std::vector<Box>& gt_boxes,
                                      double iou_fg_threshold = 0.5);

/// How "object score" is read off a class-score vector: the best single
/// object class, or the total mass on all object classes.
enum class ObjScoreMode { kMax, kSum };

/// Target-domain split from predicted class scores: background score strictly
/// above the threshold -> background; object score strictly above it ->
/// foreground; ambiguous proposals are dropped from alignment. Scores must be
/// a softmax vector (background first) summing to one within 1e-6.
PartitionedProposals partition_target(const std::vector<Proposal>& proposals,
                                      double score_threshold = 0.9,
                                      ObjScoreMode mode = ObjScoreMode::kMax);

/// Per-instance domain classifier: two FC+BN+ReLU stages and a final FC to a
/// sigmoid probability. Batch normalization runs over the instances of the
/// current step, so the batch needs at least two rows.
struct InstanceDiscriminator {
  nn::Linear f1, f2, f3;
  nn::BatchNorm bn1, bn2;

  InstanceDiscriminator() = default;
  InstanceDiscriminator(const std::string& name, Index in_features, Rng& rng);

  /// (N,F) -> (N,1) probabilities; requires N >= 2.
  Var forward(TapeSession& s, Var feats);
  void collect(std::vector<Parameter*>& ps);
};

/// Mean adversarial CE of foreground probabilities plus mean adversarial CE
/// of background probabilities for one image; a side with no instances
/// contributes zero. Probability args may be invalid Vars (treated as empty).
Var roi_alignment_loss(TapeSession& s, Var fg_probs, Var bg_probs, int domain);

/// One step of proposal-level alignment. Feature rows (N,F) may be invalid or
/// zero-row. Each discriminator normalizes over its joint source+target batch,
/// so a side with exactly one instance in the whole step is skipped (variance
/// undefined) and flagged.
struct InstanceStepResult {
  Var loss_source, loss_target;  // scalars (zero leaves when nothing to align)
  int fg_src = 0, bg_src = 0, fg_tgt = 0, bg_tgt = 0;
  bool skipped_fg = false, skipped_bg = false;
  Tensor fg_probs_src, fg_probs_tgt, bg_probs_src, bg_probs_tgt;  // diagnostics
};

InstanceStepResult instance_alignment_step(TapeSession& s, Var src_fg, Var src_bg,
                                           Var tgt_fg, Var tgt_bg,
                                           InstanceDiscriminator& d_fg,
                                           InstanceDiscriminator& d_bg);

/// Ablation variant: one discriminator over all proposals, no fg/bg split.
InstanceStepResult single_discriminator_step(TapeSession& s, Var src_all, Var tgt_all,
                                             InstanceDiscriminator& d);

}  // namespace da
