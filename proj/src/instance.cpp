#include "da/instance.hpp"

#include <cmath>

namespace da {

namespace {

Index rows_of(Var v) {
  if (!v.valid()) return 0;
  const Tensor& t = v.value();
  return t.rank() == 2 ? t.dim(0) : 0;
}

Var zero_scalar(TapeSession& s) { return s.input(Tensor::scalar(0.0)); }

}  // namespace

PartitionedProposals partition_source(const std::vector<Proposal>& proposals,
                                      const std::vector<Box>& gt_boxes,
                                      double iou_fg_threshold) {
  for (const Box& g : gt_boxes) {
    if (!g.valid()) {
      throw ValueError("partition_source: degenerate ground-truth box " + g.to_string());
    }
  }
  PartitionedProposals out;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best = 0.0;
    for (const Box& g : gt_boxes) best = std::max(best, iou(proposals[i].box, g));
    if (best >= iou_fg_threshold) {
      out.fg.push_back(proposals[i]);
      out.fg_rows.push_back(static_cast<Index>(i));
    } else {
      out.bg.push_back(proposals[i]);
      out.bg_rows.push_back(static_cast<Index>(i));
    }
  }
  return out;
}

PartitionedProposals partition_target(const std::vector<Proposal>& proposals,
                                      double score_threshold, ObjScoreMode mode) {
  PartitionedProposals out;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const auto& scores = proposals[i].class_scores;
    if (scores.size() < 2) {
      throw ValueError("partition_target: proposal " + std::to_string(i) +
                       " carries no class-score vector");
    }
    double sum = 0.0;
    for (double v : scores) sum += v;
    if (std::abs(sum - 1.0) > 1e-6) {
      throw ValueError("partition_target: class scores of proposal " + std::to_string(i) +
                       " sum to " + std::to_string(sum) + ", not 1");
    }
    const double bg_score = scores[0];
    double obj_score = 0.0;
    for (std::size_t k = 1; k < scores.size(); ++k) {
      obj_score = mode == ObjScoreMode::kMax ? std::max(obj_score, scores[k])
                                             : obj_score + scores[k];
    }
    if (bg_score > score_threshold) {
      out.bg.push_back(proposals[i]);
      out.bg_rows.push_back(static_cast<Index>(i));
    } else if (obj_score > score_threshold) {
      out.fg.push_back(proposals[i]);
      out.fg_rows.push_back(static_cast<Index>(i));
    } else {
      ++out.dropped;
    }
  }
  return out;
}

InstanceDiscriminator::InstanceDiscriminator(const std::string& name, Index in_features,
                                             Rng& rng) {
  const Index h1 = nn::half_width(in_features), h2 = nn::half_width(h1);
  f1 = nn::Linear(name + ".f1", in_features, h1, rng);
  bn1 = nn::BatchNorm(name + ".bn1", h1);
  f2 = nn::Linear(name + ".f2", h1, h2, rng);
  bn2 = nn::BatchNorm(name + ".bn2", h2);
  f3 = nn::Linear(name + ".f3", h2, 1, rng);
}

Var InstanceDiscriminator::forward(TapeSession& s, Var feats) {
  Var h = ops::relu(bn1.forward(s, f1.forward(s, feats)));
  h = ops::relu(bn2.forward(s, f2.forward(s, h)));
  return ops::sigmoid(f3.forward(s, h));
}

void InstanceDiscriminator::collect(std::vector<Parameter*>& ps) {
  f1.collect(ps);
  bn1.collect(ps);
  f2.collect(ps);
  bn2.collect(ps);
  f3.collect(ps);
}

Var roi_alignment_loss(TapeSession& s, Var fg_probs, Var bg_probs, int domain) {
  Var total = zero_scalar(s);
  if (rows_of(fg_probs) > 0) {
    total = ops::add(total, ops::mean(ops::binary_cross_entropy(fg_probs, domain)));
  }
  if (rows_of(bg_probs) > 0) {
    total = ops::add(total, ops::mean(ops::binary_cross_entropy(bg_probs, domain)));
  }
  return total;
}

namespace {

// Runs one discriminator over the joint source+target batch of a side and
// returns per-domain mean CE terms plus extracted probabilities.
struct SideResult {
  Var loss_src, loss_tgt;     // invalid when the domain has no instances
  Tensor probs_src, probs_tgt;
  bool skipped = false;
};

SideResult align_side(TapeSession& s, Var src, Var tgt, InstanceDiscriminator& d) {
  SideResult r;
  const Index ns = rows_of(src), nt = rows_of(tgt);
  if (ns == 0 && nt == 0) return r;
  // Aligning distributions needs both of them in the batch. A step where one
  // domain contributes no rows to this side would only push the lone domain's
  // features around, so it is sat out.
  if (ns == 0 || nt == 0) {
    r.skipped = true;
    return r;
  }
  Var batch = ops::concat_rows({src, tgt});
  Var probs = d.forward(s, batch);
  if (ns > 0) {
    Var ps = ops::slice_rows(probs, 0, ns);
    r.probs_src = ps.value();
    r.loss_src = ops::mean(ops::binary_cross_entropy(ps, 0));
  }
  if (nt > 0) {
    Var pt = ops::slice_rows(probs, ns, nt);
    r.probs_tgt = pt.value();
    r.loss_tgt = ops::mean(ops::binary_cross_entropy(pt, 1));
  }
  return r;
}

}  // namespace

InstanceStepResult instance_alignment_step(TapeSession& s, Var src_fg, Var src_bg,
                                           Var tgt_fg, Var tgt_bg,
                                           InstanceDiscriminator& d_fg,
                                           InstanceDiscriminator& d_bg) {
  InstanceStepResult r;
  r.fg_src = static_cast<int>(rows_of(src_fg));
  r.bg_src = static_cast<int>(rows_of(src_bg));
  r.fg_tgt = static_cast<int>(rows_of(tgt_fg));
  r.bg_tgt = static_cast<int>(rows_of(tgt_bg));

  SideResult fg = align_side(s, src_fg, tgt_fg, d_fg);
  SideResult bg = align_side(s, src_bg, tgt_bg, d_bg);
  r.skipped_fg = fg.skipped;
  r.skipped_bg = bg.skipped;
  r.fg_probs_src = fg.probs_src;
  r.fg_probs_tgt = fg.probs_tgt;
  r.bg_probs_src = bg.probs_src;
  r.bg_probs_tgt = bg.probs_tgt;

  r.loss_source = zero_scalar(s);
  if (fg.loss_src.valid()) r.loss_source = ops::add(r.loss_source, fg.loss_src);
  if (bg.loss_src.valid()) r.loss_source = ops::add(r.loss_source, bg.loss_src);
  r.loss_target = zero_scalar(s);
  if (fg.loss_tgt.valid()) r.loss_target = ops::add(r.loss_target, fg.loss_tgt);
  if (bg.loss_tgt.valid()) r.loss_target = ops::add(r.loss_target, bg.loss_tgt);
  return r;
}

InstanceStepResult single_discriminator_step(TapeSession& s, Var src_all, Var tgt_all,
                                             InstanceDiscriminator& d) {
  InstanceStepResult r;
  r.fg_src = static_cast<int>(rows_of(src_all));
  r.fg_tgt = static_cast<int>(rows_of(tgt_all));

  SideResult all = align_side(s, src_all, tgt_all, d);
  r.skipped_fg = all.skipped;
  r.fg_probs_src = all.probs_src;
  r.fg_probs_tgt = all.probs_tgt;

  r.loss_source = all.loss_src.valid() ? all.loss_src : zero_scalar(s);
  r.loss_target = all.loss_tgt.valid() ? all.loss_tgt : zero_scalar(s);
  return r;
}

}  // namespace da
