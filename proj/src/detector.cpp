#include "da/detector.hpp"

#include <algorithm>
#include <cmath>

namespace da {

Backbone::Backbone(const std::string& name, Index in_ch, Index c1, Index c2, Index c3,
                   Rng& rng) {
  g1a = nn::Conv2d(name + ".g1a", in_ch, c1, 3, 2, 1, rng);
  g1b = nn::Conv2d(name + ".g1b", c1, c1, 3, 1, 1, rng);
  g2a = nn::Conv2d(name + ".g2a", c1, c2, 3, 2, 1, rng);
  g2b = nn::Conv2d(name + ".g2b", c2, c2, 3, 1, 1, rng);
  g3a = nn::Conv2d(name + ".g3a", c2, c3, 3, 2, 1, rng);
  g3b = nn::Conv2d(name + ".g3b", c3, c3, 3, 1, 1, rng);
}

Backbone::Maps Backbone::forward(TapeSession& s, Var image) {
  const Tensor& x = image.value();
  if (x.rank() != 4) {
    throw ShapeError("backbone expects a (1,C,H,W) image, got " +
                     shape_to_string(x.shape()));
  }
  if (x.dim(2) % 8 != 0 || x.dim(3) % 8 != 0) {
    throw ShapeError("backbone needs spatial dims divisible by 8, got " +
                     std::to_string(x.dim(2)) + "x" + std::to_string(x.dim(3)));
  }
  Var z1 = ops::relu(g1b.forward(s, ops::relu(g1a.forward(s, image))));
  Var z2 = ops::relu(g2b.forward(s, ops::relu(g2a.forward(s, z1))));
  Var z3 = ops::relu(g3b.forward(s, ops::relu(g3a.forward(s, z2))));
  return Maps{z1, z2, z3};
}

void Backbone::collect(std::vector<Parameter*>& ps) {
  g1a.collect(ps);
  g1b.collect(ps);
  g2a.collect(ps);
  g2b.collect(ps);
  g3a.collect(ps);
  g3b.collect(ps);
}

PredictionHead::PredictionHead(const std::string& name, Index in_features, Index hidden,
                               Index num_classes, Rng& rng) {
  fc1 = nn::Linear(name + ".fc1", in_features, hidden, rng);
  fc2 = nn::Linear(name + ".fc2", hidden, hidden, rng);
  cls = nn::Linear(name + ".cls", hidden, num_classes + 1, rng);
  box = nn::Linear(name + ".box", hidden, 4, rng);
}

PredictionHead::Out PredictionHead::forward(TapeSession& s, Var pooled_flat) {
  Var h = ops::relu(fc1.forward(s, pooled_flat));
  h = ops::relu(fc2.forward(s, h));
  return Out{cls.forward(s, h), box.forward(s, h)};
}

void PredictionHead::collect(std::vector<Parameter*>& ps) {
  fc1.collect(ps);
  fc2.collect(ps);
  cls.collect(ps);
  box.collect(ps);
}

namespace {

// Clamp into the image, then guarantee at least ~1px extent by nudging the
// far corner (or the near one at the border).
Box sanitize(Box b, double size) {
  b = clamp_to_image(b, size);
  const double min_ext = 1.0;
  if (b.x2 - b.x1 < min_ext) {
    if (b.x1 + min_ext <= size) {
      b.x2 = b.x1 + min_ext;
    } else {
      b.x2 = size;
      b.x1 = size - min_ext;
    }
  }
  if (b.y2 - b.y1 < min_ext) {
    if (b.y1 + min_ext <= size) {
      b.y2 = b.y1 + min_ext;
    } else {
      b.y2 = size;
      b.y1 = size - min_ext;
    }
  }
  return b;
}

}  // namespace

std::vector<Box> generate_proposals(const std::vector<Box>& seeds,
                                    const ProposalConfig& cfg, double image_size,
                                    Rng& rng) {
  std::vector<Box> out;
  out.reserve(static_cast<std::size_t>(cfg.budget));
  const int n_jittered =
      seeds.empty() ? 0
                    : std::clamp(static_cast<int>(std::lround(cfg.fg_fraction *
                                                              cfg.budget)),
                                 0, cfg.budget);
  for (int i = 0; i < n_jittered; ++i) {
    const Box& seed = seeds[static_cast<std::size_t>(i) % seeds.size()];
    const double jw = cfg.jitter_frac * seed.width();
    const double jh = cfg.jitter_frac * seed.height();
    // Resample jitters that stray too far; a copy meant as foreground must
    // not drift below the matcher's overlap threshold and flip its label.
    Box kept = seed;
    for (int attempt = 0; attempt < cfg.resample_tries; ++attempt) {
      Box b{seed.x1 + rng.uniform(-jw, jw), seed.y1 + rng.uniform(-jh, jh),
            seed.x2 + rng.uniform(-jw, jw), seed.y2 + rng.uniform(-jh, jh)};
      b = sanitize(b, image_size);
      if (iou(b, seed) >= cfg.jitter_keep_iou) {
        kept = b;
        break;
      }
    }
    out.push_back(kept);
  }
  const double max_side = cfg.max_random_frac * image_size;
  for (int i = n_jittered; i < cfg.budget; ++i) {
    // Background rectangles: reject draws that sit on a seed box. Bounded
    // tries keep the stream deterministic even on crowded scenes.
    Box cand{};
    for (int attempt = 0; attempt < cfg.resample_tries; ++attempt) {
      const double w = rng.uniform(cfg.min_random_size, max_side);
      const double h = rng.uniform(cfg.min_random_size, max_side);
      const double x1 = rng.uniform(0.0, image_size - w);
      const double y1 = rng.uniform(0.0, image_size - h);
      cand = sanitize(Box{x1, y1, x1 + w, y1 + h}, image_size);
      double overlap = 0.0;
      for (const Box& s : seeds) overlap = std::max(overlap, iou(cand, s));
      if (overlap <= cfg.bg_max_iou) break;
    }
    out.push_back(cand);
  }
  return out;
}

Tensor encode_offsets(const Box& proposal, const Box& gt) {
  const double pw = proposal.width(), ph = proposal.height();
  Tensor t({4});
  t[0] = (gt.cx() - proposal.cx()) / pw;
  t[1] = (gt.cy() - proposal.cy()) / ph;
  t[2] = std::log(gt.width() / pw);
  t[3] = std::log(gt.height() / ph);
  return t;
}

Box decode_offsets(const Box& proposal, const double* d) {
  const double pw = proposal.width(), ph = proposal.height();
  const double cx = proposal.cx() + d[0] * pw;
  const double cy = proposal.cy() + d[1] * ph;
  const double w = pw * std::exp(d[2]);
  const double h = ph * std::exp(d[3]);
  return Box{cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

MatchedTargets match_proposals(const std::vector<Box>& proposals,
                               const std::vector<Box>& gt_boxes,
                               const std::vector<int>& gt_classes,
                               double iou_threshold) {
  if (gt_boxes.size() != gt_classes.size()) {
    throw ShapeError("match_proposals: " + std::to_string(gt_boxes.size()) +
                     " boxes vs " + std::to_string(gt_classes.size()) + " labels");
  }
  MatchedTargets t;
  t.labels.resize(proposals.size(), 0);
  t.box_targets = Tensor({static_cast<Index>(proposals.size()), 4});
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    double best = 0.0;
    int best_j = -1;
    for (std::size_t j = 0; j < gt_boxes.size(); ++j) {
      const double v = iou(proposals[i], gt_boxes[j]);
      if (v > best) {
        best = v;
        best_j = static_cast<int>(j);
      }
    }
    if (best_j >= 0 && best >= iou_threshold) {
      t.labels[i] = gt_classes[static_cast<std::size_t>(best_j)] + 1;
      const Tensor enc = encode_offsets(proposals[i], gt_boxes[static_cast<std::size_t>(best_j)]);
      for (Index k = 0; k < 4; ++k) t.box_targets[static_cast<Index>(i) * 4 + k] = enc[k];
      t.fg_rows.push_back(static_cast<Index>(i));
    }
  }
  return t;
}

DetectionLoss detection_loss(TapeSession&, Var cls_logits, Var box_deltas,
                             const MatchedTargets& targets, double cls_weight,
                             double box_weight) {
  DetectionLoss r;
  Var cls_term = ops::softmax_ce(cls_logits, targets.labels);
  r.cls_value = cls_term.value().item();
  Var total = ops::scale(cls_term, cls_weight);
  if (!targets.fg_rows.empty()) {
    Var fg_pred = ops::gather_rows(box_deltas, targets.fg_rows);
    Tensor fg_tgt({static_cast<Index>(targets.fg_rows.size()), 4});
    for (std::size_t i = 0; i < targets.fg_rows.size(); ++i) {
      for (Index k = 0; k < 4; ++k) {
        fg_tgt[static_cast<Index>(i) * 4 + k] = targets.box_targets[targets.fg_rows[i] * 4 + k];
      }
    }
    Var box_term = ops::smooth_l1(fg_pred, fg_tgt);
    r.box_value = box_term.value().item();
    total = ops::add(total, ops::scale(box_term, box_weight));
  }
  r.loss = total;
  return r;
}

std::vector<Detection> nms_per_class(std::vector<Detection> dets, double iou_threshold) {
  std::sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.class_id != b.class_id) return a.class_id < b.class_id;
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
    if (a.box.y1 != b.box.y1) return a.box.y1 < b.box.y1;
    if (a.box.x2 != b.box.x2) return a.box.x2 < b.box.x2;
    return a.box.y2 < b.box.y2;
  });
  std::vector<Detection> kept;
  std::size_t i = 0;
  while (i < dets.size()) {
    std::size_t j = i;
    while (j < dets.size() && dets[j].class_id == dets[i].class_id) ++j;
    std::vector<bool> suppressed(j - i, false);
    for (std::size_t a = i; a < j; ++a) {
      if (suppressed[a - i]) continue;
      kept.push_back(dets[a]);
      for (std::size_t b = a + 1; b < j; ++b) {
        if (!suppressed[b - i] && iou(dets[a].box, dets[b].box) >= iou_threshold) {
          suppressed[b - i] = true;
        }
      }
    }
    i = j;
  }
  return kept;
}

std::vector<Box> dense_grid_boxes(double image_size, int stride,
                                  const std::vector<double>& sizes) {
  std::vector<Box> boxes;
  for (double cy = stride * 0.5; cy < image_size; cy += stride) {
    for (double cx = stride * 0.5; cx < image_size; cx += stride) {
      for (double sz : sizes) {
        Box b{cx - sz / 2, cy - sz / 2, cx + sz / 2, cy + sz / 2};
        boxes.push_back(sanitize(b, image_size));
      }
    }
  }
  return boxes;
}

}  // namespace da
