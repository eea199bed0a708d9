#include "da/eval.hpp"

#include <algorithm>

namespace da {

EvalResult evaluate_map(const std::vector<std::vector<Detection>>& detections,
                        const std::vector<std::vector<GroundTruth>>& ground_truth,
                        int num_classes, double iou_threshold) {
  if (detections.size() != ground_truth.size()) {
    throw ShapeError("evaluate_map: " + std::to_string(detections.size()) +
                     " detection lists vs " + std::to_string(ground_truth.size()) +
                     " ground-truth lists");
  }
  EvalResult result;
  result.ap.assign(static_cast<std::size_t>(num_classes), -1.0);
  result.gt_counts.assign(static_cast<std::size_t>(num_classes), 0);

  struct Det {
    double score;
    std::size_t image;
    Box box;
  };

  double ap_sum = 0.0;
  int classes_with_gt = 0;
  for (int c = 0; c < num_classes; ++c) {
    int n_gt = 0;
    for (const auto& per_image : ground_truth) {
      for (const auto& g : per_image) {
        if (g.class_id == c) ++n_gt;
      }
    }
    result.gt_counts[static_cast<std::size_t>(c)] = n_gt;
    if (n_gt == 0) continue;
    ++classes_with_gt;

    std::vector<Det> dets;
    for (std::size_t img = 0; img < detections.size(); ++img) {
      for (const auto& d : detections[img]) {
        if (d.class_id == c) dets.push_back(Det{d.score, img, d.box});
      }
    }
    std::sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
      return a.box.y1 < b.box.y1;
    });

    std::vector<std::vector<bool>> claimed(ground_truth.size());
    for (std::size_t img = 0; img < ground_truth.size(); ++img) {
      claimed[img].assign(ground_truth[img].size(), false);
    }

    std::vector<double> precision, recall;
    int tp = 0, fp = 0;
    for (const Det& d : dets) {
      const auto& gts = ground_truth[d.image];
      double best = 0.0;
      int best_j = -1;
      for (std::size_t j = 0; j < gts.size(); ++j) {
        if (gts[j].class_id != c || claimed[d.image][j]) continue;
        const double v = iou(d.box, gts[j].box);
        if (v > best) {
          best = v;
          best_j = static_cast<int>(j);
        }
      }
      if (best_j >= 0 && best >= iou_threshold) {
        claimed[d.image][static_cast<std::size_t>(best_j)] = true;
        ++tp;
      } else {
        ++fp;
      }
      precision.push_back(static_cast<double>(tp) / static_cast<double>(tp + fp));
      recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    }

    // precision envelope, then integrate over recall steps
    for (std::size_t i = precision.size(); i-- > 1;) {
      precision[i - 1] = std::max(precision[i - 1], precision[i]);
    }
    double ap = 0.0, prev_recall = 0.0;
    for (std::size_t i = 0; i < precision.size(); ++i) {
      ap += (recall[i] - prev_recall) * precision[i];
      prev_recall = recall[i];
    }
    result.ap[static_cast<std::size_t>(c)] = ap;
    ap_sum += ap;
  }
  result.map = classes_with_gt > 0 ? ap_sum / classes_with_gt : 0.0;
  return result;
}

}  // namespace da
