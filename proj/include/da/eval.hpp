#pragma once

#include <vector>

#include "da/detector.hpp"

namespace da {

struct GroundTruth {
  Box box;
  int class_id = 0;
};

struct EvalResult {
  std::vector<double> ap;      // per class; -1 for classes with no ground truth
  std::vector<int> gt_counts;  // ground-truth instances per class
  double map = 0.0;            // mean AP over classes with at least one instance
};

/// All-points average precision at the given IoU threshold, per class, with
/// greedy highest-score-first matching (each ground-truth box matches at most
/// one detection). detections[i] and ground_truth[i] belong to image i.
EvalResult evaluate_map(const std::vector<std::vector<Detection>>& detections,
                        const std::vector<std::vector<GroundTruth>>& ground_truth,
                        int num_classes, double iou_threshold = 0.5);

}  // namespace da
