#pragma once

#include <string>
#include <vector>

#include "da/adaptors.hpp"
#include "da/detector.hpp"
#include "da/instance.hpp"

namespace da {

struct ModelConfig {
  int image_size = 32;
  int num_classes = 3;
  Index c1 = 16, c2 = 32, c3 = 64;  // backbone stage widths
  Index head_hidden = 64;
  Index pooled = 3;  // side of the ROI pooling grid
};

/// The full parameter set: detector (backbone + prediction head) and every
/// domain discriminator, including the single-discriminator ablation variant
/// so checkpoints have one fixed layout. All parameters are drawn from one
/// seeded stream in a fixed construction order.
struct Model {
  ModelConfig config;
  Backbone backbone;
  PredictionHead head;
  LocalDiscriminator d_local;
  TransitionDiscriminator d_transition;
  GlobalDiscriminator d_global;
  InstanceDiscriminator d_fg, d_bg, d_single;

  Model(const ModelConfig& cfg, std::uint64_t seed);

  Index roi_feature_dim() const { return config.c3 * config.pooled * config.pooled; }
  /// Image-to-stride-8-feature coordinate scale.
  double feature_scale() const { return 0.125; }

  std::vector<Parameter*> params();
  std::vector<Parameter*> backbone_params();
  std::vector<Parameter*> head_params();
  std::vector<Parameter*> discriminator_params();
};

/// Writes `prefix`.bin (all parameter values, little-endian float64, in
/// params() order) and `prefix`.json (config plus a name/shape/offset index).
void save_checkpoint(Model& model, const std::string& prefix);

/// Restores parameter values in place. The checkpoint's config, parameter
/// names and shapes must match the model exactly.
void load_checkpoint(Model& model, const std::string& prefix);

/// Reads just the model config out of a checkpoint index, for constructing a
/// compatible model before load_checkpoint.
ModelConfig checkpoint_model_config(const std::string& prefix);

struct InferConfig {
  double score_threshold = 0.25;
  double nms_iou = 0.3;
  int grid_stride = 2;
  std::vector<double> grid_sizes{10.0, 14.0, 18.0, 22.0};
};

struct ScoredBoxes {
  std::vector<Box> boxes;
  Tensor cls_probs;   // (R, K+1) softmax rows, background first
  Tensor box_deltas;  // (R, 4)
};

/// Frozen backbone pass; returns the stride-8 map as a plain value.
Tensor backbone_z3(Model& model, const Tensor& image);

/// Scores the given boxes against an already-computed stride-8 map with the
/// prediction head, without building any gradient state.
ScoredBoxes score_boxes(Model& model, const Tensor& z3, const std::vector<Box>& boxes);

/// Full frozen detection pass: dense candidate boxes, head scoring, offset
/// decoding, score thresholding, per-class NMS.
std::vector<Detection> infer_image(Model& model, const Tensor& image,
                                   const InferConfig& cfg);

}  // namespace da
