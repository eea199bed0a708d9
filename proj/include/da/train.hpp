#pragma once

#include <string>
#include <vector>

#include "da/eval.hpp"
#include "da/model.hpp"
#include "da/optim.hpp"
#include "da/synth.hpp"

namespace da {

struct TrainConfig {
  std::uint64_t seed = 1;
  int iterations = 2000;

  // 2000 iterations at 0.03 covers the same lr x steps ground as a long
  // schedule at 1e-3; the 5:2 phase split is kept.
  double learning_rate = 0.03;
  double late_learning_rate = 0.003;
  int lr_drop_iteration = 1428;
  double weight_decay = 1e-4;

  double lambda = 0.05;  // adversarial trade-off; also the reversal scale
  double eta = 5.0;      // position-reweighting strength

  double cls_weight = 1.0;
  double box_weight = 1.0;

  AlignFlags align;            // image-level adaptors and masking
  bool instance_align = true;  // proposal-level alignment
  bool single_instance_disc = false;

  ObjScoreMode obj_score_mode = ObjScoreMode::kSum;
  double target_fg_threshold = 0.9;
  double source_fg_iou = 0.5;

  ProposalConfig proposals;
  double target_seed_score = 0.5;  // min class prob for a decoded box to seed proposals
  int target_seed_boxes = 4;
  int seed_grid_stride = 8;

  InferConfig infer;
  ModelConfig model;

  int metrics_interval = 50;

  bool image_alignment_on() const {
    return align.local || align.transition || align.global_align;
  }
  bool alignment_on() const { return image_alignment_on() || instance_align; }
};

std::string train_config_to_json(const TrainConfig& cfg);
TrainConfig train_config_from_json(const std::string& text);
TrainConfig load_train_config(const std::string& path);

/// Everything about a step that is decided before gradients flow: which
/// proposals to use, their matched detection targets, the fg/bg split on
/// both domains, and (for finite-difference runs only) frozen reweighting
/// masks. Freezing these makes the step objective a pure function of the
/// parameters.
struct StepPlan {
  std::vector<Box> src_proposals;
  MatchedTargets src_targets;
  std::vector<Index> src_fg_rows, src_bg_rows;

  std::vector<Box> tgt_proposals;
  std::vector<Index> tgt_fg_rows, tgt_bg_rows;
  int tgt_dropped = 0;
  bool tgt_seeded = false;  // proposal seeds came from decoded predictions

  bool has_masks = false;
  MaskOverride src_masks, tgt_masks;
};

StepPlan plan_step(Model& model, const DetectionSample& src, const DetectionSample& tgt,
                   const TrainConfig& cfg, Rng& rng);

/// Computes the reweighting masks both domains would see at the current
/// parameters and pins them into the plan.
void freeze_masks(Model& model, const DetectionSample& src, const DetectionSample& tgt,
                  StepPlan& plan, const TrainConfig& cfg);

struct StepResult {
  Var total;  // scalar on the session's tape
  double det_total = 0.0, det_cls = 0.0, det_box = 0.0;
  double feat_src = 0.0, feat_tgt = 0.0;  // image-level alignment, raw values
  double inst_src = 0.0, inst_tgt = 0.0;  // proposal-level alignment
  double da_raw = 0.0;                    // all alignment terms, both domains
  AdaptorProbes probes_src, probes_tgt;
  InstanceStepResult inst;
};

/// Builds the full step objective on the session's tape: detection loss on
/// the source image plus every enabled alignment term on both images. The
/// recorded scalar is L_det + L_da; reversal nodes inside the alignment
/// terms turn the shared minimization into the intended min-max.
StepResult execute_step(TapeSession& s, Model& model, const DetectionSample& src,
                        const DetectionSample& tgt, const StepPlan& plan,
                        const TrainConfig& cfg);

struct StepValues {
  double det = 0.0;
  double da_raw = 0.0;
};

/// Frozen re-evaluation of the step objective at the current parameters
/// (no gradient state). The plan must carry frozen masks when masking is on.
StepValues step_forward_values(Model& model, const DetectionSample& src,
                               const DetectionSample& tgt, const StepPlan& plan,
                               const TrainConfig& cfg);

struct DiscriminatorEval {
  double acc_local = -1.0;  // -1 when the adaptor is disabled
  double acc_transition_local = -1.0;
  double acc_transition_global = -1.0;
  double acc_global = -1.0;
  double mean_image_level = -1.0;  // mean of the enabled accuracies above
  double local_prob_variance = -1.0;  // E[(p - 0.5)^2] of the local adaptor
  std::vector<long> local_hist;       // 20 bins over [0,1], both domains
};

/// Held-out evaluation of the image-level discriminators on eval images of
/// both domains: per-position accuracy for map-shaped outputs, per-image for
/// scalar ones. Always runs every discriminator; accuracies of disabled
/// adaptors are reported but excluded from the image-level mean.
DiscriminatorEval evaluate_discriminators(Model& model,
                                          const std::vector<DetectionSample>& source_eval,
                                          const std::vector<DetectionSample>& target_eval,
                                          const TrainConfig& cfg);

EvalResult evaluate_detector(Model& model, const std::vector<DetectionSample>& samples,
                             const InferConfig& cfg, int num_classes);

struct RunResult {
  bool aborted = false;
  std::string abort_reason;
  int steps_run = 0;
  double map_target = 0.0;
  double map_source = 0.0;
  DiscriminatorEval disc;
  double final_det = 0.0, final_da = 0.0;  // means over the last 100 steps
  long clamp_events = 0;
  long instance_sides_skipped = 0;
  long target_dropped_total = 0;
  double wall_seconds = 0.0;
};

/// Trains one model from scratch and writes metrics.csv, histograms.csv,
/// report.json and checkpoint.{bin,json} into `out_dir` (if non-empty).
RunResult run_experiment(const TrainConfig& cfg, const Dataset& data,
                         const std::string& out_dir);

/// The seven-variant suite: detection only; local+global; +transition;
/// local+global+masking; +transition; single instance discriminator; full.
/// Returns the variant names in a fixed order.
std::vector<std::string> ablation_variants();

/// Applies a variant name to a base config (flags only; everything else is
/// left untouched). Throws ConfigError for unknown names.
TrainConfig apply_variant(TrainConfig cfg, const std::string& variant);

struct AblationRow {
  std::string variant;
  std::uint64_t seed = 0;
  RunResult result;
};

/// Runs every variant over the given seeds, writing each run under
/// out_root/<variant>/seed<k>/ plus an ablation.csv / ablation.json summary.
std::vector<AblationRow> run_ablation(const TrainConfig& base, const Dataset& data,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::string& out_root);

}  // namespace da
