#include "da/train.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <deque>
#include <filesystem>
#include <fstream>
#include <set>

#include <json.hpp>

namespace da {

namespace {

using nlohmann::json;

constexpr std::uint64_t kPickSourceStream = 0x504b53ULL;
constexpr std::uint64_t kPickTargetStream = 0x504b54ULL;
constexpr std::uint64_t kProposalStream = 0x50524fULL;

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("unknown config key '" + key + "' in " + where);
    }
  }
}

template <typename T>
void maybe(const json& j, const char* key, T& out) {
  if (j.contains(key)) j.at(key).get_to(out);
}

}  // namespace

std::string train_config_to_json(const TrainConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["iterations"] = cfg.iterations;
  j["learning_rate"] = cfg.learning_rate;
  j["late_learning_rate"] = cfg.late_learning_rate;
  j["lr_drop_iteration"] = cfg.lr_drop_iteration;
  j["weight_decay"] = cfg.weight_decay;
  j["lambda"] = cfg.lambda;
  j["eta"] = cfg.eta;
  j["cls_weight"] = cfg.cls_weight;
  j["box_weight"] = cfg.box_weight;
  j["align"] = json{{"local", cfg.align.local},
                    {"transition", cfg.align.transition},
                    {"global", cfg.align.global_align},
                    {"mask", cfg.align.mask},
                    {"mask_transition_branch", cfg.align.mask_transition_branch}};
  j["instance_align"] = cfg.instance_align;
  j["single_instance_disc"] = cfg.single_instance_disc;
  j["obj_score_mode"] = cfg.obj_score_mode == ObjScoreMode::kMax ? "max" : "sum";
  j["target_fg_threshold"] = cfg.target_fg_threshold;
  j["source_fg_iou"] = cfg.source_fg_iou;
  j["proposals"] = json{{"budget", cfg.proposals.budget},
                        {"fg_fraction", cfg.proposals.fg_fraction},
                        {"jitter_frac", cfg.proposals.jitter_frac},
                        {"min_random_size", cfg.proposals.min_random_size},
                        {"max_random_frac", cfg.proposals.max_random_frac},
                        {"jitter_keep_iou", cfg.proposals.jitter_keep_iou},
                        {"bg_max_iou", cfg.proposals.bg_max_iou},
                        {"resample_tries", cfg.proposals.resample_tries}};
  j["target_seed_score"] = cfg.target_seed_score;
  j["target_seed_boxes"] = cfg.target_seed_boxes;
  j["seed_grid_stride"] = cfg.seed_grid_stride;
  j["infer"] = json{{"score_threshold", cfg.infer.score_threshold},
                    {"nms_iou", cfg.infer.nms_iou},
                    {"grid_stride", cfg.infer.grid_stride},
                    {"grid_sizes", cfg.infer.grid_sizes}};
  j["model"] = json{{"image_size", cfg.model.image_size},
                    {"num_classes", cfg.model.num_classes},
                    {"c1", cfg.model.c1},
                    {"c2", cfg.model.c2},
                    {"c3", cfg.model.c3},
                    {"head_hidden", cfg.model.head_hidden},
                    {"pooled", cfg.model.pooled}};
  j["metrics_interval"] = cfg.metrics_interval;
  return j.dump(2);
}

TrainConfig train_config_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  TrainConfig cfg;
  try {
    check_keys(j, {"seed", "iterations", "learning_rate", "late_learning_rate",
                   "lr_drop_iteration", "weight_decay", "lambda", "eta", "cls_weight",
                   "box_weight", "align", "instance_align", "single_instance_disc",
                   "obj_score_mode", "target_fg_threshold", "source_fg_iou", "proposals",
                   "target_seed_score", "target_seed_boxes", "seed_grid_stride", "infer",
                   "model", "metrics_interval"},
               "config");
    maybe(j, "seed", cfg.seed);
    maybe(j, "iterations", cfg.iterations);
    maybe(j, "learning_rate", cfg.learning_rate);
    maybe(j, "late_learning_rate", cfg.late_learning_rate);
    maybe(j, "lr_drop_iteration", cfg.lr_drop_iteration);
    maybe(j, "weight_decay", cfg.weight_decay);
    maybe(j, "lambda", cfg.lambda);
    maybe(j, "eta", cfg.eta);
    maybe(j, "cls_weight", cfg.cls_weight);
    maybe(j, "box_weight", cfg.box_weight);
    if (j.contains("align")) {
      const json& a = j.at("align");
      check_keys(a, {"local", "transition", "global", "mask", "mask_transition_branch"},
                 "align");
      maybe(a, "local", cfg.align.local);
      maybe(a, "transition", cfg.align.transition);
      maybe(a, "global", cfg.align.global_align);
      maybe(a, "mask", cfg.align.mask);
      maybe(a, "mask_transition_branch", cfg.align.mask_transition_branch);
    }
    maybe(j, "instance_align", cfg.instance_align);
    maybe(j, "single_instance_disc", cfg.single_instance_disc);
    if (j.contains("obj_score_mode")) {
      const std::string m = j.at("obj_score_mode").get<std::string>();
      if (m == "max") {
        cfg.obj_score_mode = ObjScoreMode::kMax;
      } else if (m == "sum") {
        cfg.obj_score_mode = ObjScoreMode::kSum;
      } else {
        throw ConfigError("obj_score_mode must be 'max' or 'sum', got '" + m + "'");
      }
    }
    maybe(j, "target_fg_threshold", cfg.target_fg_threshold);
    maybe(j, "source_fg_iou", cfg.source_fg_iou);
    if (j.contains("proposals")) {
      const json& p = j.at("proposals");
      check_keys(p,
                 {"budget", "fg_fraction", "jitter_frac", "min_random_size",
                  "max_random_frac", "jitter_keep_iou", "bg_max_iou",
                  "resample_tries"},
                 "proposals");
      maybe(p, "budget", cfg.proposals.budget);
      maybe(p, "fg_fraction", cfg.proposals.fg_fraction);
      maybe(p, "jitter_frac", cfg.proposals.jitter_frac);
      maybe(p, "min_random_size", cfg.proposals.min_random_size);
      maybe(p, "max_random_frac", cfg.proposals.max_random_frac);
      maybe(p, "jitter_keep_iou", cfg.proposals.jitter_keep_iou);
      maybe(p, "bg_max_iou", cfg.proposals.bg_max_iou);
      maybe(p, "resample_tries", cfg.proposals.resample_tries);
    }
    maybe(j, "target_seed_score", cfg.target_seed_score);
    maybe(j, "target_seed_boxes", cfg.target_seed_boxes);
    maybe(j, "seed_grid_stride", cfg.seed_grid_stride);
    if (j.contains("infer")) {
      const json& f = j.at("infer");
      check_keys(f, {"score_threshold", "nms_iou", "grid_stride", "grid_sizes"}, "infer");
      maybe(f, "score_threshold", cfg.infer.score_threshold);
      maybe(f, "nms_iou", cfg.infer.nms_iou);
      maybe(f, "grid_stride", cfg.infer.grid_stride);
      maybe(f, "grid_sizes", cfg.infer.grid_sizes);
    }
    if (j.contains("model")) {
      const json& m = j.at("model");
      check_keys(m, {"image_size", "num_classes", "c1", "c2", "c3", "head_hidden", "pooled"},
                 "model");
      maybe(m, "image_size", cfg.model.image_size);
      maybe(m, "num_classes", cfg.model.num_classes);
      maybe(m, "c1", cfg.model.c1);
      maybe(m, "c2", cfg.model.c2);
      maybe(m, "c3", cfg.model.c3);
      maybe(m, "head_hidden", cfg.model.head_hidden);
      maybe(m, "pooled", cfg.model.pooled);
    }
    maybe(j, "metrics_interval", cfg.metrics_interval);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config value: ") + e.what());
  }
  if (cfg.iterations < 1) throw ConfigError("iterations must be positive");
  if (cfg.lambda < 0) throw ConfigError("lambda must be non-negative");
  if (cfg.eta < 0) throw ConfigError("eta must be non-negative");
  if (cfg.proposals.budget < 1) throw ConfigError("proposal budget must be positive");
  return cfg;
}

TrainConfig load_train_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw IoError("missing config file " + path);
  std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return train_config_from_json(text);
}

namespace {

Tensor as_batch(const Tensor& img) {
  return img.rank() == 3 ? img.reshaped({1, img.dim(0), img.dim(1), img.dim(2)}) : img;
}

}  // namespace

StepPlan plan_step(Model& model, const DetectionSample& src, const DetectionSample& tgt,
                   const TrainConfig& cfg, Rng& rng) {
  if (!src.annotated) {
    throw ValueError("training step needs an annotated source sample");
  }
  const double S = cfg.model.image_size;
  StepPlan plan;
  plan.src_proposals = generate_proposals(src.boxes, cfg.proposals, S, rng);
  plan.src_targets =
      match_proposals(plan.src_proposals, src.boxes, src.classes, cfg.source_fg_iou);
  {
    std::vector<Proposal> ps;
    ps.reserve(plan.src_proposals.size());
    for (const Box& b : plan.src_proposals) ps.push_back(Proposal{b, 0.0, {}});
    PartitionedProposals part = partition_source(ps, src.boxes, cfg.source_fg_iou);
    plan.src_fg_rows = part.fg_rows;
    plan.src_bg_rows = part.bg_rows;
  }

  if (!cfg.instance_align) return plan;

  // The proposal stream on the unlabeled domain is seeded by the detector's
  // own confident predictions, evaluated with frozen parameters.
  const Tensor z3 = backbone_z3(model, tgt.image);
  std::vector<Box> seeds;
  {
    const std::vector<Box> grid =
        dense_grid_boxes(S, cfg.seed_grid_stride, cfg.infer.grid_sizes);
    const ScoredBoxes scored = score_boxes(model, z3, grid);
    const Index kp1 = scored.cls_probs.dim(1);
    struct Cand {
      double score;
      Box box;
    };
    std::vector<Cand> cands;
    for (std::size_t r = 0; r < grid.size(); ++r) {
      double best = 0.0;
      for (Index k = 1; k < kp1; ++k) {
        best = std::max(best, scored.cls_probs[static_cast<Index>(r) * kp1 + k]);
      }
      if (best <= cfg.target_seed_score) continue;
      Box b = decode_offsets(grid[r], scored.box_deltas.data() + static_cast<Index>(r) * 4);
      b = clamp_to_image(b, S);
      if (b.valid()) cands.push_back(Cand{best, b});
    }
    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.box.x1 != b.box.x1) return a.box.x1 < b.box.x1;
      return a.box.y1 < b.box.y1;
    });
    if (static_cast<int>(cands.size()) > cfg.target_seed_boxes) {
      cands.resize(static_cast<std::size_t>(cfg.target_seed_boxes));
    }
    for (const Cand& c : cands) seeds.push_back(c.box);
  }
  plan.tgt_seeded = !seeds.empty();
  plan.tgt_proposals = generate_proposals(seeds, cfg.proposals, S, rng);

  const ScoredBoxes scored = score_boxes(model, z3, plan.tgt_proposals);
  const Index kp1 = scored.cls_probs.dim(1);
  std::vector<Proposal> props;
  props.reserve(plan.tgt_proposals.size());
  for (std::size_t r = 0; r < plan.tgt_proposals.size(); ++r) {
    Proposal p;
    p.box = plan.tgt_proposals[r];
    p.class_scores.resize(static_cast<std::size_t>(kp1));
    for (Index k = 0; k < kp1; ++k) {
      p.class_scores[static_cast<std::size_t>(k)] =
          scored.cls_probs[static_cast<Index>(r) * kp1 + k];
    }
    p.objectness = 1.0 - p.class_scores[0];
    props.push_back(std::move(p));
  }
  PartitionedProposals part =
      partition_target(props, cfg.target_fg_threshold, cfg.obj_score_mode);
  plan.tgt_fg_rows = part.fg_rows;
  plan.tgt_bg_rows = part.bg_rows;
  plan.tgt_dropped = part.dropped;
  return plan;
}

StepResult execute_step(TapeSession& s, Model& model, const DetectionSample& src,
                        const DetectionSample& tgt, const StepPlan& plan,
                        const TrainConfig& cfg) {
  StepResult r;
  const double fscale = model.feature_scale();
  const int pooled = static_cast<int>(model.config.pooled);

  Var xs = s.input(as_batch(src.image));
  Backbone::Maps ms = model.backbone.forward(s, xs);
  Var pooled_src = ops::roi_pool(ms.z3, plan.src_proposals, pooled, pooled, fscale);
  Var flat_src = ops::reshape(
      pooled_src,
      {static_cast<Index>(plan.src_proposals.size()), model.roi_feature_dim()});
  PredictionHead::Out pred = model.head.forward(s, flat_src);
  DetectionLoss det = detection_loss(s, pred.cls_logits, pred.box_deltas, plan.src_targets,
                                     cfg.cls_weight, cfg.box_weight);
  r.det_total = det.loss.value().item();
  r.det_cls = det.cls_value;
  r.det_box = det.box_value;
  Var total = det.loss;

  Backbone::Maps mt;
  if (cfg.image_alignment_on() || cfg.instance_align) {
    Var xt = s.input(as_batch(tgt.image));
    mt = model.backbone.forward(s, xt);
  }

  if (cfg.image_alignment_on()) {
    const MaskOverride* src_masks = plan.has_masks ? &plan.src_masks : nullptr;
    const MaskOverride* tgt_masks = plan.has_masks ? &plan.tgt_masks : nullptr;
    FeatLossResult fs =
        feat_loss(s, ms.z1, ms.z2, ms.z3, model.d_local, model.d_transition,
                  model.d_global, 0, cfg.lambda, cfg.eta, cfg.align, src_masks);
    FeatLossResult ft =
        feat_loss(s, mt.z1, mt.z2, mt.z3, model.d_local, model.d_transition,
                  model.d_global, 1, cfg.lambda, cfg.eta, cfg.align, tgt_masks);
    r.feat_src = fs.loss.value().item();
    r.feat_tgt = ft.loss.value().item();
    r.probes_src = fs.probes;
    r.probes_tgt = ft.probes;
    total = ops::add(total, ops::add(fs.loss, ft.loss));
  }

  if (cfg.instance_align) {
    Var pooled_tgt = ops::roi_pool(mt.z3, plan.tgt_proposals, pooled, pooled, fscale);
    Var flat_tgt = ops::reshape(
        pooled_tgt,
        {static_cast<Index>(plan.tgt_proposals.size()), model.roi_feature_dim()});
    if (cfg.single_instance_disc) {
      Var src_all = ops::gradient_reversal(flat_src, cfg.lambda);
      Var tgt_all = ops::gradient_reversal(flat_tgt, cfg.lambda);
      r.inst = single_discriminator_step(s, src_all, tgt_all, model.d_single);
    } else {
      auto reversed_rows = [&](Var m, const std::vector<Index>& rows) -> Var {
        if (rows.empty()) return Var{};
        return ops::gradient_reversal(ops::gather_rows(m, rows), cfg.lambda);
      };
      r.inst = instance_alignment_step(s, reversed_rows(flat_src, plan.src_fg_rows),
                                       reversed_rows(flat_src, plan.src_bg_rows),
                                       reversed_rows(flat_tgt, plan.tgt_fg_rows),
                                       reversed_rows(flat_tgt, plan.tgt_bg_rows),
                                       model.d_fg, model.d_bg);
    }
    r.inst_src = r.inst.loss_source.value().item();
    r.inst_tgt = r.inst.loss_target.value().item();
    total = ops::add(total, ops::add(r.inst.loss_source, r.inst.loss_target));
  }

  r.da_raw = r.feat_src + r.feat_tgt + r.inst_src + r.inst_tgt;
  r.total = total;
  return r;
}

StepValues step_forward_values(Model& model, const DetectionSample& src,
                               const DetectionSample& tgt, const StepPlan& plan,
                               const TrainConfig& cfg) {
  TapeSession s(/*frozen=*/true);
  StepResult r = execute_step(s, model, src, tgt, plan, cfg);
  return StepValues{r.det_total, r.da_raw};
}

void freeze_masks(Model& model, const DetectionSample& src, const DetectionSample& tgt,
                  StepPlan& plan, const TrainConfig& cfg) {
  TapeSession s(/*frozen=*/true);
  StepResult r = execute_step(s, model, src, tgt, plan, cfg);
  auto build = [&](const AdaptorProbes& probes, MaskOverride& out) {
    if (!probes.local_map.empty()) out.local_mask = dmi_mask(probes.local_map, cfg.eta);
    if (!probes.transition_map.empty()) {
      out.transition_mask = dmi_mask(probes.transition_map, cfg.eta);
    }
  };
  build(r.probes_src, plan.src_masks);
  build(r.probes_tgt, plan.tgt_masks);
  plan.has_masks = true;
}

DiscriminatorEval evaluate_discriminators(Model& model,
                                          const std::vector<DetectionSample>& source_eval,
                                          const std::vector<DetectionSample>& target_eval,
                                          const TrainConfig& cfg) {
  DiscriminatorEval ev;
  ev.local_hist.assign(20, 0);
  long local_ok = 0, local_n = 0;
  long tl_ok = 0, tl_n = 0;
  long tg_ok = 0, tg_n = 0;
  long g_ok = 0, g_n = 0;
  double sq_dev = 0.0;

  auto run_domain = [&](const std::vector<DetectionSample>& samples, int domain) {
    for (const DetectionSample& sample : samples) {
      TapeSession s(/*frozen=*/true);
      Var x = s.input(as_batch(sample.image));
      Backbone::Maps maps = model.backbone.forward(s, x);

      const Tensor lp = model.d_local.forward(s, maps.z1).value();
      for (Index i = 0; i < lp.numel(); ++i) {
        const double p = lp[i];
        if (!std::isfinite(p)) continue;  // diverged runs stay countable
        local_ok += (p > 0.5) == (domain == 1);
        ++local_n;
        sq_dev += (p - 0.5) * (p - 0.5);
        int bin = static_cast<int>(p * 20.0);
        bin = std::clamp(bin, 0, 19);
        ++ev.local_hist[static_cast<std::size_t>(bin)];
      }

      TransitionDiscriminator::Out to = model.d_transition.forward(s, maps.z2);
      const Tensor tm = to.local_map.value();
      for (Index i = 0; i < tm.numel(); ++i) {
        tl_ok += (tm[i] > 0.5) == (domain == 1);
        ++tl_n;
      }
      tg_ok += (to.global_p.value().item() > 0.5) == (domain == 1);
      ++tg_n;

      const double gp = model.d_global.forward(s, maps.z3).value().item();
      g_ok += (gp > 0.5) == (domain == 1);
      ++g_n;
    }
  };
  run_domain(source_eval, 0);
  run_domain(target_eval, 1);

  if (local_n > 0) {
    ev.acc_local = static_cast<double>(local_ok) / static_cast<double>(local_n);
    ev.local_prob_variance = sq_dev / static_cast<double>(local_n);
  }
  if (tl_n > 0) ev.acc_transition_local = static_cast<double>(tl_ok) / static_cast<double>(tl_n);
  if (tg_n > 0) ev.acc_transition_global = static_cast<double>(tg_ok) / static_cast<double>(tg_n);
  if (g_n > 0) ev.acc_global = static_cast<double>(g_ok) / static_cast<double>(g_n);

  std::vector<double> parts;
  if (cfg.align.local && ev.acc_local >= 0) parts.push_back(ev.acc_local);
  if (cfg.align.transition && ev.acc_transition_local >= 0) {
    parts.push_back(ev.acc_transition_local);
    parts.push_back(ev.acc_transition_global);
  }
  if (cfg.align.global_align && ev.acc_global >= 0) parts.push_back(ev.acc_global);
  if (parts.empty()) {
    for (double v : {ev.acc_local, ev.acc_transition_local, ev.acc_transition_global,
                     ev.acc_global}) {
      if (v >= 0) parts.push_back(v);
    }
  }
  if (!parts.empty()) {
    double sum = 0.0;
    for (double v : parts) sum += v;
    ev.mean_image_level = sum / static_cast<double>(parts.size());
  }
  return ev;
}

EvalResult evaluate_detector(Model& model, const std::vector<DetectionSample>& samples,
                             const InferConfig& cfg, int num_classes) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruth>> gts;
  dets.reserve(samples.size());
  gts.reserve(samples.size());
  for (const DetectionSample& s : samples) {
    if (!s.annotated) {
      throw ValueError("detector evaluation needs annotated samples");
    }
    dets.push_back(infer_image(model, s.image, cfg));
    std::vector<GroundTruth> gt;
    for (std::size_t i = 0; i < s.boxes.size(); ++i) {
      gt.push_back(GroundTruth{s.boxes[i], s.classes[i]});
    }
    gts.push_back(std::move(gt));
  }
  return evaluate_map(dets, gts, num_classes);
}

namespace {

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

json report_json(const TrainConfig& cfg, const RunResult& r) {
  json disc{{"local", r.disc.acc_local},
            {"transition_local", r.disc.acc_transition_local},
            {"transition_global", r.disc.acc_transition_global},
            {"global", r.disc.acc_global},
            {"mean_image_level", r.disc.mean_image_level}};
  json results{{"map_target", r.map_target},
               {"map_source", r.map_source},
               {"disc_accuracy", disc},
               {"local_prob_variance", r.disc.local_prob_variance},
               {"local_prob_hist", r.disc.local_hist},
               {"final_det_loss", r.final_det},
               {"final_da_loss", r.final_da},
               {"clamp_events", r.clamp_events},
               {"instance_sides_skipped", r.instance_sides_skipped},
               {"target_proposals_dropped", r.target_dropped_total},
               {"steps_run", r.steps_run},
               {"aborted", r.aborted},
               {"abort_reason", r.abort_reason}};
  json j;
  j["config"] = json::parse(train_config_to_json(cfg));
  j["results"] = results;
  j["timing"] = json{{"wall_seconds", r.wall_seconds}};
  return j;
}

}  // namespace

RunResult run_experiment(const TrainConfig& cfg, const Dataset& data,
                         const std::string& out_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  RunResult out;
  op_stats().reset();

  if (data.source_train.empty()) {
    throw ValueError("training needs source images");
  }
  const bool need_target = cfg.alignment_on();
  if (need_target && data.target_train.empty()) {
    throw ValueError("alignment needs target training images");
  }
  if (static_cast<Index>(data.source_train[0].image.dim(1)) != cfg.model.image_size) {
    throw ConfigError("dataset image size " +
                      std::to_string(data.source_train[0].image.dim(1)) +
                      " does not match model config " +
                      std::to_string(cfg.model.image_size));
  }

  Model model(cfg.model, cfg.seed);
  std::vector<Parameter*> params = model.params();

  std::ofstream mcsv;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    mcsv.open(out_dir + "/metrics.csv", std::ios::trunc);
    if (!mcsv) throw IoError("cannot open " + out_dir + "/metrics.csv for writing");
    mcsv << "step,lr,det,det_cls,det_box,feat_src,feat_tgt,inst_src,inst_tgt,da_raw,"
            "src_fg,src_bg,tgt_fg,tgt_bg,tgt_dropped,inst_skipped\n";
  }

  std::deque<double> det_hist, da_hist;
  const Index n_src = static_cast<Index>(data.source_train.size());
  const Index n_tgt = static_cast<Index>(data.target_train.size());

  for (int i = 0; i < cfg.iterations; ++i) {
    const double lr =
        i >= cfg.lr_drop_iteration ? cfg.late_learning_rate : cfg.learning_rate;
    const DetectionSample& src = data.source_train[static_cast<std::size_t>(
        Rng::derive(cfg.seed, kPickSourceStream, static_cast<std::uint64_t>(i))
            .uniform_int(0, n_src - 1))];
    const DetectionSample& tgt =
        need_target
            ? data.target_train[static_cast<std::size_t>(
                  Rng::derive(cfg.seed, kPickTargetStream, static_cast<std::uint64_t>(i))
                      .uniform_int(0, n_tgt - 1))]
            : src;

    Rng prng = Rng::derive(cfg.seed, kProposalStream, static_cast<std::uint64_t>(i));
    const StepPlan plan = plan_step(model, src, tgt, cfg, prng);

    clear_grads(params);
    TapeSession s;
    const StepResult r = execute_step(s, model, src, tgt, plan, cfg);
    s.backward(r.total);
    s.write_grads();

    std::string bad;
    if (!std::isfinite(r.total.value().item())) {
      bad = "loss is not finite (det=" + fmt(r.det_total) + ", da=" + fmt(r.da_raw) + ")";
    } else {
      for (Parameter* p : params) {
        if (p->reached && !p->grad.all_finite()) {
          bad = "gradient of " + p->name + " is not finite";
          break;
        }
      }
    }
    if (!bad.empty()) {
      out.aborted = true;
      out.abort_reason = "step " + std::to_string(i) + ": " + bad;
      break;
    }

    sgd_step(params, SgdOptimizer{lr, cfg.weight_decay});
    out.steps_run = i + 1;
    out.instance_sides_skipped += r.inst.skipped_fg + r.inst.skipped_bg;
    out.target_dropped_total += plan.tgt_dropped;

    det_hist.push_back(r.det_total);
    da_hist.push_back(r.da_raw);
    if (det_hist.size() > 100) {
      det_hist.pop_front();
      da_hist.pop_front();
    }

    if (mcsv.is_open() && (i % cfg.metrics_interval == 0 || i + 1 == cfg.iterations)) {
      mcsv << i << ',' << fmt(lr) << ',' << fmt(r.det_total) << ',' << fmt(r.det_cls)
           << ',' << fmt(r.det_box) << ',' << fmt(r.feat_src) << ',' << fmt(r.feat_tgt)
           << ',' << fmt(r.inst_src) << ',' << fmt(r.inst_tgt) << ',' << fmt(r.da_raw)
           << ',' << plan.src_fg_rows.size() << ',' << plan.src_bg_rows.size() << ','
           << plan.tgt_fg_rows.size() << ',' << plan.tgt_bg_rows.size() << ','
           << plan.tgt_dropped << ',' << (r.inst.skipped_fg + r.inst.skipped_bg) << '\n';
    }
  }

  if (!det_hist.empty()) {
    double sd = 0, sa = 0;
    for (double v : det_hist) sd += v;
    for (double v : da_hist) sa += v;
    out.final_det = sd / static_cast<double>(det_hist.size());
    out.final_da = sa / static_cast<double>(da_hist.size());
  }

  out.map_target =
      evaluate_detector(model, data.target_eval, cfg.infer, cfg.model.num_classes).map;
  out.map_source =
      evaluate_detector(model, data.source_eval, cfg.infer, cfg.model.num_classes).map;
  out.disc = evaluate_discriminators(model, data.source_eval, data.target_eval, cfg);
  out.clamp_events = op_stats().clamp_events;
  out.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  if (!out_dir.empty()) {
    std::ofstream hist(out_dir + "/histograms.csv", std::ios::trunc);
    if (!hist) throw IoError("cannot open " + out_dir + "/histograms.csv for writing");
    hist << "bin_lo,bin_hi,count\n";
    for (std::size_t b = 0; b < out.disc.local_hist.size(); ++b) {
      hist << fmt(0.05 * static_cast<double>(b)) << ','
           << fmt(0.05 * static_cast<double>(b + 1)) << ',' << out.disc.local_hist[b]
           << '\n';
    }
    save_checkpoint(model, out_dir + "/checkpoint");
    std::ofstream rep(out_dir + "/report.json", std::ios::trunc);
    if (!rep) throw IoError("cannot open " + out_dir + "/report.json for writing");
    rep << report_json(cfg, out).dump(2) << "\n";
  }
  return out;
}

std::vector<std::string> ablation_variants() {
  return {"source_only",
          "local_global",
          "local_transition_global",
          "local_global_mask",
          "local_transition_global_mask",
          "single_instance",
          "full"};
}

TrainConfig apply_variant(TrainConfig cfg, const std::string& variant) {
  AlignFlags& a = cfg.align;
  auto set = [&](bool l, bool t, bool g, bool m, bool mt, bool inst, bool single) {
    a.local = l;
    a.transition = t;
    a.global_align = g;
    a.mask = m;
    a.mask_transition_branch = mt;
    cfg.instance_align = inst;
    cfg.single_instance_disc = single;
  };
  if (variant == "source_only") {
    set(false, false, false, false, false, false, false);
  } else if (variant == "local_global") {
    set(true, false, true, false, false, false, false);
  } else if (variant == "local_transition_global") {
    set(true, true, true, false, false, false, false);
  } else if (variant == "local_global_mask") {
    set(true, false, true, true, false, false, false);
  } else if (variant == "local_transition_global_mask") {
    set(true, true, true, true, true, false, false);
  } else if (variant == "single_instance") {
    set(true, true, true, true, true, true, true);
  } else if (variant == "full") {
    set(true, true, true, true, true, true, false);
  } else {
    throw ConfigError("unknown ablation variant '" + variant + "'");
  }
  return cfg;
}

std::vector<AblationRow> run_ablation(const TrainConfig& base, const Dataset& data,
                                      const std::vector<std::uint64_t>& seeds,
                                      const std::string& out_root) {
  if (seeds.empty()) throw ConfigError("ablation needs at least one seed");
  std::vector<AblationRow> rows;
  for (const std::string& variant : ablation_variants()) {
    for (std::size_t k = 0; k < seeds.size(); ++k) {
      TrainConfig cfg = apply_variant(base, variant);
      cfg.seed = seeds[k];
      std::string dir;
      if (!out_root.empty()) {
        dir = out_root + "/" + variant + "/seed" + std::to_string(seeds[k]);
      }
      AblationRow row;
      row.variant = variant;
      row.seed = seeds[k];
      row.result = run_experiment(cfg, data, dir);
      rows.push_back(std::move(row));
    }
  }

  if (!out_root.empty()) {
    std::filesystem::create_directories(out_root);
    std::ofstream csv(out_root + "/ablation.csv", std::ios::trunc);
    if (!csv) throw IoError("cannot open " + out_root + "/ablation.csv for writing");
    csv << "variant,seed,map_target,map_source,disc_mean_acc,local_prob_variance,"
           "aborted\n";
    for (const AblationRow& r : rows) {
      csv << r.variant << ',' << r.seed << ',' << fmt(r.result.map_target) << ','
          << fmt(r.result.map_source) << ',' << fmt(r.result.disc.mean_image_level) << ','
          << fmt(r.result.disc.local_prob_variance) << ',' << (r.result.aborted ? 1 : 0)
          << '\n';
    }

    json summary;
    for (const std::string& variant : ablation_variants()) {
      std::vector<double> maps;
      for (const AblationRow& r : rows) {
        if (r.variant == variant) maps.push_back(r.result.map_target);
      }
      std::sort(maps.begin(), maps.end());
      const std::size_t n = maps.size();
      const double median =
          n == 0 ? 0.0
                 : (n % 2 == 1 ? maps[n / 2] : 0.5 * (maps[n / 2 - 1] + maps[n / 2]));
      summary[variant] = json{{"map_target", maps}, {"median_map_target", median}};
    }
    std::ofstream js(out_root + "/ablation.json", std::ios::trunc);
    if (!js) throw IoError("cannot open " + out_root + "/ablation.json for writing");
    js << summary.dump(2) << "\n";
  }
  return rows;
}

}  // namespace da
