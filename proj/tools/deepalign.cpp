#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "da/gradcheck.hpp"
#include "da/train.hpp"

namespace {

using namespace da;

int cmd_generate(const std::string& out_dir, const std::string& preset,
                 std::uint64_t seed, int image_size, int classes, int n_source,
                 int n_target, int n_eval) {
  SceneSpec spec;
  spec.image_size = image_size;
  spec.num_classes = classes;
  DomainTransform src_t, tgt_t;
  shift_preset(preset, src_t, tgt_t);
  DatasetManifest m =
      generate_dataset(spec, src_t, tgt_t, n_source, n_target, n_eval, seed, out_dir);
  std::printf("wrote %s/manifest.json\n", out_dir.c_str());
  for (const SplitInfo& s : m.splits) {
    std::printf("  %-13s %5d images  domain %d  crc 0x%08X\n", s.name.c_str(), s.count,
                s.domain, s.checksum);
  }
  return 0;
}

TrainConfig make_config(const std::string& config_path, const std::string& variant,
                        std::uint64_t seed, bool seed_set, int iterations) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  if (!variant.empty()) cfg = apply_variant(cfg, variant);
  if (seed_set) cfg.seed = seed;
  if (iterations > 0) cfg.iterations = iterations;
  return cfg;
}

void print_run(const RunResult& r) {
  if (r.aborted) {
    std::printf("ABORTED after %d steps: %s\n", r.steps_run, r.abort_reason.c_str());
    return;
  }
  std::printf("steps %d  det %.4f  da %.4f\n", r.steps_run, r.final_det, r.final_da);
  std::printf("mAP target %.4f  source %.4f\n", r.map_target, r.map_source);
  std::printf(
      "discriminator accuracy: local %.3f  transition %.3f/%.3f  global %.3f  "
      "(image-level mean %.3f)\n",
      r.disc.acc_local, r.disc.acc_transition_local, r.disc.acc_transition_global,
      r.disc.acc_global, r.disc.mean_image_level);
  std::printf("local prob variance about 0.5: %.4f\n", r.disc.local_prob_variance);
  std::printf("wall %.1fs\n", r.wall_seconds);
}

int cmd_train(const std::string& data, const std::string& out_dir,
              const std::string& config_path, const std::string& variant,
              std::uint64_t seed, bool seed_set, int iterations) {
  TrainConfig cfg = make_config(config_path, variant, seed, seed_set, iterations);
  Dataset ds = load_dataset(data, LoadMode::kTrain);
  RunResult r = run_experiment(cfg, ds, out_dir);
  print_run(r);
  return r.aborted ? 1 : 0;
}

int cmd_ablate(const std::string& data, const std::string& out_root,
               const std::string& config_path, std::vector<std::uint64_t> seeds,
               int iterations) {
  TrainConfig cfg = make_config(config_path, "", 0, false, iterations);
  if (seeds.empty()) seeds = {1, 2, 3, 4, 5};
  Dataset ds = load_dataset(data, LoadMode::kTrain);
  std::vector<AblationRow> rows = run_ablation(cfg, ds, seeds, out_root);
  std::printf("%-30s %6s %10s %10s\n", "variant", "seed", "mAP(tgt)", "mAP(src)");
  for (const AblationRow& r : rows) {
    std::printf("%-30s %6llu %10.4f %10.4f%s\n", r.variant.c_str(),
                static_cast<unsigned long long>(r.seed), r.result.map_target,
                r.result.map_source, r.result.aborted ? "  ABORTED" : "");
  }
  std::printf("summary written to %s/ablation.csv\n", out_root.c_str());
  return 0;
}

int cmd_eval(const std::string& data, const std::string& checkpoint,
             const std::string& config_path) {
  TrainConfig cfg = config_path.empty() ? TrainConfig{} : load_train_config(config_path);
  cfg.model = checkpoint_model_config(checkpoint);
  Model model(cfg.model, 0);
  load_checkpoint(model, checkpoint);
  Dataset ds = load_dataset(data, LoadMode::kEval);
  EvalResult tgt = evaluate_detector(model, ds.target_eval, cfg.infer, cfg.model.num_classes);
  EvalResult src = evaluate_detector(model, ds.source_eval, cfg.infer, cfg.model.num_classes);
  std::printf("mAP target %.4f  source %.4f\n", tgt.map, src.map);
  for (std::size_t k = 0; k < tgt.ap.size(); ++k) {
    std::printf("  class %zu: AP target %.4f (n=%d)  source %.4f (n=%d)\n", k, tgt.ap[k],
                tgt.gt_counts[k], src.ap[k], src.gt_counts[k]);
  }
  DiscriminatorEval disc = evaluate_discriminators(model, ds.source_eval, ds.target_eval, cfg);
  std::printf(
      "discriminator accuracy: local %.3f  transition %.3f/%.3f  global %.3f\n",
      disc.acc_local, disc.acc_transition_local, disc.acc_transition_global,
      disc.acc_global);
  return 0;
}

int cmd_check_grads(int min_valid, bool skip_train_step) {
  FdOptions opt;
  std::vector<FdItemResult> items = run_fd_suite(opt, min_valid, !skip_train_step);
  bool all_ok = true;
  double total = 0.0;
  std::printf("%-30s %9s %6s %7s %12s %8s  %s\n", "item", "attempted", "valid", "passed",
              "worst_rel", "seconds", "status");
  for (const FdItemResult& it : items) {
    const bool ok = it.valid >= min_valid && it.passed == it.valid;
    all_ok = all_ok && ok;
    total += it.seconds;
    std::printf("%-30s %9d %6d %7d %12.3e %8.2f  %s\n", it.name.c_str(), it.attempted,
                it.valid, it.passed, it.worst_rel_err, it.seconds, ok ? "ok" : "FAIL");
  }
  std::printf("total %.1fs\n", total);
  return all_ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adversarial domain alignment for toy detection"};
  app.require_subcommand(1);

  // generate
  std::string gen_out = "data";
  std::string gen_preset = "default";
  std::uint64_t gen_seed = 1;
  int gen_image = 32, gen_classes = 3, gen_source = 400, gen_target = 400, gen_eval = 100;
  CLI::App* gen = app.add_subcommand("generate", "write a synthetic two-domain dataset");
  gen->add_option("--out", gen_out, "output directory");
  gen->add_option("--shift-preset,--preset", gen_preset,
                  "domain shift preset: none, default, strong");
  gen->add_option("--seed", gen_seed, "dataset seed");
  gen->add_option("--size,--image-size", gen_image, "square image side (multiple of 8)");
  gen->add_option("--classes", gen_classes, "number of shape classes (1-3)");
  gen->add_option("--n-source,--source", gen_source, "source training images");
  gen->add_option("--n-target,--target", gen_target, "target training images");
  gen->add_option("--eval", gen_eval, "eval images per domain");

  // train
  std::string tr_data, tr_out = "run", tr_config, tr_variant;
  std::uint64_t tr_seed = 0;
  int tr_iters = 0;
  CLI::App* tr = app.add_subcommand("train", "train one model");
  tr->add_option("--data", tr_data, "path to manifest.json")->required();
  tr->add_option("--out", tr_out, "output directory");
  tr->add_option("--config", tr_config, "JSON config file");
  tr->add_option("--variant", tr_variant, "ablation variant to apply");
  CLI::Option* tr_seed_opt = tr->add_option("--seed", tr_seed, "training seed");
  tr->add_option("--iterations", tr_iters, "override iteration count");

  // ablate
  std::string ab_data, ab_out = "ablation", ab_config;
  std::vector<std::uint64_t> ab_seeds;
  int ab_iters = 0;
  CLI::App* ab = app.add_subcommand("ablate", "run the seven-variant suite");
  ab->add_option("--data", ab_data, "path to manifest.json")->required();
  ab->add_option("--out", ab_out, "output directory");
  ab->add_option("--config", ab_config, "JSON config file");
  ab->add_option("--seeds", ab_seeds, "seeds to run")->delimiter(',');
  ab->add_option("--iterations", ab_iters, "override iteration count");

  // eval
  std::string ev_data, ev_ckpt, ev_config;
  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  ev->add_option("--data", ev_data, "path to manifest.json")->required();
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint prefix (without .bin/.json)")
      ->required();
  ev->add_option("--config", ev_config, "JSON config file");

  // check-grads
  int cg_min_valid = 20;
  bool cg_skip_train = false;
  CLI::App* cg = app.add_subcommand("check-grads", "finite-difference gradient suite");
  cg->add_option("--min-valid", cg_min_valid, "required valid seeds per item");
  cg->add_flag("--skip-train-step", cg_skip_train, "skip the full train-step item");

  // print-config
  CLI::App* pc = app.add_subcommand("print-config", "dump the default config JSON");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      return cmd_generate(gen_out, gen_preset, gen_seed, gen_image, gen_classes,
                          gen_source, gen_target, gen_eval);
    }
    if (tr->parsed()) {
      return cmd_train(tr_data, tr_out, tr_config, tr_variant, tr_seed,
                       tr_seed_opt->count() > 0, tr_iters);
    }
    if (ab->parsed()) return cmd_ablate(ab_data, ab_out, ab_config, ab_seeds, ab_iters);
    if (ev->parsed()) return cmd_eval(ev_data, ev_ckpt, ev_config);
    if (cg->parsed()) return cmd_check_grads(cg_min_valid, cg_skip_train);
    if (pc->parsed()) {
      std::printf("%s\n", train_config_to_json(TrainConfig{}).c_str());
      return 0;
    }
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
