#pragma once

#include <functional>
#include <string>
#include <vector>

#include "da/tape.hpp"

namespace da {

struct FdOptions {
  double step = 1e-5;
  double rel_tol = 1e-4;
  double abs_tol = 1e-8;  // below this, disagreement counts as zero
  /// Seeds whose forward pass comes closer than this to a non-smooth point
  /// (relu zero, pooling tie, clamp boundary) are skipped as invalid.
  double margin_threshold = 1e-3;
  /// Cap on entries checked per parameter tensor; 0 checks all of them.
  Index max_entries_per_param = 0;
  std::uint64_t subsample_seed = 0;  // entry choice when capped
};

struct FdCheckResult {
  bool valid = true;  // false: base point too close to a kink, seed skipped
  bool pass = false;
  double max_rel_err = 0.0;
  double base_margin = 0.0;
  Index entries_checked = 0;
  std::string worst_param;
  Index worst_entry = -1;
  double worst_analytic = 0.0;
  double worst_fd = 0.0;
};

/// Central-difference check of tape gradients. `run_backward` performs the
/// forward and backward pass and leaves gradients on `params`; `f` recomputes
/// the same scalar objective from the current parameter values without
/// touching gradients. Both must be deterministic functions of the parameter
/// values (freeze any data, masks or proposal choices beforehand).
FdCheckResult finite_difference_check(const std::function<double()>& f,
                                      const std::function<void()>& run_backward,
                                      const std::vector<Parameter*>& params,
                                      const FdOptions& opt);

struct FdItemResult {
  std::string name;
  int attempted = 0;
  int valid = 0;   // seeds that produced a usable base point
  int passed = 0;  // valid seeds within tolerance
  double worst_rel_err = 0.0;
  double seconds = 0.0;
  bool ok() const { return valid >= 20 && passed == valid; }
};

/// Runs the whole gradient-verification suite: every primitive op, each
/// alignment loss, the detection loss and (optionally) the complete training
/// step objective. Each item draws fresh random shapes and values per seed
/// and keeps attempting until at least `min_valid` seeds survive the
/// smoothness screen (or an attempt cap is hit).
std::vector<FdItemResult> run_fd_suite(const FdOptions& opt, int min_valid = 20,
                                       bool include_train_step = true);

}  // namespace da
