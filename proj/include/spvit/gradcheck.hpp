#pragma once

#include <cstdint>
#include <vector>

#include "spvit/sparse.hpp"
#include "spvit/vit.hpp"

namespace spvit {

struct GradcheckOptions {
  double step = 1e-6;
  double tolerance = 1e-5;
  std::uint64_t seed = 7;
  std::int64_t batch = 2;
  /// Coordinates sampled per parameter tensor (small tensors are covered
  /// fully).
  std::int64_t coords_per_tensor = 6;
  /// Denominator floor of the guarded relative error
  /// |a - n| / max(|a|, |n|, floor); entries below the floor are compared
  /// at floor scale, keeping central-difference roundoff out of the metric.
  double rel_floor = 1e-3;
  /// Negative control: deliberately corrupts the analytic gradients before
  /// comparing, so a healthy build must report a failure.
  bool sabotage = false;
};

struct GradcheckPositionResult {
  SparsePosition position;
  double max_rel_err = 0.0;
  std::int64_t coords_checked = 0;
};

/// Checks the analytic gradient of the penalized loss (cross-entropy plus
/// the activation penalty at one hook position) against central finite
/// differences, for every hook position, over every parameter tensor of a
/// freshly initialized model on a random batch.
std::vector<GradcheckPositionResult> gradcheck_positions(
    const ViTConfig& config, const GradcheckOptions& options = {});

bool gradcheck_passed(const std::vector<GradcheckPositionResult>& results,
                      double tolerance);

}  // namespace spvit
