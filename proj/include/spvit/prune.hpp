#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spvit/vit.hpp"

namespace spvit {

/// Kept/zeroed decision per parameter tensor. true = kept. Entries satisfy
/// |value| > threshold at creation time (strict inequality).
struct PruneMask {
  std::vector<std::pair<std::string, std::vector<std::uint8_t>>> kept;
  double threshold = 0.0;
  double ratio = 0.0;
};

struct TensorSparsity {
  std::string name;
  std::int64_t total = 0;
  std::int64_t zeros = 0;
};

struct PruneReport {
  double ratio = 0.0;
  double threshold = 0.0;
  std::int64_t n_total = 0;
  std::int64_t n_zeroed = 0;
  double sparsity = 0.0;
  std::vector<TensorSparsity> per_tensor;
};

struct PruneOptions {
  /// Parameter-name prefixes excluded from pruning (ablation hook). The
  /// default empty list prunes every tensor in the store.
  std::vector<std::string> exclude_prefixes;
};

/// k-th smallest absolute value over the concatenation of all included
/// parameters, k = floor(ratio * N). Exactly equals the value at index k-1
/// of the ascending sort of absolute values.
double global_threshold(const ParamStore& params, double ratio,
                        const PruneOptions& options = {});

/// Zeroes every included element with |value| <= threshold; kept elements
/// are unchanged bitwise. Returns the mask and an accounting report.
std::pair<PruneMask, PruneReport> apply_prune(ParamStore& params, double ratio,
                                              const PruneOptions& options = {});

/// Re-applies a fixed mask (idempotent).
void apply_mask(ParamStore& params, const PruneMask& mask);

/// Exact zero counts per tensor and globally.
PruneReport sparsity_report(const ParamStore& params);

}  // namespace spvit
