#include "spvit/prune.hpp"

#include <algorithm>
#include <cmath>

namespace spvit {

namespace {

bool excluded(const std::string& name, const PruneOptions& options) {
  for (const auto& prefix : options.exclude_prefixes) {
    if (name.rfind(prefix, 0) == 0) return true;
  }
  return false;
}

std::int64_t included_count(const ParamStore& params, const PruneOptions& options) {
  std::int64_t n = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!excluded(params.name(i), options)) n += params.value(i).numel();
  }
  return n;
}

}  // namespace

double global_threshold(const ParamStore& params, double ratio,
                        const PruneOptions& options) {
  if (!(ratio > 0.0 && ratio < 1.0)) {
    throw ConfigError("prune: ratio must be in (0, 1), got " + std::to_string(ratio));
  }
  const std::int64_t n = included_count(params, options);
  const auto k = static_cast<std::int64_t>(ratio * static_cast<double>(n));
  if (k < 1) {
    throw ConfigError("prune: ratio " + std::to_string(ratio) + " selects zero of " +
                      std::to_string(n) + " parameters");
  }
  std::vector<double> magnitudes;
  magnitudes.reserve(static_cast<std::size_t>(n));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (excluded(params.name(i), options)) continue;
    for (double v : params.value(i).data()) magnitudes.push_back(std::abs(v));
  }
  // k-th smallest (1-indexed); identical to ascending_sort[k-1].
  auto kth = magnitudes.begin() + (k - 1);
  std::nth_element(magnitudes.begin(), kth, magnitudes.end());
  return *kth;
}

std::pair<PruneMask, PruneReport> apply_prune(ParamStore& params, double ratio,
                                              const PruneOptions& options) {
  const double threshold = global_threshold(params, ratio, options);

  PruneMask mask;
  mask.threshold = threshold;
  mask.ratio = ratio;
  PruneReport report;
  report.ratio = ratio;
  report.threshold = threshold;

  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& name = params.name(i);
    const Tensor& tensor = params.value(i);
    if (excluded(name, options)) continue;

    std::span<const double> src = tensor.data();
    std::vector<std::uint8_t> kept(src.size());
    Vec pruned(src.size());
    std::int64_t zeros = 0;
    for (std::size_t j = 0; j < src.size(); ++j) {
      const bool keep = std::abs(src[j]) > threshold;
      kept[j] = keep ? 1 : 0;
      pruned[j] = keep ? src[j] : 0.0;
      if (!keep) ++zeros;
    }
    report.per_tensor.push_back(
        {name, static_cast<std::int64_t>(src.size()), zeros});
    report.n_total += static_cast<std::int64_t>(src.size());
    report.n_zeroed += zeros;
    params.set(name, Tensor(tensor.shape(), std::move(pruned), /*requires_grad=*/true));
    mask.kept.emplace_back(name, std::move(kept));
  }
  report.sparsity = static_cast<double>(report.n_zeroed) /
                    static_cast<double>(report.n_total);
  return {std::move(mask), std::move(report)};
}

void apply_mask(ParamStore& params, const PruneMask& mask) {
  for (const auto& [name, kept] : mask.kept) {
    const Tensor& tensor = params.at(name);
    std::span<const double> src = tensor.data();
    if (src.size() != kept.size()) {
      throw DimensionError("apply_mask: mask size mismatch for '" + name + "'");
    }
    Vec masked(src.size());
    for (std::size_t j = 0; j < src.size(); ++j) {
      masked[j] = kept[j] ? src[j] : 0.0;
    }
    params.set(name, Tensor(tensor.shape(), std::move(masked), /*requires_grad=*/true));
  }
}

PruneReport sparsity_report(const ParamStore& params) {
  PruneReport report;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& tensor = params.value(i);
    std::int64_t zeros = 0;
    for (double v : tensor.data()) {
      if (v == 0.0) ++zeros;
    }
    report.per_tensor.push_back({params.name(i), tensor.numel(), zeros});
    report.n_total += tensor.numel();
    report.n_zeroed += zeros;
  }
  report.sparsity = report.n_total == 0
                        ? 0.0
                        : static_cast<double>(report.n_zeroed) /
                              static_cast<double>(report.n_total);
  return report;
}

}  // namespace spvit
