#include "spvit/sparse.hpp"

#include <Eigen/Core>

#include <cmath>

#include "op_access.hpp"

namespace spvit {

namespace {

using detail::OpAccess;
using ArrMap = Eigen::Map<const Eigen::ArrayXd>;
using MutArrMap = Eigen::Map<Eigen::ArrayXd>;

constexpr const char* kPositionNames[] = {
    "similarity_score", "attention_weight", "weighted_value",
    "attention_output", "mlp_gelu_input",
};

std::string valid_position_list() {
  std::string out;
  for (const char* n : kPositionNames) {
    if (!out.empty()) out += ", ";
    out += n;
  }
  return out;
}

}  // namespace

std::string to_string(SparsePosition p) {
  return kPositionNames[static_cast<int>(p)];
}

SparsePosition parse_sparse_position(const std::string& name) {
  for (int i = 0; i < 5; ++i) {
    if (name == kPositionNames[i]) return static_cast<SparsePosition>(i);
  }
  throw ConfigError("invalid sparse.position '" + name + "' (valid: " +
                    valid_position_list() + ")");
}

void SparseConfig::validate() const {
  if (lambda && (*lambda < 0 || !std::isfinite(*lambda))) {
    throw ConfigError("sparse.lambda must be finite and >= 0");
  }
}

Tensor penalty(const Tensor& h) {
  const std::int64_t n = h.numel();
  std::span<const double> hv = h.data();
  double total = 0.0;
  for (std::int64_t i = 0; i < n; ++i) {
    const double x = hv[static_cast<std::size_t>(i)];
    total += std::log1p(x * x);
  }
  Tensor out = Tensor::scalar(total);
  Graph* g = Graph::current();
  if (g && OpAccess::tracked(*g, h)) {
    const int ph = OpAccess::arg_node(*g, h);
    OpAccess::record(*g, out, [ph, h](Graph& gg, std::span<const double> gout) {
      if (ph < 0) return;
      auto buf = OpAccess::grad_buffer(gg, ph);
      ArrMap hv(h.data().data(), h.numel());
      MutArrMap(buf.data(), static_cast<std::int64_t>(buf.size())) +=
          gout[0] * 2.0 * hv / (1.0 + hv.square());
    });
  }
  return out;
}

double default_lambda(std::int64_t n_feature) {
  if (n_feature <= 0) {
    throw ConfigError("default_lambda: feature count must be positive");
  }
  return 1.0 / static_cast<double>(n_feature);
}

double resolve_lambda(const SparseConfig& config, const HookTap& taps) {
  if (config.lambda) return *config.lambda;
  if (taps.captured.empty()) {
    throw ContractError("resolve_lambda: no captured tensors to derive n_feature from");
  }
  return default_lambda(taps.captured.front().shape().back());
}

Tensor total_loss(const Tensor& ce, const HookTap& taps,
                  const SparseConfig& config) {
  if (!config.enabled) return ce;
  if (taps.captured.empty()) {
    throw ContractError("total_loss: sparse penalty enabled but no tensors were captured");
  }
  const double lambda = resolve_lambda(config, taps);
  if (lambda == 0.0) return ce;
  Tensor sum = penalty(taps.captured.front());
  for (std::size_t i = 1; i < taps.captured.size(); ++i) {
    sum = add(sum, penalty(taps.captured[i]));
  }
  return add(ce, scale(sum, lambda));
}

double penalty_value_plain(const HookTap& taps) {
  double total = 0.0;
  for (const Tensor& t : taps.captured) {
    for (double x : t.data()) total += std::log1p(x * x);
  }
  return total;
}

}  // namespace spvit
