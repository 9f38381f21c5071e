#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "spvit/tensor.hpp"

namespace spvit {

/// Where the activation penalty attaches inside an encoder block.
enum class SparsePosition {
  kSimilarityScore,   // scaled QK^t, before softmax
  kAttentionWeight,   // after softmax
  kWeightedValue,     // attention weights times V, per head
  kAttentionOutput,   // after the attention output projection
  kMlpGeluInput,      // pre-activation input of the MLP
};

inline constexpr SparsePosition kAllSparsePositions[] = {
    SparsePosition::kSimilarityScore, SparsePosition::kAttentionWeight,
    SparsePosition::kWeightedValue, SparsePosition::kAttentionOutput,
    SparsePosition::kMlpGeluInput,
};

std::string to_string(SparsePosition p);
/// Accepts the config spellings: similarity_score, attention_weight,
/// weighted_value, attention_output, mlp_gelu_input. Throws ConfigError
/// listing the valid names otherwise.
SparsePosition parse_sparse_position(const std::string& name);

struct SparseConfig {
  bool enabled = false;
  SparsePosition position = SparsePosition::kAttentionWeight;
  /// Penalty weight; unset means 1 / n_feature of the hooked tensor.
  std::optional<double> lambda;

  void validate() const;
};

/// Activation tensors captured during one forward pass, in execution order
/// (block-major, then head). Cleared at the start of every pass.
struct HookTap {
  std::optional<SparsePosition> position;
  std::vector<Tensor> captured;

  void clear() { captured.clear(); }
  bool wants(SparsePosition p) const { return position && *position == p; }
  void capture(SparsePosition p, const Tensor& t) {
    if (wants(p)) captured.push_back(t);
  }
};

/// Sum over elements of log(1 + h^2). Differentiable; the per-element
/// gradient is 2h / (1 + h^2). Uses log1p so the result is positive for any
/// nonzero h whose square is representable.
Tensor penalty(const Tensor& h);

/// 1 / n_feature.
double default_lambda(std::int64_t n_feature);

/// Effective penalty weight for a populated tap set: the explicit lambda if
/// present, otherwise 1 / (last dimension of the hooked tensor).
double resolve_lambda(const SparseConfig& config, const HookTap& taps);

/// E = ce + lambda * sum of penalty(t) over every captured tensor.
/// Returns ce unchanged (bitwise) when disabled or lambda == 0.
Tensor total_loss(const Tensor& ce, const HookTap& taps,
                  const SparseConfig& config);

/// Independent re-computation of sum_k log1p(h_k^2) over the captured
/// tensors with plain scalar arithmetic, bypassing the graph ops. Dual
/// route for the logged penalty term.
double penalty_value_plain(const HookTap& taps);

}  // namespace spvit
