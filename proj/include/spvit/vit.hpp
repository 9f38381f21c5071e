#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "spvit/sparse.hpp"
#include "spvit/tensor.hpp"

namespace spvit {

struct ViTConfig {
  std::int64_t image_size = 32;   // square images
  std::int64_t patch_size = 8;
  std::int64_t channels = 3;
  std::int64_t hidden_size = 64;
  std::int64_t mlp_size = 128;
  std::int64_t num_heads = 4;
  std::int64_t depth = 2;
  std::int64_t num_classes = 10;
  double layer_norm_eps = 1e-6;

  std::int64_t patches_per_image() const {
    return (image_size / patch_size) * (image_size / patch_size);
  }
  std::int64_t tokens() const { return patches_per_image() + 1; }
  std::int64_t patch_dim() const { return patch_size * patch_size * channels; }
  std::int64_t head_dim() const { return hidden_size / num_heads; }

  /// Throws ConfigError on divisibility or positivity violations.
  void validate() const;
};

/// Ordered name -> Tensor map holding every trainable parameter. Iteration
/// order is the insertion order and is identical across runs.
class ParamStore {
 public:
  void add(std::string name, Tensor value);
  const Tensor& at(std::string_view name) const;
  bool contains(std::string_view name) const;
  /// Replaces the value of an existing entry; the shape must match.
  void set(std::string_view name, Tensor value);

  std::size_t size() const { return names_.size(); }
  const std::vector<std::string>& names() const { return names_; }
  const Tensor& value(std::size_t i) const { return values_[i]; }
  const std::string& name(std::size_t i) const { return names_[i]; }

  std::int64_t total_elements() const;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor> values_;
};

/// Cheap handles to one encoder block's parameters.
struct BlockParams {
  Tensor norm1_gamma, norm1_beta;
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
  Tensor norm2_gamma, norm2_beta;
  Tensor w1, b1, w2, b2;
};

BlockParams block_params(const ParamStore& params, std::int64_t block);

/// Deterministic initialization: truncated normal (std 0.02, cut at 2 std)
/// for weight matrices and the position embedding, ones for norm gains,
/// zeros for biases, norm offsets, and the class token.
ParamStore init_params(const ViTConfig& config, std::uint64_t seed);

/// Verifies that a parameter store has exactly the names and shapes this
/// configuration expects; throws ConfigError naming the first mismatch.
void check_params_match(const ParamStore& params, const ViTConfig& config);

/// Closed-form trainable-parameter count for a configuration.
std::int64_t param_count(const ViTConfig& config);

/// Splits an H x W x C image into N = HW/P^2 flattened patches. Patches are
/// ordered row-major over the patch grid; within a patch the layout is
/// row-major over (row, column, channel).
Tensor patchify(const Tensor& image, const ViTConfig& config);

/// Projects patches to the hidden size, prepends the class token, and adds
/// the learned position embedding. Output is (N+1) x D.
Tensor embed(const Tensor& patches, const ViTConfig& config,
             const ParamStore& params);

/// softmax(Q K^t / sqrt(d_k)) V for one head. Captures the similarity
/// score, attention weight and weighted value into taps when requested.
Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v,
                      HookTap* taps);

Tensor multi_head_attention(const Tensor& x, const ViTConfig& config,
                            const BlockParams& block, HookTap* taps);

/// Pre-norm block: x + MSA(LN(x)), then x + MLP(LN(x)).
Tensor encoder_block(const Tensor& x, const ViTConfig& config,
                     const BlockParams& block, HookTap* taps);

/// Full model over a B x H x W x C batch; returns B x num_classes logits.
/// Clears taps at entry so captures always belong to this pass.
Tensor forward(const Tensor& images, const ViTConfig& config,
               const ParamStore& params, HookTap* taps = nullptr);

}  // namespace spvit
