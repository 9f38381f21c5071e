#include "spvit/vit.hpp"

#include <cmath>
#include <random>
#include <unordered_map>

namespace spvit {

void ViTConfig::validate() const {
  if (image_size <= 0 || patch_size <= 0 || channels <= 0 || hidden_size <= 0 ||
      mlp_size <= 0 || num_heads <= 0 || depth <= 0 || num_classes <= 0) {
    throw ConfigError("model: all sizes and counts must be positive");
  }
  if (image_size % patch_size != 0) {
    throw ConfigError("model: image_size " + std::to_string(image_size) +
                      " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (hidden_size % num_heads != 0) {
    throw ConfigError("model: hidden_size " + std::to_string(hidden_size) +
                      " is not divisible by num_heads " + std::to_string(num_heads));
  }
  if (layer_norm_eps <= 0) {
    throw ConfigError("model: layer_norm_eps must be positive");
  }
}

// --- ParamStore --------------------------------------------------------------

void ParamStore::add(std::string name, Tensor value) {
  if (contains(name)) {
    throw ContractError("ParamStore: duplicate parameter name '" + name + "'");
  }
  names_.push_back(std::move(name));
  values_.push_back(std::move(value));
}

bool ParamStore::contains(std::string_view name) const {
  for (const auto& n : names_) {
    if (n == name) return true;
  }
  return false;
}

const Tensor& ParamStore::at(std::string_view name) const {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) return values_[i];
  }
  throw ContractError("ParamStore: unknown parameter '" + std::string(name) + "'");
}

void ParamStore::set(std::string_view name, Tensor value) {
  for (std::size_t i = 0; i < names_.size(); ++i) {
    if (names_[i] == name) {
      if (values_[i].shape() != value.shape()) {
        throw DimensionError("ParamStore: shape change for '" + std::string(name) +
                             "': " + shape_str(values_[i].shape()) + " -> " +
                             shape_str(value.shape()));
      }
      values_[i] = std::move(value);
      return;
    }
  }
  throw ContractError("ParamStore: unknown parameter '" + std::string(name) + "'");
}

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& v : values_) n += v.numel();
  return n;
}

BlockParams block_params(const ParamStore& params, std::int64_t block) {
  const std::string p = "block" + std::to_string(block) + ".";
  return BlockParams{
      params.at(p + "norm1.gamma"), params.at(p + "norm1.beta"),
      params.at(p + "attn.wq.weight"), params.at(p + "attn.wq.bias"),
      params.at(p + "attn.wk.weight"), params.at(p + "attn.wk.bias"),
      params.at(p + "attn.wv.weight"), params.at(p + "attn.wv.bias"),
      params.at(p + "attn.wo.weight"), params.at(p + "attn.wo.bias"),
      params.at(p + "norm2.gamma"), params.at(p + "norm2.beta"),
      params.at(p + "mlp.w1.weight"), params.at(p + "mlp.w1.bias"),
      params.at(p + "mlp.w2.weight"), params.at(p + "mlp.w2.bias"),
  };
}

// --- initialization ----------------------------------------------------------

namespace {

class TruncNormal {
 public:
  TruncNormal(std::mt19937_64& rng, double std) : rng_(rng), dist_(0.0, std), cut_(2.0 * std) {}

  double operator()() {
    double z = dist_(rng_);
    while (std::abs(z) > cut_) z = dist_(rng_);
    return z;
  }

 private:
  std::mt19937_64& rng_;
  std::normal_distribution<double> dist_;
  double cut_;
};

enum class InitKind { kWeight, kZeros, kOnes };

struct ParamSpec {
  std::string name;
  Shape shape;
  InitKind kind;
};

std::vector<ParamSpec> param_layout(const ViTConfig& config) {
  const std::int64_t d = config.hidden_size;
  std::vector<ParamSpec> layout;
  layout.push_back({"patch_proj.weight", {config.patch_dim(), d}, InitKind::kWeight});
  layout.push_back({"patch_proj.bias", {d}, InitKind::kZeros});
  layout.push_back({"cls_token", {1, d}, InitKind::kZeros});
  layout.push_back({"pos_embed", {config.tokens(), d}, InitKind::kWeight});
  for (std::int64_t i = 0; i < config.depth; ++i) {
    const std::string p = "block" + std::to_string(i) + ".";
    layout.push_back({p + "norm1.gamma", {d}, InitKind::kOnes});
    layout.push_back({p + "norm1.beta", {d}, InitKind::kZeros});
    for (const char* proj : {"wq", "wk", "wv", "wo"}) {
      layout.push_back({p + "attn." + proj + ".weight", {d, d}, InitKind::kWeight});
      layout.push_back({p + "attn." + proj + ".bias", {d}, InitKind::kZeros});
    }
    layout.push_back({p + "norm2.gamma", {d}, InitKind::kOnes});
    layout.push_back({p + "norm2.beta", {d}, InitKind::kZeros});
    layout.push_back({p + "mlp.w1.weight", {d, config.mlp_size}, InitKind::kWeight});
    layout.push_back({p + "mlp.w1.bias", {config.mlp_size}, InitKind::kZeros});
    layout.push_back({p + "mlp.w2.weight", {config.mlp_size, d}, InitKind::kWeight});
    layout.push_back({p + "mlp.w2.bias", {d}, InitKind::kZeros});
  }
  layout.push_back({"final_norm.gamma", {d}, InitKind::kOnes});
  layout.push_back({"final_norm.beta", {d}, InitKind::kZeros});
  layout.push_back({"classifier.weight", {d, config.num_classes}, InitKind::kWeight});
  layout.push_back({"classifier.bias", {config.num_classes}, InitKind::kZeros});
  return layout;
}

Tensor random_weight(Shape shape, TruncNormal& tn) {
  const std::int64_t n = shape_numel(shape);
  Vec v(static_cast<std::size_t>(n));
  for (auto& x : v) x = tn();
  return Tensor(std::move(shape), std::move(v), /*requires_grad=*/true);
}

}  // namespace

ParamStore init_params(const ViTConfig& config, std::uint64_t seed) {
  config.validate();
  std::mt19937_64 rng(seed);
  TruncNormal tn(rng, 0.02);
  ParamStore params;
  for (auto& spec : param_layout(config)) {
    switch (spec.kind) {
      case InitKind::kWeight:
        params.add(std::move(spec.name), random_weight(std::move(spec.shape), tn));
        break;
      case InitKind::kZeros:
        params.add(std::move(spec.name),
                   Tensor::zeros(std::move(spec.shape), /*requires_grad=*/true));
        break;
      case InitKind::kOnes:
        params.add(std::move(spec.name),
                   Tensor::full(std::move(spec.shape), 1.0, /*requires_grad=*/true));
        break;
    }
  }
  return params;
}

void check_params_match(const ParamStore& params, const ViTConfig& config) {
  const auto layout = param_layout(config);
  if (params.size() != layout.size()) {
    throw ConfigError("checkpoint has " + std::to_string(params.size()) +
                      " tensors, model configuration expects " +
                      std::to_string(layout.size()));
  }
  for (std::size_t i = 0; i < layout.size(); ++i) {
    if (params.name(i) != layout[i].name) {
      throw ConfigError("checkpoint tensor " + std::to_string(i) + " is '" +
                        params.name(i) + "', expected '" + layout[i].name + "'");
    }
    if (params.value(i).shape() != layout[i].shape) {
      throw ConfigError("checkpoint tensor '" + params.name(i) + "' has shape " +
                        shape_str(params.value(i).shape()) + ", model configuration expects " +
                        shape_str(layout[i].shape));
    }
  }
}

std::int64_t param_count(const ViTConfig& config) {
  const std::int64_t d = config.hidden_size;
  const std::int64_t per_block = 4 * d                       // two norms
                                 + 4 * (d * d + d)           // q, k, v, o
                                 + d * config.mlp_size + config.mlp_size
                                 + config.mlp_size * d + d;
  return config.patch_dim() * d + d                          // patch projection
         + d                                                 // class token
         + config.tokens() * d                               // position embedding
         + config.depth * per_block
         + 2 * d                                             // final norm
         + d * config.num_classes + config.num_classes;      // classifier
}

// --- model ops ---------------------------------------------------------------

Tensor patchify(const Tensor& image, const ViTConfig& config) {
  const std::int64_t h = config.image_size, w = config.image_size;
  const std::int64_t c = config.channels, p = config.patch_size;
  if (image.rank() != 3 || image.dim(0) != h || image.dim(1) != w || image.dim(2) != c) {
    throw ConfigError("patchify: image " + shape_str(image.shape()) +
                      " does not match configured " + shape_str({h, w, c}));
  }
  const std::int64_t grid = w / p;
  const std::int64_t n = config.patches_per_image();
  const std::int64_t pd = config.patch_dim();
  std::span<const double> src = image.data();
  Vec v(static_cast<std::size_t>(n * pd));
  std::int64_t dst = 0;
  for (std::int64_t pr = 0; pr < grid; ++pr) {
    for (std::int64_t pc = 0; pc < grid; ++pc) {
      for (std::int64_t r = 0; r < p; ++r) {
        const std::int64_t row = pr * p + r;
        const std::int64_t base = (row * w + pc * p) * c;
        for (std::int64_t i = 0; i < p * c; ++i) {
          v[static_cast<std::size_t>(dst++)] = src[static_cast<std::size_t>(base + i)];
        }
      }
    }
  }
  return Tensor({n, pd}, std::move(v));
}

Tensor embed(const Tensor& patches, const ViTConfig& config,
             const ParamStore& params) {
  if (patches.rank() != 2 || patches.dim(0) != config.patches_per_image() ||
      patches.dim(1) != config.patch_dim()) {
    throw ConfigError("embed: patches " + shape_str(patches.shape()) +
                      " do not match configured " +
                      shape_str({config.patches_per_image(), config.patch_dim()}));
  }
  Tensor proj = add_bias_rows(matmul(patches, params.at("patch_proj.weight")),
                              params.at("patch_proj.bias"));
  const Tensor parts[] = {params.at("cls_token"), proj};
  Tensor x = concat(parts, 0);
  return add(x, params.at("pos_embed"));
}

Tensor attention_head(const Tensor& q, const Tensor& k, const Tensor& v,
                      HookTap* taps) {
  if (q.rank() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw DimensionError("attention_head: Q " + shape_str(q.shape()) + ", K " +
                         shape_str(k.shape()) + ", V " + shape_str(v.shape()) +
                         " must be identical rank-2 shapes");
  }
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_dk);
  if (taps) taps->capture(SparsePosition::kSimilarityScore, scores);
  Tensor weights = softmax_rows(scores);
  if (taps) taps->capture(SparsePosition::kAttentionWeight, weights);
  Tensor weighted = matmul(weights, v);
  if (taps) taps->capture(SparsePosition::kWeightedValue, weighted);
  return weighted;
}

namespace {

/// Attention over a (batch * T) x D token matrix holding `batch`
/// independent images of T tokens each.
Tensor mha_tokens(const Tensor& x, std::int64_t batch, const ViTConfig& config,
                  const BlockParams& block, HookTap* taps) {
  const std::int64_t d = config.hidden_size;
  if (x.rank() != 2 || x.cols() != d || x.rows() % batch != 0) {
    throw DimensionError("multi_head_attention: tokens " + shape_str(x.shape()) +
                         " do not fit hidden size " + std::to_string(d));
  }
  if (d % config.num_heads != 0) {
    throw ConfigError("multi_head_attention: hidden_size not divisible by num_heads");
  }
  const std::int64_t t = x.rows() / batch;
  const std::int64_t dk = d / config.num_heads;

  Tensor q = add_bias_rows(matmul(x, block.wq), block.bq);
  Tensor k = add_bias_rows(matmul(x, block.wk), block.bk);
  Tensor v = add_bias_rows(matmul(x, block.wv), block.bv);

  std::vector<Tensor> images;
  images.reserve(static_cast<std::size_t>(batch));
  std::vector<Tensor> heads(static_cast<std::size_t>(config.num_heads));
  for (std::int64_t b = 0; b < batch; ++b) {
    for (std::int64_t hd = 0; hd < config.num_heads; ++hd) {
      Tensor qh = block2d(q, b * t, t, hd * dk, dk);
      Tensor kh = block2d(k, b * t, t, hd * dk, dk);
      Tensor vh = block2d(v, b * t, t, hd * dk, dk);
      heads[static_cast<std::size_t>(hd)] = attention_head(qh, kh, vh, taps);
    }
    images.push_back(concat(heads, 1));
  }
  Tensor merged = batch == 1 ? images[0] : concat(images, 0);
  Tensor out = add_bias_rows(matmul(merged, block.wo), block.bo);
  if (taps) taps->capture(SparsePosition::kAttentionOutput, out);
  return out;
}

Tensor encoder_tokens(const Tensor& x, std::int64_t batch,
                      const ViTConfig& config, const BlockParams& block,
                      HookTap* taps) {
  const double eps = config.layer_norm_eps;
  Tensor normed = layer_norm(x, block.norm1_gamma, block.norm1_beta, eps);
  Tensor att = mha_tokens(normed, batch, config, block, taps);
  Tensor x1 = add(x, att);
  Tensor normed2 = layer_norm(x1, block.norm2_gamma, block.norm2_beta, eps);
  Tensor pre = add_bias_rows(matmul(normed2, block.w1), block.b1);
  if (taps) taps->capture(SparsePosition::kMlpGeluInput, pre);
  Tensor mlp = add_bias_rows(matmul(gelu(pre), block.w2), block.b2);
  return add(x1, mlp);
}

}  // namespace

Tensor multi_head_attention(const Tensor& x, const ViTConfig& config,
                            const BlockParams& block, HookTap* taps) {
  return mha_tokens(x, 1, config, block, taps);
}

Tensor encoder_block(const Tensor& x, const ViTConfig& config,
                     const BlockParams& block, HookTap* taps) {
  return encoder_tokens(x, 1, config, block, taps);
}

Tensor forward(const Tensor& images, const ViTConfig& config,
               const ParamStore& params, HookTap* taps) {
  config.validate();
  if (images.rank() != 4 || images.dim(1) != config.image_size ||
      images.dim(2) != config.image_size || images.dim(3) != config.channels) {
    throw ConfigError("forward: images " + shape_str(images.shape()) +
                      " do not match configured " +
                      shape_str({config.image_size, config.image_size, config.channels}));
  }
  const std::int64_t batch = images.dim(0);
  if (taps) taps->clear();

  const std::int64_t n = config.patches_per_image();
  const std::int64_t pd = config.patch_dim();
  const std::int64_t image_numel = config.image_size * config.image_size * config.channels;

  // Patch extraction involves no parameters; build the whole batch as one
  // constant matrix.
  Vec patch_data(static_cast<std::size_t>(batch * n * pd));
  std::span<const double> src = images.data();
  for (std::int64_t b = 0; b < batch; ++b) {
    Tensor img(Shape{config.image_size, config.image_size, config.channels},
               Vec(src.begin() + b * image_numel,
                   src.begin() + (b + 1) * image_numel));
    Tensor patches = patchify(img, config);
    std::copy(patches.data().begin(), patches.data().end(),
              patch_data.begin() + b * n * pd);
  }
  Tensor all_patches({batch * n, pd}, std::move(patch_data));

  Tensor proj = add_bias_rows(matmul(all_patches, params.at("patch_proj.weight")),
                              params.at("patch_proj.bias"));

  const Tensor& cls = params.at("cls_token");
  std::vector<Tensor> parts;
  parts.reserve(static_cast<std::size_t>(2 * batch));
  for (std::int64_t b = 0; b < batch; ++b) {
    parts.push_back(cls);
    parts.push_back(slice(proj, 0, b * n, n));
  }
  Tensor x = concat(parts, 0);

  const Tensor& pos = params.at("pos_embed");
  if (batch == 1) {
    x = add(x, pos);
  } else {
    std::vector<Tensor> tiled(static_cast<std::size_t>(batch), pos);
    x = add(x, concat(tiled, 0));
  }

  for (std::int64_t i = 0; i < config.depth; ++i) {
    x = encoder_tokens(x, batch, config, block_params(params, i), taps);
  }
  x = layer_norm(x, params.at("final_norm.gamma"), params.at("final_norm.beta"),
                 config.layer_norm_eps);

  const std::int64_t t = config.tokens();
  Tensor cls_rows;
  if (batch == 1) {
    cls_rows = block2d(x, 0, 1, 0, config.hidden_size);
  } else {
    std::vector<Tensor> rows;
    rows.reserve(static_cast<std::size_t>(batch));
    for (std::int64_t b = 0; b < batch; ++b) {
      rows.push_back(block2d(x, b * t, 1, 0, config.hidden_size));
    }
    cls_rows = concat(rows, 0);
  }
  return add_bias_rows(matmul(cls_rows, params.at("classifier.weight")),
                       params.at("classifier.bias"));
}

}  // namespace spvit
