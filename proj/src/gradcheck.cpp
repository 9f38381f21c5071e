#include "spvit/gradcheck.hpp"

#include <algorithm>
#include <random>

#include "spvit/data.hpp"
#include "spvit/train.hpp"

namespace spvit {

namespace {

Tensor random_images(const ViTConfig& cfg, std::int64_t batch, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  const std::int64_t n = batch * cfg.image_size * cfg.image_size * cfg.channels;
  Vec v(static_cast<std::size_t>(n));
  for (auto& x : v) x = uniform(rng);
  return Tensor({batch, cfg.image_size, cfg.image_size, cfg.channels}, std::move(v));
}

std::vector<std::int64_t> sample_coords(std::int64_t numel, std::int64_t want,
                                        std::mt19937_64& rng) {
  if (numel <= want) {
    std::vector<std::int64_t> all(static_cast<std::size_t>(numel));
    for (std::int64_t i = 0; i < numel; ++i) all[static_cast<std::size_t>(i)] = i;
    return all;
  }
  std::vector<std::int64_t> coords;
  coords.reserve(static_cast<std::size_t>(want));
  std::uniform_int_distribution<std::int64_t> pick(0, numel - 1);
  while (static_cast<std::int64_t>(coords.size()) < want) {
    const std::int64_t c = pick(rng);
    if (std::find(coords.begin(), coords.end(), c) == coords.end()) {
      coords.push_back(c);
    }
  }
  std::sort(coords.begin(), coords.end());
  return coords;
}

}  // namespace

std::vector<GradcheckPositionResult> gradcheck_positions(
    const ViTConfig& config, const GradcheckOptions& options) {
  config.validate();
  ParamStore params = init_params(config, options.seed);
  Tensor images = random_images(config, options.batch, options.seed + 1);
  std::vector<int> labels(static_cast<std::size_t>(options.batch));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    labels[i] = static_cast<int>(i % static_cast<std::size_t>(config.num_classes));
  }

  std::vector<GradcheckPositionResult> results;
  for (SparsePosition position : kAllSparsePositions) {
    SparseConfig sparse;
    sparse.enabled = true;
    sparse.position = position;

    auto loss_value = [&](const ParamStore& store) {
      HookTap taps;
      taps.position = position;
      Tensor logits = forward(images, config, store, &taps);
      Tensor ce = cross_entropy(logits, labels);
      return total_loss(ce, taps, sparse).value();
    };

    Gradients analytic;
    {
      Graph graph;
      Graph::Recording recording(graph);
      HookTap taps;
      taps.position = position;
      Tensor logits = forward(images, config, params, &taps);
      Tensor ce = cross_entropy(logits, labels);
      analytic = graph.backward(total_loss(ce, taps, sparse));
    }

    GradcheckPositionResult res;
    res.position = position;
    std::mt19937_64 coord_rng(options.seed * 1000003ULL +
                              static_cast<std::uint64_t>(position) + 17ULL);
    for (std::size_t i = 0; i < params.size(); ++i) {
      const std::string name = params.name(i);
      const Tensor& theta = params.value(i);
      const Tensor& grad = analytic.at(theta);
      const auto coords =
          sample_coords(theta.numel(), options.coords_per_tensor, coord_rng);

      auto f = [&](const Tensor& candidate) {
        ParamStore probe = params;
        probe.set(name, candidate.detached(/*requires_grad=*/true));
        return loss_value(probe);
      };
      const std::vector<double> numeric =
          finite_diff_grad_at(f, theta, options.step, coords);
      for (std::size_t c = 0; c < coords.size(); ++c) {
        double a = grad.at(coords[c]);
        if (options.sabotage && i == 0) a *= 1.5;  // negative control
        res.max_rel_err =
            std::max(res.max_rel_err, rel_err(a, numeric[c], options.rel_floor));
        ++res.coords_checked;
      }
    }
    results.push_back(res);
  }
  return results;
}

bool gradcheck_passed(const std::vector<GradcheckPositionResult>& results,
                      double tolerance) {
  for (const auto& r : results) {
    if (!(r.max_rel_err < tolerance)) return false;
  }
  return !results.empty();
}

}  // namespace spvit
