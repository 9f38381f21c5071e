#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "spvit/prune.hpp"
#include "spvit/vit.hpp"
#include "test_util.hpp"

using namespace spvit;
using namespace spvit::testing;

namespace {

ParamStore single(Vec values) {
  const auto n = static_cast<std::int64_t>(values.size());
  ParamStore store;
  store.add("w", Tensor({n}, std::move(values), true));
  return store;
}

std::vector<double> values_of(const ParamStore& store, const char* name = "w") {
  auto s = store.at(name).data();
  return {s.begin(), s.end()};
}

}  // namespace

TEST_CASE("global_threshold reproduces the hand-traced runs") {
  ParamStore a = single({3, -1, 2, -4, 0.5});
  CHECK(global_threshold(a, 0.4) == 1.0);  // k = 2 of |.| = {0.5, 1, 2, 3, 4}

  ParamStore b = single({0.1, -0.5, 0.3, 0.05});
  CHECK(global_threshold(b, 0.5) == 0.1);

  ParamStore ties = single({2, -2, 2, -2});
  CHECK(global_threshold(ties, 0.5) == 2.0);
}

TEST_CASE("global_threshold rejects out-of-range and degenerate ratios") {
  ParamStore store = single({1, 2, 3, 4, 5});
  CHECK_THROWS_AS(global_threshold(store, 0.0), ConfigError);
  CHECK_THROWS_AS(global_threshold(store, 1.0), ConfigError);
  CHECK_THROWS_AS(global_threshold(store, 1.5), ConfigError);
  CHECK_THROWS_AS(global_threshold(store, 0.1), ConfigError);  // floor(0.5) = 0
}

TEST_CASE("global_threshold equals the ascending-sort oracle exactly") {
  std::mt19937_64 rng(123);
  for (int trial = 0; trial < 40; ++trial) {
    const std::int64_t n = 10 + static_cast<std::int64_t>(rng() % 20000);
    std::normal_distribution<double> dist(0.0, 1.0);
    Vec values(static_cast<std::size_t>(n));
    for (auto& v : values) v = dist(rng);
    const double ratio = 0.1 * (1 + static_cast<double>(rng() % 9));

    ParamStore store = single(values);
    const double got = global_threshold(store, ratio);

    std::vector<double> sorted;
    sorted.reserve(values.size());
    for (double v : values) sorted.push_back(std::abs(v));
    std::sort(sorted.begin(), sorted.end());
    const auto k = static_cast<std::size_t>(ratio * static_cast<double>(n));
    CHECK(got == sorted[k - 1]);
  }
}

TEST_CASE("apply_prune zeroes at or below the threshold, strictly keeping above") {
  ParamStore a = single({3, -1, 2, -4, 0.5});
  auto [mask_a, report_a] = apply_prune(a, 0.4);
  CHECK(values_of(a) == std::vector<double>{3, 0, 2, -4, 0});  // -1 hits strict >
  CHECK(report_a.threshold == 1.0);
  CHECK(report_a.n_total == 5);
  CHECK(report_a.n_zeroed == 2);
  CHECK(mask_a.kept.at(0).second == std::vector<std::uint8_t>{1, 0, 1, 1, 0});

  ParamStore b = single({0.1, -0.5, 0.3, 0.05});
  apply_prune(b, 0.5);
  CHECK(values_of(b) == std::vector<double>{0, -0.5, 0.3, 0});
}

TEST_CASE("pruning never modifies kept values and meets the requested count") {
  std::mt19937_64 rng(7);
  std::normal_distribution<double> dist(0.0, 1.0);
  Vec values(400);
  for (auto& v : values) v = dist(rng);

  ParamStore store;
  store.add("a", Tensor({20, 10}, {values.begin(), values.begin() + 200}, true));
  store.add("b", Tensor({200}, {values.begin() + 200, values.end()}, true));
  auto [mask, report] = apply_prune(store, 0.3);

  // kept values form a sub-multiset of the originals
  std::vector<double> kept;
  for (const char* name : {"a", "b"}) {
    for (double v : store.at(name).data()) {
      if (v != 0.0) kept.push_back(v);
    }
  }
  std::vector<double> original(values.begin(), values.end());
  std::sort(kept.begin(), kept.end());
  std::sort(original.begin(), original.end());
  CHECK(std::includes(original.begin(), original.end(), kept.begin(), kept.end()));

  // continuous values are almost surely distinct, so the count is exact
  const auto expected = static_cast<std::int64_t>(0.3 * 400);
  CHECK(report.n_zeroed == expected);
  CHECK(report.sparsity == doctest::Approx(0.3).epsilon(1e-12));
  CHECK(report.per_tensor.size() == 2);

  // masking with the fixed mask is idempotent
  ParamStore before = store;
  apply_mask(store, mask);
  for (const char* name : {"a", "b"}) {
    CHECK(bitwise_equal(store.at(name), before.at(name)));
  }
}

TEST_CASE("sparsity_report counts exact zeros") {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 1;
  cfg.hidden_size = 16;
  cfg.mlp_size = 24;
  cfg.num_heads = 2;
  cfg.depth = 1;
  cfg.num_classes = 3;
  ParamStore params = init_params(cfg, 11);

  // fresh continuous init: only the structured zeros (biases, betas, cls)
  PruneReport fresh = sparsity_report(params);
  std::int64_t structured = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const std::string& n = params.name(i);
    if (n.find("bias") != std::string::npos || n.find("beta") != std::string::npos ||
        n == "cls_token") {
      structured += params.value(i).numel();
    }
  }
  CHECK(fresh.n_zeroed == structured);

  auto [mask, report] = apply_prune(params, 0.3);
  (void)mask;
  PruneReport after = sparsity_report(params);
  CHECK(after.n_zeroed == report.n_zeroed);
  // floor(k) semantics: the achieved sparsity sits within 1/N of the request
  CHECK(after.n_zeroed >= static_cast<std::int64_t>(0.3 * static_cast<double>(after.n_total)));
  CHECK(after.sparsity >= 0.3 - 1.0 / static_cast<double>(after.n_total));
}

TEST_CASE("pruned forward equals forward with manually zeroed weights") {
  ViTConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 4;
  cfg.channels = 2;
  cfg.hidden_size = 16;
  cfg.mlp_size = 24;
  cfg.num_heads = 2;
  cfg.depth = 2;
  cfg.num_classes = 4;
  ParamStore pruned = init_params(cfg, 13);
  ParamStore manual = pruned;

  auto [mask, report] = apply_prune(pruned, 0.25);
  (void)report;
  for (const auto& [name, kept] : mask.kept) {
    const Tensor& original = manual.at(name);
    Vec zeroed(original.data().begin(), original.data().end());
    for (std::size_t j = 0; j < kept.size(); ++j) {
      if (!kept[j]) zeroed[j] = 0.0;
    }
    manual.set(name, Tensor(original.shape(), std::move(zeroed), true));
  }

  Tensor images = make_random({2, 8, 8, 2}, 14, 0.0, 1.0);
  CHECK(bitwise_equal(forward(images, cfg, pruned), forward(images, cfg, manual)));
}

TEST_CASE("a near-one ratio leaves a near-empty but consistent store") {
  Vec values(20);
  for (std::size_t i = 0; i < values.size(); ++i) {
    values[i] = 0.1 * static_cast<double>(i + 1);
  }
  ParamStore store = single(std::move(values));
  auto [mask, report] = apply_prune(store, 0.999999);  // floor(r*N) = N - 1
  (void)mask;
  CHECK(report.n_zeroed == 19);  // only the strict maximum survives
  CHECK(store.at("w").at(19) == doctest::Approx(2.0).epsilon(1e-15));
  for (std::int64_t i = 0; i < 19; ++i) CHECK(store.at("w").at(i) == 0.0);
}

TEST_CASE("exclusion prefixes shield parameter groups from pruning") {
  ParamStore store;
  store.add("norm.gamma", Tensor({2}, {0.001, 0.002}, true));
  store.add("w", Tensor({4}, {1, 2, 3, 4}, true));
  PruneOptions options;
  options.exclude_prefixes = {"norm."};
  auto [mask, report] = apply_prune(store, 0.5, options);
  (void)mask;
  // threshold comes from w alone: k = 2 -> threshold 2
  CHECK(report.threshold == 2.0);
  CHECK(values_of(store, "norm.gamma") == std::vector<double>{0.001, 0.002});
  CHECK(values_of(store, "w") == std::vector<double>{0, 0, 3, 4});
  CHECK(report.n_total == 4);
}
