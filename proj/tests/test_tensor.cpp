#include <doctest.h>

#include <cmath>
#include <random>

#include "spvit/tensor.hpp"
#include "test_util.hpp"

using namespace spvit;
using namespace spvit::testing;

TEST_CASE("tensor construction enforces its invariants") {
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0, 3.0}), DimensionError);
  CHECK_THROWS_AS(Tensor({2, 0}, {}), DimensionError);
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), std::invalid_argument);
  CHECK_THROWS_AS(Tensor({1}, {INFINITY}), std::invalid_argument);

  Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.numel() == 6);
  CHECK(t.at(1, 2) == 6.0);
  CHECK_THROWS_AS(t.at(2, 0), IndexError);
  CHECK(Tensor::scalar(4.0).value() == 4.0);

  // copies share storage, identity is the storage
  Tensor u = t;
  CHECK(u.id() == t.id());
}

TEST_CASE("matmul matches hand-computed products") {
  Tensor eye({2, 2}, {1, 0, 0, 1});
  Tensor m({2, 2}, {2, 3, 4, 5});
  Tensor prod = matmul(eye, m);
  CHECK(bitwise_equal(prod, m));

  Tensor row({1, 2}, {1, 2});
  Tensor col({2, 1}, {3, 4});
  CHECK(matmul(row, col).value() == 11.0);

  CHECK_THROWS_WITH_AS(matmul(row, row), doctest::Contains("[1x2]"),
                       DimensionError);
}

TEST_CASE("matmul gradient equals row-broadcast of B's column sums") {
  Tensor a = make_random({3, 4}, 11);
  Tensor b = make_random({4, 5}, 12);
  a = a.detached(true);
  Graph graph;
  Gradients grads;
  {
    Graph::Recording rec(graph);
    grads = graph.backward(sum(matmul(a, b)));
  }
  const Tensor& da = grads.at(a);
  for (std::int64_t i = 0; i < 3; ++i) {
    for (std::int64_t j = 0; j < 4; ++j) {
      double colsum = 0.0;
      for (std::int64_t k = 0; k < 5; ++k) colsum += b.at(j, k);
      CHECK(da.at(i, j) == doctest::Approx(colsum).epsilon(1e-12));
    }
  }
  // and against the finite-difference oracle at step 1e-6
  auto f = [&](std::span<const Tensor> in) { return sum(matmul(in[0], b)); };
  CHECK(max_grad_err(f, {a}) < 1e-5);
}

TEST_CASE("softmax_rows examples and stability") {
  Tensor u = softmax_rows(Tensor({1, 3}, {1, 1, 1}));
  for (std::int64_t j = 0; j < 3; ++j) {
    CHECK(u.at(0, j) == doctest::Approx(1.0 / 3).epsilon(1e-15));
  }
  Tensor half = softmax_rows(Tensor({1, 2}, {0, 0}));
  CHECK(half.at(0, 0) == 0.5);
  CHECK(half.at(0, 1) == 0.5);
  Tensor big = softmax_rows(Tensor({1, 2}, {1000, 1000}));  // no overflow
  CHECK(big.at(0, 0) == 0.5);
  CHECK(big.at(0, 1) == 0.5);
}

TEST_CASE("softmax_rows rows sum to one and stay in (0,1)") {
  // Row spreads stay below ln(1/eps) so no entry can round to exactly 1.
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Tensor x = make_random({5, 7}, seed, -15.0, 15.0);
    Tensor y = softmax_rows(x);
    for (std::int64_t r = 0; r < 5; ++r) {
      double total = 0.0;
      for (std::int64_t c = 0; c < 7; ++c) {
        const double v = y.at(r, c);
        CHECK(v > 0.0);
        CHECK(v < 1.0);
        total += v;
      }
      CHECK(std::abs(total - 1.0) < 1e-12);
    }
  }
}

TEST_CASE("layer_norm matches the per-row normalization formula") {
  Tensor gamma({2}, {1, 1});
  Tensor beta({2}, {0, 0});
  Tensor y = layer_norm(Tensor({1, 2}, {1, 3}), gamma, beta, 1e-6);
  // mu = 2, population var = 1
  const double expected = 1.0 / std::sqrt(1.0 + 1e-6);
  CHECK(y.at(0, 0) == doctest::Approx(-expected).epsilon(1e-14));
  CHECK(y.at(0, 1) == doctest::Approx(expected).epsilon(1e-14));

  Tensor g3({3}, {1, 1, 1});
  Tensor b3({3}, {0, 0, 0});
  Tensor constant = layer_norm(Tensor({1, 3}, {5, 5, 5}), g3, b3, 1e-6);
  for (std::int64_t j = 0; j < 3; ++j) CHECK(constant.at(0, j) == 0.0);

  CHECK_THROWS_AS(layer_norm(Tensor({1, 3}, {1, 2, 3}), gamma, beta, 1e-6),
                  DimensionError);
  CHECK_THROWS_AS(layer_norm(Tensor({1, 2}, {1, 2}), gamma, beta, 0.0),
                  ConfigError);
}

TEST_CASE("layer_norm output is standardized and shift-invariant") {
  const std::int64_t d = 16;
  Tensor gamma = Tensor::full({d}, 1.0);
  Tensor beta = Tensor::zeros({d});
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Tensor x = make_random({3, d}, seed, -4.0, 4.0);
    Tensor y = layer_norm(x, gamma, beta, 1e-10);
    for (std::int64_t r = 0; r < 3; ++r) {
      double m = 0, v = 0;
      for (std::int64_t c = 0; c < d; ++c) m += y.at(r, c);
      m /= static_cast<double>(d);
      for (std::int64_t c = 0; c < d; ++c) {
        v += (y.at(r, c) - m) * (y.at(r, c) - m);
      }
      v /= static_cast<double>(d);
      CHECK(std::abs(m) < 1e-12);
      CHECK(v == doctest::Approx(1.0).epsilon(1e-6));
    }

    // adding a constant to a row changes nothing
    Vec shifted(x.data().begin(), x.data().end());
    for (auto& e : shifted) e += 3.25;
    Tensor y2 = layer_norm(Tensor({3, d}, shifted), gamma, beta, 1e-10);
    for (std::int64_t i = 0; i < y.numel(); ++i) {
      CHECK(std::abs(y.at(i) - y2.at(i)) < 1e-9);
    }
  }
}

TEST_CASE("gelu matches the tanh form") {
  CHECK(gelu(Tensor::scalar(0.0)).value() == 0.0);
  CHECK(std::abs(gelu(Tensor::scalar(1.0)).value() - 0.841192) < 1e-6);
  CHECK(std::abs(gelu(Tensor::scalar(-10.0)).value()) < 1e-6);

  // independent scalar evaluation of the printed expression
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> dist(-4.0, 4.0);
  for (int i = 0; i < 50; ++i) {
    const double x = dist(rng);
    const double u = std::sqrt(2.0 / M_PI) * (x + 0.044715 * x * x * x);
    const double expected = 0.5 * x * (1.0 + std::tanh(u));
    CHECK(gelu(Tensor::scalar(x)).value() == doctest::Approx(expected).epsilon(1e-15));
  }
}

TEST_CASE("cross_entropy examples") {
  Tensor uniform({1, 10}, Vec(10, 0.7));
  const int label3[] = {3};
  CHECK(cross_entropy(uniform, label3).value() ==
        doctest::Approx(std::log(10.0)).epsilon(1e-14));

  Tensor confident({1, 4}, {100.0, 0.0, 0.0, 0.0});
  const int label0[] = {0};
  CHECK(cross_entropy(confident, label0).value() < 1e-12);

  // two-sample mean, against independent scalar arithmetic
  Tensor logits({2, 3}, {1, 2, 3, 0, 0, 10});
  const int labels[] = {2, 0};
  auto row_loss = [](std::vector<double> row, int label) {
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double denom = 0;
    for (double v : row) denom += std::exp(v - mx);
    return mx + std::log(denom) - row[static_cast<std::size_t>(label)];
  };
  const double expected = 0.5 * (row_loss({1, 2, 3}, 2) + row_loss({0, 0, 10}, 0));
  CHECK(cross_entropy(logits, labels).value() ==
        doctest::Approx(expected).epsilon(1e-14));

  const int bad[] = {3, 0};
  CHECK_THROWS_AS(cross_entropy(logits, bad), IndexError);
}

TEST_CASE("backward on simple closed-form losses") {
  Tensor p({3}, {1, 2, 3}, true);
  {
    Graph graph;
    Graph::Recording rec(graph);
    Gradients grads = graph.backward(sum(p));
    const Tensor& g = grads.at(p);
    for (std::int64_t i = 0; i < 3; ++i) CHECK(g.at(i) == 1.0);
  }
  Tensor q({2}, {1, 2}, true);
  {
    Graph graph;
    Graph::Recording rec(graph);
    Gradients grads = graph.backward(sum(multiply(q, q)));
    CHECK(grads.at(q).at(0) == 2.0);
    CHECK(grads.at(q).at(1) == 4.0);
  }
}

TEST_CASE("backward rejects non-scalar and unrecorded losses") {
  Tensor p({2}, {1, 2}, true);
  Graph graph;
  Graph::Recording rec(graph);
  Tensor doubled = scale(p, 2.0);
  CHECK_THROWS_AS(graph.backward(doubled), ContractError);          // not scalar
  CHECK_THROWS_AS(graph.backward(Tensor::scalar(1.0)), ContractError);  // not recorded
}

TEST_CASE("backward is bitwise deterministic") {
  auto run = [] {
    Tensor w = make_random({6, 6}, 42, -1, 1, true);
    Tensor x = make_random({2, 6}, 43);
    Graph graph;
    Graph::Recording rec(graph);
    Tensor h = tanh(matmul(x, w));
    Gradients grads = graph.backward(sum(multiply(h, h)));
    return grads.at(w);
  };
  CHECK(bitwise_equal(run(), run()));
}

TEST_CASE("finite_diff_grad oracle self-checks") {
  Tensor p = make_random({5}, 7, -2, 2);
  Tensor ones = finite_diff_grad([](const Tensor& t) { return sum(t).value(); },
                                 p, 1e-6);
  for (std::int64_t i = 0; i < 5; ++i) CHECK(std::abs(ones.at(i) - 1.0) < 1e-9);

  Tensor three({1}, {3.0});
  Tensor g = finite_diff_grad(
      [](const Tensor& t) { return sum(multiply(t, t)).value(); }, three, 1e-6);
  CHECK(std::abs(g.at(0) - 6.0) < 1e-6);

  CHECK_THROWS_AS(
      finite_diff_grad([](const Tensor&) { return 0.0; }, three, 0.0),
      ContractError);
}

TEST_CASE("every primitive's backward rule matches central differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Tensor a = make_random({3, 4}, seed * 100 + 1, -1.5, 1.5);
    Tensor b = make_random({3, 4}, seed * 100 + 2, -1.5, 1.5);
    Tensor m = make_random({4, 3}, seed * 100 + 3, -1.5, 1.5);
    Tensor bias = make_random({4}, seed * 100 + 4, -1.5, 1.5);
    Tensor pos = make_random({3, 4}, seed * 100 + 5, 0.2, 2.0);  // for log

    auto ws = [&](const Tensor& t) { return weighted_sum(t, seed * 100 + 9); };

    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(add(in[0], in[1])); }, {a, b}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(subtract(in[0], in[1])); }, {a, b}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(multiply(in[0], in[1])); }, {a, b}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(scale(in[0], -1.7)); }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      Tensor prod = matmul(in[0], in[1]);
      return sum(multiply(prod, make_random({3, 3}, seed, 0.1, 1.1)));
    }, {a, m}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      return sum(multiply(transpose(in[0]), make_random({4, 3}, seed, 0.1, 1.1)));
    }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      return sum(multiply(reshape(in[0], {2, 6}), make_random({2, 6}, seed, 0.1, 1.1)));
    }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      const Tensor parts[] = {in[0], in[1]};
      return sum(multiply(concat(parts, 0), make_random({6, 4}, seed, 0.1, 1.1)));
    }, {a, b}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      const Tensor parts[] = {in[0], in[1]};
      return sum(multiply(concat(parts, 1), make_random({3, 8}, seed, 0.1, 1.1)));
    }, {a, b}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      return sum(multiply(slice(in[0], 1, 1, 2), make_random({3, 2}, seed, 0.1, 1.1)));
    }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      return sum(multiply(block2d(in[0], 1, 2, 1, 3), make_random({2, 3}, seed, 0.1, 1.1)));
    }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(add_bias_rows(in[0], in[1])); }, {a, bias}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return sum(in[0]); }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return mean(in[0]); }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(tanh(in[0])); }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(log(in[0])); }, {pos}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(softmax_rows(in[0])); }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) { return ws(gelu(in[0])); }, {a}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      return ws(layer_norm(in[0], in[1], in[2], 1e-5));
    }, {a, bias, make_random({4}, seed * 100 + 6)}) < 1e-5);
    CHECK(max_grad_err([&](std::span<const Tensor> in) {
      const int labels[] = {1, 0, 3};
      return cross_entropy(in[0], labels);
    }, {a}) < 1e-5);
  }
}

TEST_CASE("backward through composed random MLPs agrees with the oracle") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    Tensor x = make_random({4, 6}, seed * 11 + 1);
    Tensor w1 = make_random({6, 5}, seed * 11 + 2, -0.8, 0.8);
    Tensor b1 = make_random({5}, seed * 11 + 3, -0.2, 0.2);
    Tensor w2 = make_random({5, 3}, seed * 11 + 4, -0.8, 0.8);
    const int labels[] = {0, 2, 1, 2};
    auto f = [&](std::span<const Tensor> in) {
      Tensor h = gelu(add_bias_rows(matmul(x, in[0]), in[1]));
      return cross_entropy(matmul(h, in[2]), labels);
    };
    CHECK(max_grad_err(f, {w1, b1, w2}) < 1e-5);
  }
}

TEST_CASE("reshape and transpose round-trip to the identity") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Tensor x = make_random({3, 8}, seed);
    CHECK(bitwise_equal(reshape(reshape(x, {4, 6}), {3, 8}), x));
    CHECK(bitwise_equal(transpose(transpose(x)), x));
  }
}

TEST_CASE("slice and concat agree with hand-written values") {
  Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor right = slice(x, 1, 1, 2);
  CHECK(right.shape() == Shape{2, 2});
  CHECK(right.at(0, 0) == 2.0);
  CHECK(right.at(1, 1) == 6.0);

  Tensor rows = slice(x, 0, 1, 1);
  CHECK(rows.shape() == Shape{1, 3});
  CHECK(rows.at(0, 0) == 4.0);

  const Tensor parts[] = {rows, rows};
  Tensor doubled = concat(parts, 0);
  CHECK(doubled.shape() == Shape{2, 3});
  CHECK(doubled.at(1, 2) == 6.0);

  Tensor rank3 = make_random({2, 2, 2}, 5);
  const Tensor p3[] = {rank3, rank3};
  CHECK(concat(p3, 1).shape() == Shape{2, 4, 2});
  CHECK(bitwise_equal(slice(concat(p3, 1), 1, 0, 2), rank3));

  CHECK_THROWS_AS(slice(x, 0, 1, 5), IndexError);
  CHECK_THROWS_AS(concat(std::span<const Tensor>{}, 0), DimensionError);
}

TEST_CASE("ops outside a recording scope stay untracked") {
  Tensor p({2}, {1, 2}, true);
  Tensor y = scale(p, 2.0);
  CHECK_FALSE(y.requires_grad());

  // and params recorded on an old graph do not leak into a new one
  Graph g1;
  Tensor mid;
  {
    Graph::Recording rec(g1);
    mid = scale(p, 3.0);
  }
  Graph g2;
  {
    Graph::Recording rec(g2);
    Tensor loss = sum(mid);  // mid acts as a fresh leaf here
    Gradients grads = g2.backward(loss);
    CHECK(grads.at(mid).at(0) == 1.0);
  }
}
