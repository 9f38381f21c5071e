#include "spvit/train.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <random>
#include <functional>
#include <unordered_map>

#include "spvit/prune.hpp"

namespace spvit {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (learning_rate < 0 || !std::isfinite(learning_rate)) {
    throw ConfigError("train: learning_rate must be >= 0");
  }
  if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
  if (weight_decay < 0 || !std::isfinite(weight_decay)) {
    throw ConfigError("train: weight_decay must be >= 0");
  }
  if (momentum < 0 || momentum >= 1) {
    throw ConfigError("train: momentum must be in [0, 1)");
  }
  if (target_train_acc && (*target_train_acc <= 0 || *target_train_acc > 1)) {
    throw ConfigError("train: target_train_acc must be in (0, 1]");
  }
  sparse.validate();
}

void sgd_step(ParamStore& params, const Gradients& grads, double lr,
              double weight_decay) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& theta = params.value(i);
    const Tensor& g = grads.at(theta);  // ContractError when missing
    std::span<const double> tv = theta.data();
    std::span<const double> gv = g.data();
    Vec next(tv.size());
    for (std::size_t j = 0; j < tv.size(); ++j) {
      next[j] = tv[j] - lr * (gv[j] + weight_decay * tv[j]);
    }
    params.set(params.name(i), Tensor(theta.shape(), std::move(next), true));
  }
}

namespace {

void sgd_step_momentum(ParamStore& params, const Gradients& grads, double lr,
                       double weight_decay, double momentum,
                       std::unordered_map<std::string, std::vector<double>>& velocity) {
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Tensor& theta = params.value(i);
    const Tensor& g = grads.at(theta);
    std::span<const double> tv = theta.data();
    std::span<const double> gv = g.data();
    auto& vel = velocity[params.name(i)];
    if (vel.empty()) vel.assign(tv.size(), 0.0);
    Vec next(tv.size());
    for (std::size_t j = 0; j < tv.size(); ++j) {
      vel[j] = momentum * vel[j] + (gv[j] + weight_decay * tv[j]);
      next[j] = tv[j] - lr * vel[j];
    }
    params.set(params.name(i), Tensor(theta.shape(), std::move(next), true));
  }
}

}  // namespace

namespace {

std::int64_t argmax_hits(const Tensor& logits, std::span<const int> labels) {
  const std::int64_t c = logits.cols();
  std::int64_t hits = 0;
  std::span<const double> data = logits.data();
  for (std::size_t r = 0; r < labels.size(); ++r) {
    const double* row = data.data() + static_cast<std::int64_t>(r) * c;
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < c; ++j) {
      if (row[j] > row[best]) best = j;  // ties keep the lowest index
    }
    if (best == labels[r]) ++hits;
  }
  return hits;
}

}  // namespace

double accuracy(const Tensor& logits, std::span<const int> labels) {
  if (logits.rank() != 2 ||
      logits.rows() != static_cast<std::int64_t>(labels.size())) {
    throw DimensionError("accuracy: logits " + shape_str(logits.shape()) +
                         " vs " + std::to_string(labels.size()) + " labels");
  }
  if (labels.empty()) throw ContractError("accuracy: empty label set");
  return static_cast<double>(argmax_hits(logits, labels)) /
         static_cast<double>(labels.size());
}

double evaluate(const ParamStore& params, const ViTConfig& config,
                const Dataset& data) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  constexpr std::int64_t kChunk = 256;
  std::int64_t hits = 0;
  for (std::int64_t start = 0; start < data.size(); start += kChunk) {
    const std::int64_t count = std::min(kChunk, data.size() - start);
    std::vector<std::int64_t> idx(static_cast<std::size_t>(count));
    std::iota(idx.begin(), idx.end(), start);
    Dataset chunk = gather(data, idx);
    Tensor logits = forward(chunk.images, config, params);
    hits += argmax_hits(logits, chunk.labels);
  }
  return static_cast<double>(hits) / static_cast<double>(data.size());
}

std::vector<TrainRunRecord> train(
    ParamStore& params, const ViTConfig& config, const Dataset& train_set,
    const Dataset& test_set, const TrainConfig& tc,
    const std::function<void(const TrainRunRecord&)>& on_epoch) {
  tc.validate();
  config.validate();
  if (train_set.size() == 0) throw ContractError("train: empty training set");

  const std::int64_t n = train_set.size();
  std::vector<std::int64_t> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 shuffle_rng(tc.seed ^ 0x9e3779b97f4a7c15ULL);
  std::unordered_map<std::string, std::vector<double>> velocity;

  std::vector<TrainRunRecord> records;
  records.reserve(static_cast<std::size_t>(tc.epochs));
  for (std::int64_t epoch = 0; epoch < tc.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double ce_sum = 0.0, pen_sum = 0.0, total_sum = 0.0;
    for (std::int64_t start = 0; start < n; start += tc.batch_size) {
      const std::int64_t count = std::min(tc.batch_size, n - start);
      Dataset batch = gather(
          train_set, std::span<const std::int64_t>(order).subspan(
                         static_cast<std::size_t>(start),
                         static_cast<std::size_t>(count)));

      Graph graph;
      Graph::Recording recording(graph);
      HookTap taps;
      if (tc.sparse.enabled) taps.position = tc.sparse.position;
      Tensor logits = forward(batch.images, config, params, &taps);
      Tensor ce = cross_entropy(logits, batch.labels);
      Tensor objective = total_loss(ce, taps, tc.sparse);
      Gradients grads = graph.backward(objective);

      if (tc.momentum > 0) {
        sgd_step_momentum(params, grads, tc.learning_rate, tc.weight_decay,
                          tc.momentum, velocity);
      } else {
        sgd_step(params, grads, tc.learning_rate, tc.weight_decay);
      }

      // The logged penalty term is recomputed with plain arithmetic,
      // independently of the graph path that produced the objective.
      double pen_plain = 0.0;
      if (tc.sparse.enabled) {
        const double lambda = resolve_lambda(tc.sparse, taps);
        if (lambda != 0.0) pen_plain = lambda * penalty_value_plain(taps);
      }
      const double w = static_cast<double>(count);
      ce_sum += ce.value() * w;
      pen_sum += pen_plain * w;
      total_sum += objective.value() * w;
    }

    TrainRunRecord rec;
    rec.epoch = epoch;
    rec.ce_loss = ce_sum / static_cast<double>(n);
    rec.penalty = pen_sum / static_cast<double>(n);
    rec.total_loss = total_sum / static_cast<double>(n);
    rec.train_acc = evaluate(params, config, train_set);
    rec.test_acc = evaluate(params, config, test_set);
    rec.seconds = std::chrono::duration<double>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
    records.push_back(rec);
    if (on_epoch) on_epoch(rec);
    if (tc.target_train_acc && rec.train_acc >= *tc.target_train_acc) break;
  }
  return records;
}

SweepArmResult sweep_arm(const ViTConfig& config, const Dataset& train_set,
                         const Dataset& test_set, const TrainConfig& base,
                         std::span<const double> ratios, bool with_sparse) {
  for (double r : ratios) {
    if (!(r > 0.0 && r < 1.0)) {
      throw ConfigError("sweep: ratios must lie in (0, 1), got " + std::to_string(r));
    }
  }
  TrainConfig tc = base;
  tc.sparse.enabled = with_sparse;
  tc.sparse.position = SparsePosition::kAttentionWeight;

  SweepArmResult result;
  result.arm = with_sparse ? "sparse" : "baseline";
  result.trained = init_params(config, tc.seed);
  result.records = train(result.trained, config, train_set, test_set, tc);
  result.baseline_accuracy = evaluate(result.trained, config, test_set);
  for (double r : ratios) {
    ParamStore pruned = result.trained;
    apply_prune(pruned, r);
    result.rows.push_back({r, evaluate(pruned, config, test_set)});
  }
  return result;
}

std::string g17(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string metrics_csv(std::span<const TrainRunRecord> records) {
  std::string out = "epoch,ce_loss,penalty,total_loss,train_acc,test_acc,seconds\n";
  for (const auto& r : records) {
    out += std::to_string(r.epoch) + "," + g17(r.ce_loss) + "," + g17(r.penalty) +
           "," + g17(r.total_loss) + "," + g17(r.train_acc) + "," +
           g17(r.test_acc) + ",0\n";
  }
  return out;
}

void write_metrics_csv(const std::string& path,
                       std::span<const TrainRunRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << metrics_csv(records);
}

}  // namespace spvit
