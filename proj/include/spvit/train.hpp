#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "spvit/data.hpp"
#include "spvit/sparse.hpp"
#include "spvit/vit.hpp"

namespace spvit {

struct TrainConfig {
  std::int64_t batch_size = 64;
  double learning_rate = 0.03;
  std::int64_t epochs = 20;
  double weight_decay = 1e-4;
  double momentum = 0.0;  // plain SGD by default
  std::uint64_t seed = 42;
  /// Stop once train accuracy reaches this value (unset = run all epochs).
  std::optional<double> target_train_acc;
  SparseConfig sparse;

  void validate() const;
};

struct TrainRunRecord {
  std::int64_t epoch = 0;
  double ce_loss = 0.0;     // sample-weighted mean over the epoch's batches
  double penalty = 0.0;     // lambda * sum S, recomputed outside the graph
  double total_loss = 0.0;  // value of the optimized objective
  double train_acc = 0.0;
  double test_acc = 0.0;
  double seconds = 0.0;  // wall clock; not part of the deterministic surface
};

/// theta <- theta - lr * (g + weight_decay * theta). Every parameter must
/// have a gradient.
void sgd_step(ParamStore& params, const Gradients& grads, double lr,
              double weight_decay);

/// Fraction of rows whose argmax equals the label; argmax ties break toward
/// the lowest class index.
double accuracy(const Tensor& logits, std::span<const int> labels);

double evaluate(const ParamStore& params, const ViTConfig& config,
                const Dataset& data);

/// Seeded-shuffle mini-batch SGD with the penalized objective. Bitwise
/// deterministic given (seed, config, data), timing aside. on_epoch, when
/// set, observes each record as it is produced.
std::vector<TrainRunRecord> train(
    ParamStore& params, const ViTConfig& config, const Dataset& train_set,
    const Dataset& test_set, const TrainConfig& tc,
    const std::function<void(const TrainRunRecord&)>& on_epoch = {});

struct SweepRow {
  double ratio = 0.0;
  double accuracy = 0.0;
};

struct SweepArmResult {
  std::string arm;
  double baseline_accuracy = 0.0;  // trained, unpruned
  std::vector<SweepRow> rows;      // one per requested ratio
  std::vector<TrainRunRecord> records;
  ParamStore trained;
};

/// Trains one arm (with the penalty at the attention-weight position, or
/// without it), then prunes a clone of the trained parameters at each ratio
/// and evaluates on the test set.
SweepArmResult sweep_arm(const ViTConfig& config, const Dataset& train_set,
                         const Dataset& test_set, const TrainConfig& base,
                         std::span<const double> ratios, bool with_sparse);

/// metrics.csv serialization: fixed columns, floats at 17 significant
/// digits. The seconds column is written as 0 so identical runs produce
/// identical bytes; wall-clock timing is reported in the run manifest.
std::string metrics_csv(std::span<const TrainRunRecord> records);
void write_metrics_csv(const std::string& path,
                       std::span<const TrainRunRecord> records);

/// %.17g, the shortest round-trip-exact form used in all CSV output.
std::string g17(double v);

}  // namespace spvit
