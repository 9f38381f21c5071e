#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "spvit/tensor.hpp"

namespace spvit {

struct Dataset {
  Tensor images;  // B x H x W x C, values in [0, 1]
  std::vector<int> labels;

  std::int64_t size() const { return static_cast<std::int64_t>(labels.size()); }
};

struct DatasetSpec {
  enum class Source { kSynthetic, kCifarBinary };

  Source source = Source::kSynthetic;
  std::string path;  // cifar_binary: a directory with data_batch_*.bin /
                     // test_batch.bin, or a single .bin file
  std::int64_t num_classes = 10;
  std::int64_t image_size = 32;
  std::int64_t channels = 3;
  std::int64_t train_count = 320;  // for cifar: cap, 0 = all
  std::int64_t test_count = 80;
  double noise = 0.25;  // synthetic only
  std::uint64_t seed = 1;

  void validate() const;
};

/// Class-conditional Gaussian blobs: a fixed random mean pattern per class
/// plus per-pixel noise, clamped to [0, 1]. Labels cycle through the
/// classes. Deterministic per seed; zero noise makes images within a class
/// identical.
std::pair<Dataset, Dataset> synthetic_dataset(const DatasetSpec& spec);

/// Parses one file of 3073-byte records (1 label byte + 1024 R + 1024 G +
/// 1024 B, row-major 32 x 32), scaling pixels to [0, 1]. A length that is
/// not a multiple of 3073 or a label >= num_classes is a FormatError.
Dataset read_cifar_file(const std::string& path, std::int64_t num_classes);

/// Loads the standard binary layout from spec.path and applies the
/// train/test caps. (Train files: data_batch_*.bin; test: test_batch.bin.)
std::pair<Dataset, Dataset> load_cifar_binary(const DatasetSpec& spec);

std::pair<Dataset, Dataset> load_dataset(const DatasetSpec& spec);

/// Row-gather of a batch: images at the given indices plus their labels.
Dataset gather(const Dataset& data, std::span<const std::int64_t> indices);

/// Stable fingerprint of the dataset contents (images + labels).
std::string dataset_fingerprint(const Dataset& train, const Dataset& test);

}  // namespace spvit
