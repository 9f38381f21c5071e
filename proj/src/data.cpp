#include "spvit/data.hpp"

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>

#include "spvit/manifest.hpp"

namespace spvit {

namespace fs = std::filesystem;

void DatasetSpec::validate() const {
  if (num_classes <= 0 || image_size <= 0 || channels <= 0) {
    throw ConfigError("data: num_classes, image size and channels must be positive");
  }
  if (train_count < 0 || test_count < 0) {
    throw ConfigError("data: train/test counts must be non-negative");
  }
  if (source == Source::kSynthetic && (train_count == 0 || test_count == 0)) {
    throw ConfigError("data: synthetic datasets need explicit train/test counts");
  }
  if (noise < 0 || !std::isfinite(noise)) {
    throw ConfigError("data: noise must be finite and >= 0");
  }
  if (source == Source::kCifarBinary && path.empty()) {
    throw ConfigError("data: cifar_binary requires data.path");
  }
}

namespace {

Dataset make_synthetic_split(std::int64_t count, const DatasetSpec& spec,
                             const std::vector<std::vector<double>>& class_means,
                             std::mt19937_64& rng) {
  const std::int64_t pixels = spec.image_size * spec.image_size * spec.channels;
  std::normal_distribution<double> noise(0.0, 1.0);
  Vec images(static_cast<std::size_t>(count * pixels));
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const int label = static_cast<int>(i % spec.num_classes);
    labels[static_cast<std::size_t>(i)] = label;
    const auto& mean = class_means[static_cast<std::size_t>(label)];
    double* dst = images.data() + i * pixels;
    for (std::int64_t j = 0; j < pixels; ++j) {
      const double v = mean[static_cast<std::size_t>(j)] + spec.noise * noise(rng);
      dst[j] = std::clamp(v, 0.0, 1.0);
    }
  }
  return Dataset{
      Tensor({count, spec.image_size, spec.image_size, spec.channels},
             std::move(images)),
      std::move(labels)};
}

}  // namespace

std::pair<Dataset, Dataset> synthetic_dataset(const DatasetSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  const std::int64_t pixels = spec.image_size * spec.image_size * spec.channels;
  std::uniform_real_distribution<double> uniform(0.0, 1.0);
  std::vector<std::vector<double>> class_means(
      static_cast<std::size_t>(spec.num_classes));
  for (auto& mean : class_means) {
    mean.resize(static_cast<std::size_t>(pixels));
    for (auto& v : mean) v = uniform(rng);
  }
  Dataset train = make_synthetic_split(spec.train_count, spec, class_means, rng);
  Dataset test = make_synthetic_split(spec.test_count, spec, class_means, rng);
  return {std::move(train), std::move(test)};
}

Dataset read_cifar_file(const std::string& path, std::int64_t num_classes) {
  constexpr std::int64_t kRecordBytes = 3073;  // 1 label + 3 x 1024 pixels
  constexpr std::int64_t kPlane = 1024;
  constexpr std::int64_t kSide = 32;

  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  const auto size = static_cast<std::int64_t>(bytes.size());
  if (size == 0 || size % kRecordBytes != 0) {
    throw FormatError("'" + path + "': length " + std::to_string(size) +
                      " is not a positive multiple of 3073");
  }
  const std::int64_t count = size / kRecordBytes;
  const std::int64_t pixels = kSide * kSide * 3;
  Vec images(static_cast<std::size_t>(count * pixels));
  std::vector<int> labels(static_cast<std::size_t>(count));
  for (std::int64_t i = 0; i < count; ++i) {
    const auto* rec = reinterpret_cast<const unsigned char*>(bytes.data()) +
                      i * kRecordBytes;
    const int label = rec[0];
    if (label >= num_classes) {
      throw FormatError("'" + path + "': record " + std::to_string(i) + " has label " +
                        std::to_string(label) + " >= num_classes " +
                        std::to_string(num_classes));
    }
    labels[static_cast<std::size_t>(i)] = label;
    double* dst = images.data() + i * pixels;
    for (std::int64_t row = 0; row < kSide; ++row) {
      for (std::int64_t col = 0; col < kSide; ++col) {
        for (std::int64_t ch = 0; ch < 3; ++ch) {
          const unsigned char byte = rec[1 + ch * kPlane + row * kSide + col];
          dst[(row * kSide + col) * 3 + ch] = static_cast<double>(byte) / 255.0;
        }
      }
    }
  }
  return Dataset{Tensor({count, kSide, kSide, 3}, std::move(images)),
                 std::move(labels)};
}

namespace {

Dataset take_front(Dataset&& data, std::int64_t cap) {
  if (cap <= 0 || cap >= data.size()) return std::move(data);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(cap));
  for (std::int64_t i = 0; i < cap; ++i) idx[static_cast<std::size_t>(i)] = i;
  return gather(data, idx);
}

Dataset concat_datasets(std::vector<Dataset> parts) {
  if (parts.size() == 1) return std::move(parts[0]);
  std::vector<Tensor> images;
  std::vector<int> labels;
  images.reserve(parts.size());
  for (auto& p : parts) {
    images.push_back(p.images);
    labels.insert(labels.end(), p.labels.begin(), p.labels.end());
  }
  return Dataset{concat(images, 0), std::move(labels)};
}

}  // namespace

std::pair<Dataset, Dataset> load_cifar_binary(const DatasetSpec& spec) {
  spec.validate();
  if (spec.image_size != 32 || spec.channels != 3) {
    throw ConfigError("data: cifar_binary images are 32x32x3; configure data accordingly");
  }
  std::vector<Dataset> train_parts;
  Dataset test{Tensor(), {}};
  if (fs::is_directory(spec.path)) {
    for (int i = 1; i <= 5; ++i) {
      const fs::path batch = fs::path(spec.path) / ("data_batch_" + std::to_string(i) + ".bin");
      if (fs::exists(batch)) {
        train_parts.push_back(read_cifar_file(batch.string(), spec.num_classes));
      }
    }
    const fs::path test_path = fs::path(spec.path) / "test_batch.bin";
    if (train_parts.empty()) {
      throw FormatError("no data_batch_*.bin files under '" + spec.path + "'");
    }
    if (fs::exists(test_path)) {
      test = read_cifar_file(test_path.string(), spec.num_classes);
    } else {
      test = train_parts.back();
    }
  } else {
    train_parts.push_back(read_cifar_file(spec.path, spec.num_classes));
    test = train_parts.back();
  }
  Dataset train = concat_datasets(std::move(train_parts));
  return {take_front(std::move(train), spec.train_count),
          take_front(std::move(test), spec.test_count)};
}

std::pair<Dataset, Dataset> load_dataset(const DatasetSpec& spec) {
  switch (spec.source) {
    case DatasetSpec::Source::kSynthetic:
      return synthetic_dataset(spec);
    case DatasetSpec::Source::kCifarBinary:
      return load_cifar_binary(spec);
  }
  throw ConfigError("data: unknown source");
}

Dataset gather(const Dataset& data, std::span<const std::int64_t> indices) {
  if (data.size() == 0) throw ContractError("gather: empty dataset");
  const std::int64_t pixels = data.images.numel() / data.images.dim(0);
  Vec images(indices.size() * static_cast<std::size_t>(pixels));
  std::vector<int> labels(indices.size());
  std::span<const double> src = data.images.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const std::int64_t idx = indices[i];
    if (idx < 0 || idx >= data.size()) {
      throw IndexError("gather: index " + std::to_string(idx) + " out of range");
    }
    std::copy(src.begin() + idx * pixels, src.begin() + (idx + 1) * pixels,
              images.begin() + static_cast<std::int64_t>(i) * pixels);
    labels[i] = data.labels[static_cast<std::size_t>(idx)];
  }
  Shape shape = data.images.shape();
  shape[0] = static_cast<std::int64_t>(indices.size());
  return Dataset{Tensor(std::move(shape), std::move(images)), std::move(labels)};
}

std::string dataset_fingerprint(const Dataset& train, const Dataset& test) {
  std::string bytes;
  auto append = [&bytes](const Dataset& d) {
    std::span<const double> img = d.images.data();
    bytes.append(reinterpret_cast<const char*>(img.data()), img.size() * sizeof(double));
    bytes.append(reinterpret_cast<const char*>(d.labels.data()),
                 d.labels.size() * sizeof(int));
  };
  append(train);
  append(test);
  return sha256_hex(bytes.data(), bytes.size());
}

}  // namespace spvit
