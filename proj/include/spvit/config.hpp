#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "spvit/data.hpp"
#include "spvit/train.hpp"
#include "spvit/vit.hpp"

namespace spvit {

/// Flat `key = value` text with `#` comments. Keys are namespaced:
/// model.*, train.*, sparse.*, prune.*, data.*, sweep.*.
using KVConfig = std::map<std::string, std::string>;

KVConfig parse_config_text(const std::string& text);
KVConfig parse_config_file(const std::string& path);

struct ResolvedConfig {
  ViTConfig model;
  TrainConfig train;
  DatasetSpec data;
  std::optional<double> prune_ratio;
  std::vector<std::string> prune_exclude;
  std::vector<double> sweep_ratios = {0.10, 0.15, 0.20, 0.25, 0.30};
};

/// Applies defaults, validates every value, and rejects unknown keys by
/// name (ConfigError).
ResolvedConfig resolve_config(const KVConfig& kv);

/// Full post-default key/value dump, suitable for the run manifest; feeding
/// it back through resolve_config reproduces the same configuration.
KVConfig dump_config(const ResolvedConfig& cfg);

}  // namespace spvit
