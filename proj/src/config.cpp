#include "spvit/config.hpp"

#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

namespace spvit {

namespace {

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t\r");
  return s.substr(begin, end - begin + 1);
}

std::int64_t to_int(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const long long v = std::stoll(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not an integer");
  }
}

double to_double(const std::string& key, const std::string& value) {
  try {
    std::size_t used = 0;
    const double v = std::stod(value, &used);
    if (used != value.size()) throw std::invalid_argument(value);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("config key '" + key + "': '" + value + "' is not a number");
  }
}

bool to_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1" || value == "on" || value == "yes") return true;
  if (value == "false" || value == "0" || value == "off" || value == "no") return false;
  throw ConfigError("config key '" + key + "': '" + value + "' is not a boolean");
}

std::vector<std::string> split_list(const std::string& value) {
  std::vector<std::string> out;
  std::stringstream ss(value);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

const std::set<std::string> kKnownKeys = {
    "model.image_size", "model.patch_size", "model.channels",
    "model.hidden_size", "model.mlp_size", "model.num_heads", "model.depth",
    "model.num_classes", "model.layer_norm_eps",
    "train.batch_size", "train.learning_rate", "train.epochs",
    "train.weight_decay", "train.momentum", "train.seed",
    "train.target_train_acc",
    "sparse.enabled", "sparse.position", "sparse.lambda",
    "prune.ratio", "prune.exclude",
    "data.source", "data.path", "data.train_count", "data.test_count",
    "data.noise", "data.seed",
    "sweep.ratios",
};

}  // namespace

KVConfig parse_config_text(const std::string& text) {
  KVConfig kv;
  std::stringstream ss(text);
  std::string line;
  int lineno = 0;
  while (std::getline(ss, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected 'key = value', got '" + line + "'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
    }
    kv[key] = value;
  }
  return kv;
}

KVConfig parse_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_config_text(buf.str());
}

ResolvedConfig resolve_config(const KVConfig& kv) {
  for (const auto& [key, value] : kv) {
    (void)value;
    if (!kKnownKeys.count(key)) {
      throw ConfigError("unknown config key '" + key + "'");
    }
  }
  auto get = [&kv](const std::string& key) -> const std::string* {
    auto it = kv.find(key);
    return it == kv.end() ? nullptr : &it->second;
  };

  ResolvedConfig cfg;
  if (auto* v = get("model.image_size")) cfg.model.image_size = to_int("model.image_size", *v);
  if (auto* v = get("model.patch_size")) cfg.model.patch_size = to_int("model.patch_size", *v);
  if (auto* v = get("model.channels")) cfg.model.channels = to_int("model.channels", *v);
  if (auto* v = get("model.hidden_size")) cfg.model.hidden_size = to_int("model.hidden_size", *v);
  if (auto* v = get("model.mlp_size")) cfg.model.mlp_size = to_int("model.mlp_size", *v);
  if (auto* v = get("model.num_heads")) cfg.model.num_heads = to_int("model.num_heads", *v);
  if (auto* v = get("model.depth")) cfg.model.depth = to_int("model.depth", *v);
  if (auto* v = get("model.num_classes")) cfg.model.num_classes = to_int("model.num_classes", *v);
  if (auto* v = get("model.layer_norm_eps")) cfg.model.layer_norm_eps = to_double("model.layer_norm_eps", *v);

  if (auto* v = get("train.batch_size")) cfg.train.batch_size = to_int("train.batch_size", *v);
  if (auto* v = get("train.learning_rate")) cfg.train.learning_rate = to_double("train.learning_rate", *v);
  if (auto* v = get("train.epochs")) cfg.train.epochs = to_int("train.epochs", *v);
  if (auto* v = get("train.weight_decay")) cfg.train.weight_decay = to_double("train.weight_decay", *v);
  if (auto* v = get("train.momentum")) cfg.train.momentum = to_double("train.momentum", *v);
  if (auto* v = get("train.seed")) cfg.train.seed = static_cast<std::uint64_t>(to_int("train.seed", *v));
  if (auto* v = get("train.target_train_acc")) {
    cfg.train.target_train_acc = to_double("train.target_train_acc", *v);
  }

  if (auto* v = get("sparse.enabled")) cfg.train.sparse.enabled = to_bool("sparse.enabled", *v);
  if (auto* v = get("sparse.position")) cfg.train.sparse.position = parse_sparse_position(*v);
  if (auto* v = get("sparse.lambda")) cfg.train.sparse.lambda = to_double("sparse.lambda", *v);

  if (auto* v = get("prune.ratio")) cfg.prune_ratio = to_double("prune.ratio", *v);
  if (auto* v = get("prune.exclude")) cfg.prune_exclude = split_list(*v);

  if (auto* v = get("data.source")) {
    if (*v == "synthetic") {
      cfg.data.source = DatasetSpec::Source::kSynthetic;
    } else if (*v == "cifar_binary") {
      cfg.data.source = DatasetSpec::Source::kCifarBinary;
    } else {
      throw ConfigError("data.source must be 'synthetic' or 'cifar_binary', got '" + *v + "'");
    }
  }
  if (auto* v = get("data.path")) cfg.data.path = *v;
  if (auto* v = get("data.train_count")) cfg.data.train_count = to_int("data.train_count", *v);
  if (auto* v = get("data.test_count")) cfg.data.test_count = to_int("data.test_count", *v);
  if (auto* v = get("data.noise")) cfg.data.noise = to_double("data.noise", *v);
  if (auto* v = get("data.seed")) cfg.data.seed = static_cast<std::uint64_t>(to_int("data.seed", *v));

  if (auto* v = get("sweep.ratios")) {
    cfg.sweep_ratios.clear();
    for (const auto& item : split_list(*v)) {
      cfg.sweep_ratios.push_back(to_double("sweep.ratios", item));
    }
  }

  // The dataset mirrors the model geometry.
  cfg.data.num_classes = cfg.model.num_classes;
  cfg.data.image_size = cfg.model.image_size;
  cfg.data.channels = cfg.model.channels;

  cfg.model.validate();
  cfg.train.validate();
  cfg.data.validate();
  if (cfg.prune_ratio && !(*cfg.prune_ratio > 0 && *cfg.prune_ratio < 1)) {
    throw ConfigError("prune.ratio must be in (0, 1)");
  }
  for (double r : cfg.sweep_ratios) {
    if (!(r > 0 && r < 1)) throw ConfigError("sweep.ratios entries must be in (0, 1)");
  }
  return cfg;
}

KVConfig dump_config(const ResolvedConfig& cfg) {
  KVConfig kv;
  auto put_int = [&kv](const std::string& k, std::int64_t v) { kv[k] = std::to_string(v); };
  auto put_dbl = [&kv](const std::string& k, double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    kv[k] = buf;
  };

  put_int("model.image_size", cfg.model.image_size);
  put_int("model.patch_size", cfg.model.patch_size);
  put_int("model.channels", cfg.model.channels);
  put_int("model.hidden_size", cfg.model.hidden_size);
  put_int("model.mlp_size", cfg.model.mlp_size);
  put_int("model.num_heads", cfg.model.num_heads);
  put_int("model.depth", cfg.model.depth);
  put_int("model.num_classes", cfg.model.num_classes);
  put_dbl("model.layer_norm_eps", cfg.model.layer_norm_eps);

  put_int("train.batch_size", cfg.train.batch_size);
  put_dbl("train.learning_rate", cfg.train.learning_rate);
  put_int("train.epochs", cfg.train.epochs);
  put_dbl("train.weight_decay", cfg.train.weight_decay);
  put_dbl("train.momentum", cfg.train.momentum);
  put_int("train.seed", static_cast<std::int64_t>(cfg.train.seed));
  if (cfg.train.target_train_acc) {
    put_dbl("train.target_train_acc", *cfg.train.target_train_acc);
  }

  kv["sparse.enabled"] = cfg.train.sparse.enabled ? "true" : "false";
  kv["sparse.position"] = to_string(cfg.train.sparse.position);
  if (cfg.train.sparse.lambda) put_dbl("sparse.lambda", *cfg.train.sparse.lambda);

  if (cfg.prune_ratio) put_dbl("prune.ratio", *cfg.prune_ratio);
  if (!cfg.prune_exclude.empty()) {
    std::string joined;
    for (const auto& p : cfg.prune_exclude) {
      if (!joined.empty()) joined += ",";
      joined += p;
    }
    kv["prune.exclude"] = joined;
  }

  kv["data.source"] = cfg.data.source == DatasetSpec::Source::kSynthetic
                          ? "synthetic"
                          : "cifar_binary";
  if (!cfg.data.path.empty()) kv["data.path"] = cfg.data.path;
  put_int("data.train_count", cfg.data.train_count);
  put_int("data.test_count", cfg.data.test_count);
  put_dbl("data.noise", cfg.data.noise);
  put_int("data.seed", static_cast<std::int64_t>(cfg.data.seed));

  std::string ratios;
  for (double r : cfg.sweep_ratios) {
    if (!ratios.empty()) ratios += ",";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", r);
    ratios += buf;
  }
  kv["sweep.ratios"] = ratios;
  return kv;
}

}  // namespace spvit
