// spvit: train, prune, evaluate and sweep small Vision Transformers with an
// activation-sparsity penalty and global magnitude pruning.

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>

#include "spvit/checkpoint.hpp"
#include "spvit/config.hpp"
#include "spvit/data.hpp"
#include "spvit/gradcheck.hpp"
#include "spvit/manifest.hpp"
#include "spvit/prune.hpp"
#include "spvit/train.hpp"

namespace fs = std::filesystem;
using namespace spvit;

namespace {

struct CommonFlags {
  std::string config_path;
  std::optional<std::int64_t> seed;
  std::string out_dir = ".";
};

ResolvedConfig load_config(const CommonFlags& flags) {
  KVConfig kv;
  if (!flags.config_path.empty()) kv = parse_config_file(flags.config_path);
  ResolvedConfig cfg = resolve_config(kv);
  if (flags.seed) {
    cfg.train.seed = static_cast<std::uint64_t>(*flags.seed);
  }
  return cfg;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

std::vector<std::string> collect_argv(int argc, char** argv) {
  return {argv, argv + argc};
}

int worker_threads() {
  const char* env = std::getenv("SPVT_THREADS");
  if (!env) return 1;
  try {
    return std::max(1, std::stoi(env));
  } catch (const std::exception&) {
    throw ConfigError("SPVT_THREADS must be an integer, got '" + std::string(env) + "'");
  }
}

int run_train(const CommonFlags& flags, const std::vector<std::string>& argv) {
  const auto t0 = std::chrono::steady_clock::now();
  ResolvedConfig cfg = load_config(flags);
  ensure_dir(flags.out_dir);

  auto [train_set, test_set] = load_dataset(cfg.data);
  ParamStore params = init_params(cfg.model, cfg.train.seed);

  std::vector<double> epoch_seconds;
  auto records = train(params, cfg.model, train_set, test_set, cfg.train,
                       [&](const TrainRunRecord& r) {
                         epoch_seconds.push_back(r.seconds);
                         std::cout << "epoch " << r.epoch << " ce=" << g17(r.ce_loss)
                                   << " penalty=" << g17(r.penalty)
                                   << " total=" << g17(r.total_loss)
                                   << " train_acc=" << g17(r.train_acc)
                                   << " test_acc=" << g17(r.test_acc) << "\n";
                       });

  const std::string ckpt = (fs::path(flags.out_dir) / "model.spvt").string();
  const std::string metrics = (fs::path(flags.out_dir) / "metrics.csv").string();
  save_checkpoint(ckpt, params);
  write_metrics_csv(metrics, records);

  RunManifest manifest;
  manifest.command = "train";
  manifest.argv = argv;
  manifest.seed = cfg.train.seed;
  manifest.config = dump_config(cfg);
  manifest.dataset_fingerprint = dataset_fingerprint(train_set, test_set);
  manifest.checkpoint_out = ckpt;
  manifest.checkpoint_out_sha256 = sha256_file(ckpt);
  manifest.outputs["metrics_csv"] = metrics;
  manifest.epoch_seconds = epoch_seconds;
  manifest.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest((fs::path(flags.out_dir) / "manifest.json").string(), manifest);
  return 0;
}

int run_prune(const CommonFlags& flags, const std::vector<std::string>& argv,
              const std::string& in_path, std::optional<double> ratio_flag,
              const std::string& out_path) {
  const auto t0 = std::chrono::steady_clock::now();
  ResolvedConfig cfg = load_config(flags);
  std::optional<double> ratio = ratio_flag ? ratio_flag : cfg.prune_ratio;
  if (!ratio) throw ConfigError("prune: no ratio given (use --ratio or prune.ratio)");
  if (!(*ratio > 0 && *ratio < 1)) {
    throw ConfigError("prune: ratio must be in (0, 1), got " + g17(*ratio));
  }

  ParamStore params = load_checkpoint(in_path);
  PruneOptions options;
  options.exclude_prefixes = cfg.prune_exclude;
  auto [mask, report] = apply_prune(params, *ratio, options);
  (void)mask;
  save_checkpoint(out_path, params);

  nlohmann::json line = {
      {"ratio", report.ratio},         {"threshold", report.threshold},
      {"n_total", report.n_total},     {"n_zeroed", report.n_zeroed},
      {"sparsity", report.sparsity},
  };
  std::cout << line.dump() << "\n";
  const fs::path report_path = fs::path(out_path).parent_path() / "prune_report.jsonl";
  {
    std::ofstream rep(report_path, std::ios::app | std::ios::binary);
    if (!rep) throw IoError("cannot write '" + report_path.string() + "'");
    rep << line.dump() << "\n";
  }

  RunManifest manifest;
  manifest.command = "prune";
  manifest.argv = argv;
  manifest.seed = cfg.train.seed;
  manifest.config = dump_config(cfg);
  manifest.config["prune.ratio"] = g17(*ratio);
  manifest.checkpoint_in = in_path;
  manifest.checkpoint_in_sha256 = sha256_file(in_path);
  manifest.checkpoint_out = out_path;
  manifest.checkpoint_out_sha256 = sha256_file(out_path);
  manifest.outputs["prune_report"] = report_path.string();
  manifest.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(out_path + ".manifest.json", manifest);
  return 0;
}

int run_eval(const CommonFlags& flags, const std::vector<std::string>& argv,
             const std::string& in_path, const std::string& split) {
  const auto t0 = std::chrono::steady_clock::now();
  ResolvedConfig cfg = load_config(flags);
  ensure_dir(flags.out_dir);

  ParamStore params = load_checkpoint(in_path);
  check_params_match(params, cfg.model);
  auto [train_set, test_set] = load_dataset(cfg.data);
  const Dataset& data = split == "train" ? train_set : test_set;
  const double acc = evaluate(params, cfg.model, data);
  std::cout << "accuracy=" << g17(acc) << "\n";

  const fs::path results = fs::path(flags.out_dir) / "eval_results.csv";
  const bool fresh = !fs::exists(results);
  {
    std::ofstream out(results, std::ios::app | std::ios::binary);
    if (!out) throw IoError("cannot write '" + results.string() + "'");
    if (fresh) out << "checkpoint,split,accuracy\n";
    out << in_path << "," << split << "," << g17(acc) << "\n";
  }

  RunManifest manifest;
  manifest.command = "eval";
  manifest.argv = argv;
  manifest.seed = cfg.train.seed;
  manifest.config = dump_config(cfg);
  manifest.dataset_fingerprint = dataset_fingerprint(train_set, test_set);
  manifest.checkpoint_in = in_path;
  manifest.checkpoint_in_sha256 = sha256_file(in_path);
  manifest.outputs["eval_results"] = results.string();
  manifest.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest((fs::path(flags.out_dir) / "eval_manifest.json").string(), manifest);
  return 0;
}

int run_sweep(const CommonFlags& flags, const std::vector<std::string>& argv) {
  const auto t0 = std::chrono::steady_clock::now();
  ResolvedConfig cfg = load_config(flags);
  ensure_dir(flags.out_dir);
  auto [train_set, test_set] = load_dataset(cfg.data);

  SweepArmResult baseline, sparse;
  if (worker_threads() >= 2) {
    std::thread baseline_thread([&] {
      baseline = sweep_arm(cfg.model, train_set, test_set, cfg.train,
                           cfg.sweep_ratios, /*with_sparse=*/false);
    });
    sparse = sweep_arm(cfg.model, train_set, test_set, cfg.train,
                       cfg.sweep_ratios, /*with_sparse=*/true);
    baseline_thread.join();
  } else {
    baseline = sweep_arm(cfg.model, train_set, test_set, cfg.train,
                         cfg.sweep_ratios, /*with_sparse=*/false);
    sparse = sweep_arm(cfg.model, train_set, test_set, cfg.train,
                       cfg.sweep_ratios, /*with_sparse=*/true);
  }

  // sweep.csv: both arms, ratio 0 = unpruned baseline row.
  const fs::path csv_path = fs::path(flags.out_dir) / "sweep.csv";
  {
    std::ofstream out(csv_path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + csv_path.string() + "'");
    out << "arm,ratio,accuracy\n";
    for (const auto* arm : {&baseline, &sparse}) {
      out << arm->arm << ",0," << g17(arm->baseline_accuracy) << "\n";
      for (const auto& row : arm->rows) {
        out << arm->arm << "," << g17(row.ratio) << "," << g17(row.accuracy) << "\n";
      }
    }
  }

  double mean_diff = 0.0;
  const fs::path md_path = fs::path(flags.out_dir) / "sweep.md";
  {
    std::ofstream out(md_path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + md_path.string() + "'");
    out << "| ratio | baseline acc | sparse acc | diff (sparse - baseline) |\n";
    out << "|-------|--------------|------------|---------------------------|\n";
    out << "| 0 | " << g17(baseline.baseline_accuracy) << " | "
        << g17(sparse.baseline_accuracy) << " | "
        << g17(sparse.baseline_accuracy - baseline.baseline_accuracy) << " |\n";
    for (std::size_t i = 0; i < baseline.rows.size(); ++i) {
      const double diff = sparse.rows[i].accuracy - baseline.rows[i].accuracy;
      mean_diff += diff;
      out << "| " << g17(baseline.rows[i].ratio) << " | "
          << g17(baseline.rows[i].accuracy) << " | " << g17(sparse.rows[i].accuracy)
          << " | " << g17(diff) << " |\n";
    }
    if (!baseline.rows.empty()) mean_diff /= static_cast<double>(baseline.rows.size());
    out << "| mean over pruned ratios | | | " << g17(mean_diff) << " |\n";
  }
  std::cout << "mean_diff=" << g17(mean_diff) << " (sparse - baseline, over pruned ratios)\n";

  write_metrics_csv((fs::path(flags.out_dir) / "metrics_baseline.csv").string(),
                    baseline.records);
  write_metrics_csv((fs::path(flags.out_dir) / "metrics_sparse.csv").string(),
                    sparse.records);

  RunManifest manifest;
  manifest.command = "sweep";
  manifest.argv = argv;
  manifest.seed = cfg.train.seed;
  manifest.config = dump_config(cfg);
  manifest.dataset_fingerprint = dataset_fingerprint(train_set, test_set);
  manifest.outputs["sweep_csv"] = csv_path.string();
  manifest.outputs["sweep_md"] = md_path.string();
  manifest.total_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest((fs::path(flags.out_dir) / "manifest.json").string(), manifest);
  return 0;
}

int run_gradcheck(const CommonFlags& flags, double step, bool sabotage) {
  ResolvedConfig cfg = load_config(flags);
  GradcheckOptions options;
  options.step = step;
  options.sabotage = sabotage;
  if (flags.seed) options.seed = static_cast<std::uint64_t>(*flags.seed);

  const auto results = gradcheck_positions(cfg.model, options);
  for (const auto& r : results) {
    std::cout << "position=" << to_string(r.position)
              << " max_rel_err=" << g17(r.max_rel_err) << "\n";
  }
  if (!gradcheck_passed(results, options.tolerance)) {
    for (const auto& r : results) {
      if (!(r.max_rel_err < options.tolerance)) {
        std::cerr << "gradcheck failed at position " << to_string(r.position)
                  << " (max_rel_err=" << g17(r.max_rel_err) << ")\n";
      }
    }
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"sparse-regularized Vision Transformer training and pruning kit"};
  app.require_subcommand(1);

  CommonFlags flags;
  auto add_common = [&flags](CLI::App* cmd) {
    cmd->add_option("--config", flags.config_path, "key = value config file");
    cmd->add_option("--seed", flags.seed, "run seed (overrides train.seed)");
    cmd->add_option("--out", flags.out_dir, "output directory");
  };

  CLI::App* cmd_train = app.add_subcommand("train", "fine-tune on the configured dataset");
  add_common(cmd_train);

  CLI::App* cmd_prune = app.add_subcommand("prune", "global magnitude pruning of a checkpoint");
  std::string prune_in, prune_out = "pruned.spvt";
  std::optional<double> prune_ratio;
  cmd_prune->add_option("--config", flags.config_path, "key = value config file");
  cmd_prune->add_option("--seed", flags.seed, "run seed");
  cmd_prune->add_option("--in", prune_in, "input checkpoint")->required();
  cmd_prune->add_option("--ratio", prune_ratio, "fraction of parameters to zero, in (0, 1)");
  cmd_prune->add_option("--out", prune_out, "output checkpoint path");

  CLI::App* cmd_eval = app.add_subcommand("eval", "accuracy of a checkpoint on the configured dataset");
  std::string eval_in, eval_split = "test";
  add_common(cmd_eval);
  cmd_eval->add_option("--in", eval_in, "checkpoint to evaluate")->required();
  cmd_eval->add_option("--split", eval_split, "dataset split: test or train")
      ->check(CLI::IsMember({"test", "train"}));

  CLI::App* cmd_sweep = app.add_subcommand(
      "sweep", "train with and without the sparse penalty, prune at each ratio, compare");
  add_common(cmd_sweep);

  CLI::App* cmd_gradcheck = app.add_subcommand(
      "gradcheck", "analytic vs central-difference gradients at all five hook positions");
  double gradcheck_step = 1e-6;
  bool sabotage = false;
  cmd_gradcheck->add_option("--config", flags.config_path, "key = value config file");
  cmd_gradcheck->add_option("--seed", flags.seed, "check seed");
  cmd_gradcheck->add_option("--step", gradcheck_step, "central-difference step");
  cmd_gradcheck->add_flag("--sabotage", sabotage,
                          "corrupt the analytic gradients first (negative control)")
      ->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  const auto args = collect_argv(argc, argv);
  try {
    if (*cmd_train) return run_train(flags, args);
    if (*cmd_prune) return run_prune(flags, args, prune_in, prune_ratio, prune_out);
    if (*cmd_eval) return run_eval(flags, args, eval_in, eval_split);
    if (*cmd_sweep) return run_sweep(flags, args);
    if (*cmd_gradcheck) return run_gradcheck(flags, gradcheck_step, sabotage);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const FormatError& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 2;
  } catch (const DimensionError& e) {
    std::cerr << "dimension error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "io error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
