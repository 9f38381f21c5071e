#include <doctest.h>

#include "spvit/config.hpp"

using namespace spvit;

TEST_CASE("flat key = value parsing with comments") {
  KVConfig kv = parse_config_text(
      "# a comment\n"
      "model.hidden_size = 32   # trailing comment\n"
      "\n"
      "sparse.position= attention_weight\n"
      "data.noise =0.5\n");
  CHECK(kv.at("model.hidden_size") == "32");
  CHECK(kv.at("sparse.position") == "attention_weight");
  CHECK(kv.at("data.noise") == "0.5");

  CHECK_THROWS_AS(parse_config_text("just words\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("= value\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_file("/nonexistent.cfg"), IoError);
}

TEST_CASE("defaults survive an empty configuration") {
  ResolvedConfig cfg = resolve_config({});
  CHECK(cfg.model.hidden_size == 64);
  CHECK(cfg.model.depth == 2);
  CHECK(cfg.train.batch_size == 64);
  CHECK(cfg.train.learning_rate == 0.03);
  CHECK(cfg.train.epochs == 20);
  CHECK(cfg.train.weight_decay == 0.0001);
  CHECK(cfg.train.momentum == 0.0);
  CHECK_FALSE(cfg.train.sparse.enabled);
  CHECK_FALSE(cfg.train.sparse.lambda.has_value());
  CHECK(cfg.sweep_ratios == std::vector<double>{0.10, 0.15, 0.20, 0.25, 0.30});
}

TEST_CASE("unknown keys are rejected by name") {
  CHECK_THROWS_WITH_AS(resolve_config({{"train.leerning_rate", "0.1"}}),
                       doctest::Contains("train.leerning_rate"), ConfigError);
}

TEST_CASE("bad values name the key and the five sparse positions are listed") {
  CHECK_THROWS_WITH_AS(resolve_config({{"model.depth", "two"}}),
                       doctest::Contains("model.depth"), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"model.depth", "0"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"sparse.lambda", "-1"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"prune.ratio", "1.0"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"data.source", "imagenet"}}), ConfigError);
  CHECK_THROWS_AS(resolve_config({{"sweep.ratios", "0.1,2.0"}}), ConfigError);
  try {
    resolve_config({{"sparse.position", "foo"}});
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    const std::string msg = e.what();
    for (const char* name : {"similarity_score", "attention_weight",
                             "weighted_value", "attention_output",
                             "mlp_gelu_input"}) {
      CHECK(msg.find(name) != std::string::npos);
    }
  }
}

TEST_CASE("the dataset mirrors the model geometry") {
  ResolvedConfig cfg = resolve_config({{"model.image_size", "16"},
                                       {"model.patch_size", "4"},
                                       {"model.num_classes", "7"}});
  CHECK(cfg.data.image_size == 16);
  CHECK(cfg.data.num_classes == 7);
}

TEST_CASE("dump_config round-trips through resolve_config") {
  ResolvedConfig cfg = resolve_config({{"model.hidden_size", "32"},
                                       {"model.num_heads", "2"},
                                       {"sparse.enabled", "true"},
                                       {"sparse.lambda", "0.25"},
                                       {"prune.exclude", "norm,cls_token"},
                                       {"train.target_train_acc", "0.95"},
                                       {"sweep.ratios", "0.2,0.4"}});
  KVConfig dumped = dump_config(cfg);
  ResolvedConfig again = resolve_config(dumped);
  CHECK(dump_config(again) == dumped);
  CHECK(again.model.hidden_size == 32);
  CHECK(again.train.sparse.lambda == 0.25);
  CHECK(again.prune_exclude == std::vector<std::string>{"norm", "cls_token"});
  CHECK(again.sweep_ratios == std::vector<double>{0.2, 0.4});
}
