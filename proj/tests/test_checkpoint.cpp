#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "spvit/checkpoint.hpp"
#include "spvit/manifest.hpp"
#include "test_util.hpp"

using namespace spvit;
using namespace spvit::testing;

namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
  static int counter = 0;
  return fs::temp_directory_path() /
         ("spvit_ckpt_" + std::to_string(::getpid()) + "_" +
          std::to_string(counter++) + "_" + name);
}

std::string read_file(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ParamStore sample_store() {
  ParamStore store;
  store.add("alpha", make_random({3, 4}, 1, -1, 1, true));
  store.add("beta.bias", make_random({7}, 2, -1, 1, true));
  store.add("scalarish", Tensor({1}, {0.1234567890123456789}, true));
  return store;
}

}  // namespace

TEST_CASE("f64 checkpoints round-trip bitwise") {
  const fs::path a = temp_file("a.spvt"), b = temp_file("b.spvt");
  ParamStore store = sample_store();
  save_checkpoint(a.string(), store);

  ParamStore loaded = load_checkpoint(a.string());
  REQUIRE(loaded.size() == store.size());
  for (std::size_t i = 0; i < store.size(); ++i) {
    CHECK(loaded.name(i) == store.name(i));
    CHECK(bitwise_equal(loaded.value(i), store.value(i)));
    CHECK(loaded.value(i).requires_grad());
  }

  // save -> load -> save produces identical bytes
  save_checkpoint(b.string(), loaded);
  CHECK(read_file(a) == read_file(b));
  fs::remove(a);
  fs::remove(b);
}

TEST_CASE("f32 checkpoints store values at float precision") {
  const fs::path p = temp_file("f32.spvt");
  ParamStore store = sample_store();
  save_checkpoint(p.string(), store, CheckpointDtype::kF32);
  ParamStore loaded = load_checkpoint(p.string());
  for (std::size_t i = 0; i < store.size(); ++i) {
    for (std::int64_t j = 0; j < store.value(i).numel(); ++j) {
      CHECK(loaded.value(i).at(j) ==
            static_cast<double>(static_cast<float>(store.value(i).at(j))));
    }
  }
  fs::remove(p);
}

TEST_CASE("corrupted checkpoints are refused") {
  const fs::path p = temp_file("corrupt.spvt");
  save_checkpoint(p.string(), sample_store());
  std::string bytes = read_file(p);

  // flip one payload byte: CRC must catch it
  std::string flipped = bytes;
  flipped[flipped.size() / 2] = static_cast<char>(flipped[flipped.size() / 2] ^ 0x40);
  std::ofstream(p, std::ios::binary).write(flipped.data(), static_cast<std::streamsize>(flipped.size()));
  CHECK_THROWS_WITH_AS(load_checkpoint(p.string()), doctest::Contains("CRC32"),
                       FormatError);

  // bad magic
  std::string renamed = bytes;
  renamed[0] = 'X';
  std::ofstream(p, std::ios::binary).write(renamed.data(), static_cast<std::streamsize>(renamed.size()));
  CHECK_THROWS_AS(load_checkpoint(p.string()), FormatError);

  // truncation
  std::ofstream(p, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 9));
  CHECK_THROWS_AS(load_checkpoint(p.string()), FormatError);

  CHECK_THROWS_AS(load_checkpoint("/nonexistent/nowhere.spvt"), IoError);
  fs::remove(p);
}

TEST_CASE("checkpoint layout starts with magic, version, count") {
  const fs::path p = temp_file("layout.spvt");
  save_checkpoint(p.string(), sample_store());
  const std::string bytes = read_file(p);
  REQUIRE(bytes.size() > 12);
  CHECK(bytes.substr(0, 4) == "SPVT");
  CHECK(static_cast<unsigned char>(bytes[4]) == 1);  // version 1 LE
  CHECK(static_cast<unsigned char>(bytes[5]) == 0);
  CHECK(static_cast<unsigned char>(bytes[8]) == 3);  // three tensors
  // first name length (u16 LE) then the name itself
  CHECK(static_cast<unsigned char>(bytes[12]) == 5);
  CHECK(bytes.substr(14, 5) == "alpha");
  fs::remove(p);
}

TEST_CASE("manifests round-trip through json") {
  const fs::path p = temp_file("run.json");
  RunManifest m;
  m.command = "train";
  m.argv = {"spvit", "train", "--seed", "9"};
  m.seed = 9;
  m.config = {{"train.epochs", "3"}, {"model.depth", "2"}};
  m.dataset_fingerprint = "abc";
  m.checkpoint_out = "model.spvt";
  m.checkpoint_out_sha256 = "deadbeef";
  m.outputs = {{"metrics_csv", "metrics.csv"}};
  m.total_seconds = 1.5;
  m.epoch_seconds = {0.5, 1.0};
  write_manifest(p.string(), m);

  RunManifest r = read_manifest(p.string());
  CHECK(r.command == m.command);
  CHECK(r.argv == m.argv);
  CHECK(r.seed == m.seed);
  CHECK(r.config == m.config);
  CHECK(r.checkpoint_out_sha256 == m.checkpoint_out_sha256);
  CHECK(r.epoch_seconds == m.epoch_seconds);
  fs::remove(p);
}

TEST_CASE("sha256 hex digests match a known vector") {
  // sha256("abc")
  CHECK(sha256_hex("abc", 3) ==
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
