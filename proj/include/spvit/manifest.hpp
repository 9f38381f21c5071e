#pragma once

#include <map>
#include <string>
#include <vector>

namespace spvit {

/// SHA-256 (hex) of a byte buffer / file on disk.
std::string sha256_hex(const void* data, std::size_t len);
std::string sha256_file(const std::string& path);

/// Everything needed to replay a command: the resolved configuration, the
/// seed, dataset fingerprint, content hashes of checkpoints read/written,
/// and the command line. Timing lives here, not in the metrics CSV.
struct RunManifest {
  std::string command;
  std::vector<std::string> argv;
  std::uint64_t seed = 0;
  std::map<std::string, std::string> config;
  std::string dataset_fingerprint;
  std::string checkpoint_in;        // path, empty if none
  std::string checkpoint_in_sha256;
  std::string checkpoint_out;
  std::string checkpoint_out_sha256;
  std::map<std::string, std::string> outputs;  // label -> path
  double total_seconds = 0.0;
  std::vector<double> epoch_seconds;
};

void write_manifest(const std::string& path, const RunManifest& manifest);
RunManifest read_manifest(const std::string& path);

}  // namespace spvit
