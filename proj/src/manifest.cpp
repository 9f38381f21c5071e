#include "spvit/manifest.hpp"

#include <openssl/evp.h>

#include <fstream>
#include <sstream>

#include <json.hpp>

#include "spvit/errors.hpp"

namespace spvit {

std::string sha256_hex(const void* data, std::size_t len) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int digest_len = 0;
  if (EVP_Digest(data, len, digest, &digest_len, EVP_sha256(), nullptr) != 1) {
    throw ContractError("sha256: digest computation failed");
  }
  static const char hex[] = "0123456789abcdef";
  std::string out;
  out.reserve(digest_len * 2);
  for (unsigned int i = 0; i < digest_len; ++i) {
    out.push_back(hex[digest[i] >> 4]);
    out.push_back(hex[digest[i] & 0xf]);
  }
  return out;
}

std::string sha256_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for hashing");
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string bytes = buf.str();
  return sha256_hex(bytes.data(), bytes.size());
}

void write_manifest(const std::string& path, const RunManifest& manifest) {
  nlohmann::json j;
  j["command"] = manifest.command;
  j["argv"] = manifest.argv;
  j["seed"] = manifest.seed;
  j["config"] = manifest.config;
  j["dataset_fingerprint"] = manifest.dataset_fingerprint;
  j["checkpoint_in"] = manifest.checkpoint_in;
  j["checkpoint_in_sha256"] = manifest.checkpoint_in_sha256;
  j["checkpoint_out"] = manifest.checkpoint_out;
  j["checkpoint_out_sha256"] = manifest.checkpoint_out_sha256;
  j["outputs"] = manifest.outputs;
  j["timing"]["total_seconds"] = manifest.total_seconds;
  j["timing"]["epoch_seconds"] = manifest.epoch_seconds;

  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << j.dump(2) << "\n";
}

RunManifest read_manifest(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("'" + path + "': invalid manifest JSON: " + e.what());
  }
  RunManifest m;
  m.command = j.value("command", "");
  if (j.contains("argv")) m.argv = j["argv"].get<std::vector<std::string>>();
  m.seed = j.value("seed", 0ULL);
  if (j.contains("config")) {
    m.config = j["config"].get<std::map<std::string, std::string>>();
  }
  m.dataset_fingerprint = j.value("dataset_fingerprint", "");
  m.checkpoint_in = j.value("checkpoint_in", "");
  m.checkpoint_in_sha256 = j.value("checkpoint_in_sha256", "");
  m.checkpoint_out = j.value("checkpoint_out", "");
  m.checkpoint_out_sha256 = j.value("checkpoint_out_sha256", "");
  if (j.contains("outputs")) {
    m.outputs = j["outputs"].get<std::map<std::string, std::string>>();
  }
  if (j.contains("timing")) {
    m.total_seconds = j["timing"].value("total_seconds", 0.0);
    if (j["timing"].contains("epoch_seconds")) {
      m.epoch_seconds = j["timing"]["epoch_seconds"].get<std::vector<double>>();
    }
  }
  return m;
}

}  // namespace spvit
