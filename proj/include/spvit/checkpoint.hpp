#pragma once

#include <cstdint>
#include <string>

#include "spvit/vit.hpp"

namespace spvit {

/// Binary checkpoint layout (all integers little-endian):
///   "SPVT" | u32 version | u32 tensor count
///   per tensor: u16 name length, UTF-8 name, u8 rank, u32 dims...,
///               u8 dtype (0 = f32, 1 = f64), raw little-endian values
///   u32 CRC32 (zlib polynomial) of all preceding bytes.
/// f64 payloads round-trip bitwise; f32 is a lossy storage option.
enum class CheckpointDtype : std::uint8_t { kF32 = 0, kF64 = 1 };

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::string& path, const ParamStore& params,
                     CheckpointDtype dtype = CheckpointDtype::kF64);

/// Refuses files with a bad magic, version, truncation, or CRC mismatch
/// (FormatError). Loaded tensors all require gradients.
ParamStore load_checkpoint(const std::string& path);

}  // namespace spvit
