#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "ditopt/numerics/tensor.hpp"

namespace ditopt {

/// One stored tensor. dtype "f32" uses `f32`; dtype "i8" uses `i8` plus
/// float32 `scales` (one per output row, or one for the whole tensor).
struct TensorRecord {
  std::string name;
  std::string dtype = "f32";
  std::string role;
  Shape shape;
  std::vector<float> f32;
  std::vector<std::int8_t> i8;
  std::vector<float> scales;
};

/// A checkpoint directory: manifest.json (metadata + per-tensor name, dtype,
/// shape, byte offset, byte count) and weights.bin (little-endian blob).
struct CheckpointData {
  nlohmann::json meta;  // e.g. {"config": ..., "format": ...}
  std::vector<TensorRecord> tensors;
};

inline constexpr const char* kManifestFile = "manifest.json";
inline constexpr const char* kBlobFile = "weights.bin";

void write_checkpoint(const std::filesystem::path& dir, const CheckpointData& data);
/// InputError on missing files, malformed manifest or truncated blob.
CheckpointData read_checkpoint(const std::filesystem::path& dir);

/// Bytes of manifest + blob.
std::uintmax_t checkpoint_size_bytes(const std::filesystem::path& dir);

}  // namespace ditopt
