#pragma once

#include "fusekit/errors.hpp"
#include "fusekit/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fusekit {

// Checkpoint layout:
//   u64 LE header length | JSON header (sorted keys, compact) | f32 LE payload
//
// Header: {"__metadata__": {"format_version": "1", ...user metadata},
//          "<name>": {"data_offsets": [begin, end], "dtype": "F32", "shape": [...]}}
// Offsets are relative to the payload start; tensors are laid out
// contiguously in lexicographic name order.

inline constexpr const char* kCheckpointFormatVersion = "1";

struct TensorDescriptor {
  std::string name;
  std::string dtype;
  std::vector<std::size_t> shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
};

struct CheckpointHeader {
  int format_version = 1;
  std::vector<TensorDescriptor> tensors;  // in payload order
  std::map<std::string, std::string> metadata;
};

/// Throws CheckpointError on empty/duplicate names, rank outside 1..2,
/// shape/data mismatch or non-finite values.
void validate_tensor_map(const NamedTensorMap& map);

std::vector<std::uint8_t> serialize_checkpoint(const NamedTensorMap& map);
NamedTensorMap parse_checkpoint(std::span<const std::uint8_t> bytes);
CheckpointHeader parse_checkpoint_header(std::span<const std::uint8_t> bytes);

NamedTensorMap read_checkpoint(const std::filesystem::path& path);
void write_checkpoint(const NamedTensorMap& map, const std::filesystem::path& path);

std::string format_shape(const std::vector<std::size_t>& shape);

/// Succeeds iff every map has the same tensor names and per-name shapes as
/// the first one. The error names the first offending tensor.
template <typename Scalar>
void validate_same_geometry(std::span<const TensorMap<Scalar>> maps) {
  if (maps.empty()) throw ConfigError("validate_same_geometry: no checkpoints given");
  const auto& ref = maps.front().tensors;
  for (std::size_t i = 1; i < maps.size(); ++i) {
    const auto& other = maps[i].tensors;
    std::string missing;
    for (const auto& [name, t] : ref) {
      if (!other.contains(name)) missing += (missing.empty() ? "" : ", ") + name;
    }
    std::string extra;
    for (const auto& [name, t] : other) {
      if (!ref.contains(name)) extra += (extra.empty() ? "" : ", ") + name;
    }
    if (!missing.empty() || !extra.empty()) {
      throw CheckpointError(missing.empty() ? extra.substr(0, extra.find(',')) : missing.substr(0, missing.find(',')),
                            "checkpoint " + std::to_string(i) + " has different tensor names; missing: [" +
                                missing + "], unexpected: [" + extra + "]");
    }
    for (const auto& [name, t] : ref) {
      const auto& shape = other.at(name).shape;
      if (shape != t.shape) {
        throw CheckpointError(name, "shape mismatch in checkpoint " + std::to_string(i) + ": " +
                                        format_shape(t.shape) + " vs " + format_shape(shape));
      }
    }
  }
}

inline void validate_same_geometry(const std::vector<NamedTensorMap>& maps) {
  validate_same_geometry(std::span<const NamedTensorMap>(maps));
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

}  // namespace fusekit
