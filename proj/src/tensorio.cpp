#include "fusekit/tensorio.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

namespace fusekit {

using json = nlohmann::json;

namespace {

constexpr const char* kMetadataKey = "__metadata__";
constexpr const char* kVersionKey = "format_version";

std::size_t product(const std::vector<std::size_t>& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void check_finite(const std::string& name, std::span<const float> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw CheckpointError(name, "non-finite value at element " + std::to_string(i));
    }
  }
}

std::vector<std::size_t> parse_shape(const std::string& name, const json& j) {
  if (!j.is_array()) throw CheckpointError(name, "shape is not an array");
  std::vector<std::size_t> shape;
  for (const auto& d : j) {
    if (!d.is_number_unsigned() || d.get<std::uint64_t>() == 0) {
      throw CheckpointError(name, "shape entries must be positive integers");
    }
    shape.push_back(d.get<std::size_t>());
  }
  if (shape.empty() || shape.size() > 2) {
    throw CheckpointError(name, "rank " + std::to_string(shape.size()) + " is not supported (1 or 2)");
  }
  return shape;
}

}  // namespace

std::string format_shape(const std::vector<std::size_t>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool bitwise_equal(const NamedTensorMap& a, const NamedTensorMap& b) {
  if (a.metadata != b.metadata || a.tensors.size() != b.tensors.size()) return false;
  for (auto ia = a.tensors.begin(), ib = b.tensors.begin(); ia != a.tensors.end(); ++ia, ++ib) {
    if (ia->first != ib->first || ia->second.shape != ib->second.shape) return false;
    const auto& va = ia->second.values;
    const auto& vb = ib->second.values;
    if (va.size() != vb.size() ||
        std::memcmp(va.data(), vb.data(), static_cast<std::size_t>(va.size()) * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

void validate_tensor_map(const NamedTensorMap& map) {
  if (map.metadata.contains(kVersionKey)) {
    throw CheckpointError("", std::string("metadata key '") + kVersionKey + "' is reserved");
  }
  for (const auto& [name, t] : map.tensors) {
    if (name.empty()) throw CheckpointError(name, "empty tensor name");
    if (name == kMetadataKey) throw CheckpointError(name, "reserved tensor name");
    if (t.shape.empty() || t.shape.size() > 2) {
      throw CheckpointError(name, "rank " + std::to_string(t.shape.size()) + " is not supported (1 or 2)");
    }
    if (std::find(t.shape.begin(), t.shape.end(), 0u) != t.shape.end()) {
      throw CheckpointError(name, "zero-sized dimension in shape " + format_shape(t.shape));
    }
    const auto rows = t.shape.size() == 2 ? t.shape[0] : 1;
    if (static_cast<std::size_t>(t.values.rows()) != rows ||
        static_cast<std::size_t>(t.values.cols()) != t.shape.back()) {
      throw CheckpointError(name, "data length does not match shape " + format_shape(t.shape));
    }
    check_finite(name, std::span<const float>(t.values.data(), t.numel()));
  }
}

std::vector<std::uint8_t> serialize_checkpoint(const NamedTensorMap& map) {
  validate_tensor_map(map);

  json header = json::object();
  json meta = json::object();
  for (const auto& [k, v] : map.metadata) meta[k] = v;
  meta[kVersionKey] = kCheckpointFormatVersion;
  header[kMetadataKey] = meta;

  std::uint64_t offset = 0;
  for (const auto& [name, t] : map.tensors) {
    const std::uint64_t bytes = t.numel() * sizeof(float);
    header[name] = {{"dtype", "F32"}, {"shape", t.shape}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }

  const std::string text = header.dump();
  std::vector<std::uint8_t> out(sizeof(std::uint64_t) + text.size() + offset);
  const std::uint64_t len = text.size();
  std::memcpy(out.data(), &len, sizeof len);
  std::memcpy(out.data() + sizeof len, text.data(), text.size());
  auto* cursor = out.data() + sizeof len + text.size();
  for (const auto& [name, t] : map.tensors) {
    const auto bytes = t.numel() * sizeof(float);
    std::memcpy(cursor, t.values.data(), bytes);
    cursor += bytes;
  }
  return out;
}

CheckpointHeader parse_checkpoint_header(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < sizeof(std::uint64_t)) {
    throw CheckpointError("", "truncated file: missing header length");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), sizeof len);
  if (len > bytes.size() - sizeof len) {
    throw CheckpointError("", "truncated file: header declares " + std::to_string(len) + " bytes");
  }

  json header;
  try {
    header = json::parse(bytes.begin() + sizeof len, bytes.begin() + sizeof len + static_cast<std::ptrdiff_t>(len));
  } catch (const json::parse_error& e) {
    throw CheckpointError("", std::string("malformed header: ") + e.what());
  }
  if (!header.is_object()) throw CheckpointError("", "malformed header: not an object");

  CheckpointHeader out;
  for (const auto& [key, value] : header.items()) {
    if (key == kMetadataKey) {
      if (!value.is_object()) throw CheckpointError("", "malformed header: metadata is not an object");
      for (const auto& [mk, mv] : value.items()) {
        if (!mv.is_string()) throw CheckpointError("", "malformed header: metadata value for '" + mk + "'");
        if (mk == kVersionKey) {
          if (mv.get<std::string>() != kCheckpointFormatVersion) {
            throw CheckpointError("", "unsupported format version " + mv.get<std::string>());
          }
          continue;
        }
        out.metadata.emplace(mk, mv.get<std::string>());
      }
      continue;
    }
    if (key.empty()) throw CheckpointError(key, "empty tensor name");
    if (!value.is_object()) throw CheckpointError(key, "malformed tensor descriptor");

    TensorDescriptor d;
    d.name = key;
    try {
      d.dtype = value.at("dtype").get<std::string>();
      d.shape = parse_shape(key, value.at("shape"));
      const auto& offsets = value.at("data_offsets");
      if (!offsets.is_array() || offsets.size() != 2) throw CheckpointError(key, "malformed data_offsets");
      d.begin = offsets[0].get<std::uint64_t>();
      d.end = offsets[1].get<std::uint64_t>();
    } catch (const json::exception& e) {
      throw CheckpointError(key, std::string("malformed tensor descriptor: ") + e.what());
    }
    if (d.dtype != "F32" && d.dtype != "f32") throw CheckpointError(key, "unsupported dtype " + d.dtype);
    if (d.end < d.begin || d.end - d.begin != product(d.shape) * sizeof(float)) {
      throw CheckpointError(key, "byte length does not match shape " + format_shape(d.shape));
    }
    out.tensors.push_back(std::move(d));
  }

  std::sort(out.tensors.begin(), out.tensors.end(), [](const auto& a, const auto& b) {
    return a.begin != b.begin ? a.begin < b.begin : a.name < b.name;
  });
  std::uint64_t expected = 0;
  for (const auto& d : out.tensors) {
    if (d.begin < expected) throw CheckpointError(d.name, "data offsets overlap");
    if (d.begin > expected) throw CheckpointError(d.name, "gap in data offsets");
    expected = d.end;
  }
  return out;
}

NamedTensorMap parse_checkpoint(std::span<const std::uint8_t> bytes) {
  const CheckpointHeader header = parse_checkpoint_header(bytes);
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data(), sizeof len);
  const auto payload = bytes.subspan(sizeof len + len);

  NamedTensorMap map;
  map.metadata = header.metadata;
  for (const auto& d : header.tensors) {
    if (d.end > payload.size()) {
      throw CheckpointError(d.name, "truncated file: payload needs " + std::to_string(d.end) + " bytes, found " +
                                        std::to_string(payload.size()));
    }
    auto t = make_tensor<float>(d.shape);
    std::memcpy(t.values.data(), payload.data() + d.begin, d.end - d.begin);
    check_finite(d.name, std::span<const float>(t.values.data(), t.numel()));
    map.tensors.emplace(d.name, std::move(t));
  }
  const std::uint64_t used = header.tensors.empty() ? 0 : header.tensors.back().end;
  if (used != payload.size()) {
    throw CheckpointError("", std::to_string(payload.size() - used) + " trailing bytes after payload");
  }
  return map;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

NamedTensorMap read_checkpoint(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_checkpoint(bytes);
}

void write_checkpoint(const NamedTensorMap& map, const std::filesystem::path& path) {
  // serialize first so that an invalid map never touches the file
  const auto bytes = serialize_checkpoint(map);
  write_file_bytes(path, bytes);
}

}  // namespace fusekit
