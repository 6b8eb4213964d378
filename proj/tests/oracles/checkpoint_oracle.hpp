#pragma once

// Byte-level checkpoint reader that shares no code with the library.

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

namespace oracle {

struct RawTensor {
  std::string name;
  std::string dtype;
  std::vector<std::uint64_t> shape;
  std::uint64_t begin = 0;
  std::uint64_t end = 0;
  std::vector<float> values;
};

struct RawCheckpoint {
  std::uint64_t header_length = 0;
  std::string header_text;
  nlohmann::json metadata;
  std::vector<RawTensor> tensors;  // in payload order
  std::uint64_t payload_size = 0;
};

inline RawCheckpoint parse_raw_checkpoint(const std::vector<std::uint8_t>& bytes) {
  RawCheckpoint out;
  if (bytes.size() < 8) throw std::runtime_error("short file");
  for (int b = 7; b >= 0; --b) out.header_length = (out.header_length << 8) | bytes[static_cast<std::size_t>(b)];
  if (bytes.size() < 8 + out.header_length) throw std::runtime_error("short header");
  out.header_text.assign(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(out.header_length));
  const auto header = nlohmann::json::parse(out.header_text);
  const std::size_t base = 8 + out.header_length;
  out.payload_size = bytes.size() - base;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      out.metadata = entry;
      continue;
    }
    RawTensor t;
    t.name = name;
    t.dtype = entry.at("dtype").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::uint64_t>>();
    t.begin = entry.at("data_offsets").at(0).get<std::uint64_t>();
    t.end = entry.at("data_offsets").at(1).get<std::uint64_t>();
    if (t.end < t.begin || base + t.end > bytes.size()) throw std::runtime_error("bad offsets for " + name);
    for (std::uint64_t at = base + t.begin; at + 4 <= base + t.end; at += 4) {
      std::uint32_t word = 0;
      for (int b = 3; b >= 0; --b) word = (word << 8) | bytes[static_cast<std::size_t>(at) + static_cast<std::size_t>(b)];
      float v;
      std::memcpy(&v, &word, 4);
      t.values.push_back(v);
    }
    out.tensors.push_back(std::move(t));
  }
  std::sort(out.tensors.begin(), out.tensors.end(),
            [](const RawTensor& a, const RawTensor& b) { return a.begin < b.begin; });
  return out;
}

}  // namespace oracle
