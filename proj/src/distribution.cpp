#include "fusekit/distribution.hpp"

#include "fusekit/errors.hpp"
#include "fusekit/tensorio.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <unordered_set>

namespace fusekit {

using json = nlohmann::json;

void canonicalize(SparseRow& row) {
  std::sort(row.begin(), row.end(), [](const SparseEntry& a, const SparseEntry& b) {
    return a.prob != b.prob ? a.prob > b.prob : a.id < b.id;
  });
}

double row_sum(const SparseRow& row) {
  double s = 0.0;
  for (const auto& e : row) s += e.prob;
  return s;
}

SparseRow truncate_top_k(SparseRow row, std::size_t k) {
  canonicalize(row);
  if (row.size() > k) row.resize(k);
  const double s = row_sum(row);
  if (s <= 0.0) throw DataError("cannot renormalize a row with no mass");
  for (auto& e : row) e.prob /= s;
  return row;
}

SparseRow sparse_from_dense(const Vector<double>& probs, std::size_t k) {
  SparseRow row;
  row.reserve(static_cast<std::size_t>(probs.size()));
  for (Eigen::Index v = 0; v < probs.size(); ++v) {
    if (probs[v] > 0.0) row.push_back({static_cast<TokenId>(v), probs[v]});
  }
  return truncate_top_k(std::move(row), k);
}

Vector<double> dense_from_sparse(const SparseRow& row, std::size_t vocab_size) {
  Vector<double> out = Vector<double>::Zero(static_cast<Eigen::Index>(vocab_size));
  for (const auto& e : row) out[e.id] += e.prob;
  return out;
}

double prob_at(const SparseRow& row, TokenId id) {
  for (const auto& e : row) {
    if (e.id == id) return e.prob;
  }
  return 0.0;
}

DistributionMatrix one_hot(std::span<const TokenId> tokens, std::size_t vocab_size) {
  DistributionMatrix m{vocab_size, 1, {}};
  m.rows.reserve(tokens.size());
  for (TokenId t : tokens) m.rows.push_back({{t, 1.0}});
  return m;
}

void validate_distribution(const DistributionMatrix& m) {
  for (std::size_t r = 0; r < m.rows.size(); ++r) {
    const auto& row = m.rows[r];
    const auto where = " in row " + std::to_string(r);
    if (row.empty()) throw DataError("empty distribution row" + where);
    if (row.size() > m.k) throw DataError("row has more than k entries" + where);
    std::unordered_set<TokenId> seen;
    for (const auto& e : row) {
      if (e.id >= m.vocab_size) throw DataError("token id " + std::to_string(e.id) + " out of range" + where);
      if (!seen.insert(e.id).second) throw DataError("duplicate token id " + std::to_string(e.id) + where);
      if (!(e.prob > 0.0) || !std::isfinite(e.prob)) throw DataError("non-positive probability" + where);
    }
    if (std::abs(row_sum(row) - 1.0) > kRowSumTolerance) throw DataError("row is not stochastic" + where);
  }
}

namespace {

template <typename T>
void put(std::vector<std::uint8_t>& out, T value) {
  const auto at = out.size();
  out.resize(at + sizeof(T));
  std::memcpy(out.data() + at, &value, sizeof(T));
}

template <typename T>
T take(std::span<const std::uint8_t> bytes, std::size_t& pos, const std::string& what) {
  if (bytes.size() - pos < sizeof(T)) throw DataError("dump: truncated file while reading " + what);
  T value;
  std::memcpy(&value, bytes.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

}  // namespace

std::vector<std::uint8_t> serialize_dump(const DistributionDump& dump) {
  if (dump.k == 0) throw DataError("dump: k must be positive");
  json header = {{"format", "fusekit-dump"}, {"version", 1},         {"model_id", dump.model_id},
                 {"vocab_size", dump.vocab_size}, {"k", dump.k}, {"instructions", dump.instructions.size()}};
  const std::string text = header.dump() + "\n";
  std::vector<std::uint8_t> out(text.begin(), text.end());
  for (std::size_t i = 0; i < dump.instructions.size(); ++i) {
    const auto& m = dump.instructions[i];
    if (m.vocab_size != dump.vocab_size || m.k != dump.k) {
      throw DataError("dump: instruction " + std::to_string(i) + " disagrees with header V/k");
    }
    validate_distribution(m);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(m.rows.size()));
    for (const auto& row : m.rows) {
      SparseRow sorted = row;
      canonicalize(sorted);
      for (const auto& e : sorted) {
        put<std::uint32_t>(out, e.id);
        put<float>(out, static_cast<float>(std::log(e.prob)));
      }
      for (std::size_t pad = sorted.size(); pad < dump.k; ++pad) {
        put<std::uint32_t>(out, kPaddingId);
        put<float>(out, -std::numeric_limits<float>::infinity());
      }
    }
  }
  return out;
}

DistributionDump parse_dump(std::span<const std::uint8_t> bytes) {
  const auto* begin = reinterpret_cast<const char*>(bytes.data());
  const auto* eol = static_cast<const char*>(std::memchr(begin, '\n', bytes.size()));
  if (eol == nullptr) throw DataError("dump: missing header line");

  DistributionDump dump;
  std::size_t count = 0;
  try {
    const json header = json::parse(begin, eol);
    if (header.at("format") != "fusekit-dump") throw DataError("dump: wrong format tag");
    if (header.at("version") != 1) throw DataError("dump: unsupported version");
    dump.model_id = header.at("model_id").get<std::string>();
    dump.vocab_size = header.at("vocab_size").get<std::size_t>();
    dump.k = header.at("k").get<std::size_t>();
    count = header.at("instructions").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("dump: malformed header: ") + e.what());
  }
  if (dump.k == 0 || dump.vocab_size == 0) throw DataError("dump: k and vocab_size must be positive");

  std::size_t pos = static_cast<std::size_t>(eol - begin) + 1;
  dump.instructions.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto where = "instruction " + std::to_string(i);
    const auto n = take<std::uint32_t>(bytes, pos, where + " position count");
    DistributionMatrix m{dump.vocab_size, dump.k, {}};
    m.rows.resize(n);
    for (std::uint32_t t = 0; t < n; ++t) {
      auto& row = m.rows[t];
      for (std::size_t j = 0; j < dump.k; ++j) {
        const auto id = take<std::uint32_t>(bytes, pos, where);
        const auto lp = take<float>(bytes, pos, where);
        if (id == kPaddingId) continue;
        if (!std::isfinite(lp) || lp > 1e-6f) {
          throw DataError("dump: invalid log-probability in " + where + ", position " + std::to_string(t));
        }
        row.push_back({id, std::exp(static_cast<double>(lp))});
      }
      const double s = row_sum(row);
      if (std::abs(s - 1.0) > kRowSumTolerance && s > 0.0) {
        for (auto& e : row) e.prob /= s;
      }
      canonicalize(row);
    }
    try {
      validate_distribution(m);
    } catch (const DataError& e) {
      throw DataError("dump: " + where + ": " + e.what());
    }
    dump.instructions.push_back(std::move(m));
  }
  if (pos != bytes.size()) throw DataError("dump: trailing bytes after last instruction");
  return dump;
}

DistributionDump read_dump(const std::filesystem::path& path) { return parse_dump(read_file_bytes(path)); }

void write_dump(const DistributionDump& dump, const std::filesystem::path& path) {
  write_file_bytes(path, serialize_dump(dump));
}

}  // namespace fusekit
