#pragma once

#include "fusekit/tensor.hpp"
#include "fusekit/vocabulary.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace fusekit {

struct SparseEntry {
  TokenId id = 0;
  double prob = 0.0;

  bool operator==(const SparseEntry&) const = default;
};

/// Top-k sparse probability row, kept in canonical order: descending
/// probability, ties by ascending id.
using SparseRow = std::vector<SparseEntry>;

inline constexpr double kRowSumTolerance = 1e-6;

/// N x V token-level distribution matrix stored as top-k sparse rows.
struct DistributionMatrix {
  std::size_t vocab_size = 0;
  std::size_t k = 0;
  std::vector<SparseRow> rows;

  std::size_t positions() const { return rows.size(); }
  bool operator==(const DistributionMatrix&) const = default;
};

void canonicalize(SparseRow& row);
double row_sum(const SparseRow& row);

/// Keeps the k most probable entries and renormalizes them to sum to one.
SparseRow truncate_top_k(SparseRow row, std::size_t k);

SparseRow sparse_from_dense(const Vector<double>& probs, std::size_t k);
Vector<double> dense_from_sparse(const SparseRow& row, std::size_t vocab_size);

/// Probability of `id` in `row`, or 0 when absent.
double prob_at(const SparseRow& row, TokenId id);

/// One-hot distribution matrix on the given token ids.
DistributionMatrix one_hot(std::span<const TokenId> tokens, std::size_t vocab_size);

/// Throws DataError unless every row has distinct in-range ids, positive
/// probabilities summing to 1 within kRowSumTolerance and at most k entries.
void validate_distribution(const DistributionMatrix& m);

/// Per-instruction distribution matrices produced by one model.
struct DistributionDump {
  std::string model_id;
  std::size_t vocab_size = 0;
  std::size_t k = 0;
  std::vector<DistributionMatrix> instructions;

  bool operator==(const DistributionDump&) const = default;
};

// Dump file: one JSON header line
//   {"format":"fusekit-dump","instructions":M,"k":k,"model_id":"...","version":1,"vocab_size":V}
// then for each instruction a u32 LE position count N followed by N*k
// records of (u32 LE token id, f32 LE log-probability). Rows with fewer than
// k entries are padded with id 0xFFFFFFFF and log-probability -inf.
// On load, rows whose probabilities do not sum to one within
// kRowSumTolerance are renormalized (top-k truncated exports).
inline constexpr std::uint32_t kPaddingId = 0xFFFFFFFFu;

std::vector<std::uint8_t> serialize_dump(const DistributionDump& dump);
DistributionDump parse_dump(std::span<const std::uint8_t> bytes);
DistributionDump read_dump(const std::filesystem::path& path);
void write_dump(const DistributionDump& dump, const std::filesystem::path& path);

}  // namespace fusekit
