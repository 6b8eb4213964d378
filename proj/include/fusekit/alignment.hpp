#pragma once

#include "fusekit/vocabulary.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace fusekit {

enum class SegmentKind { OneToOne, OneToMany, ManyToOne };

const char* to_string(SegmentKind kind);

/// Half-open index range [begin, end).
struct IndexRange {
  std::size_t begin = 0;
  std::size_t end = 0;

  std::size_t size() const { return end - begin; }
  bool operator==(const IndexRange&) const = default;
};

/// OneToMany: one pivot token covers several source tokens.
/// ManyToOne: several pivot tokens cover one source token.
struct AlignmentSegment {
  SegmentKind kind = SegmentKind::OneToOne;
  IndexRange pivot;
  IndexRange source;

  bool operator==(const AlignmentSegment&) const = default;
};

struct AlignmentMap {
  std::vector<AlignmentSegment> segments;

  bool operator==(const AlignmentMap&) const = default;
};

struct AlignOptions {
  /// Longest run of tokens a single segment may absorb on either side.
  std::size_t max_span = 16;
  /// DP states whose pivot and source character offsets differ by more than
  /// this are not explored. Exact whenever the response is shorter.
  std::size_t char_band = 64;
};

/// Character-level (code point) Levenshtein distance.
std::size_t edit_distance(std::string_view a, std::string_view b);

/// edit_distance / max(length); 0 for two empty strings.
double normalized_edit_distance(std::string_view a, std::string_view b);

/// Cost of pairing the concatenated pivot text with the concatenated source
/// text of one segment.
double segment_cost(std::span<const std::string> pivot_surfaces, std::span<const std::string> source_surfaces);

/// Minimum-cost monotone segmentation of the two token sequences into
/// one-to-one, one-to-many and many-to-one segments. Both sequences must
/// spell the same text once space markers are removed.
AlignmentMap align_sequences(std::span<const TokenId> pivot, std::span<const TokenId> source,
                             const Vocabulary& pivot_vocab, const Vocabulary& source_vocab,
                             const AlignOptions& options = {});

/// Same, over already-stripped surface strings.
AlignmentMap align_surfaces(std::span<const std::string> pivot, std::span<const std::string> source,
                            const AlignOptions& options = {});

double alignment_cost(const AlignmentMap& map, std::span<const std::string> pivot_surfaces,
                      std::span<const std::string> source_surfaces);

/// Throws AlignmentError unless the segments partition both sequences in
/// order and each segment's kind matches its extents.
void validate_alignment(const AlignmentMap& map, std::size_t pivot_len, std::size_t source_len);

std::vector<std::string> surfaces(std::span<const TokenId> tokens, const Vocabulary& vocab);

/// Pivot-to-source co-occurrence counts gathered from aligned segments.
class MappingStatistics {
public:
  void add(TokenId pivot, TokenId source, std::uint64_t n = 1);
  void merge(const MappingStatistics& other);

  std::uint64_t count(TokenId pivot, TokenId source) const;
  std::uint64_t total(TokenId pivot) const;
  const std::map<TokenId, std::map<TokenId, std::uint64_t>>& counts() const { return counts_; }
  bool empty() const { return counts_.empty(); }

  bool operator==(const MappingStatistics&) const = default;

private:
  std::map<TokenId, std::map<TokenId, std::uint64_t>> counts_;
  std::map<TokenId, std::uint64_t> totals_;
};

struct AlignedInstruction {
  AlignmentMap map;
  std::vector<TokenId> pivot;
  std::vector<TokenId> source;
};

/// One-to-one segments add one count; one-to-many add one per source member;
/// many-to-one add one per pivot member.
void accumulate_segment_counts(MappingStatistics& stats, const AlignedInstruction& aligned);

MappingStatistics accumulate_statistics(std::span<const AlignedInstruction> corpus, std::size_t workers = 1);

struct SegmentKindCounts {
  std::uint64_t one_to_one = 0;
  std::uint64_t one_to_many = 0;
  std::uint64_t many_to_one = 0;
};

SegmentKindCounts count_segment_kinds(std::span<const AlignedInstruction> corpus);

// Statistics file: one JSON header line
//   {"entries":E,"format":"fusekit-stats","pivot_vocab_size":Vp,"source_vocab_size":Vs,"version":1}
// then E lines "<pivot id>\t<source id>\t<count>" sorted by (pivot, source).
struct StatisticsFile {
  std::size_t pivot_vocab_size = 0;
  std::size_t source_vocab_size = 0;
  MappingStatistics stats;
};

std::string format_statistics(const StatisticsFile& file);
StatisticsFile parse_statistics(std::string_view text);
StatisticsFile read_statistics(const std::filesystem::path& path);
void write_statistics(const StatisticsFile& file, const std::filesystem::path& path);

}  // namespace fusekit
