#pragma once

#include "fusekit/alignment.hpp"
#include "fusekit/distribution.hpp"
#include "fusekit/vocabulary.hpp"

#include <map>
#include <optional>
#include <string>
#include <vector>

namespace fusekit {

/// How source-vocabulary ids are mapped onto the pivot vocabulary.
///   ExactMatch  - identical token text (after marker normalization)
///   MinEdit     - pivot token with the smallest edit distance
///   Statistics  - most frequent aligned pivot token, from MappingStatistics
enum class Strategy { ExactMatch, MinEdit, Statistics };

const char* to_string(Strategy s);
Strategy parse_strategy(std::string_view name);  // "EM" | "MinED" | "MS"

struct ProjectionTable {
  Strategy strategy = Strategy::ExactMatch;
  std::size_t pivot_vocab_size = 0;
  std::size_t source_vocab_size = 0;
  /// Destination bucket for unmapped source mass; when absent that mass is
  /// dropped and the row renormalized.
  std::optional<TokenId> unk_bucket;
  /// Relabeling applied to every source id; nullopt routes to `unk_bucket`.
  std::vector<std::optional<TokenId>> source_to_pivot;
  /// Statistics strategy only: most frequent source token per observed pivot
  /// token.
  std::map<TokenId, TokenId> pivot_to_source;
  /// Statistics strategy only: the counts used to weight one-to-many
  /// averages.
  MappingStatistics stats;

  std::optional<TokenId> pivot_of(TokenId source) const { return source_to_pivot.at(source); }
};

/// MinEdit target for each source id (nullopt for special ids).
std::vector<std::optional<TokenId>> min_edit_targets(const Vocabulary& pivot_vocab, const Vocabulary& source_vocab,
                                                     std::size_t workers = 1);

ProjectionTable build_projection_table(Strategy strategy, const Vocabulary& pivot_vocab,
                                       const Vocabulary& source_vocab, const MappingStatistics* stats = nullptr,
                                       std::size_t workers = 1);

struct ProjectionReport {
  double unmatched_mass = 0.0;  // total mass routed to the unknown bucket or dropped
  std::size_t rows = 0;
};

/// Re-expresses a source-space distribution matrix (one row per source
/// position) in pivot space (one row per pivot position) along `map`.
///
///   one-to-one              pivot row = relabeled source row
///   one-to-many, Statistics pivot row = relabeled frequency-weighted average
///                           of the member source rows
///   one-to-many, otherwise  pivot row = relabeled first member row
///   many-to-one             every member pivot row = relabeled source row
DistributionMatrix project_distribution(const DistributionMatrix& source_matrix, const AlignmentMap& map,
                                        std::span<const TokenId> pivot_tokens,
                                        std::span<const TokenId> source_tokens, const ProjectionTable& table,
                                        ProjectionReport* report = nullptr);

}  // namespace fusekit
