#include "fusekit/projection.hpp"

#include "fusekit/errors.hpp"
#include "fusekit/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <unordered_map>

namespace fusekit {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::ExactMatch: return "EM";
    case Strategy::MinEdit: return "MinED";
    case Strategy::Statistics: return "MS";
  }
  return "?";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "EM") return Strategy::ExactMatch;
  if (name == "MinED") return Strategy::MinEdit;
  if (name == "MS") return Strategy::Statistics;
  throw ConfigError("unknown alignment strategy '" + std::string(name) + "' (expected EM, MinED or MS)");
}

namespace {

struct PivotCandidate {
  TokenId id;
  std::u32string text;
};

// Levenshtein distance, abandoning early once every cell exceeds `bound`.
std::size_t bounded_levenshtein(const std::u32string& a, const std::u32string& b, std::size_t bound,
                                std::vector<std::size_t>& row) {
  row.resize(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) row[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    std::size_t best = row[0];
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
      best = std::min(best, row[j]);
    }
    if (best > bound) return best;
  }
  return row[b.size()];
}

}  // namespace

std::vector<std::optional<TokenId>> min_edit_targets(const Vocabulary& pivot_vocab, const Vocabulary& source_vocab,
                                                     std::size_t workers) {
  std::vector<PivotCandidate> candidates;
  std::unordered_map<std::string, TokenId> exact;
  for (TokenId p = 0; p < pivot_vocab.size(); ++p) {
    if (pivot_vocab.is_special(p)) continue;
    const auto text = pivot_vocab.canonical(p);
    exact.emplace(text, p);
    candidates.push_back({p, decode_utf8(text)});
  }

  std::vector<std::optional<TokenId>> out(source_vocab.size());
  parallel_for(source_vocab.size(), workers, [&](std::size_t s) {
    const auto sid = static_cast<TokenId>(s);
    if (source_vocab.is_special(sid) || candidates.empty()) return;
    const auto text = source_vocab.canonical(sid);
    if (const auto it = exact.find(text); it != exact.end()) {
      out[s] = it->second;
      return;
    }
    const auto query = decode_utf8(text);
    std::vector<std::size_t> row;
    std::size_t best = std::numeric_limits<std::size_t>::max();
    TokenId best_id = 0;
    for (const auto& c : candidates) {
      const std::size_t gap = c.text.size() > query.size() ? c.text.size() - query.size() : query.size() - c.text.size();
      if (gap >= best) continue;
      const std::size_t d = bounded_levenshtein(query, c.text, best, row);
      if (d < best) {
        best = d;
        best_id = c.id;
      }
    }
    out[s] = best_id;
  });
  return out;
}

ProjectionTable build_projection_table(Strategy strategy, const Vocabulary& pivot_vocab,
                                       const Vocabulary& source_vocab, const MappingStatistics* stats,
                                       std::size_t workers) {
  ProjectionTable table;
  table.strategy = strategy;
  table.pivot_vocab_size = pivot_vocab.size();
  table.source_vocab_size = source_vocab.size();
  table.unk_bucket = pivot_vocab.unk_id();
  table.source_to_pivot.assign(source_vocab.size(), std::nullopt);

  switch (strategy) {
    case Strategy::ExactMatch: {
      if (stats != nullptr) throw ConfigError("mapping statistics are only used by the MS strategy");
      std::unordered_map<std::string, TokenId> by_text;
      for (TokenId p = 0; p < pivot_vocab.size(); ++p) {
        if (!pivot_vocab.is_special(p)) by_text.emplace(pivot_vocab.canonical(p), p);
      }
      for (TokenId s = 0; s < source_vocab.size(); ++s) {
        if (source_vocab.is_special(s)) continue;
        if (const auto it = by_text.find(source_vocab.canonical(s)); it != by_text.end()) {
          table.source_to_pivot[s] = it->second;
        }
      }
      break;
    }
    case Strategy::MinEdit: {
      if (stats != nullptr) throw ConfigError("mapping statistics are only used by the MS strategy");
      table.source_to_pivot = min_edit_targets(pivot_vocab, source_vocab, workers);
      break;
    }
    case Strategy::Statistics: {
      if (stats == nullptr) throw ConfigError("the MS strategy requires mapping statistics");
      table.stats = *stats;
      for (const auto& [p, row] : stats->counts()) {
        if (p >= pivot_vocab.size()) throw DataError("statistics pivot id out of range");
        if (pivot_vocab.is_special(p)) continue;
        std::uint64_t best = 0;
        std::optional<TokenId> best_s;
        for (const auto& [s, n] : row) {
          if (s >= source_vocab.size()) throw DataError("statistics source id out of range");
          if (source_vocab.is_special(s)) continue;
          if (n > best) {
            best = n;
            best_s = s;
          }
        }
        if (best_s) table.pivot_to_source.emplace(p, *best_s);
      }
      // a source token claimed by several pivot tokens goes to the one with
      // the highest count (lowest id on ties)
      std::vector<std::uint64_t> claim(source_vocab.size(), 0);
      for (const auto& [p, s] : table.pivot_to_source) {
        const auto n = stats->count(p, s);
        if (n > claim[s]) {
          claim[s] = n;
          table.source_to_pivot[s] = p;
        }
      }
      const auto fallback = min_edit_targets(pivot_vocab, source_vocab, workers);
      for (TokenId s = 0; s < source_vocab.size(); ++s) {
        if (!table.source_to_pivot[s]) table.source_to_pivot[s] = fallback[s];
      }
      break;
    }
  }
  return table;
}

namespace {

SparseRow relabel(const SparseRow& row, const ProjectionTable& table, double& unmatched) {
  std::vector<SparseEntry> merged;
  double dropped = 0.0;
  const auto add = [&merged](TokenId id, double p) {
    for (auto& e : merged) {
      if (e.id == id) {
        e.prob += p;
        return;
      }
    }
    merged.push_back({id, p});
  };
  for (const auto& e : row) {
    if (e.id >= table.source_vocab_size) throw DataError("source id " + std::to_string(e.id) + " out of range");
    if (const auto p = table.source_to_pivot[e.id]) {
      add(*p, e.prob);
    } else if (table.unk_bucket) {
      add(*table.unk_bucket, e.prob);
      unmatched += e.prob;
    } else {
      dropped += e.prob;
      unmatched += e.prob;
    }
  }
  if (merged.empty()) throw DataError("row has no mass that maps into the pivot vocabulary");
  if (dropped > 0.0) {
    const double s = row_sum(merged);
    for (auto& e : merged) e.prob /= s;
  }
  canonicalize(merged);
  return merged;
}

SparseRow weighted_average(std::span<const SparseRow* const> rows, std::span<const double> weights, std::size_t k) {
  double total = 0.0;
  for (double w : weights) total += w;
  SparseRow acc;
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const double w = total > 0.0 ? weights[r] / total : 1.0 / static_cast<double>(rows.size());
    if (w == 0.0) continue;
    for (const auto& e : *rows[r]) {
      auto it = std::find_if(acc.begin(), acc.end(), [&](const SparseEntry& a) { return a.id == e.id; });
      if (it == acc.end()) {
        acc.push_back({e.id, w * e.prob});
      } else {
        it->prob += w * e.prob;
      }
    }
  }
  return truncate_top_k(std::move(acc), k);
}

}  // namespace

DistributionMatrix project_distribution(const DistributionMatrix& source_matrix, const AlignmentMap& map,
                                        std::span<const TokenId> pivot_tokens,
                                        std::span<const TokenId> source_tokens, const ProjectionTable& table,
                                        ProjectionReport* report) {
  validate_alignment(map, pivot_tokens.size(), source_tokens.size());
  if (source_matrix.rows.size() != source_tokens.size()) {
    throw DataError("distribution has " + std::to_string(source_matrix.rows.size()) + " rows but the alignment covers " +
                    std::to_string(source_tokens.size()) + " source positions");
  }
  if (source_matrix.vocab_size != table.source_vocab_size) {
    throw DataError("distribution vocabulary size does not match the projection table");
  }
  validate_distribution(source_matrix);

  DistributionMatrix out{table.pivot_vocab_size, source_matrix.k, {}};
  out.rows.resize(pivot_tokens.size());
  double unmatched = 0.0;

  for (const auto& seg : map.segments) {
    SparseRow projected;
    double seg_unmatched = 0.0;
    if (seg.kind == SegmentKind::OneToMany && table.strategy == Strategy::Statistics) {
      const TokenId p = pivot_tokens[seg.pivot.begin];
      std::vector<const SparseRow*> members;
      std::vector<double> weights;
      for (std::size_t j = seg.source.begin; j < seg.source.end; ++j) {
        members.push_back(&source_matrix.rows[j]);
        weights.push_back(static_cast<double>(table.stats.count(p, source_tokens[j])));
      }
      projected = relabel(weighted_average(members, weights, source_matrix.k), table, seg_unmatched);
    } else {
      projected = relabel(source_matrix.rows[seg.source.begin], table, seg_unmatched);
    }
    for (std::size_t i = seg.pivot.begin; i < seg.pivot.end; ++i) out.rows[i] = projected;
    unmatched += seg_unmatched * static_cast<double>(seg.pivot.size());
  }

  if (report != nullptr) {
    report->unmatched_mass += unmatched;
    report->rows += out.rows.size();
  }
  return out;
}

}  // namespace fusekit
