#include "fusekit/alignment.hpp"

#include "fusekit/errors.hpp"
#include "fusekit/parallel.hpp"
#include "fusekit/tensorio.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cstdlib>
#include <limits>
#include <numeric>
#include <sstream>

namespace fusekit {

using json = nlohmann::json;

const char* to_string(SegmentKind kind) {
  switch (kind) {
    case SegmentKind::OneToOne: return "one-to-one";
    case SegmentKind::OneToMany: return "one-to-many";
    case SegmentKind::ManyToOne: return "many-to-one";
  }
  return "?";
}

namespace {

std::size_t levenshtein(const std::u32string& a, const std::u32string& b) {
  std::vector<std::size_t> row(b.size() + 1);
  std::iota(row.begin(), row.end(), std::size_t{0});
  for (std::size_t i = 1; i <= a.size(); ++i) {
    std::size_t diag = row[0];
    row[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t up = row[j];
      row[j] = std::min({row[j] + 1, row[j - 1] + 1, diag + (a[i - 1] == b[j - 1] ? 0 : 1)});
      diag = up;
    }
  }
  return row[b.size()];
}

std::string concat(std::span<const std::string> parts) {
  std::string out;
  for (const auto& p : parts) out += p;
  return out;
}

SegmentKind kind_of(std::size_t pivot_len, std::size_t source_len) {
  if (pivot_len == 1 && source_len == 1) return SegmentKind::OneToOne;
  return pivot_len == 1 ? SegmentKind::OneToMany : SegmentKind::ManyToOne;
}

}  // namespace

std::size_t edit_distance(std::string_view a, std::string_view b) {
  return levenshtein(decode_utf8(a), decode_utf8(b));
}

double normalized_edit_distance(std::string_view a, std::string_view b) {
  if (a == b) return 0.0;
  const auto ua = decode_utf8(a);
  const auto ub = decode_utf8(b);
  const auto longest = std::max(ua.size(), ub.size());
  return static_cast<double>(levenshtein(ua, ub)) / static_cast<double>(longest);
}

double segment_cost(std::span<const std::string> pivot_surfaces, std::span<const std::string> source_surfaces) {
  return normalized_edit_distance(concat(pivot_surfaces), concat(source_surfaces));
}

std::vector<std::string> surfaces(std::span<const TokenId> tokens, const Vocabulary& vocab) {
  std::vector<std::string> out;
  out.reserve(tokens.size());
  for (TokenId t : tokens) {
    if (t >= vocab.size()) throw DataError("token id " + std::to_string(t) + " out of vocabulary range");
    out.push_back(vocab.surface(t));
  }
  return out;
}

AlignmentMap align_surfaces(std::span<const std::string> pivot, std::span<const std::string> source,
                            const AlignOptions& options) {
  if (pivot.empty() || source.empty()) throw AlignmentError("cannot align an empty token sequence");
  const std::string pivot_text = concat(pivot);
  const std::string source_text = concat(source);
  if (pivot_text != source_text) {
    const auto mismatch = std::mismatch(pivot_text.begin(), pivot_text.end(), source_text.begin(), source_text.end());
    throw AlignmentError("detokenized sequences differ at byte " +
                         std::to_string(mismatch.first - pivot_text.begin()));
  }

  const std::size_t n = pivot.size();
  const std::size_t m = source.size();
  const std::size_t span = std::max<std::size_t>(options.max_span, 1);

  std::vector<std::size_t> pivot_offset(n + 1, 0), source_offset(m + 1, 0);
  for (std::size_t i = 0; i < n; ++i) pivot_offset[i + 1] = pivot_offset[i] + decode_utf8(pivot[i]).size();
  for (std::size_t j = 0; j < m; ++j) source_offset[j + 1] = source_offset[j] + decode_utf8(source[j]).size();
  const auto in_band = [&](std::size_t i, std::size_t j) {
    const auto a = pivot_offset[i];
    const auto b = source_offset[j];
    return (a > b ? a - b : b - a) <= options.char_band;
  };

  constexpr double kInf = std::numeric_limits<double>::infinity();
  const auto at = [m](std::size_t i, std::size_t j) { return i * (m + 1) + j; };
  std::vector<double> cost((n + 1) * (m + 1), kInf);
  std::vector<std::size_t> from((n + 1) * (m + 1), 0);
  cost[at(0, 0)] = 0.0;

  const auto relax = [&](std::size_t i, std::size_t j, std::size_t ni, std::size_t nj, double c) {
    const double total = cost[at(i, j)] + c;
    if (total < cost[at(ni, nj)]) {
      cost[at(ni, nj)] = total;
      from[at(ni, nj)] = at(i, j);
    }
  };

  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      if (cost[at(i, j)] == kInf || !in_band(i, j)) continue;
      relax(i, j, i + 1, j + 1, normalized_edit_distance(pivot[i], source[j]));
      std::string joined = source[j];
      for (std::size_t len = 2; len <= span && j + len <= m; ++len) {
        joined += source[j + len - 1];
        relax(i, j, i + 1, j + len, normalized_edit_distance(pivot[i], joined));
      }
      joined = pivot[i];
      for (std::size_t len = 2; len <= span && i + len <= n; ++len) {
        joined += pivot[i + len - 1];
        relax(i, j, i + len, j + 1, normalized_edit_distance(joined, source[j]));
      }
    }
  }
  if (cost[at(n, m)] == kInf) {
    throw AlignmentError("no alignment within span limit " + std::to_string(span) + " and character band " +
                         std::to_string(options.char_band));
  }

  AlignmentMap map;
  for (std::size_t cell = at(n, m); cell != at(0, 0);) {
    const std::size_t prev = from[cell];
    const IndexRange p{prev / (m + 1), cell / (m + 1)};
    const IndexRange s{prev % (m + 1), cell % (m + 1)};
    map.segments.push_back({kind_of(p.size(), s.size()), p, s});
    cell = prev;
  }
  std::reverse(map.segments.begin(), map.segments.end());
  return map;
}

AlignmentMap align_sequences(std::span<const TokenId> pivot, std::span<const TokenId> source,
                             const Vocabulary& pivot_vocab, const Vocabulary& source_vocab,
                             const AlignOptions& options) {
  const auto p = surfaces(pivot, pivot_vocab);
  const auto s = surfaces(source, source_vocab);
  return align_surfaces(p, s, options);
}

double alignment_cost(const AlignmentMap& map, std::span<const std::string> pivot_surfaces,
                      std::span<const std::string> source_surfaces) {
  double total = 0.0;
  for (const auto& seg : map.segments) {
    total += segment_cost(pivot_surfaces.subspan(seg.pivot.begin, seg.pivot.size()),
                          source_surfaces.subspan(seg.source.begin, seg.source.size()));
  }
  return total;
}

void validate_alignment(const AlignmentMap& map, std::size_t pivot_len, std::size_t source_len) {
  std::size_t p = 0, s = 0;
  for (std::size_t k = 0; k < map.segments.size(); ++k) {
    const auto& seg = map.segments[k];
    const auto where = " in segment " + std::to_string(k);
    if (seg.pivot.begin != p || seg.source.begin != s) throw AlignmentError("gap or overlap" + where);
    if (seg.pivot.size() == 0 || seg.source.size() == 0) throw AlignmentError("empty range" + where);
    if (seg.pivot.size() > 1 && seg.source.size() > 1) throw AlignmentError("many-to-many segment" + where);
    if (seg.kind != kind_of(seg.pivot.size(), seg.source.size())) throw AlignmentError("wrong kind" + where);
    p = seg.pivot.end;
    s = seg.source.end;
  }
  if (p != pivot_len || s != source_len) throw AlignmentError("segments do not cover both sequences");
}

void MappingStatistics::add(TokenId pivot, TokenId source, std::uint64_t n) {
  if (n == 0) return;
  counts_[pivot][source] += n;
  totals_[pivot] += n;
}

void MappingStatistics::merge(const MappingStatistics& other) {
  for (const auto& [p, row] : other.counts_) {
    for (const auto& [s, n] : row) add(p, s, n);
  }
}

std::uint64_t MappingStatistics::count(TokenId pivot, TokenId source) const {
  const auto row = counts_.find(pivot);
  if (row == counts_.end()) return 0;
  const auto it = row->second.find(source);
  return it == row->second.end() ? 0 : it->second;
}

std::uint64_t MappingStatistics::total(TokenId pivot) const {
  const auto it = totals_.find(pivot);
  return it == totals_.end() ? 0 : it->second;
}

void accumulate_segment_counts(MappingStatistics& stats, const AlignedInstruction& aligned) {
  validate_alignment(aligned.map, aligned.pivot.size(), aligned.source.size());
  for (const auto& seg : aligned.map.segments) {
    for (std::size_t i = seg.pivot.begin; i < seg.pivot.end; ++i) {
      for (std::size_t j = seg.source.begin; j < seg.source.end; ++j) {
        stats.add(aligned.pivot[i], aligned.source[j]);
      }
    }
  }
}

MappingStatistics accumulate_statistics(std::span<const AlignedInstruction> corpus, std::size_t workers) {
  const std::size_t chunks = std::max<std::size_t>(1, std::min(workers, corpus.size()));
  std::vector<MappingStatistics> partial(chunks);
  const std::size_t block = (corpus.size() + chunks - 1) / std::max<std::size_t>(chunks, 1);
  parallel_for(chunks, workers, [&](std::size_t c) {
    const std::size_t hi = std::min(corpus.size(), (c + 1) * block);
    for (std::size_t i = c * block; i < hi; ++i) accumulate_segment_counts(partial[c], corpus[i]);
  });
  MappingStatistics total;
  for (const auto& p : partial) total.merge(p);
  return total;
}

SegmentKindCounts count_segment_kinds(std::span<const AlignedInstruction> corpus) {
  SegmentKindCounts out;
  for (const auto& inst : corpus) {
    for (const auto& seg : inst.map.segments) {
      switch (seg.kind) {
        case SegmentKind::OneToOne: ++out.one_to_one; break;
        case SegmentKind::OneToMany: ++out.one_to_many; break;
        case SegmentKind::ManyToOne: ++out.many_to_one; break;
      }
    }
  }
  return out;
}

std::string format_statistics(const StatisticsFile& file) {
  std::size_t entries = 0;
  for (const auto& [p, row] : file.stats.counts()) entries += row.size();
  const json header = {{"format", "fusekit-stats"},
                       {"version", 1},
                       {"pivot_vocab_size", file.pivot_vocab_size},
                       {"source_vocab_size", file.source_vocab_size},
                       {"entries", entries}};
  std::string out = header.dump() + "\n";
  for (const auto& [p, row] : file.stats.counts()) {
    for (const auto& [s, n] : row) {
      out += std::to_string(p) + "\t" + std::to_string(s) + "\t" + std::to_string(n) + "\n";
    }
  }
  return out;
}

StatisticsFile parse_statistics(std::string_view text) {
  const auto eol = text.find('\n');
  if (eol == std::string_view::npos) throw DataError("stats: missing header line");
  StatisticsFile file;
  std::size_t entries = 0;
  try {
    const json header = json::parse(text.substr(0, eol));
    if (header.at("format") != "fusekit-stats") throw DataError("stats: wrong format tag");
    if (header.at("version") != 1) throw DataError("stats: unsupported version");
    file.pivot_vocab_size = header.at("pivot_vocab_size").get<std::size_t>();
    file.source_vocab_size = header.at("source_vocab_size").get<std::size_t>();
    entries = header.at("entries").get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("stats: malformed header: ") + e.what());
  }
  std::istringstream lines{std::string(text.substr(eol + 1))};
  std::string line;
  std::size_t seen = 0;
  while (std::getline(lines, line)) {
    std::istringstream fields(line);
    std::uint64_t p = 0, s = 0, n = 0;
    if (!(fields >> p >> s >> n) || n == 0) throw DataError("stats: malformed entry on line " + std::to_string(seen + 2));
    if (p >= file.pivot_vocab_size || s >= file.source_vocab_size) {
      throw DataError("stats: token id out of range on line " + std::to_string(seen + 2));
    }
    file.stats.add(static_cast<TokenId>(p), static_cast<TokenId>(s), n);
    ++seen;
  }
  if (seen != entries) throw DataError("stats: header declares " + std::to_string(entries) + " entries, found " +
                                       std::to_string(seen));
  return file;
}

StatisticsFile read_statistics(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_statistics(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void write_statistics(const StatisticsFile& file, const std::filesystem::path& path) {
  const auto text = format_statistics(file);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace fusekit
