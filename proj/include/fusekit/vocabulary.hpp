#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace fusekit {

using TokenId = std::uint32_t;

inline constexpr const char* kDefaultSpaceMarker = "\xE2\x96\x81";  // U+2581

/// Token strings indexed by id. `special_ids` never take part in distribution
/// matching; the unknown id, when present, is always special.
class Vocabulary {
public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, std::string space_marker = kDefaultSpaceMarker,
             std::optional<TokenId> unk_id = std::nullopt, std::set<TokenId> special_ids = {});

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(TokenId id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<TokenId> id_of(std::string_view token) const;

  const std::string& space_marker() const { return space_marker_; }
  std::optional<TokenId> unk_id() const { return unk_id_; }
  const std::set<TokenId>& special_ids() const { return special_ids_; }
  bool is_special(TokenId id) const { return special_ids_.contains(id); }

  /// Token text with every occurrence of the space marker removed; this is
  /// what sequence alignment compares.
  std::string surface(TokenId id) const;

  /// Token text with the space marker rewritten to U+2581 so that tokens from
  /// vocabularies with different markers compare equal.
  std::string canonical(TokenId id) const;

  bool operator==(const Vocabulary&) const = default;

private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> ids_;
  std::string space_marker_ = kDefaultSpaceMarker;
  std::optional<TokenId> unk_id_;
  std::set<TokenId> special_ids_;
};

std::string strip_marker(std::string_view text, std::string_view marker);

/// UTF-8 to code points; invalid bytes pass through unchanged.
std::u32string decode_utf8(std::string_view text);

// Vocabulary file: one JSON header line
//   {"format":"fusekit-vocab","version":1,"vocab_size":V,"space_marker":"▁","unk_id":0|null,"special_ids":[...]}
// followed by V lines, one token per line (id = line index), with backslash,
// newline, carriage return and tab escaped as \\ \n \r \t.
Vocabulary read_vocabulary(const std::filesystem::path& path);
void write_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path);
Vocabulary parse_vocabulary(std::string_view text);
std::string format_vocabulary(const Vocabulary& vocab);

std::string escape_token(std::string_view token);
std::string unescape_token(std::string_view line);

}  // namespace fusekit
