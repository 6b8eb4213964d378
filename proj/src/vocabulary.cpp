#include "fusekit/vocabulary.hpp"

#include "fusekit/errors.hpp"
#include "fusekit/tensorio.hpp"

#include <nlohmann/json.hpp>

#include <fstream>
#include <sstream>

namespace fusekit {

using json = nlohmann::json;

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::string space_marker, std::optional<TokenId> unk_id,
                       std::set<TokenId> special_ids)
    : tokens_(std::move(tokens)),
      space_marker_(std::move(space_marker)),
      unk_id_(unk_id),
      special_ids_(std::move(special_ids)) {
  ids_.reserve(tokens_.size());
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw DataError("vocabulary: empty token string at id " + std::to_string(i));
    if (!ids_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw DataError("vocabulary: duplicate token '" + tokens_[i] + "' at id " + std::to_string(i));
    }
  }
  if (unk_id_) {
    if (*unk_id_ >= tokens_.size()) throw DataError("vocabulary: unknown id out of range");
    special_ids_.insert(*unk_id_);
  }
  for (TokenId id : special_ids_) {
    if (id >= tokens_.size()) throw DataError("vocabulary: special id " + std::to_string(id) + " out of range");
  }
}

std::optional<TokenId> Vocabulary::id_of(std::string_view token) const {
  const auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::string strip_marker(std::string_view text, std::string_view marker) {
  if (marker.empty()) return std::string(text);
  std::string out;
  out.reserve(text.size());
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text.compare(pos, marker.size(), marker) == 0) {
      pos += marker.size();
    } else {
      out.push_back(text[pos++]);
    }
  }
  return out;
}

std::u32string decode_utf8(std::string_view s) {
  std::u32string out;
  out.reserve(s.size());
  for (std::size_t i = 0; i < s.size();) {
    const auto c = static_cast<unsigned char>(s[i]);
    std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 0;
    if (len == 0 || i + len > s.size()) {
      out.push_back(c);
      ++i;
      continue;
    }
    char32_t cp = len == 1 ? c : c & (0x7F >> len);
    bool ok = true;
    for (std::size_t k = 1; k < len; ++k) {
      const auto cc = static_cast<unsigned char>(s[i + k]);
      if ((cc >> 6) != 0x2) {
        ok = false;
        break;
      }
      cp = (cp << 6) | (cc & 0x3F);
    }
    if (!ok) {
      out.push_back(c);
      ++i;
      continue;
    }
    out.push_back(cp);
    i += len;
  }
  return out;
}

std::string Vocabulary::surface(TokenId id) const { return strip_marker(token(id), space_marker_); }

std::string Vocabulary::canonical(TokenId id) const {
  const std::string& text = token(id);
  if (space_marker_.empty() || space_marker_ == kDefaultSpaceMarker) return text;
  std::string out;
  std::size_t pos = 0;
  while (pos < text.size()) {
    if (text.compare(pos, space_marker_.size(), space_marker_) == 0) {
      out += kDefaultSpaceMarker;
      pos += space_marker_.size();
    } else {
      out.push_back(text[pos++]);
    }
  }
  return out;
}

std::string escape_token(std::string_view token) {
  std::string out;
  for (char c : token) {
    switch (c) {
      case '\\': out += "\\\\"; break;
      case '\n': out += "\\n"; break;
      case '\r': out += "\\r"; break;
      case '\t': out += "\\t"; break;
      default: out.push_back(c);
    }
  }
  return out;
}

std::string unescape_token(std::string_view line) {
  std::string out;
  for (std::size_t i = 0; i < line.size(); ++i) {
    if (line[i] != '\\') {
      out.push_back(line[i]);
      continue;
    }
    if (++i == line.size()) throw DataError("vocabulary: dangling escape in token line");
    switch (line[i]) {
      case '\\': out.push_back('\\'); break;
      case 'n': out.push_back('\n'); break;
      case 'r': out.push_back('\r'); break;
      case 't': out.push_back('\t'); break;
      default: throw DataError(std::string("vocabulary: unknown escape \\") + line[i]);
    }
  }
  return out;
}

std::string format_vocabulary(const Vocabulary& vocab) {
  json header = {{"format", "fusekit-vocab"},
                 {"version", 1},
                 {"vocab_size", vocab.size()},
                 {"space_marker", vocab.space_marker()},
                 {"unk_id", vocab.unk_id() ? json(*vocab.unk_id()) : json(nullptr)},
                 {"special_ids", vocab.special_ids()}};
  std::string out = header.dump() + "\n";
  for (const auto& t : vocab.tokens()) out += escape_token(t) + "\n";
  return out;
}

Vocabulary parse_vocabulary(std::string_view text) {
  const auto eol = text.find('\n');
  if (eol == std::string_view::npos) throw DataError("vocabulary: missing header line");
  json header;
  try {
    header = json::parse(text.substr(0, eol));
  } catch (const json::parse_error& e) {
    throw DataError(std::string("vocabulary: malformed header: ") + e.what());
  }
  std::size_t size = 0;
  std::string marker;
  std::optional<TokenId> unk;
  std::set<TokenId> special;
  try {
    if (header.at("format") != "fusekit-vocab") throw DataError("vocabulary: wrong format tag");
    if (header.at("version") != 1) throw DataError("vocabulary: unsupported version");
    size = header.at("vocab_size").get<std::size_t>();
    marker = header.value("space_marker", std::string(kDefaultSpaceMarker));
    if (header.contains("unk_id") && !header["unk_id"].is_null()) unk = header["unk_id"].get<TokenId>();
    if (header.contains("special_ids")) special = header["special_ids"].get<std::set<TokenId>>();
  } catch (const json::exception& e) {
    throw DataError(std::string("vocabulary: malformed header: ") + e.what());
  }

  std::vector<std::string> tokens;
  tokens.reserve(size);
  std::size_t pos = eol + 1;
  while (pos < text.size()) {
    auto next = text.find('\n', pos);
    if (next == std::string_view::npos) throw DataError("vocabulary: last token line is not newline-terminated");
    tokens.push_back(unescape_token(text.substr(pos, next - pos)));
    pos = next + 1;
  }
  if (tokens.size() != size) {
    throw DataError("vocabulary: header declares " + std::to_string(size) + " tokens, file has " +
                    std::to_string(tokens.size()));
  }
  return Vocabulary(std::move(tokens), std::move(marker), unk, std::move(special));
}

Vocabulary read_vocabulary(const std::filesystem::path& path) {
  const auto bytes = read_file_bytes(path);
  return parse_vocabulary(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void write_vocabulary(const Vocabulary& vocab, const std::filesystem::path& path) {
  const std::string text = format_vocabulary(vocab);
  write_file_bytes(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

}  // namespace fusekit
