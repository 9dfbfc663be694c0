#pragma once

// String, hashing, file and number-formatting helpers shared by every module.

#include <openssl/evp.h>

#include <array>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "biasprobe/error.hpp"

namespace biasprobe {

using json = nlohmann::json;
using ordered_json = nlohmann::ordered_json;

inline bool is_ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

// Bytes >= 0x80 are treated as word characters so UTF-8 letters stay inside tokens.
inline bool is_word_byte(char c) {
  auto u = static_cast<unsigned char>(c);
  return u >= 0x80 || std::isalnum(u) != 0;
}

inline std::string to_lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

inline std::string_view trim(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && is_ascii_space(s[b])) ++b;
  while (e > b && is_ascii_space(s[e - 1])) --e;
  return s.substr(b, e - b);
}

/// trim, lowercase, collapse runs of non-alphanumerics to '_', drop edge underscores.
/// "Black or African American" -> "black_or_african_american", "Low ~income" -> "low_income".
inline std::string normalize_name(std::string_view raw) {
  std::string out;
  bool pending_sep = false;
  for (char c : trim(raw)) {
    if (is_word_byte(c)) {
      if (pending_sep && !out.empty()) out.push_back('_');
      pending_sep = false;
      out.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
    } else {
      pending_sep = true;
    }
  }
  return out;
}

/// Collapses whitespace runs to one space and trims.
inline std::string collapse_whitespace(std::string_view s) {
  std::string out;
  bool in_space = false;
  for (char c : trim(s)) {
    if (is_ascii_space(c)) {
      in_space = true;
      continue;
    }
    if (in_space) out.push_back(' ');
    in_space = false;
    out.push_back(c);
  }
  return out;
}

inline std::size_t count_words(std::string_view s) {
  std::size_t n = 0;
  bool in_word = false;
  for (char c : s) {
    if (is_ascii_space(c)) {
      in_word = false;
    } else if (!in_word) {
      in_word = true;
      ++n;
    }
  }
  return n;
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.emplace_back(s.substr(start));
      return parts;
    }
    parts.emplace_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string join(const std::vector<std::string>& parts, std::string_view sep) {
  std::string out;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (i) out.append(sep);
    out.append(parts[i]);
  }
  return out;
}

inline std::string sha256_hex(std::string_view data) {
  std::array<unsigned char, EVP_MAX_MD_SIZE> digest{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest.data(), &len, EVP_sha256(), nullptr) != 1) {
    throw Error(ErrorKind::IoError, "sha256 digest failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xf]);
  }
  return out;
}

/// Substitutes {{name}} placeholders in one pass; substituted values are never re-expanded
/// and unknown placeholders are left as written.
inline std::string render_template(std::string_view tpl, const std::map<std::string, std::string>& vars) {
  std::string out;
  std::size_t i = 0;
  while (i < tpl.size()) {
    auto open = tpl.find("{{", i);
    if (open == std::string_view::npos) break;
    auto close = tpl.find("}}", open + 2);
    if (close == std::string_view::npos) break;
    out.append(tpl.substr(i, open - i));
    std::string name(trim(tpl.substr(open + 2, close - open - 2)));
    if (auto it = vars.find(name); it != vars.end()) {
      out.append(it->second);
    } else {
      out.append(tpl.substr(open, close + 2 - open));
    }
    i = close + 2;
  }
  out.append(tpl.substr(i));
  return out;
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Writes via a sibling temp file and rename so readers never see a partial file.
inline void write_file(const std::filesystem::path& path, std::string_view content) {
  std::error_code ec;
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::IoError, "cannot write " + path.string());
    out.write(content.data(), static_cast<std::streamsize>(content.size()));
    if (!out) throw Error(ErrorKind::IoError, "short write to " + path.string());
  }
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot rename into " + path.string() + ": " + ec.message());
}

/// Calls fn(record, line_number) for each non-blank line. Parse failures become
/// MalformedRecord with the 1-based line number.
inline void for_each_jsonl(std::string_view content, const std::function<void(const json&, std::size_t)>& fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start <= content.size()) {
    auto end = content.find('\n', start);
    if (end == std::string_view::npos) end = content.size();
    ++line_no;
    auto line = trim(content.substr(start, end - start));
    if (!line.empty()) {
      json record;
      try {
        record = json::parse(line);
      } catch (const json::parse_error& e) {
        throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": " + e.what());
      }
      if (!record.is_object()) {
        throw Error(ErrorKind::MalformedRecord, "line " + std::to_string(line_no) + ": expected an object");
      }
      fn(record, line_no);
    }
    if (end == content.size()) break;
    start = end + 1;
  }
}

template <class Json>
std::string to_jsonl(const std::vector<Json>& records) {
  std::string out;
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

/// Shortest decimal text that parses back to exactly `v`.
inline std::string format_roundtrip(double v) {
  std::array<char, 64> buf{};
  auto [ptr, ec] = std::to_chars(buf.data(), buf.data() + buf.size(), v);
  return std::string(buf.data(), ptr);
}

inline std::string format_fixed(double v, int decimals) {
  std::array<char, 64> buf{};
  std::snprintf(buf.data(), buf.size(), "%.*f", decimals, v);
  std::string out(buf.data());
  if (out == "-0.000" || out == "-0.00" || out == "-0.0" || out == "-0") out.erase(0, 1);
  return out;
}

inline double parse_double(std::string_view s) {
  double v = 0;
  auto t = trim(s);
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (ec != std::errc{} || ptr != t.data() + t.size()) {
    throw Error(ErrorKind::MalformedRecord, "not a number: '" + std::string(s) + "'");
  }
  return v;
}

}  // namespace biasprobe
