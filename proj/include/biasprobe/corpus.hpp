#pragma once

// Tagged posts: inline markup parsing/rendering, corpus files, tag statistics
// and cell filtering.

#include <algorithm>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "biasprobe/error.hpp"
#include "biasprobe/text.hpp"
#include "biasprobe/vocabulary.hpp"

namespace biasprobe {

/// Half-open byte range [start, end) into a post's stripped text.
struct TagSpan {
  TagValue value;
  std::size_t start = 0;
  std::size_t end = 0;

  bool operator==(const TagSpan&) const = default;
};

enum class SourceDataset { Dreaddit, MultiWD, External };
enum class Provenance { Original, Synthetic };

inline std::string_view to_string(SourceDataset d) {
  switch (d) {
    case SourceDataset::Dreaddit: return "dreaddit";
    case SourceDataset::MultiWD: return "multiwd";
    case SourceDataset::External: return "external";
  }
  return "?";
}

inline std::string_view to_string(Provenance p) { return p == Provenance::Original ? "original" : "synthetic"; }

struct Post {
  std::string id;
  std::string text;
  std::vector<TagSpan> spans;
  SourceDataset source_dataset = SourceDataset::External;
  Provenance provenance = Provenance::Original;
  std::optional<std::string> label;
  // Demographic value a synthetic post was generated to cover.
  std::optional<TagValue> generated_for;

  bool has_tag(const TagValue& v) const {
    return std::any_of(spans.begin(), spans.end(), [&](const TagSpan& s) { return s.value == v; });
  }
  std::string_view covered(const TagSpan& s) const { return std::string_view(text).substr(s.start, s.end - s.start); }
};

enum class ParseMode { Strict, Lenient };

struct ParsedText {
  std::string text;
  std::vector<TagSpan> spans;
  std::vector<std::string> warnings;
};

namespace detail {

inline bool looks_like_tag_name(std::string_view name) {
  auto t = trim(name);
  return !t.empty() && std::isalpha(static_cast<unsigned char>(t.front())) != 0;
}

}  // namespace detail

/// Strips `<name>...</name>` markup and returns spans over the stripped text.
/// A '<' that does not open a well-formed token whose name starts with a letter
/// is kept as literal text. Spans are flat: opening a tag while another is open
/// is OverlappingTags.
inline ParsedText parse_tagged_text(std::string_view raw, const Vocabulary& vocab, ParseMode mode = ParseMode::Strict) {
  struct Open {
    std::string name;
    const TagValue* value;
    std::size_t start;
    std::size_t raw_pos;
  };
  ParsedText out;
  out.text.reserve(raw.size());
  std::optional<Open> open;

  std::size_t i = 0;
  while (i < raw.size()) {
    char c = raw[i];
    if (c != '<') {
      out.text.push_back(c);
      ++i;
      continue;
    }
    auto close = raw.find('>', i + 1);
    auto next_lt = raw.find('<', i + 1);
    if (close == std::string_view::npos || (next_lt != std::string_view::npos && next_lt < close)) {
      out.text.push_back(c);
      ++i;
      continue;
    }
    auto inner = raw.substr(i + 1, close - i - 1);
    bool closing = !inner.empty() && inner.front() == '/';
    auto name_raw = closing ? inner.substr(1) : inner;
    if (!detail::looks_like_tag_name(name_raw)) {
      out.text.push_back(c);
      ++i;
      continue;
    }
    auto name = normalize_name(name_raw);
    const TagValue* value = vocab.resolve(name);
    auto at = " at byte " + std::to_string(i);

    if (!closing) {
      if (open) {
        throw Error(ErrorKind::OverlappingTags,
                    "<" + std::string(name_raw) + ">" + at + " opened inside <" + open->name + ">");
      }
      if (!value && mode == ParseMode::Strict) {
        throw Error(ErrorKind::UnknownTag, "<" + std::string(name_raw) + ">" + at);
      }
      open = Open{name, value, out.text.size(), i};
    } else {
      if (!open) {
        throw Error(ErrorKind::UnbalancedTag, "</" + std::string(name_raw) + ">" + at + " has no opening tag");
      }
      bool same = name == open->name || (value != nullptr && open->value != nullptr && *value == *open->value);
      if (!same) {
        throw Error(ErrorKind::UnbalancedTag,
                    "</" + std::string(name_raw) + ">" + at + " closes <" + open->name + ">");
      }
      if (open->value == nullptr) {
        out.warnings.push_back("unknown tag <" + open->name + "> dropped at byte " + std::to_string(open->raw_pos));
      } else if (out.text.size() == open->start) {
        out.warnings.push_back("empty <" + open->name + "> span dropped at byte " + std::to_string(open->raw_pos));
      } else {
        out.spans.push_back({*open->value, open->start, out.text.size()});
      }
      open.reset();
    }
    i = close + 1;
  }
  if (open) {
    throw Error(ErrorKind::UnbalancedTag,
                "<" + open->name + "> at byte " + std::to_string(open->raw_pos) + " is never closed");
  }
  return out;
}

inline std::string render_tagged_text(std::string_view text, std::span<const TagSpan> spans) {
  std::string out;
  out.reserve(text.size() + spans.size() * 32);
  std::size_t pos = 0;
  for (const auto& s : spans) {
    out.append(text.substr(pos, s.start - pos));
    out += '<' + s.value.id + '>';
    out.append(text.substr(s.start, s.end - s.start));
    out += "</" + s.value.id + '>';
    pos = s.end;
  }
  out.append(text.substr(pos));
  return out;
}

inline std::string render_tagged_text(const Post& post) { return render_tagged_text(post.text, post.spans); }

/// Sorts spans by offset and checks the TagSpan/Post invariants.
inline void validate_post(Post& post) {
  if (post.text.empty()) throw Error(ErrorKind::MalformedRecord, "post '" + post.id + "' has empty text");
  std::sort(post.spans.begin(), post.spans.end(),
            [](const TagSpan& a, const TagSpan& b) { return a.start < b.start || (a.start == b.start && a.end < b.end); });
  std::size_t prev_end = 0;
  for (const auto& s : post.spans) {
    if (!(s.start < s.end && s.end <= post.text.size())) {
      throw Error(ErrorKind::MalformedRecord, "post '" + post.id + "': span [" + std::to_string(s.start) + ", " +
                                                  std::to_string(s.end) + ") out of range");
    }
    if (s.start < prev_end) {
      throw Error(ErrorKind::OverlappingTags, "post '" + post.id + "': spans overlap at byte " + std::to_string(s.start));
    }
    prev_end = s.end;
  }
}

inline json tag_value_json(const TagValue& v) { return {{"category", to_string(v.category)}, {"value", v.id}}; }

inline const TagValue& tag_value_from_json(const json& j, const Vocabulary& vocab) {
  auto cat = category_from_string(j.at("category").get<std::string>());
  if (!cat) throw Error(ErrorKind::MalformedRecord, "unknown category " + j.at("category").dump());
  return vocab.at(*cat, j.at("value").get<std::string>());
}

/// Both representations are emitted: raw_text and text+spans.
inline json post_to_json(const Post& p) {
  json spans = json::array();
  for (const auto& s : p.spans) {
    spans.push_back({{"category", to_string(s.value.category)}, {"value", s.value.id}, {"start", s.start}, {"end", s.end}});
  }
  json out = {{"id", p.id},
              {"raw_text", render_tagged_text(p)},
              {"text", p.text},
              {"spans", spans},
              {"source_dataset", to_string(p.source_dataset)},
              {"provenance", to_string(p.provenance)}};
  if (p.label) out["label"] = *p.label;
  if (p.generated_for) out["generated_for"] = tag_value_json(*p.generated_for);
  return out;
}

inline Post post_from_json(const json& j, const Vocabulary& vocab) {
  Post p;
  p.id = j.at("id").get<std::string>();
  if (p.id.empty()) throw Error(ErrorKind::MalformedRecord, "empty id");

  bool has_structured = j.contains("text") && j.contains("spans");
  if (has_structured) {
    p.text = j.at("text").get<std::string>();
    for (const auto& s : j.at("spans")) {
      auto cat = category_from_string(s.at("category").get<std::string>());
      if (!cat) throw Error(ErrorKind::MalformedRecord, "unknown span category " + s.at("category").dump());
      const auto* v = vocab.find(*cat, s.at("value").get<std::string>());
      if (!v) throw Error(ErrorKind::UnknownTag, "span value " + s.at("value").dump());
      p.spans.push_back({*v, s.at("start").get<std::size_t>(), s.at("end").get<std::size_t>()});
    }
  }
  if (j.contains("raw_text")) {
    auto parsed = parse_tagged_text(j.at("raw_text").get<std::string>(), vocab, ParseMode::Strict);
    if (!has_structured) {
      p.text = std::move(parsed.text);
      p.spans = std::move(parsed.spans);
    } else {
      Post check = p;
      validate_post(check);
      if (parsed.text != check.text || parsed.spans != check.spans) {
        throw Error(ErrorKind::MalformedRecord, "raw_text and text+spans disagree");
      }
    }
  } else if (!has_structured && j.contains("text")) {
    p.text = j.at("text").get<std::string>();
  } else if (!has_structured) {
    throw Error(ErrorKind::MalformedRecord, "record needs raw_text or text+spans");
  }

  auto dataset = j.value("source_dataset", std::string("external"));
  if (dataset == "dreaddit") p.source_dataset = SourceDataset::Dreaddit;
  else if (dataset == "multiwd") p.source_dataset = SourceDataset::MultiWD;
  else if (dataset == "external") p.source_dataset = SourceDataset::External;
  else throw Error(ErrorKind::MalformedRecord, "unknown source_dataset '" + dataset + "'");

  auto prov = j.value("provenance", std::string("original"));
  if (prov == "original") p.provenance = Provenance::Original;
  else if (prov == "synthetic") p.provenance = Provenance::Synthetic;
  else throw Error(ErrorKind::MalformedRecord, "unknown provenance '" + prov + "'");

  if (j.contains("label") && !j.at("label").is_null()) p.label = j.at("label").get<std::string>();
  if (j.contains("generated_for")) p.generated_for = tag_value_from_json(j.at("generated_for"), vocab);
  validate_post(p);
  return p;
}

/// Parses corpus lines in order; rejects duplicate ids.
inline std::vector<Post> parse_corpus(std::string_view content, const Vocabulary& vocab) {
  std::vector<Post> posts;
  std::set<std::string> seen;
  for_each_jsonl(content, [&](const json& record, std::size_t line) {
    auto where = "line " + std::to_string(line) + ": ";
    Post p;
    try {
      p = post_from_json(record, vocab);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, where + e.what());
    } catch (const Error& e) {
      auto kind = e.kind() == ErrorKind::InvalidArgument ? ErrorKind::MalformedRecord : e.kind();
      throw Error(kind, where + e.message());
    }
    if (!seen.insert(p.id).second) throw Error(ErrorKind::DuplicateId, where + "id '" + p.id + "' already seen");
    posts.push_back(std::move(p));
  });
  return posts;
}

inline std::vector<Post> ingest_corpus(const std::filesystem::path& path, const Vocabulary& vocab) {
  return parse_corpus(read_file(path), vocab);
}

inline std::string serialize_corpus(std::span<const Post> posts) {
  std::string out;
  for (const auto& p : posts) out += post_to_json(p).dump() + '\n';
  return out;
}

inline void export_corpus(const std::filesystem::path& path, std::span<const Post> posts) {
  write_file(path, serialize_corpus(posts));
}

/// Digest over the serialized corpus; stable under file formatting differences.
inline std::string corpus_digest(std::span<const Post> posts) { return sha256_hex(serialize_corpus(posts)); }

struct CorpusStats {
  std::map<std::pair<TagCategory, std::string>, std::size_t> counts;
  std::size_t total_tags = 0;
  std::map<TagCategory, std::size_t> synthetic_counts;

  std::size_t count(TagCategory c, std::string_view id) const {
    auto it = counts.find({c, std::string(id)});
    return it == counts.end() ? 0 : it->second;
  }
  std::size_t category_total(TagCategory c) const {
    std::size_t n = 0;
    for (const auto& [key, v] : counts) {
      if (key.first == c) n += v;
    }
    return n;
  }
  std::size_t synthetic(TagCategory c) const {
    auto it = synthetic_counts.find(c);
    return it == synthetic_counts.end() ? 0 : it->second;
  }
};

inline CorpusStats compute_stats(std::span<const Post> posts) {
  CorpusStats stats;
  for (const auto& p : posts) {
    for (const auto& s : p.spans) {
      ++stats.counts[{s.value.category, s.value.id}];
      ++stats.total_tags;
    }
    if (p.provenance != Provenance::Synthetic) continue;
    std::optional<TagCategory> target;
    if (p.generated_for) {
      target = p.generated_for->category;
    } else {
      for (const auto& s : p.spans) {
        if (is_demographic(s.value.category)) {
          target = s.value.category;
          break;
        }
      }
    }
    if (target) ++stats.synthetic_counts[*target];
  }
  return stats;
}

/// Posts tagged with both values, original before synthetic, then by id.
inline std::vector<Post> filter_posts(std::span<const Post> posts, const TagValue& demographic, const TagValue& condition) {
  if (!is_demographic(demographic.category) || condition.category != TagCategory::Condition) {
    throw Error(ErrorKind::CategoryMismatch, "filter needs a demographic value and a condition");
  }
  std::vector<Post> out;
  for (const auto& p : posts) {
    if (p.has_tag(demographic) && p.has_tag(condition)) out.push_back(p);
  }
  std::sort(out.begin(), out.end(), [](const Post& a, const Post& b) {
    if (a.provenance != b.provenance) return a.provenance == Provenance::Original;
    return a.id < b.id;
  });
  return out;
}

}  // namespace biasprobe
