#pragma once

#include <algorithm>
#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "biasprobe/error.hpp"
#include "biasprobe/text.hpp"

namespace biasprobe {

enum class TagCategory { Age, Gender, Race, Ses, Condition };

inline constexpr std::array<TagCategory, 5> kAllCategories = {
    TagCategory::Age, TagCategory::Gender, TagCategory::Race, TagCategory::Ses, TagCategory::Condition};
inline constexpr std::array<TagCategory, 4> kDemographicCategories = {
    TagCategory::Age, TagCategory::Gender, TagCategory::Race, TagCategory::Ses};

inline std::string_view to_string(TagCategory c) {
  switch (c) {
    case TagCategory::Age: return "age";
    case TagCategory::Gender: return "gender";
    case TagCategory::Race: return "race";
    case TagCategory::Ses: return "ses";
    case TagCategory::Condition: return "condition";
  }
  return "?";
}

inline std::optional<TagCategory> category_from_string(std::string_view s) {
  for (auto c : kAllCategories) {
    if (to_string(c) == s) return c;
  }
  return std::nullopt;
}

inline bool is_demographic(TagCategory c) { return c != TagCategory::Condition; }

/// One entry of the tag vocabulary. Identity is (category, id); the display
/// name is presentation only.
struct TagValue {
  TagCategory category = TagCategory::Age;
  std::string id;
  std::string display_name;

  bool operator==(const TagValue& o) const { return category == o.category && id == o.id; }
  auto operator<=>(const TagValue& o) const {
    if (auto c = category <=> o.category; c != 0) return c;
    return id <=> o.id;
  }
};

class Vocabulary {
 public:
  struct Entry {
    TagValue value;
    std::vector<std::string> aliases;
  };

  Vocabulary() = default;

  explicit Vocabulary(std::vector<Entry> entries) {
    for (auto& e : entries) add(std::move(e));
  }

  /// Four demographic axes plus the seven tracked conditions.
  static Vocabulary canonical() {
    using C = TagCategory;
    return Vocabulary({
        {{C::Age, "child", "Child"}, {"ch", "children"}},
        {{C::Age, "young_adult", "Young-Adult"}, {"ya", "young adult"}},
        {{C::Age, "adult", "Adult"}, {"ad"}},
        {{C::Age, "senior", "Senior"}, {"sr", "elderly"}},
        {{C::Gender, "female", "Female"}, {"f", "woman", "women", "girl"}},
        {{C::Gender, "male", "Male"}, {"m", "man", "men", "boy"}},
        {{C::Race, "american_indian_or_indigenous", "American Indian/Indigenous"},
         {"ai/i", "american indian", "american indian and native", "indigenous"}},
        {{C::Race, "asian", "Asian"}, {"a"}},
        {{C::Race, "black_or_african_american", "Black/African American"}, {"b/a", "black", "african american"}},
        {{C::Race, "white", "White"}, {"w"}},
        {{C::Race, "hispanic_or_latino", "Hispanic or Latino"}, {"h/l", "hispanic/latino", "hispanic", "latino"}},
        {{C::Ses, "low_income", "Low-Income"}, {"li", "low_~income"}},
        {{C::Ses, "middle_income", "Middle-Income"}, {"mi"}},
        {{C::Ses, "high_income", "High-Income"}, {"hi"}},
        {{C::Condition, "depression", "Depression"}, {"dep"}},
        {{C::Condition, "anxiety", "Anxiety"}, {"anx"}},
        {{C::Condition, "social_anxiety", "Social Anxiety"}, {"sax"}},
        {{C::Condition, "bipolar_disorder", "Bipolar Disorder"}, {"bdo", "bipolar"}},
        {{C::Condition, "ocd", "OCD"}, {"obsessive compulsive disorder"}},
        {{C::Condition, "eating_disorder", "Eating Disorder"}, {"edo"}},
        {{C::Condition, "addiction", "Addiction"}, {"add"}},
    });
  }

  /// Accepts a JSON array of {category, canonical_id, display_name, aliases[]}.
  static Vocabulary from_json(const json& doc) {
    if (!doc.is_array()) throw Error(ErrorKind::MalformedRecord, "vocabulary must be a JSON array");
    Vocabulary v;
    std::size_t index = 0;
    for (const auto& item : doc) {
      ++index;
      auto where = "vocabulary entry " + std::to_string(index);
      try {
        auto cat = category_from_string(item.at("category").get<std::string>());
        if (!cat) throw Error(ErrorKind::MalformedRecord, where + ": unknown category");
        Entry e{{*cat, item.at("canonical_id").get<std::string>(), item.at("display_name").get<std::string>()}, {}};
        if (item.contains("aliases")) e.aliases = item.at("aliases").get<std::vector<std::string>>();
        v.add(std::move(e));
      } catch (const json::exception& ex) {
        throw Error(ErrorKind::MalformedRecord, where + ": " + ex.what());
      }
    }
    return v;
  }

  static Vocabulary load(const std::filesystem::path& path) {
    auto text = read_file(path);
    try {
      return from_json(json::parse(text));
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::MalformedRecord, path.string() + ": " + e.what());
    }
  }

  json to_json() const {
    json out = json::array();
    for (const auto& e : entries_) {
      out.push_back({{"category", to_string(e.value.category)},
                     {"canonical_id", e.value.id},
                     {"display_name", e.value.display_name},
                     {"aliases", e.aliases}});
    }
    return out;
  }

  /// Resolves a raw markup name (any spelling that normalizes to an id, display
  /// name or alias).
  const TagValue* resolve(std::string_view raw_name) const {
    auto it = names_.find(normalize_name(raw_name));
    return it == names_.end() ? nullptr : &entries_[it->second].value;
  }

  const TagValue* find(TagCategory category, std::string_view id) const {
    for (const auto& e : entries_) {
      if (e.value.category == category && e.value.id == id) return &e.value;
    }
    return nullptr;
  }

  const TagValue& at(TagCategory category, std::string_view id) const {
    if (const auto* v = find(category, id)) return *v;
    throw Error(ErrorKind::InvalidArgument,
                "no tag value '" + std::string(id) + "' in category " + std::string(to_string(category)));
  }

  /// Looks up an id in any category; ids are unique vocabulary-wide.
  const TagValue* find_id(std::string_view id) const {
    for (const auto& e : entries_) {
      if (e.value.id == id) return &e.value;
    }
    return nullptr;
  }

  /// Values of one category ordered by canonical id.
  std::vector<TagValue> values(TagCategory category) const {
    std::vector<TagValue> out;
    for (const auto& e : entries_) {
      if (e.value.category == category) out.push_back(e.value);
    }
    std::sort(out.begin(), out.end());
    return out;
  }

  /// All spellings (normalized) that resolve to `value`.
  std::vector<std::string> names_for(const TagValue& value) const {
    std::vector<std::string> out;
    for (const auto& [name, idx] : names_) {
      if (entries_[idx].value == value) out.push_back(name);
    }
    return out;
  }

  const std::vector<Entry>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  void add(Entry e) {
    if (e.value.id.empty() || normalize_name(e.value.id) != e.value.id) {
      throw Error(ErrorKind::MalformedRecord, "canonical id '" + e.value.id + "' is not lowercase snake_case");
    }
    if (find(e.value.category, e.value.id) != nullptr) {
      throw Error(ErrorKind::DuplicateId, "duplicate canonical id '" + e.value.id + "'");
    }
    std::size_t idx = entries_.size();
    std::vector<std::string> spellings{e.value.id, e.value.display_name};
    spellings.insert(spellings.end(), e.aliases.begin(), e.aliases.end());
    for (const auto& s : spellings) {
      auto name = normalize_name(s);
      if (name.empty()) continue;
      auto [it, inserted] = names_.emplace(name, idx);
      if (!inserted && it->second != idx) {
        throw Error(ErrorKind::DuplicateId, "tag name '" + name + "' maps to both '" +
                                                entries_[it->second].value.id + "' and '" + e.value.id + "'");
      }
    }
    entries_.push_back(std::move(e));
  }

  std::vector<Entry> entries_;
  std::map<std::string, std::size_t> names_;
};

}  // namespace biasprobe
