#pragma once

// Run persistence and table emission.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "biasprobe/corpus.hpp"
#include "biasprobe/error.hpp"
#include "biasprobe/llmgate.hpp"
#include "biasprobe/promptkit.hpp"
#include "biasprobe/scoring.hpp"
#include "biasprobe/text.hpp"

namespace biasprobe {

namespace run_files {
inline constexpr std::string_view kManifest = "manifest.json";
inline constexpr std::string_view kPrompts = "prompts.jsonl";
inline constexpr std::string_view kResponses = "responses.jsonl";
inline constexpr std::string_view kScores = "scores.jsonl";
inline constexpr std::string_view kCells = "cells.jsonl";
inline constexpr std::string_view kCassette = "cassette.json";
inline constexpr std::string_view kAblation = "ablation.jsonl";
}  // namespace run_files

struct RunCounts {
  std::size_t prompts = 0;
  std::size_t responses = 0;
  std::size_t errors = 0;
  std::size_t synthetic_sources = 0;

  bool operator==(const RunCounts&) const = default;
};

struct RunManifest {
  std::string run_id;
  std::string created_at;
  std::string backend_name;
  std::string model_id;
  PromptMode mode = PromptMode::ZeroShot;
  DebiasStrategy strategy = DebiasStrategy::None;
  std::map<std::string, std::string> template_hashes;
  std::string corpus_digest;
  RunCounts counts;
  std::map<std::string, std::size_t> synthetic_by_category;
  std::vector<std::string> warnings;
  std::vector<std::string> score_warnings;

  /// Everything that decides prompt content; a resumed run must match it.
  bool same_config(const RunManifest& o) const {
    return backend_name == o.backend_name && model_id == o.model_id && mode == o.mode && strategy == o.strategy &&
           template_hashes == o.template_hashes && corpus_digest == o.corpus_digest;
  }

  json to_json() const {
    return {{"run_id", run_id},
            {"created_at", created_at},
            {"config",
             {{"backend", backend_name},
              {"model_id", model_id},
              {"mode", to_string(mode)},
              {"strategy", to_string(strategy)},
              {"template_hashes", template_hashes}}},
            {"corpus_digest", corpus_digest},
            {"counts",
             {{"prompts", counts.prompts},
              {"responses", counts.responses},
              {"errors", counts.errors},
              {"synthetic_sources", counts.synthetic_sources}}},
            {"synthetic_by_category", synthetic_by_category},
            {"warnings", warnings},
            {"score_warnings", score_warnings}};
  }

  static RunManifest from_json(const json& j) {
    RunManifest m;
    try {
      m.run_id = j.at("run_id").get<std::string>();
      m.created_at = j.at("created_at").get<std::string>();
      const auto& c = j.at("config");
      m.backend_name = c.at("backend").get<std::string>();
      m.model_id = c.at("model_id").get<std::string>();
      m.mode = prompt_mode_from_string(c.at("mode").get<std::string>());
      m.strategy = strategy_from_string(c.at("strategy").get<std::string>());
      m.template_hashes = c.at("template_hashes").get<std::map<std::string, std::string>>();
      m.corpus_digest = j.at("corpus_digest").get<std::string>();
      const auto& n = j.at("counts");
      m.counts = {n.at("prompts").get<std::size_t>(), n.at("responses").get<std::size_t>(),
                  n.at("errors").get<std::size_t>(), n.at("synthetic_sources").get<std::size_t>()};
      m.synthetic_by_category = j.value("synthetic_by_category", std::map<std::string, std::size_t>{});
      m.warnings = j.value("warnings", std::vector<std::string>{});
      m.score_warnings = j.value("score_warnings", std::vector<std::string>{});
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, std::string("manifest: ") + e.what());
    }
    return m;
  }

  static RunManifest load(const std::filesystem::path& run_dir) {
    auto path = run_dir / run_files::kManifest;
    if (!std::filesystem::exists(path)) throw Error(ErrorKind::MissingRun, "no manifest in " + run_dir.string());
    try {
      return from_json(json::parse(read_file(path)));
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::MalformedRecord, path.string() + ": " + e.what());
    }
  }
};

/// Fails with ManifestMismatch when `run_dir` already holds a run whose
/// configuration differs from `manifest`. Returns the existing manifest, if any.
inline std::optional<RunManifest> check_resume(const std::filesystem::path& run_dir, const RunManifest& manifest) {
  if (!std::filesystem::exists(run_dir / run_files::kManifest)) return std::nullopt;
  auto existing = RunManifest::load(run_dir);
  if (!existing.same_config(manifest)) {
    std::string detail;
    if (existing.template_hashes != manifest.template_hashes) detail = "template hashes differ";
    else if (existing.corpus_digest != manifest.corpus_digest) detail = "corpus digest differs";
    else detail = "backend, mode or strategy differs";
    throw Error(ErrorKind::ManifestMismatch, run_dir.string() + ": " + detail);
  }
  return existing;
}

/// Score-export record {model, mode, strategy, subset, dimension, score, cell_count}.
struct ScoreRecord {
  SliceKey slice;
  std::string subset;  // "all" or "original_only"
  std::string dimension;
  double score = 0.0;
  std::size_t cell_count = 0;

  json to_json() const {
    return {{"model", slice.model},       {"mode", to_string(slice.mode)}, {"strategy", to_string(slice.strategy)},
            {"subset", subset},           {"dimension", dimension},        {"score", score},
            {"cell_count", cell_count}};
  }
};

inline json cell_to_json(const CellKey& k, const Cell& c) {
  return {{"model", k.slice.model},
          {"mode", to_string(k.slice.mode)},
          {"strategy", to_string(k.slice.strategy)},
          {"demographic", k.demographic.id},
          {"demographic_category", to_string(k.demographic.category)},
          {"condition", k.condition.id},
          {"framing", to_string(k.framing)},
          {"mean_sentiment", c.mean},
          {"count", c.count}};
}

/// Writes the manifest plus one structured-line file each for prompts,
/// responses, and scores. Identical inputs give identical bytes.
inline void persist_run(const std::filesystem::path& run_dir, const RunManifest& manifest,
                        std::span<const PromptBundle> bundles, std::span<const BatchItem> responses,
                        std::span<const ScoreRecord> scores, bool resume = false) {
  if (resume) check_resume(run_dir, manifest);
  std::error_code ec;
  std::filesystem::create_directories(run_dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + run_dir.string() + ": " + ec.message());

  std::string prompts;
  for (const auto& b : bundles) prompts += b.to_json().dump() + '\n';
  std::string resp;
  for (const auto& r : responses) resp += r.to_json().dump() + '\n';
  std::string sc;
  for (const auto& s : scores) sc += s.to_json().dump() + '\n';

  write_file(run_dir / run_files::kPrompts, prompts);
  write_file(run_dir / run_files::kResponses, resp);
  write_file(run_dir / run_files::kScores, sc);
  write_file(run_dir / run_files::kManifest, manifest.to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------------------
// Bias report

inline constexpr std::array<std::string_view, 3> kDimensions = {"tone", "demographic", "condition"};

inline std::string_view dimension_title(std::string_view d) {
  if (d == "tone") return "Sentiment/Tone";
  if (d == "demographic") return "Demographic";
  if (d == "condition") return "Mental Health Condition";
  return d;
}

struct ReportRow {
  std::string model;
  PromptMode mode = PromptMode::ZeroShot;
  DebiasStrategy strategy = DebiasStrategy::None;
  std::optional<double> tone;
  std::optional<double> demographic;
  std::optional<double> condition;

  std::optional<double> get(std::string_view d) const {
    if (d == "tone") return tone;
    if (d == "demographic") return demographic;
    return condition;
  }
  std::optional<double>& slot(std::string_view d) {
    if (d == "tone") return tone;
    if (d == "demographic") return demographic;
    return condition;
  }
  bool operator==(const ReportRow&) const = default;
};

struct ReductionRow {
  std::string model;
  std::string dimension;
  std::string baseline;      // "zero_shot/none"
  std::string intervention;  // "few_shot/none"
  double before = 0.0;
  double after = 0.0;
  double percent = 0.0;

  bool operator==(const ReductionRow&) const = default;
};

struct BiasReport {
  std::vector<ReportRow> rows;
  std::vector<ReductionRow> reductions;
  std::vector<AmplificationTrace> amplification;

  bool empty() const { return rows.empty() && reductions.empty() && amplification.empty(); }

  /// Same content with rows in (model, mode, strategy) order; equality of
  /// canonical forms is report equality.
  BiasReport canonical() const {
    auto c = *this;
    std::stable_sort(c.rows.begin(), c.rows.end(), [](const ReportRow& a, const ReportRow& b) {
      return std::tie(a.model, a.mode, a.strategy) < std::tie(b.model, b.mode, b.strategy);
    });
    return c;
  }
  bool operator==(const BiasReport&) const = default;
};

/// Pairs each row with its baseline: few-shot against zero-shot under the
/// same strategy, and each debiasing strategy against `none` under the same
/// mode. Zero baselines are skipped with a warning.
inline std::vector<ReductionRow> compute_reductions(std::span<const ReportRow> rows, std::vector<std::string>* warnings = nullptr) {
  auto find = [&](const std::string& model, PromptMode m, DebiasStrategy s) -> const ReportRow* {
    for (const auto& r : rows) {
      if (r.model == model && r.mode == m && r.strategy == s) return &r;
    }
    return nullptr;
  };
  auto label = [](const ReportRow& r) { return std::string(to_string(r.mode)) + "/" + std::string(to_string(r.strategy)); };
  std::vector<ReductionRow> out;
  for (const auto& row : rows) {
    std::vector<const ReportRow*> baselines;
    if (row.mode == PromptMode::FewShot) baselines.push_back(find(row.model, PromptMode::ZeroShot, row.strategy));
    if (row.strategy != DebiasStrategy::None) baselines.push_back(find(row.model, row.mode, DebiasStrategy::None));
    for (const auto* base : baselines) {
      if (base == nullptr) continue;
      for (auto d : kDimensions) {
        auto before = base->get(d);
        auto after = row.get(d);
        if (!before || !after) continue;
        if (!(*before > 0)) {
          if (warnings) warnings->push_back(row.model + " " + std::string(d) + ": zero baseline in " + label(*base));
          continue;
        }
        out.push_back({row.model, std::string(d), label(*base), label(row), *before, *after,
                       reduction_percent(*before, *after)});
      }
    }
  }
  return out;
}

enum class TableFormat { Markdown, Csv, Json };

inline TableFormat table_format_from_string(std::string_view s) {
  if (s == "markdown" || s == "md") return TableFormat::Markdown;
  if (s == "csv") return TableFormat::Csv;
  if (s == "json") return TableFormat::Json;
  throw Error(ErrorKind::InvalidArgument, "unknown format '" + std::string(s) + "'");
}

namespace detail {

inline std::string cell3(const std::optional<double>& v) { return v ? format_fixed(*v, 3) : "n/a"; }

inline std::string percent_label(double p) { return std::to_string(std::lround(p)) + "%"; }

inline std::string section_title(PromptMode m, DebiasStrategy s) {
  std::string mode = m == PromptMode::ZeroShot ? "Zero-Shot" : "Few-Shot";
  switch (s) {
    case DebiasStrategy::None: return mode;
    case DebiasStrategy::Roleplay: return mode + " (roleplay)";
    case DebiasStrategy::Explicit: return mode + " (explicit debiasing)";
  }
  return mode;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += "\"\"";
    else out += c;
  }
  return out + "\"";
}

inline std::vector<std::string> parse_csv_line(std::string_view line) {
  std::vector<std::string> fields;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      fields.push_back(std::move(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  fields.push_back(std::move(cur));
  return fields;
}

inline std::string emit_markdown(const BiasReport& report) {
  std::string out;
  for (auto s : kAllStrategies) {
    for (auto m : kAllModes) {
      std::vector<const ReportRow*> section;
      for (const auto& r : report.rows) {
        if (r.mode == m && r.strategy == s) section.push_back(&r);
      }
      if (section.empty()) continue;
      if (!out.empty()) out += '\n';
      out += "## " + section_title(m, s) + "\n\n";
      out += "| Model | Sentiment/Tone | Demographic | Mental Health Condition |\n";
      out += "|---|---|---|---|\n";
      for (const auto* r : section) {
        out += "| " + r->model + " | " + cell3(r->tone) + " | " + cell3(r->demographic) + " | " +
               cell3(r->condition) + " |\n";
      }
    }
  }
  if (!report.reductions.empty()) {
    if (!out.empty()) out += '\n';
    out += "## Reductions\n\n";
    out += "| Model | Dimension | Baseline | Intervention | Before | After | Reduction |\n";
    out += "|---|---|---|---|---|---|---|\n";
    for (const auto& r : report.reductions) {
      out += "| " + r.model + " | " + std::string(dimension_title(r.dimension)) + " | " + r.baseline + " | " +
             r.intervention + " | " + format_fixed(r.before, 3) + " | " + format_fixed(r.after, 3) + " | " +
             percent_label(r.percent) + " |\n";
    }
  }
  if (!report.amplification.empty()) {
    if (!out.empty()) out += '\n';
    out += "## Amplification\n\n";
    out += "| Question | B1 | B2 | B3 | Threshold | Amplification points |\n";
    out += "|---|---|---|---|---|---|\n";
    for (const auto& t : report.amplification) {
      std::vector<std::string> pts;
      for (int k : t.amplification_points) pts.push_back(std::to_string(k));
      out += "| " + t.question_id + " | " + format_fixed(t.bias_by_hops[0], 3) + " | " +
             format_fixed(t.bias_by_hops[1], 3) + " | " + format_fixed(t.bias_by_hops[2], 3) + " | " +
             format_fixed(t.tau, 3) + " | " + (pts.empty() ? std::string("none") : join(pts, ", ")) + " |\n";
    }
  }
  return out;
}

inline std::string emit_csv(const BiasReport& report) {
  std::string out = "model,mode,strategy,dimension,score\n";
  for (const auto& r : report.rows) {
    for (auto d : kDimensions) {
      auto v = r.get(d);
      if (!v) continue;
      out += csv_field(r.model) + "," + std::string(to_string(r.mode)) + "," + std::string(to_string(r.strategy)) +
             "," + std::string(d) + "," + format_roundtrip(*v) + "\n";
    }
  }
  return out;
}

inline std::string emit_json(const BiasReport& report) {
  ordered_json models = ordered_json::object();
  for (const auto& r : report.rows) {
    ordered_json scores = ordered_json::object();
    for (auto d : kDimensions) {
      auto v = r.get(d);
      scores[std::string(d)] = v ? ordered_json(*v) : ordered_json(nullptr);
    }
    models[r.model][std::string(to_string(r.mode))][std::string(to_string(r.strategy))] = scores;
  }
  ordered_json reductions = ordered_json::array();
  for (const auto& r : report.reductions) {
    reductions.push_back({{"model", r.model},
                          {"dimension", r.dimension},
                          {"baseline", r.baseline},
                          {"intervention", r.intervention},
                          {"before", r.before},
                          {"after", r.after},
                          {"percent", r.percent}});
  }
  ordered_json amplification = ordered_json::array();
  for (const auto& t : report.amplification) amplification.push_back(ordered_json::parse(trace_to_json(t).dump()));
  ordered_json doc = {{"models", models}, {"reductions", reductions}, {"amplification", amplification}};
  return doc.dump(2) + "\n";
}

}  // namespace detail

/// Markdown mirrors the Zero-Shot / Few-Shot tables (three decimals); CSV and
/// JSON keep full precision.
inline std::string emit_table(const BiasReport& report, TableFormat format) {
  if (report.empty()) throw Error(ErrorKind::EmptyReport, "report has no rows");
  switch (format) {
    case TableFormat::Markdown: return detail::emit_markdown(report);
    case TableFormat::Csv: return detail::emit_csv(report);
    case TableFormat::Json: return detail::emit_json(report);
  }
  return {};
}

/// Inverse of the CSV emission (score rows only).
inline BiasReport parse_report_csv(std::string_view csv) {
  BiasReport report;
  auto lines = split(csv, '\n');
  if (lines.empty() || trim(lines[0]) != "model,mode,strategy,dimension,score") {
    throw Error(ErrorKind::MalformedRecord, "csv header must be model,mode,strategy,dimension,score");
  }
  for (std::size_t i = 1; i < lines.size(); ++i) {
    if (trim(lines[i]).empty()) continue;
    auto f = detail::parse_csv_line(lines[i]);
    if (f.size() != 5) throw Error(ErrorKind::MalformedRecord, "csv line " + std::to_string(i + 1) + ": expected 5 fields");
    auto mode = prompt_mode_from_string(f[1]);
    auto strategy = strategy_from_string(f[2]);
    auto it = std::find_if(report.rows.begin(), report.rows.end(), [&](const ReportRow& r) {
      return r.model == f[0] && r.mode == mode && r.strategy == strategy;
    });
    if (it == report.rows.end()) {
      report.rows.push_back({f[0], mode, strategy, {}, {}, {}});
      it = std::prev(report.rows.end());
    }
    if (std::find(kDimensions.begin(), kDimensions.end(), f[3]) == kDimensions.end()) {
      throw Error(ErrorKind::MalformedRecord, "unknown dimension '" + f[3] + "'");
    }
    it->slot(f[3]) = parse_double(f[4]);
  }
  return report;
}

inline BiasReport parse_report_json(std::string_view text) {
  BiasReport report;
  try {
    auto doc = ordered_json::parse(text);
    for (const auto& [model, modes] : doc.at("models").items()) {
      for (const auto& [mode, strategies] : modes.items()) {
        for (const auto& [strategy, scores] : strategies.items()) {
          ReportRow row{model, prompt_mode_from_string(mode), strategy_from_string(strategy), {}, {}, {}};
          for (auto d : kDimensions) {
            const auto& v = scores.at(std::string(d));
            if (!v.is_null()) row.slot(d) = v.get<double>();
          }
          report.rows.push_back(row);
        }
      }
    }
    for (const auto& r : doc.at("reductions")) {
      report.reductions.push_back({r.at("model").get<std::string>(), r.at("dimension").get<std::string>(),
                                   r.at("baseline").get<std::string>(), r.at("intervention").get<std::string>(),
                                   r.at("before").get<double>(), r.at("after").get<double>(),
                                   r.at("percent").get<double>()});
    }
    for (const auto& t : doc.at("amplification")) report.amplification.push_back(trace_from_json(json::parse(t.dump())));
  } catch (const json::exception& e) {
    throw Error(ErrorKind::MalformedRecord, std::string("report json: ") + e.what());
  }
  return report;
}

// ---------------------------------------------------------------------------
// Tag distributions

namespace detail {

inline std::vector<std::pair<std::string, std::size_t>> sorted_counts(const CorpusStats& stats, TagCategory c) {
  std::vector<std::pair<std::string, std::size_t>> rows;
  for (const auto& [key, n] : stats.counts) {
    if (key.first == c) rows.emplace_back(key.second, n);
  }
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  return rows;
}

inline std::string category_title(TagCategory c) {
  switch (c) {
    case TagCategory::Age: return "Age";
    case TagCategory::Gender: return "Gender";
    case TagCategory::Race: return "Race";
    case TagCategory::Ses: return "Socioeconomic Status";
    case TagCategory::Condition: return "Mental Health Condition";
  }
  return "?";
}

}  // namespace detail

/// Per-category frequency tables, rows by descending count then id, followed
/// by synthetic-post counts per demographic category.
inline std::string emit_distributions(const CorpusStats& stats, TableFormat format) {
  switch (format) {
    case TableFormat::Markdown: {
      std::string out;
      for (auto c : kAllCategories) {
        if (!out.empty()) out += '\n';
        out += "## " + detail::category_title(c) + "\n\n| Value | Count |\n|---|---|\n";
        for (const auto& [id, n] : detail::sorted_counts(stats, c)) out += "| " + id + " | " + std::to_string(n) + " |\n";
      }
      out += "\n## Synthetic Posts\n\n| Category | Count |\n|---|---|\n";
      for (const auto& [c, n] : stats.synthetic_counts) {
        out += "| " + std::string(to_string(c)) + " | " + std::to_string(n) + " |\n";
      }
      return out;
    }
    case TableFormat::Csv: {
      std::string out = "category,value,count\n";
      for (auto c : kAllCategories) {
        for (const auto& [id, n] : detail::sorted_counts(stats, c)) {
          out += std::string(to_string(c)) + "," + id + "," + std::to_string(n) + "\n";
        }
      }
      return out;
    }
    case TableFormat::Json: {
      ordered_json doc = ordered_json::object();
      for (auto c : kAllCategories) {
        ordered_json rows = ordered_json::array();
        for (const auto& [id, n] : detail::sorted_counts(stats, c)) rows.push_back({{"value", id}, {"count", n}});
        doc[std::string(to_string(c))] = rows;
      }
      ordered_json syn = ordered_json::object();
      for (const auto& [c, n] : stats.synthetic_counts) syn[std::string(to_string(c))] = n;
      doc["total_tags"] = stats.total_tags;
      doc["synthetic"] = syn;
      return doc.dump(2) + "\n";
    }
  }
  return {};
}

}  // namespace biasprobe
