#pragma once

// Subcommand bodies shared by the command-line tool and the tests. Each
// returns its outputs instead of printing so callers decide where text goes.

#include <cstdlib>
#include <filesystem>
#include <map>
#include <optional>
#include <set>
#include <stop_token>
#include <string>
#include <vector>

#include "biasprobe/corpus.hpp"
#include "biasprobe/error.hpp"
#include "biasprobe/llmgate.hpp"
#include "biasprobe/promptkit.hpp"
#include "biasprobe/questgen.hpp"
#include "biasprobe/report.hpp"
#include "biasprobe/scoring.hpp"
#include "biasprobe/tagging.hpp"
#include "biasprobe/text.hpp"
#include "biasprobe/vocabulary.hpp"

namespace biasprobe {

inline std::filesystem::path default_data_dir() {
  if (const char* env = std::getenv("BIASPROBE_DATA_DIR"); env != nullptr && *env != '\0') return env;
#ifdef BIASPROBE_DATA_DIR
  return BIASPROBE_DATA_DIR;
#else
  return "data";
#endif
}

// ---------------------------------------------------------------------------
// Config

struct CliConfig {
  std::filesystem::path corpus;
  std::filesystem::path vocabulary;  // empty: built-in vocabulary
  std::filesystem::path bbq;
  std::filesystem::path templates;  // empty: built-in templates
  std::filesystem::path backend;
  std::string backend_name;
  std::filesystem::path run_dir;
  std::filesystem::path cassette;  // empty: <run_dir>/cassette.json
  std::filesystem::path lexicon;   // empty: bundled lexicon
  std::filesystem::path negators;
  std::filesystem::path tag_examples;
  PromptMode mode = PromptMode::ZeroShot;
  DebiasStrategy strategy = DebiasStrategy::None;
  std::size_t parallelism = 1;
  CassetteMode cassette_mode = CassetteMode::Replay;
  bool allow_synthetic = true;
  std::size_t exemplar_limit = kDefaultExemplarLimit;
  std::vector<std::string> keywords = default_mental_health_keywords();
  std::set<std::string> exemplar_categories = default_exemplar_categories();
  double tau = kDefaultAmplificationThreshold;
  bool only_supported_cells = true;
  std::string created_at;  // empty: now, or the existing manifest's
  std::size_t max_source_length = 0;

  /// Relative paths in the document resolve against `base`.
  static CliConfig from_json(const json& j, const std::filesystem::path& base = {}) {
    static const std::set<std::string> kKeys = {
        "corpus",   "vocabulary",     "bbq",         "templates",     "backend",        "backend_name",
        "run_dir",  "cassette",       "lexicon",     "negators",      "tag_examples",   "mode",
        "strategy", "parallelism",    "cassette_mode", "allow_synthetic", "exemplar_limit", "keywords",
        "exemplar_categories", "tau", "only_supported_cells", "created_at", "max_source_length"};
    if (!j.is_object()) throw Error(ErrorKind::MalformedRecord, "config must be an object");
    for (const auto& [k, v] : j.items()) {
      if (!kKeys.contains(k)) throw Error(ErrorKind::InvalidArgument, "unknown config key '" + k + "'");
    }
    CliConfig c;
    auto path = [&](const char* key, std::filesystem::path& slot) {
      if (!j.contains(key)) return;
      std::filesystem::path p = j.at(key).get<std::string>();
      slot = p.is_relative() && !base.empty() ? base / p : p;
    };
    try {
      path("corpus", c.corpus);
      path("vocabulary", c.vocabulary);
      path("bbq", c.bbq);
      path("templates", c.templates);
      path("backend", c.backend);
      path("run_dir", c.run_dir);
      path("cassette", c.cassette);
      path("lexicon", c.lexicon);
      path("negators", c.negators);
      path("tag_examples", c.tag_examples);
      c.backend_name = j.value("backend_name", c.backend_name);
      if (j.contains("mode")) c.mode = prompt_mode_from_string(j.at("mode").get<std::string>());
      if (j.contains("strategy")) c.strategy = strategy_from_string(j.at("strategy").get<std::string>());
      if (j.contains("cassette_mode")) c.cassette_mode = cassette_mode_from_string(j.at("cassette_mode").get<std::string>());
      c.parallelism = j.value("parallelism", c.parallelism);
      c.allow_synthetic = j.value("allow_synthetic", c.allow_synthetic);
      c.exemplar_limit = j.value("exemplar_limit", c.exemplar_limit);
      c.keywords = j.value("keywords", c.keywords);
      c.exemplar_categories = j.value("exemplar_categories", c.exemplar_categories);
      c.tau = j.value("tau", c.tau);
      c.only_supported_cells = j.value("only_supported_cells", c.only_supported_cells);
      c.created_at = j.value("created_at", c.created_at);
      c.max_source_length = j.value("max_source_length", c.max_source_length);
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, std::string("config: ") + e.what());
    }
    return c;
  }

  static CliConfig load(const std::filesystem::path& path) {
    try {
      return from_json(json::parse(read_file(path)), path.parent_path());
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::MalformedRecord, path.string() + ": " + e.what());
    }
  }

  void validate() const {
    if (parallelism == 0) throw Error(ErrorKind::InvalidArgument, "parallelism must be >= 1");
    if (!(tau >= 0)) throw Error(ErrorKind::InvalidArgument, "tau must be >= 0");
    for (const auto* p : {&corpus, &vocabulary, &bbq, &templates, &backend, &lexicon, &negators, &tag_examples}) {
      if (!p->empty() && !std::filesystem::exists(*p)) {
        throw Error(ErrorKind::IoError, "path does not exist: " + p->string());
      }
    }
  }
};

inline void require_path(const std::filesystem::path& p, std::string_view what) {
  if (p.empty()) throw Error(ErrorKind::InvalidArgument, "no " + std::string(what) + " given");
}

/// Process exit status for an error kind.
inline int exit_code_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return 1;
    case ErrorKind::CassetteMiss: return 2;
    case ErrorKind::BackendError:
    case ErrorKind::AuthMissing:
    case ErrorKind::EmptyGeneration: return 3;
    case ErrorKind::IoError:
    case ErrorKind::ManifestMismatch: return 5;
    case ErrorKind::MissingRun: return 6;
    case ErrorKind::Interrupted: return 130;
    default: return 4;
  }
}

/// Interrupted wins; otherwise the smallest code among the errors.
inline int exit_code_for(std::span<const ErrorRecord> errors) {
  int code = 0;
  for (const auto& e : errors) {
    int c = exit_code_for(e.kind);
    if (c == 130) return c;
    if (code == 0 || c < code) code = c;
  }
  return code;
}

inline Vocabulary load_vocabulary(const CliConfig& c) {
  return c.vocabulary.empty() ? Vocabulary::canonical() : Vocabulary::load(c.vocabulary);
}

inline PromptTemplates load_templates(const CliConfig& c) {
  return c.templates.empty() ? PromptTemplates{} : PromptTemplates::load(c.templates);
}

inline SentimentLexicon load_lexicon(const CliConfig& c) {
  auto lex = c.lexicon.empty() ? default_data_dir() / "lexicon.tsv" : c.lexicon;
  auto neg = c.negators.empty() ? default_data_dir() / "negators.txt" : c.negators;
  return SentimentLexicon::load(lex, neg);
}

inline std::vector<Exemplar> load_run_exemplars(const CliConfig& c) {
  if (c.mode == PromptMode::ZeroShot) return {};
  require_path(c.bbq, "exemplar file (bbq)");
  auto all = load_exemplars(c.bbq);
  return filter_exemplars(all, c.exemplar_categories, c.keywords, c.exemplar_limit);
}

/// The question grid, optionally restricted to cells with at least one
/// original post.
inline std::vector<Question> run_questions(const Vocabulary& vocab, std::span<const Post> posts,
                                           const PromptTemplates& templates, bool only_supported) {
  auto grid = generate_grid(vocab, templates.question);
  if (!only_supported) return grid;
  std::vector<Question> out;
  for (auto& q : grid) {
    auto matches = filter_posts(posts, q.demographic, q.condition);
    bool supported = std::any_of(matches.begin(), matches.end(),
                                 [](const Post& p) { return p.provenance == Provenance::Original; });
    if (supported) out.push_back(std::move(q));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Scoring a stored run

struct BundleMeta {
  std::string id;
  TagValue demographic;
  TagValue condition;
  Framing framing = Framing::Positive;
  PromptMode mode = PromptMode::ZeroShot;
  DebiasStrategy strategy = DebiasStrategy::None;
  std::size_t synthetic_source_count = 0;

  static BundleMeta from_json(const json& j) {
    BundleMeta m;
    try {
      m.id = j.at("id").get<std::string>();
      auto cat = category_from_string(j.at("demographic_category").get<std::string>());
      if (!cat || !is_demographic(*cat)) throw Error(ErrorKind::MalformedRecord, "bad demographic category in prompt record");
      m.demographic = {*cat, j.at("demographic").get<std::string>(), j.at("demographic").get<std::string>()};
      m.condition = {TagCategory::Condition, j.at("condition").get<std::string>(), j.at("condition").get<std::string>()};
      auto f = framing_from_string(j.at("framing").get<std::string>());
      if (!f) throw Error(ErrorKind::MalformedRecord, "bad framing in prompt record " + m.id);
      m.framing = *f;
      m.mode = prompt_mode_from_string(j.at("mode").get<std::string>());
      m.strategy = strategy_from_string(j.at("strategy").get<std::string>());
      m.synthetic_source_count = j.at("synthetic_source_count").get<std::size_t>();
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, std::string("prompt record: ") + e.what());
    }
    return m;
  }
};

struct ScoreOutcome {
  std::vector<ScoredResponse> responses;
  CellTable cells;
  std::map<SliceKey, BiasScores> slices;  // all responses
  std::vector<ScoreRecord> records;
  std::vector<std::string> warnings;
};

namespace detail {

inline void add_records(std::string_view subset, const std::map<SliceKey, BiasScores>& slices,
                        std::vector<ScoreRecord>& records, std::vector<std::string>& warnings) {
  for (const auto& [slice, s] : slices) {
    for (auto d : kDimensions) {
      const auto& v = d == "tone" ? s.tone : d == "demographic" ? s.demographic : s.condition;
      if (v) records.push_back({slice, std::string(subset), std::string(d), *v, s.cell_count});
    }
    for (const auto& w : s.warnings) warnings.push_back(std::string(subset) + " " + slice.label() + ": " + w);
  }
}

}  // namespace detail

/// Scores each successful response, aggregates cells and computes every
/// dimension, once over all responses and once over responses built only from
/// original posts.
inline ScoreOutcome score_records(const std::string& model, std::span<const BundleMeta> prompts,
                                  std::span<const BatchItem> items, const SentimentLexicon& lexicon) {
  std::map<std::string, const BundleMeta*> by_id;
  for (const auto& p : prompts) by_id[p.id] = &p;
  ScoreOutcome out;
  for (const auto& item : items) {
    if (!item.ok()) continue;
    auto it = by_id.find(item.bundle_id);
    if (it == by_id.end()) {
      out.warnings.push_back(item.bundle_id + ": response without prompt record; skipped");
      continue;
    }
    const auto& m = *it->second;
    out.responses.push_back({m.id, model, m.mode, m.strategy, m.demographic, m.condition, m.framing,
                             score_sentiment(item.response->text, lexicon), m.synthetic_source_count});
  }
  if (out.responses.empty()) {
    out.warnings.push_back("no responses to score");
    return out;
  }
  out.cells = aggregate_cells(out.responses);
  out.slices = score_all_slices(out.cells);
  detail::add_records("all", out.slices, out.records, out.warnings);

  std::vector<ScoredResponse> original;
  std::copy_if(out.responses.begin(), out.responses.end(), std::back_inserter(original),
               [](const ScoredResponse& r) { return r.synthetic_source_count == 0; });
  if (original.empty()) {
    out.warnings.push_back("original_only: every response used a synthetic source");
  } else {
    detail::add_records("original_only", score_all_slices(aggregate_cells(original)), out.records, out.warnings);
  }
  return out;
}

struct StoredRun {
  RunManifest manifest;
  std::vector<BundleMeta> prompts;
  std::vector<BatchItem> responses;
};

inline StoredRun load_run(const std::filesystem::path& run_dir) {
  StoredRun run;
  run.manifest = RunManifest::load(run_dir);
  auto read_lines = [&](std::string_view name, auto fn) {
    auto path = run_dir / name;
    if (!std::filesystem::exists(path)) throw Error(ErrorKind::MissingRun, path.string() + " is missing");
    try {
      for_each_jsonl(read_file(path), [&](const json& j, std::size_t) { fn(j); });
    } catch (const Error& e) {
      throw Error(e.kind(), path.string() + ": " + e.message());
    }
  };
  read_lines(run_files::kPrompts, [&](const json& j) { run.prompts.push_back(BundleMeta::from_json(j)); });
  read_lines(run_files::kResponses, [&](const json& j) {
    try {
      run.responses.push_back(BatchItem::from_json(j));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, e.what());
    }
  });
  return run;
}

inline void write_scores(const std::filesystem::path& run_dir, const ScoreOutcome& scores) {
  std::string records;
  for (const auto& r : scores.records) records += r.to_json().dump() + '\n';
  std::string cells;
  for (const auto& [k, c] : scores.cells) cells += cell_to_json(k, c).dump() + '\n';
  write_file(run_dir / run_files::kScores, records);
  write_file(run_dir / run_files::kCells, cells);
}

inline std::vector<ReportRow> report_rows(const ScoreOutcome& scores) {
  std::vector<ReportRow> rows;
  for (const auto& [slice, s] : scores.slices) {
    rows.push_back({slice.model, slice.mode, slice.strategy, s.tone, s.demographic, s.condition});
  }
  return rows;
}

/// Rescores a stored run in place: rewrites scores, cells and the manifest's
/// scoring warnings.
inline ScoreOutcome score_run(const std::filesystem::path& run_dir, const SentimentLexicon& lexicon) {
  auto run = load_run(run_dir);
  auto scores = score_records(run.manifest.backend_name, run.prompts, run.responses, lexicon);
  write_scores(run_dir, scores);
  run.manifest.score_warnings = scores.warnings;
  write_file(run_dir / run_files::kManifest, run.manifest.to_json().dump(2) + "\n");
  return scores;
}

// ---------------------------------------------------------------------------
// run

struct RunOutcome {
  RunManifest manifest;
  std::vector<PromptBundle> bundles;
  std::vector<BatchItem> items;
  std::vector<ErrorRecord> hard_errors;
  ScoreOutcome scores;

  int exit_code() const { return exit_code_for(hard_errors); }
};

namespace detail {

inline std::string run_id_for(const RunManifest& m) {
  json cfg = {{"backend", m.backend_name},      {"model_id", m.model_id},
              {"mode", to_string(m.mode)},      {"strategy", to_string(m.strategy)},
              {"templates", m.template_hashes}, {"corpus", m.corpus_digest}};
  return sha256_hex(cfg.dump()).substr(0, 16);
}

inline std::filesystem::path cassette_path(const CliConfig& c) {
  return c.cassette.empty() ? c.run_dir / run_files::kCassette : c.cassette;
}

inline std::map<std::string, BatchItem> reusable_responses(const std::filesystem::path& run_dir) {
  std::map<std::string, BatchItem> out;
  auto path = run_dir / run_files::kResponses;
  if (!std::filesystem::exists(path)) return out;
  for_each_jsonl(read_file(path), [&](const json& j, std::size_t) {
    auto item = BatchItem::from_json(j);
    if (item.ok()) out.emplace(item.bundle_id, std::move(item));
  });
  return out;
}

}  // namespace detail

/// Questions, sources, prompts, dispatch, persistence. A run directory that
/// already holds a run with the same configuration is resumed: stored
/// successful responses whose prompt hash still matches are kept and only the
/// rest are dispatched.
inline RunOutcome execute_run(const CliConfig& config, Transport transport = {}, GatewayOptions gateway_options = {},
                              std::stop_token stop = {}) {
  config.validate();
  require_path(config.corpus, "corpus");
  require_path(config.backend, "backend config");
  require_path(config.run_dir, "run directory");

  auto vocab = load_vocabulary(config);
  auto posts = ingest_corpus(config.corpus, vocab);
  auto templates = load_templates(config);
  auto exemplars = load_run_exemplars(config);
  auto backend = BackendConfig::load(config.backend, config.backend_name);
  auto lexicon = load_lexicon(config);

  RunOutcome out;
  auto& m = out.manifest;
  m.backend_name = backend.name;
  m.model_id = backend.model_id;
  m.mode = config.mode;
  m.strategy = config.strategy;
  m.template_hashes = templates.hashes();
  m.corpus_digest = corpus_digest(posts);
  m.run_id = detail::run_id_for(m);

  auto existing = check_resume(config.run_dir, m);
  m.created_at = !config.created_at.empty() ? config.created_at
                 : existing                 ? existing->created_at
                                            : utc_timestamp_now();
  auto reusable = existing ? detail::reusable_responses(config.run_dir) : std::map<std::string, BatchItem>{};

  Cassette cassette = Cassette::load(detail::cassette_path(config), config.cassette_mode);
  Gateway gateway(backend, cassette, std::move(transport), std::move(gateway_options));

  // Sources are chosen once per (demographic, condition) so both framings see
  // the same posts, including any synthetic ones.
  auto questions = run_questions(vocab, posts, templates, config.only_supported_cells);
  std::map<std::pair<std::string, std::string>, std::optional<SourceSelection>> cells;
  PromptOptions options{config.max_source_length};
  for (const auto& q : questions) {
    auto key = std::make_pair(q.demographic.id, q.condition.id);
    auto found = cells.find(key);
    if (found == cells.end()) {
      std::optional<SourceSelection> sel;
      try {
        sel = select_sources(posts, q, config.allow_synthetic, &gateway, vocab, templates);
        m.warnings.insert(m.warnings.end(), sel->warnings.begin(), sel->warnings.end());
        if (sel->synthetic_count > 0) {
          m.counts.synthetic_sources += sel->synthetic_count;
          m.synthetic_by_category[std::string(to_string(q.demographic.category))] += sel->synthetic_count;
        }
      } catch (const Error& e) {
        if (e.kind() == ErrorKind::InsufficientSources) {
          m.warnings.push_back("cell (" + q.demographic.id + ", " + q.condition.id + ") skipped: " + e.message());
        } else {
          out.hard_errors.push_back(ErrorRecord::from(e));
          m.warnings.push_back("cell (" + q.demographic.id + ", " + q.condition.id + ") failed: " + e.what());
        }
      }
      found = cells.emplace(key, std::move(sel)).first;
    }
    if (!found->second) continue;
    out.bundles.push_back(build_prompt(q, found->second->sources, config.mode, config.strategy, exemplars, templates, options));
  }
  std::sort(out.bundles.begin(), out.bundles.end(), [](const PromptBundle& a, const PromptBundle& b) { return a.id < b.id; });

  std::vector<CompletionRequest> pending;
  for (const auto& b : out.bundles) {
    auto it = reusable.find(b.id);
    if (it != reusable.end() && it->second.content_hash == b.content_hash) {
      out.items.push_back(it->second);
    } else {
      pending.push_back(b.request());
    }
  }
  auto fresh = run_batch(gateway, pending, config.parallelism, stop);
  out.items.insert(out.items.end(), fresh.begin(), fresh.end());
  std::sort(out.items.begin(), out.items.end(), [](const BatchItem& a, const BatchItem& b) { return a.bundle_id < b.bundle_id; });

  bool interrupted = false;
  for (const auto& item : out.items) {
    if (item.ok()) {
      ++m.counts.responses;
      continue;
    }
    ++m.counts.errors;
    if (item.error->kind == ErrorKind::Interrupted) interrupted = true;
    else out.hard_errors.push_back(*item.error);
    m.warnings.push_back(item.bundle_id + ": " + item.error->describe());
  }
  if (interrupted) out.hard_errors.push_back({ErrorKind::Interrupted, "run interrupted; rerun to resume"});
  m.counts.prompts = out.bundles.size();

  std::vector<BundleMeta> metas;
  for (const auto& b : out.bundles) metas.push_back(BundleMeta::from_json(b.to_json()));
  out.scores = score_records(m.backend_name, metas, out.items, lexicon);
  m.score_warnings = out.scores.warnings;

  persist_run(config.run_dir, m, out.bundles, out.items, out.scores.records);
  write_scores(config.run_dir, out.scores);
  auto used = gateway.used_hashes();
  write_file(config.run_dir / run_files::kCassette, cassette.dump(&used));
  if (config.cassette_mode == CassetteMode::Record && !config.cassette.empty()) cassette.save(config.cassette);
  return out;
}

// ---------------------------------------------------------------------------
// ablate

struct AblationOutcome {
  std::vector<PromptBundle> bundles;
  std::vector<BatchItem> items;
  std::vector<AmplificationTrace> traces;
  std::vector<std::string> warnings;
  std::vector<ErrorRecord> hard_errors;

  int exit_code() const { return exit_code_for(hard_errors); }
};

inline std::string traces_jsonl(std::span<const AmplificationTrace> traces) {
  std::string out;
  for (const auto& t : traces) out += trace_to_json(t).dump() + '\n';
  return out;
}

/// Prefix ablation: every supported question is asked with its first one, two
/// and three sources, and each hop's response contributes to the
/// demographic-axis disparity at that hop.
inline AblationOutcome execute_ablation(const CliConfig& config, Transport transport = {},
                                        GatewayOptions gateway_options = {}, std::stop_token stop = {}) {
  config.validate();
  require_path(config.corpus, "corpus");
  require_path(config.backend, "backend config");
  require_path(config.run_dir, "run directory");

  auto vocab = load_vocabulary(config);
  auto posts = ingest_corpus(config.corpus, vocab);
  auto templates = load_templates(config);
  auto exemplars = load_run_exemplars(config);
  auto backend = BackendConfig::load(config.backend, config.backend_name);
  auto lexicon = load_lexicon(config);

  Cassette cassette = Cassette::load(detail::cassette_path(config), config.cassette_mode);
  Gateway gateway(backend, cassette, std::move(transport), std::move(gateway_options));

  AblationOutcome out;
  std::map<std::string, Question> by_bundle;
  PromptOptions options{config.max_source_length};
  for (const auto& q : run_questions(vocab, posts, templates, config.only_supported_cells)) {
    SourceSelection sel;
    try {
      sel = select_sources(posts, q, config.allow_synthetic, &gateway, vocab, templates);
    } catch (const Error& e) {
      if (e.kind() == ErrorKind::InsufficientSources) {
        out.warnings.push_back(q.id + " skipped: " + e.message());
      } else {
        out.hard_errors.push_back(ErrorRecord::from(e));
      }
      continue;
    }
    out.warnings.insert(out.warnings.end(), sel.warnings.begin(), sel.warnings.end());
    for (std::size_t hops = 1; hops <= kSourcesPerQuestion; ++hops) {
      auto b = build_hop_prompt(q, sel.sources, hops, config.mode, config.strategy, exemplars, templates, options);
      by_bundle.emplace(b.id, q);
      out.bundles.push_back(std::move(b));
    }
  }
  std::sort(out.bundles.begin(), out.bundles.end(), [](const PromptBundle& a, const PromptBundle& b) { return a.id < b.id; });
  out.items = run_batch(gateway, out.bundles, config.parallelism, stop);

  std::map<std::string, std::vector<HopObservation>> per_question;
  std::set<std::string> failed;
  for (const auto& item : out.items) {
    const auto& q = by_bundle.at(item.bundle_id);
    if (!item.ok()) {
      out.hard_errors.push_back(*item.error);
      failed.insert(q.id);
      continue;
    }
    int hops = item.bundle_id.back() - '0';
    per_question[q.id].push_back({q, hops, score_sentiment(item.response->text, lexicon)});
  }

  // A question enters the traces only with all three hops and at least one
  // peer on its demographic axis.
  using PeerKey = std::tuple<TagCategory, TagValue, Framing>;
  std::map<PeerKey, std::vector<std::string>> peers;
  for (const auto& [qid, obs] : per_question) {
    if (failed.contains(qid) || obs.size() != kSourcesPerQuestion) continue;
    const auto& q = obs.front().question;
    peers[{q.demographic.category, q.condition, q.framing}].push_back(qid);
  }
  std::vector<HopObservation> usable;
  for (const auto& [key, ids] : peers) {
    if (ids.size() < 2) {
      out.warnings.push_back(ids.front() + ": no demographic peer; skipped");
      continue;
    }
    for (const auto& id : ids) usable.insert(usable.end(), per_question[id].begin(), per_question[id].end());
  }
  if (!usable.empty()) out.traces = hop_traces(usable, config.tau);

  std::error_code ec;
  std::filesystem::create_directories(config.run_dir, ec);
  if (ec) throw Error(ErrorKind::IoError, "cannot create " + config.run_dir.string() + ": " + ec.message());
  std::string prompts;
  for (const auto& b : out.bundles) prompts += b.to_json().dump() + '\n';
  std::string responses;
  for (const auto& r : out.items) responses += r.to_json().dump() + '\n';
  write_file(config.run_dir / run_files::kPrompts, prompts);
  write_file(config.run_dir / run_files::kResponses, responses);
  write_file(config.run_dir / run_files::kAblation, traces_jsonl(out.traces));
  auto used = gateway.used_hashes();
  write_file(config.run_dir / run_files::kCassette, cassette.dump(&used));
  if (config.cassette_mode == CassetteMode::Record && !config.cassette.empty()) cassette.save(config.cassette);
  return out;
}

inline std::vector<AmplificationTrace> load_traces(const std::filesystem::path& dir) {
  auto path = dir / run_files::kAblation;
  if (!std::filesystem::exists(path)) throw Error(ErrorKind::MissingRun, path.string() + " is missing");
  std::vector<AmplificationTrace> out;
  for_each_jsonl(read_file(path), [&](const json& j, std::size_t) {
    try {
      out.push_back(trace_from_json(j));
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, e.what());
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// report

struct ReportOutcome {
  BiasReport report;
  std::vector<std::string> warnings;
};

/// Scores each run, pairs runs of the same model into reductions, and attaches
/// the traces of any ablation directories.
inline ReportOutcome build_report(std::span<const std::filesystem::path> runs,
                                  std::span<const std::filesystem::path> ablations, const SentimentLexicon& lexicon) {
  ReportOutcome out;
  std::set<std::tuple<std::string, PromptMode, DebiasStrategy>> seen;
  for (const auto& dir : runs) {
    auto run = load_run(dir);
    auto scores = score_records(run.manifest.backend_name, run.prompts, run.responses, lexicon);
    for (const auto& w : scores.warnings) out.warnings.push_back(dir.filename().string() + ": " + w);
    for (auto& row : report_rows(scores)) {
      if (!seen.insert({row.model, row.mode, row.strategy}).second) {
        out.warnings.push_back(dir.string() + ": duplicate " + row.model + " " + std::string(to_string(row.mode)) +
                               "/" + std::string(to_string(row.strategy)) + " row ignored");
        continue;
      }
      out.report.rows.push_back(std::move(row));
    }
  }
  out.report = out.report.canonical();
  out.report.reductions = compute_reductions(out.report.rows, &out.warnings);
  for (const auto& dir : ablations) {
    auto traces = load_traces(dir);
    out.report.amplification.insert(out.report.amplification.end(), traces.begin(), traces.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// tag

struct TagOutcome {
  std::vector<Post> posts;
  std::size_t tagged = 0;
  std::size_t mismatches = 0;
  std::vector<std::string> warnings;
  std::vector<ErrorRecord> hard_errors;

  int exit_code() const { return exit_code_for(hard_errors); }
};

/// Model-assisted tagging. Round-trip mismatches leave the post untagged and
/// are counted, not fatal.
inline TagOutcome execute_tagging(const CliConfig& config, Transport transport = {}, GatewayOptions gateway_options = {}) {
  config.validate();
  require_path(config.corpus, "corpus");
  require_path(config.backend, "backend config");
  auto vocab = load_vocabulary(config);
  auto posts = ingest_corpus(config.corpus, vocab);
  auto templates = load_templates(config);
  std::vector<Post> examples;
  if (!config.tag_examples.empty()) examples = ingest_corpus(config.tag_examples, vocab);
  auto backend = BackendConfig::load(config.backend, config.backend_name);
  auto cassette_file = config.cassette.empty() && !config.run_dir.empty() ? config.run_dir / run_files::kCassette
                                                                           : config.cassette;
  require_path(cassette_file, "cassette");
  Cassette cassette = Cassette::load(cassette_file, config.cassette_mode);
  Gateway gateway(backend, cassette, std::move(transport), std::move(gateway_options));

  TagOutcome out;
  auto results = llm_tag_posts(posts, gateway, tagging_examples_block(examples), vocab, templates, config.parallelism);
  for (auto& r : results) {
    out.warnings.insert(out.warnings.end(), r.warnings.begin(), r.warnings.end());
    if (r.error) {
      out.warnings.push_back(r.error->describe());
      if (r.error->kind == ErrorKind::RoundTripMismatch) ++out.mismatches;
      else out.hard_errors.push_back(*r.error);
    } else {
      ++out.tagged;
    }
    out.posts.push_back(std::move(r.post));
  }
  if (config.cassette_mode == CassetteMode::Record) cassette.save(cassette_file);
  return out;
}

struct ValidationOutcome {
  std::size_t checked = 0;
  std::vector<std::string> failures;
};

/// Re-parses a tagged corpus and checks render(parse(x)) == x per post.
inline ValidationOutcome validate_corpus(const std::filesystem::path& corpus, const Vocabulary& vocab) {
  ValidationOutcome out;
  auto posts = ingest_corpus(corpus, vocab);
  for (const auto& p : posts) {
    ++out.checked;
    auto rendered = render_tagged_text(p);
    auto reparsed = parse_tagged_text(rendered, vocab);
    if (reparsed.text != p.text || render_tagged_text(reparsed.text, reparsed.spans) != rendered) {
      out.failures.push_back(p.id + ": render/parse round trip differs");
    }
  }
  return out;
}

}  // namespace biasprobe
