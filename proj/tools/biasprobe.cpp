// biasprobe command-line tool.

#include <atomic>
#include <csignal>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "biasprobe/biasprobe.hpp"
#include "biasprobe/http_transport.hpp"

namespace bp = biasprobe;
namespace fs = std::filesystem;

namespace {

std::atomic<bool> g_interrupted{false};

extern "C" void on_sigint(int) { g_interrupted.store(true); }

// Turns SIGINT into a stop request for the batch dispatcher.
class InterruptWatch {
 public:
  InterruptWatch() {
    std::signal(SIGINT, on_sigint);
    thread_ = std::jthread([this](std::stop_token self) {
      while (!self.stop_requested()) {
        if (g_interrupted.load()) {
          source_.request_stop();
          return;
        }
        std::this_thread::sleep_for(std::chrono::milliseconds(50));
      }
    });
  }
  std::stop_token token() const { return source_.get_token(); }

 private:
  std::stop_source source_;
  std::jthread thread_;
};

// Flag values; unset ones leave the config file's value alone.
struct Overrides {
  std::string config;
  std::optional<std::string> corpus, vocabulary, bbq, templates, backend, backend_name, run_dir, cassette, lexicon,
      negators, tag_examples, mode, strategy, cassette_mode, created_at;
  std::optional<std::size_t> parallelism, exemplar_limit, max_source_length;
  std::optional<double> tau;
  std::optional<bool> only_supported, allow_synthetic;
  std::vector<std::string> keywords;
};

bp::CliConfig resolve(const Overrides& o) {
  bp::CliConfig c = o.config.empty() ? bp::CliConfig{} : bp::CliConfig::load(o.config);
  auto set_path = [](const std::optional<std::string>& v, fs::path& slot) {
    if (v) slot = *v;
  };
  set_path(o.corpus, c.corpus);
  set_path(o.vocabulary, c.vocabulary);
  set_path(o.bbq, c.bbq);
  set_path(o.templates, c.templates);
  set_path(o.backend, c.backend);
  set_path(o.run_dir, c.run_dir);
  set_path(o.cassette, c.cassette);
  set_path(o.lexicon, c.lexicon);
  set_path(o.negators, c.negators);
  set_path(o.tag_examples, c.tag_examples);
  if (o.backend_name) c.backend_name = *o.backend_name;
  if (o.mode) c.mode = bp::prompt_mode_from_string(*o.mode);
  if (o.strategy) c.strategy = bp::strategy_from_string(*o.strategy);
  if (o.cassette_mode) c.cassette_mode = bp::cassette_mode_from_string(*o.cassette_mode);
  if (o.created_at) c.created_at = *o.created_at;
  if (o.parallelism) c.parallelism = *o.parallelism;
  if (o.exemplar_limit) c.exemplar_limit = *o.exemplar_limit;
  if (o.max_source_length) c.max_source_length = *o.max_source_length;
  if (o.tau) c.tau = *o.tau;
  if (o.only_supported) c.only_supported_cells = *o.only_supported;
  if (o.allow_synthetic) c.allow_synthetic = *o.allow_synthetic;
  if (!o.keywords.empty()) c.keywords = o.keywords;
  c.validate();
  return c;
}

void add_corpus_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("-c,--config", o.config, "Config file (JSON); flags override its values");
  cmd->add_option("--corpus", o.corpus, "Post corpus (JSON lines)");
  cmd->add_option("--vocabulary", o.vocabulary, "Tag vocabulary file");
  cmd->add_option("--templates", o.templates, "Prompt template directory");
}

void add_backend_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--backend", o.backend, "Backend config file");
  cmd->add_option("--backend-name", o.backend_name, "Backend entry to use when the file lists several");
  cmd->add_option("--cassette", o.cassette, "Cassette file");
  cmd->add_option("--cassette-mode", o.cassette_mode, "record, replay or passthrough")
      ->check(CLI::IsMember({"record", "replay", "passthrough"}));
  cmd->add_option("-j,--parallelism", o.parallelism, "Requests in flight")->check(CLI::PositiveNumber);
}

void add_run_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--run-dir", o.run_dir, "Run directory");
  cmd->add_option("--mode", o.mode, "zero|few")->check(CLI::IsMember({"zero", "few", "zero_shot", "few_shot"}));
  cmd->add_option("--strategy", o.strategy, "none|roleplay|explicit")
      ->check(CLI::IsMember({"none", "roleplay", "explicit"}));
  cmd->add_option("--bbq", o.bbq, "Exemplar file for few-shot prompts");
  cmd->add_option("--exemplar-limit", o.exemplar_limit, "Maximum exemplars in the few-shot block");
  cmd->add_option("--keyword", o.keywords, "Exemplar keyword (repeatable)");
  cmd->add_option("--max-source-length", o.max_source_length, "Truncate each source to this many bytes (0 = off)");
  cmd->add_option("--created-at", o.created_at, "Timestamp recorded in the manifest");
  cmd->add_flag("--only-supported-cells,!--all-cells", o.only_supported,
                "Only cells with at least one original post (default) or the whole grid");
  cmd->add_flag("--synthetic,!--no-synthetic", o.allow_synthetic, "Top up cells with generated posts");
}

void add_lexicon_options(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--lexicon", o.lexicon, "Sentiment lexicon (token<TAB>valence)");
  cmd->add_option("--negators", o.negators, "Negator list");
}

void print_warnings(const std::vector<std::string>& warnings) {
  for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
}

void print_errors(const std::vector<bp::ErrorRecord>& errors) {
  for (const auto& e : errors) std::cerr << "error: " << e.describe() << '\n';
}

void emit(const std::string& text, const std::string& out) {
  if (out.empty()) std::cout << text;
  else bp::write_file(out, text);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Intersectional bias probing for model answers about mental health"};
  app.require_subcommand(1);
  Overrides o;
  std::string out;
  std::string format = "markdown";
  bool validate_only = false;
  std::vector<std::string> runs;
  std::vector<std::string> ablations;

  auto* tag = app.add_subcommand("tag", "Tag posts with the model and write the tagged corpus");
  add_corpus_options(tag, o);
  add_backend_options(tag, o);
  tag->add_option("--examples", o.tag_examples, "Tagged posts shown to the model as examples");
  tag->add_option("-o,--out", out, "Tagged corpus output");
  tag->add_flag("--validate", validate_only, "Only re-parse the corpus and check render/parse round trips");

  auto* stats = app.add_subcommand("stats", "Tag frequency tables");
  add_corpus_options(stats, o);
  stats->add_option("--format", format, "markdown, csv or json")->check(CLI::IsMember({"markdown", "csv", "json"}));
  stats->add_option("-o,--out", out, "Output file (default stdout)");

  auto* gen = app.add_subcommand("gen-questions", "Write the question grid as JSON lines");
  add_corpus_options(gen, o);
  gen->add_flag("--only-supported-cells,!--all-cells", o.only_supported,
                "With --corpus, keep only cells that have an original post");
  gen->add_option("-o,--out", out, "Output file (default stdout)");

  auto* run = app.add_subcommand("run", "Build prompts, query the backend and persist a run");
  add_corpus_options(run, o);
  add_backend_options(run, o);
  add_run_options(run, o);
  add_lexicon_options(run, o);

  auto* score = app.add_subcommand("score", "Rescore stored runs");
  score->add_option("--run", runs, "Run directory (repeatable)")->required();
  score->add_option("-c,--config", o.config, "Config file (JSON)");
  add_lexicon_options(score, o);

  auto* ablate = app.add_subcommand("ablate", "Hop ablation over 1, 2 and 3 sources");
  add_corpus_options(ablate, o);
  add_backend_options(ablate, o);
  add_run_options(ablate, o);
  add_lexicon_options(ablate, o);
  ablate->add_option("--tau", o.tau, "Amplification threshold")->check(CLI::NonNegativeNumber);

  auto* report = app.add_subcommand("report", "Bias tables across runs");
  report->add_option("--run", runs, "Run directory (repeatable)");
  report->add_option("--ablation", ablations, "Ablation directory (repeatable)");
  report->add_option("-c,--config", o.config, "Config file (JSON)");
  add_lexicon_options(report, o);
  report->add_option("--format", format, "markdown, csv or json")->check(CLI::IsMember({"markdown", "csv", "json"}));
  report->add_option("-o,--out", out, "Output file (default stdout)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    auto config = resolve(o);

    if (tag->parsed()) {
      auto vocab = bp::load_vocabulary(config);
      if (validate_only) {
        bp::require_path(config.corpus, "corpus");
        auto v = bp::validate_corpus(config.corpus, vocab);
        for (const auto& f : v.failures) std::cerr << "error: " << f << '\n';
        std::cerr << "checked " << v.checked << " posts, " << v.failures.size() << " round-trip failures\n";
        return v.failures.empty() ? 0 : 4;
      }
      if (out.empty()) throw bp::Error(bp::ErrorKind::InvalidArgument, "tag needs --out");
      auto result = bp::execute_tagging(config, bp::make_http_transport());
      print_warnings(result.warnings);
      print_errors(result.hard_errors);
      bp::export_corpus(out, result.posts);
      std::cerr << "tagged " << result.tagged << " of " << result.posts.size() << " posts, " << result.mismatches
                << " round-trip mismatches\n";
      return result.exit_code();
    }

    if (stats->parsed()) {
      bp::require_path(config.corpus, "corpus");
      auto posts = bp::ingest_corpus(config.corpus, bp::load_vocabulary(config));
      emit(bp::emit_distributions(bp::compute_stats(posts), bp::table_format_from_string(format)), out);
      return 0;
    }

    if (gen->parsed()) {
      auto vocab = bp::load_vocabulary(config);
      auto templates = bp::load_templates(config);
      std::vector<bp::Question> questions;
      if (config.corpus.empty()) {
        questions = bp::generate_grid(vocab, templates.question);
      } else {
        auto posts = bp::ingest_corpus(config.corpus, vocab);
        questions = bp::run_questions(vocab, posts, templates, config.only_supported_cells);
      }
      emit(bp::export_questions(questions), out);
      return 0;
    }

    if (run->parsed() || ablate->parsed()) {
      InterruptWatch watch;
      if (run->parsed()) {
        auto result = bp::execute_run(config, bp::make_http_transport(), {}, watch.token());
        print_warnings(result.manifest.warnings);
        print_errors(result.hard_errors);
        const auto& n = result.manifest.counts;
        std::cerr << "run " << result.manifest.run_id << ": " << n.prompts << " prompts, " << n.responses
                  << " responses, " << n.errors << " errors, " << n.synthetic_sources << " synthetic sources\n";
        return result.exit_code();
      }
      auto result = bp::execute_ablation(config, bp::make_http_transport(), {}, watch.token());
      print_warnings(result.warnings);
      print_errors(result.hard_errors);
      if (!result.traces.empty()) {
        bp::BiasReport r;
        r.amplification = result.traces;
        std::cout << bp::emit_table(r, bp::TableFormat::Markdown);
      }
      return result.exit_code();
    }

    auto lexicon = bp::load_lexicon(config);

    if (score->parsed()) {
      for (const auto& dir : runs) {
        auto scores = bp::score_run(dir, lexicon);
        print_warnings(scores.warnings);
        bp::BiasReport r;
        r.rows = bp::report_rows(scores);
        if (!r.rows.empty()) std::cout << bp::emit_table(r, bp::TableFormat::Markdown);
      }
      return 0;
    }

    if (report->parsed()) {
      std::vector<fs::path> run_paths(runs.begin(), runs.end());
      std::vector<fs::path> ablation_paths(ablations.begin(), ablations.end());
      auto result = bp::build_report(run_paths, ablation_paths, lexicon);
      print_warnings(result.warnings);
      emit(bp::emit_table(result.report, bp::table_format_from_string(format)), out);
      return 0;
    }
  } catch (const bp::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return bp::exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 4;
  }
  return 0;
}
