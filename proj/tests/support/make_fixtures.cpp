// Regenerates the bundled replay fixtures. Run after changing templates, the
// sample corpus, the lexicon, or the mock backend script.

#include <iostream>

#include "replay_fixture.hpp"

namespace fx = biasprobe::fixture;

int main() {
  try {
    auto scratch = std::filesystem::temp_directory_path() / "biasprobe-fixture-gen";
    std::filesystem::remove_all(scratch);
    auto cassette = fx::sample_dir() / "cassette.json";
    fx::record_sample_cassette(cassette, scratch / "record");
    auto replay = fx::replay_sample(cassette, scratch / "replay", 1);
    biasprobe::write_file(fx::sample_dir() / "expected" / "scores.jsonl", replay.scores);
    biasprobe::write_file(fx::sample_dir() / "expected" / "report.md", replay.report);
    fx::record_ablation_cassette(fx::ablation_dir() / "cassette.json", scratch / "ablation");
    std::filesystem::remove_all(scratch);
    std::cout << replay.report;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
