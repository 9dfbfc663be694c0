#pragma once

// Model-assisted tagging of untagged posts.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "biasprobe/corpus.hpp"
#include "biasprobe/llmgate.hpp"
#include "biasprobe/promptkit.hpp"

namespace biasprobe {

struct TaggingOutcome {
  Post post;
  std::optional<ErrorRecord> error;
  std::vector<std::string> warnings;
};

/// "Example k:" blocks of already-tagged posts, used as the {{examples}} of
/// the tagging prompt.
inline std::string tagging_examples_block(std::span<const Post> tagged) {
  std::vector<std::string> blocks;
  for (std::size_t i = 0; i < tagged.size(); ++i) {
    blocks.push_back("Example " + std::to_string(i + 1) + ":\n" + render_tagged_text(tagged[i]));
  }
  return join(blocks, "\n\n");
}

inline std::string tagging_prompt(const Post& post, std::string_view examples, const Vocabulary& vocab,
                                  const PromptTemplates& templates = {}) {
  std::vector<std::string> names;
  for (auto cat : kAllCategories) {
    for (const auto& v : vocab.values(cat)) names.push_back(v.id);
  }
  return render_template(templates.tagging,
                         {{"examples", std::string(examples)}, {"post", post.text}, {"tags", join(names, ", ")}});
}

namespace detail {

// Maps spans over `tagged_text` onto `original`, given that the two agree
// after whitespace normalization. Non-whitespace bytes correspond one to one,
// so each span is trimmed to its non-whitespace content and carried over by
// ordinal.
inline std::vector<TagSpan> remap_spans(std::string_view tagged_text, std::string_view original,
                                        std::span<const TagSpan> spans) {
  std::vector<std::size_t> ordinal_of(tagged_text.size() + 1, 0);
  std::size_t k = 0;
  for (std::size_t i = 0; i < tagged_text.size(); ++i) {
    ordinal_of[i] = k;
    if (!is_ascii_space(tagged_text[i])) ++k;
  }
  ordinal_of[tagged_text.size()] = k;
  std::vector<std::size_t> position;
  for (std::size_t i = 0; i < original.size(); ++i) {
    if (!is_ascii_space(original[i])) position.push_back(i);
  }
  std::vector<TagSpan> out;
  for (const auto& s : spans) {
    std::size_t first = ordinal_of[s.start];
    std::size_t last = ordinal_of[s.end];  // one past the last non-space ordinal
    if (first >= last || last > position.size()) continue;
    out.push_back({s.value, position[first], position[last - 1] + 1});
  }
  return out;
}

}  // namespace detail

/// Sends each post through the tagging prompt and parses the reply leniently.
/// A reply whose stripped text differs from the post (beyond whitespace) leaves
/// the post untagged with a RoundTripMismatch annotation; backend failures are
/// annotated the same way. Output keeps input order.
inline std::vector<TaggingOutcome> llm_tag_posts(std::span<const Post> posts, Gateway& gateway,
                                                 std::string_view examples, const Vocabulary& vocab,
                                                 const PromptTemplates& templates = {}, std::size_t parallelism = 1) {
  std::vector<TaggingOutcome> out(posts.size());
  parallel_for(posts.size(), parallelism, [&](std::size_t i) {
    const Post& input = posts[i];
    auto& result = out[i];
    result.post = input;
    result.post.spans.clear();
    try {
      auto reply = gateway.complete("tag:" + input.id, tagging_prompt(input, examples, vocab, templates));
      auto parsed = parse_tagged_text(reply.text, vocab, ParseMode::Lenient);
      result.warnings = std::move(parsed.warnings);
      if (parsed.text == input.text) {
        result.post.spans = std::move(parsed.spans);
      } else if (collapse_whitespace(parsed.text) == collapse_whitespace(input.text)) {
        result.post.spans = detail::remap_spans(parsed.text, input.text, parsed.spans);
      } else {
        result.error = ErrorRecord{ErrorKind::RoundTripMismatch,
                                   input.id + ": tagged reply does not reproduce the post text"};
      }
      if (!result.error) validate_post(result.post);
    } catch (const Error& e) {
      result.post.spans.clear();
      result.error = ErrorRecord::from(e);
    }
  });
  return out;
}

}  // namespace biasprobe
