#include <gtest/gtest.h>

#include <atomic>
#include <mutex>
#include <thread>

#include "biasprobe/llmgate.hpp"
#include "biasprobe/tagging.hpp"
#include "test_util.hpp"

using namespace biasprobe;
using biasprobe::testutil::fixture_path;
using biasprobe::testutil::TempDir;

namespace {

BackendConfig backend(std::string auth_env = {}) {
  BackendConfig c;
  c.name = "mock";
  c.endpoint = "http://127.0.0.1:9/";
  c.auth_env = std::move(auth_env);
  c.max_retries = 3;
  return c;
}

std::string reply_body(const std::string& text) {
  return json{{"choices", json::array({{{"message", {{"content", text}}}}})}}.dump();
}

GatewayOptions quiet(std::vector<std::chrono::milliseconds>* sleeps = nullptr) {
  GatewayOptions o;
  o.sleep = [sleeps](std::chrono::milliseconds d) {
    if (sleeps) sleeps->push_back(d);
  };
  o.uniform = [] { return 0.5; };
  o.getenv = [](const char* name) -> const char* { return std::string(name) == "SET_KEY" ? "k" : nullptr; };
  return o;
}

std::string words(std::size_t n) {
  std::string out;
  for (std::size_t i = 0; i < n; ++i) out += (i ? " w" : "w");
  return out;
}

}  // namespace

TEST(Cassette, ReplayHitAndMiss) {
  Cassette c(CassetteMode::Replay, {{sha256_hex("prompt"), CassetteEntry{"stored", "mock", "t", 12.5, 2}}});
  Gateway gw(backend(), c);
  auto r = gw.complete("b1", "prompt");
  EXPECT_EQ(r.text, "stored");
  EXPECT_EQ(r.attempt, 2);
  EXPECT_EQ(r.content_hash, sha256_hex("prompt"));
  EXPECT_FALSE(r.over_limit);
  try {
    gw.complete("b2", "other");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::CassetteMiss);
    EXPECT_NE(e.message().find(sha256_hex("other")), std::string::npos);
  }
}

TEST(Cassette, WordLimitFlag) {
  Cassette c(CassetteMode::Replay, {{sha256_hex("a"), CassetteEntry{words(121), "mock"}},
                                    {sha256_hex("b"), CassetteEntry{words(120), "mock"}}});
  Gateway gw(backend(), c);
  auto over = gw.complete("a", "a");
  EXPECT_EQ(over.word_count, 121u);
  EXPECT_TRUE(over.over_limit);
  EXPECT_FALSE(gw.complete("b", "b").over_limit);
}

TEST(Cassette, RecordThenReplayFromDisk) {
  TempDir dir;
  Cassette rec(CassetteMode::Record);
  int calls = 0;
  Gateway gw(backend(), rec, [&](const HttpRequest&) -> HttpResponse {
    ++calls;
    return {200, reply_body("live"), {}};
  }, quiet());
  EXPECT_EQ(gw.complete("x", "p").text, "live");
  EXPECT_EQ(calls, 1);
  rec.save(dir / "c.json");
  auto replay = Cassette::load(dir / "c.json", CassetteMode::Replay);
  Gateway gw2(backend(), replay);
  EXPECT_EQ(gw2.complete("x", "p").text, "live");
  EXPECT_EQ(Cassette::load(dir / "none.json", CassetteMode::Replay).size(), 0u);
  EXPECT_ERROR_KIND(Cassette::parse("[1,2", CassetteMode::Replay), ErrorKind::MalformedRecord);
}

TEST(Gateway, RetriesWithBackoff) {
  std::vector<std::chrono::milliseconds> sleeps;
  Cassette c(CassetteMode::Passthrough);
  int calls = 0;
  Gateway gw(backend(), c, [&](const HttpRequest&) -> HttpResponse {
    ++calls;
    if (calls == 1) return {429, "slow down", {}};
    if (calls == 2) return {0, {}, "connection reset"};
    if (calls == 3) return {503, "busy", {}};
    return {200, reply_body("ok"), {}};
  }, quiet(&sleeps));
  auto r = gw.complete("b", "p");
  EXPECT_EQ(r.text, "ok");
  EXPECT_EQ(r.attempt, 4);
  EXPECT_EQ(sleeps, (std::vector<std::chrono::milliseconds>{std::chrono::milliseconds(1000), std::chrono::milliseconds(2000),
                                                            std::chrono::milliseconds(4000)}));
}

TEST(Gateway, GivesUpAfterMaxRetries) {
  std::vector<std::chrono::milliseconds> sleeps;
  Cassette c(CassetteMode::Passthrough);
  int calls = 0;
  Gateway gw(backend(), c, [&](const HttpRequest&) -> HttpResponse {
    ++calls;
    return {500, "boom", {}};
  }, quiet(&sleeps));
  EXPECT_ERROR_KIND(gw.complete("b", "p"), ErrorKind::BackendError);
  EXPECT_EQ(calls, 4);
  EXPECT_EQ(sleeps.size(), 3u);
}

TEST(Gateway, ClientErrorsAreNotRetried) {
  Cassette c(CassetteMode::Passthrough);
  int calls = 0;
  Gateway gw(backend(), c, [&](const HttpRequest&) -> HttpResponse {
    ++calls;
    return {400, "bad request", {}};
  }, quiet());
  EXPECT_ERROR_KIND(gw.complete("b", "p"), ErrorKind::BackendError);
  EXPECT_EQ(calls, 1);
}

TEST(Gateway, BackoffJitterBounds) {
  ExponentialBackoff b(std::chrono::milliseconds(100), 2.0, 0.2);
  EXPECT_EQ(b.delay(0, 0.0).count(), 80);
  EXPECT_EQ(b.delay(0, 0.5).count(), 100);
  EXPECT_EQ(b.delay(2, 1.0).count(), 480);
}

TEST(Gateway, AuthFromEnvironmentOnly) {
  Cassette c(CassetteMode::Passthrough);
  std::string seen;
  Transport t = [&](const HttpRequest& req) -> HttpResponse {
    for (const auto& [k, v] : req.headers) {
      if (k == "Authorization") seen = v;
    }
    return {200, reply_body("ok"), {}};
  };
  Gateway missing(backend("UNSET_KEY"), c, t, quiet());
  EXPECT_ERROR_KIND(missing.complete("b", "p"), ErrorKind::AuthMissing);
  Gateway ok(backend("SET_KEY"), c, t, quiet());
  ok.complete("b", "p");
  EXPECT_EQ(seen, "Bearer k");
  EXPECT_ERROR_KIND(BackendConfig::from_json(json{{"name", "x"}, {"api_key", "secret"}}), ErrorKind::InvalidArgument);
}

TEST(Gateway, AnthropicStyleBody) {
  EXPECT_EQ(extract_completion_text(json::parse(R"({"content":[{"type":"text","text":"a"},{"type":"text","text":"b"}]})")), "ab");
  EXPECT_ERROR_KIND(extract_completion_text(json::object()), ErrorKind::BackendError);
}

TEST(Batch, EmptyInput) {
  Cassette c(CassetteMode::Replay);
  Gateway gw(backend(), c);
  EXPECT_TRUE(run_batch(gw, std::span<const CompletionRequest>{}, 4).empty());
}

TEST(Batch, SortedByIdRegardlessOfCompletionOrder) {
  std::vector<CompletionRequest> reqs;
  std::map<std::string, CassetteEntry> entries;
  for (int i = 9; i >= 0; --i) {
    auto prompt = "prompt " + std::to_string(i);
    reqs.push_back({"b" + std::to_string(i), prompt});
    entries[sha256_hex(prompt)] = CassetteEntry{"answer " + std::to_string(i), "mock"};
  }
  for (std::size_t par : {1u, 4u, 16u}) {
    Cassette c(CassetteMode::Replay, entries);
    Gateway gw(backend(), c);
    auto items = run_batch(gw, reqs, par);
    ASSERT_EQ(items.size(), 10u);
    for (int i = 0; i < 10; ++i) {
      EXPECT_EQ(items[static_cast<std::size_t>(i)].bundle_id, "b" + std::to_string(i));
      ASSERT_TRUE(items[static_cast<std::size_t>(i)].ok());
      EXPECT_EQ(items[static_cast<std::size_t>(i)].response->text, "answer " + std::to_string(i));
    }
  }
  // one hash missing
  entries.erase(sha256_hex("prompt 3"));
  Cassette c(CassetteMode::Replay, entries);
  Gateway gw(backend(), c);
  auto items = run_batch(gw, reqs, 4);
  std::size_t ok = 0;
  for (const auto& it : items) {
    if (it.ok()) ++ok;
    else EXPECT_EQ(it.error->kind, ErrorKind::CassetteMiss);
  }
  EXPECT_EQ(ok, 9u);
  EXPECT_FALSE(items[3].ok());
  auto back = BatchItem::from_json(items[3].to_json());
  EXPECT_EQ(back.error->kind, ErrorKind::CassetteMiss);
}

TEST(Batch, ConcurrencyIsBounded) {
  std::atomic<int> active{0}, peak{0};
  Cassette c(CassetteMode::Passthrough);
  Gateway gw(backend(), c, [&](const HttpRequest&) -> HttpResponse {
    int now = ++active;
    int prev = peak.load();
    while (now > prev && !peak.compare_exchange_weak(prev, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
    --active;
    return {200, reply_body("x"), {}};
  }, quiet());
  std::vector<CompletionRequest> reqs;
  for (int i = 0; i < 40; ++i) reqs.push_back({"r" + std::to_string(i), "p" + std::to_string(i)});
  run_batch(gw, reqs, 3);
  EXPECT_LE(peak.load(), 3);
}

TEST(Batch, StopMarksRemainingInterrupted) {
  std::stop_source stop;
  stop.request_stop();
  Cassette c(CassetteMode::Replay);
  Gateway gw(backend(), c);
  std::vector<CompletionRequest> reqs = {{"a", "x"}, {"b", "y"}};
  auto items = run_batch(gw, reqs, 2, stop.get_token());
  for (const auto& it : items) EXPECT_EQ(it.error->kind, ErrorKind::Interrupted);
}

// ---------------------------------------------------------------------------
// Tagging

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::canonical();
  return v;
}

Transport echo_post() {
  return [](const HttpRequest& req) -> HttpResponse {
    auto prompt = json::parse(req.body)["messages"][0]["content"].get<std::string>();
    return {200, reply_body(prompt.substr(prompt.rfind("Post:\n") + 6)), {}};
  };
}

}  // namespace

TEST(Tagging, EchoGivesNoSpans) {
  Cassette c(CassetteMode::Passthrough);
  Gateway gw(backend(), c, echo_post(), quiet());
  std::vector<Post> posts = {Post{"u1", "Nothing to see here.", {}}};
  auto out = llm_tag_posts(posts, gw, "", vocab());
  ASSERT_EQ(out.size(), 1u);
  EXPECT_FALSE(out[0].error);
  EXPECT_TRUE(out[0].post.spans.empty());
}

TEST(Tagging, ReplayedAgeBoxMarkup) {
  auto tagged = ingest_corpus(fixture_path("tagged_posts.jsonl"), vocab());
  const Post& age = tagged[0];
  Post untagged{age.id, age.text, {}};
  std::vector<Post> posts = {untagged};
  auto prompt = tagging_prompt(untagged, "", vocab());
  Cassette c(CassetteMode::Replay, {{sha256_hex(prompt), CassetteEntry{render_tagged_text(age), "mock"}}});
  Gateway gw(backend(), c);
  auto out = llm_tag_posts(posts, gw, "", vocab());
  ASSERT_FALSE(out[0].error);
  ASSERT_EQ(out[0].post.spans.size(), 3u);
  EXPECT_EQ(out[0].post.spans, age.spans);
}

TEST(Tagging, WhitespaceDriftIsRemapped) {
  Post p{"w", "I am  a senior\nwith depression.", {}};
  Cassette c(CassetteMode::Passthrough);
  Gateway gw(backend(), c, [](const HttpRequest&) -> HttpResponse {
    return {200, reply_body("I am a <senior>senior</senior> with <depression>depression</depression>."), {}};
  }, quiet());
  std::vector<Post> posts = {p};
  auto out = llm_tag_posts(posts, gw, "", vocab());
  ASSERT_FALSE(out[0].error);
  ASSERT_EQ(out[0].post.spans.size(), 2u);
  EXPECT_EQ(out[0].post.covered(out[0].post.spans[0]), "senior");
  EXPECT_EQ(out[0].post.covered(out[0].post.spans[1]), "depression");
}

TEST(Tagging, TextMismatchIsAnnotated) {
  Cassette c(CassetteMode::Passthrough);
  Gateway gw(backend(), c, [](const HttpRequest&) -> HttpResponse {
    return {200, reply_body("A <female>different</female> text."), {}};
  }, quiet());
  std::vector<Post> posts = {Post{"m", "Original text.", {}}, Post{"n", "Another.", {}}};
  auto out = llm_tag_posts(posts, gw, "", vocab(), {}, 2);
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].post.id, "m");
  EXPECT_EQ(out[1].post.id, "n");
  for (const auto& o : out) {
    ASSERT_TRUE(o.error);
    EXPECT_EQ(o.error->kind, ErrorKind::RoundTripMismatch);
    EXPECT_TRUE(o.post.spans.empty());
  }
}

TEST(Tagging, CassetteMissIsPerPost) {
  Cassette c(CassetteMode::Replay);
  Gateway gw(backend(), c);
  std::vector<Post> posts = {Post{"m", "Original text.", {}}};
  auto out = llm_tag_posts(posts, gw, "", vocab());
  ASSERT_TRUE(out[0].error);
  EXPECT_EQ(out[0].error->kind, ErrorKind::CassetteMiss);
}
