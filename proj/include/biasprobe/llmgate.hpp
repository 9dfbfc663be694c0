#pragma once

// Model dispatch: backend config, record/replay cassette, retry with
// exponential backoff, and bounded-parallelism batches.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <set>
#include <shared_mutex>
#include <span>
#include <stop_token>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "biasprobe/error.hpp"
#include "biasprobe/text.hpp"

namespace biasprobe {

inline constexpr std::size_t kWordLimit = 120;

enum class Provider { OpenAI, Anthropic };

struct BackendConfig {
  std::string name;
  Provider provider = Provider::OpenAI;
  std::string endpoint;
  std::string model_id;
  // Name of the environment variable holding the API key; empty means no auth header.
  std::string auth_env;
  int max_tokens = 400;
  double temperature = 0.0;
  double timeout_s = 60.0;
  int max_retries = 5;

  void validate() const {
    if (name.empty()) throw Error(ErrorKind::InvalidArgument, "backend name is empty");
    if (!(timeout_s > 0)) throw Error(ErrorKind::InvalidArgument, "backend timeout must be > 0");
    if (temperature < 0) throw Error(ErrorKind::InvalidArgument, "backend temperature must be >= 0");
    if (max_tokens <= 0) throw Error(ErrorKind::InvalidArgument, "backend max_tokens must be > 0");
    if (max_retries < 0) throw Error(ErrorKind::InvalidArgument, "backend max_retries must be >= 0");
  }

  static BackendConfig from_json(const json& j) {
    BackendConfig c;
    try {
      c.name = j.at("name").get<std::string>();
      c.endpoint = j.value("endpoint", std::string{});
      c.model_id = j.value("model_id", c.name);
      if (j.contains("api_key")) {
        throw Error(ErrorKind::InvalidArgument, "backend '" + c.name + "': inline api_key is not accepted; use auth_env");
      }
      c.auth_env = j.value("auth_env", std::string{});
      c.max_tokens = j.value("max_tokens", c.max_tokens);
      c.temperature = j.value("temperature", c.temperature);
      c.timeout_s = j.value("timeout_s", c.timeout_s);
      c.max_retries = j.value("max_retries", c.max_retries);
      auto provider = j.value("provider", std::string("openai"));
      if (provider == "openai") c.provider = Provider::OpenAI;
      else if (provider == "anthropic") c.provider = Provider::Anthropic;
      else throw Error(ErrorKind::InvalidArgument, "unknown provider '" + provider + "'");
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, std::string("backend config: ") + e.what());
    }
    c.validate();
    return c;
  }

  /// A backend file holds one record or an array of records; `name` selects
  /// among several (empty picks the first).
  static BackendConfig load(const std::filesystem::path& path, std::string_view name = {}) {
    json doc;
    try {
      doc = json::parse(read_file(path));
    } catch (const json::parse_error& e) {
      throw Error(ErrorKind::MalformedRecord, path.string() + ": " + e.what());
    }
    if (doc.is_object()) doc = json::array({doc});
    for (const auto& item : doc) {
      auto c = from_json(item);
      if (name.empty() || c.name == name) return c;
    }
    throw Error(ErrorKind::InvalidArgument, "no backend named '" + std::string(name) + "' in " + path.string());
  }
};

struct ModelResponse {
  std::string bundle_id;
  std::string content_hash;
  std::string text;
  std::size_t word_count = 0;
  bool over_limit = false;
  std::string backend_name;
  double latency_ms = 0;
  int attempt = 1;

  bool operator==(const ModelResponse&) const = default;

  json to_json() const {
    return {{"bundle_id", bundle_id}, {"content_hash", content_hash}, {"text", text},
            {"word_count", word_count}, {"over_limit", over_limit}, {"backend_name", backend_name},
            {"latency_ms", latency_ms}, {"attempt", attempt}};
  }
  static ModelResponse from_json(const json& j) {
    ModelResponse r;
    r.bundle_id = j.at("bundle_id").get<std::string>();
    r.content_hash = j.at("content_hash").get<std::string>();
    r.text = j.at("text").get<std::string>();
    r.word_count = j.at("word_count").get<std::size_t>();
    r.over_limit = j.at("over_limit").get<bool>();
    r.backend_name = j.at("backend_name").get<std::string>();
    r.latency_ms = j.at("latency_ms").get<double>();
    r.attempt = j.at("attempt").get<int>();
    return r;
  }
};

inline ModelResponse make_response(std::string bundle_id, std::string content_hash, std::string text,
                                   std::string backend_name, double latency_ms, int attempt) {
  ModelResponse r{std::move(bundle_id), std::move(content_hash), std::move(text), 0, false,
                  std::move(backend_name), latency_ms, attempt};
  r.word_count = count_words(r.text);
  r.over_limit = r.word_count > kWordLimit;
  return r;
}

// ---------------------------------------------------------------------------
// Cassette

enum class CassetteMode { Record, Replay, Passthrough };

inline std::string_view to_string(CassetteMode m) {
  switch (m) {
    case CassetteMode::Record: return "record";
    case CassetteMode::Replay: return "replay";
    case CassetteMode::Passthrough: return "passthrough";
  }
  return "?";
}

inline CassetteMode cassette_mode_from_string(std::string_view s) {
  if (s == "record") return CassetteMode::Record;
  if (s == "replay") return CassetteMode::Replay;
  if (s == "passthrough") return CassetteMode::Passthrough;
  throw Error(ErrorKind::InvalidArgument, "unknown cassette mode '" + std::string(s) + "'");
}

struct CassetteEntry {
  std::string text;
  std::string backend_name;
  std::string recorded_at;
  double latency_ms = 0;
  int attempt = 1;

  bool operator==(const CassetteEntry&) const = default;
};

/// Map from prompt content hash to a recorded response. Concurrent lookups,
/// serialized writes.
class Cassette {
 public:
  explicit Cassette(CassetteMode mode = CassetteMode::Replay) : mode_(mode) {}
  Cassette(CassetteMode mode, std::map<std::string, CassetteEntry> entries) : mode_(mode), entries_(std::move(entries)) {}
  Cassette(const Cassette& other) : mode_(other.mode_), entries_(other.snapshot()) {}
  Cassette& operator=(const Cassette&) = delete;

  static Cassette parse(std::string_view content, CassetteMode mode) {
    std::map<std::string, CassetteEntry> entries;
    json doc;
    try {
      doc = json::parse(content);
      for (const auto& [hash, e] : doc.items()) {
        entries[hash] = CassetteEntry{e.at("text").get<std::string>(), e.at("backend_name").get<std::string>(),
                                      e.value("recorded_at", std::string{}), e.value("latency_ms", 0.0),
                                      e.value("attempt", 1)};
      }
    } catch (const json::exception& e) {
      throw Error(ErrorKind::MalformedRecord, std::string("cassette: ") + e.what());
    }
    return Cassette(mode, std::move(entries));
  }

  /// A missing file is an empty cassette.
  static Cassette load(const std::filesystem::path& path, CassetteMode mode) {
    if (!std::filesystem::exists(path)) return Cassette(mode);
    return parse(read_file(path), mode);
  }

  CassetteMode mode() const { return mode_; }

  std::optional<CassetteEntry> find(const std::string& hash) const {
    std::shared_lock lock(mutex_);
    auto it = entries_.find(hash);
    if (it == entries_.end()) return std::nullopt;
    return it->second;
  }

  void put(const std::string& hash, CassetteEntry entry) {
    std::unique_lock lock(mutex_);
    entries_[hash] = std::move(entry);
  }

  std::size_t size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
  }

  std::map<std::string, CassetteEntry> snapshot() const {
    std::shared_lock lock(mutex_);
    return entries_;
  }

  /// Keys are written in sorted order so recordings diff cleanly. A non-null
  /// `only` restricts the output to those hashes.
  std::string dump(const std::set<std::string>* only = nullptr) const {
    json doc = json::object();
    for (const auto& [hash, e] : snapshot()) {
      if (only != nullptr && !only->contains(hash)) continue;
      doc[hash] = {{"text", e.text}, {"backend_name", e.backend_name}, {"recorded_at", e.recorded_at},
                   {"latency_ms", e.latency_ms}, {"attempt", e.attempt}};
    }
    return doc.dump(2) + "\n";
  }

  void save(const std::filesystem::path& path) const { write_file(path, dump()); }

 private:
  CassetteMode mode_;
  mutable std::shared_mutex mutex_;
  std::map<std::string, CassetteEntry> entries_;
};

// ---------------------------------------------------------------------------
// Transport and retry

struct HttpRequest {
  std::string url;
  std::vector<std::pair<std::string, std::string>> headers;
  std::string body;
  std::chrono::milliseconds timeout{60000};
};

/// status 0 means the request never produced an HTTP response.
struct HttpResponse {
  int status = 0;
  std::string body;
  std::string transport_error;
};

using Transport = std::function<HttpResponse(const HttpRequest&)>;

inline bool is_retryable(const HttpResponse& r) { return r.status == 0 || r.status == 429 || r.status >= 500; }

/// base * factor^retry, scaled by a uniform jitter factor in [1 - jitter, 1 + jitter].
class ExponentialBackoff {
 public:
  ExponentialBackoff(std::chrono::milliseconds base = std::chrono::seconds(1), double factor = 2.0, double jitter = 0.2)
      : base_(base), factor_(factor), jitter_(jitter) {}

  /// `unit` is a uniform sample in [0, 1).
  std::chrono::milliseconds delay(int retry, double unit) const {
    double nominal = static_cast<double>(base_.count());
    for (int i = 0; i < retry; ++i) nominal *= factor_;
    double scale = 1.0 + jitter_ * (2.0 * unit - 1.0);
    return std::chrono::milliseconds(static_cast<long long>(nominal * scale + 0.5));
  }

  std::chrono::milliseconds nominal(int retry) const { return delay(retry, 0.5); }
  double jitter() const { return jitter_; }

 private:
  std::chrono::milliseconds base_;
  double factor_;
  double jitter_;
};

inline std::string utc_timestamp_now() {
  auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

/// Chat-style request body shared by the supported providers.
inline json chat_request_body(const BackendConfig& config, std::string_view prompt) {
  return {{"model", config.model_id},
          {"messages", json::array({{{"role", "user"}, {"content", std::string(prompt)}}})},
          {"max_tokens", config.max_tokens},
          {"temperature", config.temperature}};
}

/// Accepts either choices[0].message.content or content[*].text.
inline std::string extract_completion_text(const json& body) {
  if (body.contains("choices") && !body["choices"].empty()) {
    return body["choices"][0].at("message").at("content").get<std::string>();
  }
  if (body.contains("content") && body["content"].is_array()) {
    std::string out;
    for (const auto& part : body["content"]) {
      if (part.value("type", std::string("text")) == "text") out += part.at("text").get<std::string>();
    }
    return out;
  }
  throw Error(ErrorKind::BackendError, "response has neither choices nor content");
}

struct GatewayOptions {
  std::function<void(std::chrono::milliseconds)> sleep = [](std::chrono::milliseconds d) {
    std::this_thread::sleep_for(d);
  };
  // Uniform [0, 1) source for backoff jitter; null uses an internal engine.
  std::function<double()> uniform;
  std::function<double()> monotonic_ms = [] {
    using namespace std::chrono;
    return duration<double, std::milli>(steady_clock::now().time_since_epoch()).count();
  };
  std::function<std::string()> timestamp = utc_timestamp_now;
  std::function<const char*(const char*)> getenv = [](const char* n) { return std::getenv(n); };
  ExponentialBackoff backoff{};
};

class Gateway {
 public:
  Gateway(BackendConfig config, Cassette& cassette, Transport transport = {}, GatewayOptions options = {})
      : config_(std::move(config)), cassette_(cassette), transport_(std::move(transport)), options_(std::move(options)) {
    config_.validate();
  }

  const BackendConfig& config() const { return config_; }
  Cassette& cassette() { return cassette_; }

  /// Content hashes of every prompt this gateway was asked to complete.
  std::set<std::string> used_hashes() const {
    std::lock_guard lock(used_mutex_);
    return used_;
  }

  /// Replay returns the stored response; record and passthrough call the
  /// backend (record also stores the result).
  ModelResponse complete(const std::string& request_id, std::string_view prompt) {
    auto hash = sha256_hex(prompt);
    {
      std::lock_guard lock(used_mutex_);
      used_.insert(hash);
    }
    if (cassette_.mode() == CassetteMode::Replay) {
      auto entry = cassette_.find(hash);
      if (!entry) throw Error(ErrorKind::CassetteMiss, "no recorded response for content_hash " + hash);
      return make_response(request_id, hash, entry->text, entry->backend_name, entry->latency_ms, entry->attempt);
    }
    auto [text, latency, attempt] = call_backend(prompt);
    if (cassette_.mode() == CassetteMode::Record) {
      cassette_.put(hash, CassetteEntry{text, config_.name, options_.timestamp(), latency, attempt});
    }
    return make_response(request_id, hash, std::move(text), config_.name, latency, attempt);
  }

 private:
  struct CallResult {
    std::string text;
    double latency_ms;
    int attempt;
  };

  double next_uniform() {
    if (options_.uniform) return options_.uniform();
    std::lock_guard lock(rng_mutex_);
    return std::uniform_real_distribution<double>(0.0, 1.0)(rng_);
  }

  CallResult call_backend(std::string_view prompt) {
    if (!transport_) throw Error(ErrorKind::BackendError, "backend '" + config_.name + "' has no transport");
    HttpRequest req;
    req.url = config_.endpoint;
    req.body = chat_request_body(config_, prompt).dump();
    req.timeout = std::chrono::milliseconds(static_cast<long long>(config_.timeout_s * 1000));
    req.headers.emplace_back("Content-Type", "application/json");
    if (!config_.auth_env.empty()) {
      const char* key = options_.getenv(config_.auth_env.c_str());
      if (key == nullptr || *key == '\0') {
        throw Error(ErrorKind::AuthMissing, "environment variable " + config_.auth_env + " is not set");
      }
      if (config_.provider == Provider::Anthropic) {
        req.headers.emplace_back("x-api-key", key);
        req.headers.emplace_back("anthropic-version", "2023-06-01");
      } else {
        req.headers.emplace_back("Authorization", std::string("Bearer ") + key);
      }
    }

    std::string last_failure;
    for (int attempt = 1; attempt <= config_.max_retries + 1; ++attempt) {
      double t0 = options_.monotonic_ms();
      HttpResponse resp = transport_(req);
      double latency = options_.monotonic_ms() - t0;
      if (resp.status == 200) {
        try {
          return {extract_completion_text(json::parse(resp.body)), latency, attempt};
        } catch (const json::exception& e) {
          throw Error(ErrorKind::BackendError, std::string("unparseable response body: ") + e.what());
        }
      }
      last_failure = resp.status == 0 ? "transport error: " + resp.transport_error
                                      : "HTTP " + std::to_string(resp.status) + ": " + resp.body.substr(0, 200);
      if (!is_retryable(resp)) break;
      if (attempt <= config_.max_retries) options_.sleep(options_.backoff.delay(attempt - 1, next_uniform()));
    }
    throw Error(ErrorKind::BackendError, "backend '" + config_.name + "' failed: " + last_failure);
  }

  BackendConfig config_;
  Cassette& cassette_;
  Transport transport_;
  GatewayOptions options_;
  std::mutex rng_mutex_;
  mutable std::mutex used_mutex_;
  std::set<std::string> used_;
  std::mt19937_64 rng_{std::random_device{}()};
};

// ---------------------------------------------------------------------------
// Batches

/// Runs fn(i) for i in [0, n) on at most `parallelism` threads. Indices not yet
/// started when stop is requested are passed to on_skip instead.
inline void parallel_for(std::size_t n, std::size_t parallelism, const std::function<void(std::size_t)>& fn,
                         std::stop_token stop = {}, const std::function<void(std::size_t)>& on_skip = {}) {
  if (parallelism == 0) throw Error(ErrorKind::InvalidArgument, "parallelism must be >= 1");
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      if (stop.stop_requested()) {
        if (on_skip) on_skip(i);
        continue;
      }
      fn(i);
    }
  };
  std::size_t workers = std::min(parallelism, n);
  if (workers <= 1) {
    worker();
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(worker);
}

struct CompletionRequest {
  std::string id;
  std::string prompt;
};

struct BatchItem {
  std::string bundle_id;
  std::string content_hash;
  std::optional<ModelResponse> response;
  std::optional<ErrorRecord> error;

  bool ok() const { return response.has_value(); }

  json to_json() const {
    if (response) return response->to_json();
    return {{"bundle_id", bundle_id},
            {"content_hash", content_hash},
            {"error", {{"kind", to_string(error->kind)}, {"message", error->message}}}};
  }
  static BatchItem from_json(const json& j) {
    BatchItem item;
    item.bundle_id = j.at("bundle_id").get<std::string>();
    item.content_hash = j.at("content_hash").get<std::string>();
    if (j.contains("error")) {
      item.error = ErrorRecord{error_kind_from_string(j["error"].at("kind").get<std::string>()),
                               j["error"].at("message").get<std::string>()};
    } else {
      item.response = ModelResponse::from_json(j);
    }
    return item;
  }
};

/// Completes every request with at most `parallelism` in flight. Failures are
/// captured per item; the result is sorted by request id.
inline std::vector<BatchItem> run_batch(Gateway& gateway, std::span<const CompletionRequest> requests,
                                        std::size_t parallelism, std::stop_token stop = {}) {
  std::vector<BatchItem> items(requests.size());
  parallel_for(
      requests.size(), parallelism,
      [&](std::size_t i) {
        auto& item = items[i];
        item.bundle_id = requests[i].id;
        item.content_hash = sha256_hex(requests[i].prompt);
        try {
          item.response = gateway.complete(requests[i].id, requests[i].prompt);
        } catch (const Error& e) {
          item.error = ErrorRecord::from(e);
        }
      },
      stop,
      [&](std::size_t i) {
        items[i].bundle_id = requests[i].id;
        items[i].content_hash = sha256_hex(requests[i].prompt);
        items[i].error = ErrorRecord{ErrorKind::Interrupted, "not dispatched before interrupt"};
      });
  std::sort(items.begin(), items.end(), [](const BatchItem& a, const BatchItem& b) { return a.bundle_id < b.bundle_id; });
  return items;
}

}  // namespace biasprobe
