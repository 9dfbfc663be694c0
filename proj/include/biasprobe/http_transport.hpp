#pragma once

// Live HTTP transport for Gateway. Kept apart from llmgate.hpp so offline
// consumers do not pull in cpp-httplib and libssl.

#ifndef CPPHTTPLIB_OPENSSL_SUPPORT
#define CPPHTTPLIB_OPENSSL_SUPPORT
#endif
#include <httplib.h>

#include <string>

#include "biasprobe/llmgate.hpp"

namespace biasprobe {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;
};

inline SplitUrl split_url(const std::string& url) {
  auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw Error(ErrorKind::InvalidArgument, "endpoint is not a URL: " + url);
  auto path_start = url.find('/', scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline Transport make_http_transport() {
  return [](const HttpRequest& req) -> HttpResponse {
    SplitUrl url;
    try {
      url = split_url(req.url);
    } catch (const Error& e) {
      return {0, {}, e.message()};
    }
    httplib::Client client(url.origin);
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(req.timeout);
    client.set_connection_timeout(secs);
    client.set_read_timeout(secs);
    client.set_write_timeout(secs);
    httplib::Headers headers;
    std::string content_type = "application/json";
    for (const auto& [k, v] : req.headers) {
      if (k == "Content-Type") content_type = v;
      else headers.emplace(k, v);
    }
    auto res = client.Post(url.path, headers, req.body, content_type);
    if (!res) return {0, {}, httplib::to_string(res.error())};
    return {res->status, res->body, {}};
  };
}

}  // namespace biasprobe
