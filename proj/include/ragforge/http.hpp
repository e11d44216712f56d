#pragma once

#include <chrono>
#include <memory>
#include <regex>
#include <string>
#include <thread>

#include "httplib.h"
#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"

namespace ragforge::http {

struct Endpoint {
  std::string scheme_host_port;  // e.g. "http://127.0.0.1:8000"
  std::string base_path;         // e.g. "/v1" or ""
};

inline Endpoint parse_endpoint(const std::string& url) {
  static const std::regex re(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(url, m, re)) throw ValidationError("endpoint", "not an http(s) URL: '" + url + "'");
  std::string base = m[2].matched ? m[2].str() : "";
  while (!base.empty() && base.back() == '/') base.pop_back();
  return {m[1].str(), base};
}

struct ClientOptions {
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  std::chrono::milliseconds backoff{200};
  std::string api_key;  // sent as a Bearer token when non-empty
};

/// JSON-over-HTTP client. Transport failures, 429 and 5xx responses are
/// retried; other 4xx responses surface immediately.
class JsonClient {
 public:
  JsonClient(const std::string& url, ClientOptions opts = {}) : endpoint_(parse_endpoint(url)), opts_(opts) {}

  json post(const std::string& path, const json& body) const { return send("POST", path, &body); }
  json get(const std::string& path) const { return send("GET", path, nullptr); }

  // Single GET without retries; true when the server answers at all.
  bool reachable(const std::string& path) const {
    httplib::Client cli(endpoint_.scheme_host_port);
    cli.set_connection_timeout(std::chrono::seconds(2));
    auto res = cli.Get(endpoint_.base_path + path);
    return static_cast<bool>(res);
  }

  const Endpoint& endpoint() const noexcept { return endpoint_; }

 private:
  json send(const char* method, const std::string& path, const json* body) const {
    const std::string full = endpoint_.base_path + path;
    std::string last_error;
    for (int attempt = 0; attempt <= opts_.max_retries; ++attempt) {
      if (attempt > 0) std::this_thread::sleep_for(opts_.backoff * (1 << (attempt - 1)));
      httplib::Client cli(endpoint_.scheme_host_port);
      cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout));
      cli.set_read_timeout(std::chrono::duration_cast<std::chrono::seconds>(opts_.timeout));
      httplib::Headers headers;
      if (!opts_.api_key.empty()) headers.emplace("Authorization", "Bearer " + opts_.api_key);
      auto res = body ? cli.Post(full, headers, body->dump(), "application/json") : cli.Get(full, headers);
      if (!res) {
        last_error = httplib::to_string(res.error());
        continue;
      }
      if (res->status == 429 || res->status >= 500) {
        last_error = "HTTP " + std::to_string(res->status) + ": " + res->body;
        continue;
      }
      if (res->status >= 400) throw ServiceError(std::string(method) + " " + full + " -> HTTP " +
                                                 std::to_string(res->status) + ": " + res->body);
      try {
        return json::parse(res->body);
      } catch (const json::parse_error& e) {
        throw ServiceError(std::string(method) + " " + full + " returned invalid JSON: " + e.what());
      }
    }
    throw ServiceError(std::string(method) + " " + endpoint_.scheme_host_port + full + " failed after " +
                       std::to_string(opts_.max_retries + 1) + " attempts: " + last_error);
  }

  Endpoint endpoint_;
  ClientOptions opts_;
};

}  // namespace ragforge::http
