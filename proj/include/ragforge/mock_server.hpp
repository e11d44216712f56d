#pragma once

// HTTP front for the deterministic mocks, speaking the OpenAI-style routes the
// clients use: /models, /chat/completions, /completions (echo scoring),
// /embeddings and /rerank, all under a base path (default "/v1").

#include <memory>
#include <string>
#include <thread>
#include <unordered_set>

#include "httplib.h"
#include "ragforge/embedding.hpp"
#include "ragforge/error.hpp"
#include "ragforge/generate.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/mock.hpp"

namespace ragforge::mock {

struct ServerOptions {
  std::string base_path = "/v1";
  std::size_t dim = 64;
  std::size_t max_input_tokens = 4096;
};

class MockServer {
 public:
  explicit MockServer(ServerOptions opts = {}, std::shared_ptr<const GeneratorClient> generator = nullptr)
      : opts_(std::move(opts)),
        generator_(generator ? std::move(generator) : std::make_shared<MockGenerator>()) {
    routes();
  }

  ~MockServer() { stop(); }

  // Binds (port 0 picks a free port) and serves on a background thread.
  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw Error("mock server could not bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  // Blocks serving requests on the calling thread.
  void listen(const std::string& host, int port) {
    port_ = port;
    if (!server_.listen(host, port)) throw Error("mock server could not listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return port_; }
  std::string url() const { return "http://127.0.0.1:" + std::to_string(port_) + opts_.base_path; }

 private:
  static void reply(httplib::Response& res, const json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  void routes() {
    const auto& base = opts_.base_path;
    server_.Get(base + "/models", [](const httplib::Request&, httplib::Response& res) {
      reply(res, {{"object", "list"}, {"data", json::array({{{"id", "mock"}, {"object", "model"}}})}});
    });

    server_.Post(base + "/chat/completions", [this](const httplib::Request& req, httplib::Response& res) {
      json body;
      try {
        body = json::parse(req.body);
        auto messages = messages_from_json(body.at("messages"));
        std::string prefix;
        if (body.value("continue_final_message", false) && !messages.empty() && messages.back().role == "assistant") {
          prefix = messages.back().content;
          messages.pop_back();
        }
        GenerationParams p;
        p.max_new_tokens = body.value("max_tokens", std::size_t{32});
        p.max_input_tokens = opts_.max_input_tokens;
        p.logprobs = body.value("logprobs", false);
        p.temperature = body.value("temperature", 0.0);
        if (body.contains("stop")) p.stop = body["stop"].get<std::vector<std::string>>();
        auto out = generate(*generator_, messages, p, prefix);
        json choice{{"index", 0},
                    {"message", {{"role", "assistant"}, {"content", out.text}}},
                    {"finish_reason", out.finish_reason}};
        if (out.token_logprobs) {
          json content = json::array();
          for (const auto& t : *out.token_logprobs) content.push_back({{"token", t.token}, {"logprob", t.logprob}});
          choice["logprobs"] = {{"content", content}};
        }
        reply(res, {{"object", "chat.completion"},
                    {"model", body.value("model", "mock")},
                    {"choices", json::array({choice})},
                    {"usage", {{"prompt_tokens", out.prompt_tokens.value_or(0)}, {"completion_tokens", out.token_count}}}});
      } catch (const ContextLengthError& e) {
        reply(res, {{"error", {{"message", std::string("maximum context length exceeded: ") + e.what()}}}}, 400);
      } catch (const std::exception& e) {
        reply(res, {{"error", {{"message", e.what()}}}}, 400);
      }
    });

    // Echo scoring: every prompt token with a teacher-forced logprob.
    server_.Post(base + "/completions", [](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto body = json::parse(req.body);
        const auto prompt = body.at("prompt").get<std::string>();
        json tokens = json::array(), lps = json::array(), offsets = json::array();
        std::unordered_set<std::string> seen;
        std::size_t off = 0;
        bool first = true;
        for (auto& tok : tokenize(prompt)) {
          auto w = normalize_word(tok);
          tokens.push_back(tok);
          offsets.push_back(off);
          if (first) lps.push_back(nullptr);
          else lps.push_back(seen.count(w) ? -0.1 : -2.0);
          first = false;
          off += tok.size();
          seen.insert(std::move(w));
        }
        json logprobs{{"tokens", tokens}, {"token_logprobs", lps}, {"text_offset", offsets}};
        reply(res, {{"object", "text_completion"},
                    {"choices", json::array({{{"index", 0}, {"text", prompt}, {"logprobs", logprobs},
                                              {"finish_reason", "length"}}})}});
      } catch (const std::exception& e) {
        reply(res, {{"error", {{"message", e.what()}}}}, 400);
      }
    });

    server_.Post(base + "/embeddings", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto body = json::parse(req.body);
        json data = json::array();
        std::size_t i = 0;
        for (const auto& t : body.at("input"))
          data.push_back({{"object", "embedding"}, {"index", i++}, {"embedding", hashing_embedding(t.get<std::string>(), opts_.dim)}});
        reply(res, {{"object", "list"}, {"data", data}, {"model", body.value("model", "mock")}});
      } catch (const std::exception& e) {
        reply(res, {{"error", {{"message", e.what()}}}}, 400);
      }
    });

    server_.Post(base + "/rerank", [this](const httplib::Request& req, httplib::Response& res) {
      try {
        const auto body = json::parse(req.body);
        const auto q = hashing_embedding(body.at("query").get<std::string>(), opts_.dim);
        json results = json::array();
        std::size_t i = 0;
        for (const auto& d : body.at("documents"))
          results.push_back({{"index", i++}, {"relevance_score", cosine(q, hashing_embedding(d.get<std::string>(), opts_.dim))}});
        reply(res, {{"results", results}});
      } catch (const std::exception& e) {
        reply(res, {{"error", {{"message", e.what()}}}}, 400);
      }
    });
  }

  ServerOptions opts_;
  std::shared_ptr<const GeneratorClient> generator_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace ragforge::mock
