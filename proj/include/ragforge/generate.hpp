#pragma once

#include <chrono>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "ragforge/corpus.hpp"
#include "ragforge/error.hpp"
#include "ragforge/http.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/text.hpp"

namespace ragforge {

struct Message {
  std::string role;  // "system" | "user" | "assistant"
  std::string content;

  friend bool operator==(const Message&, const Message&) = default;
};

inline json to_json(const std::vector<Message>& msgs) {
  json out = json::array();
  for (const auto& m : msgs) out.push_back({{"role", m.role}, {"content", m.content}});
  return out;
}

inline std::vector<Message> messages_from_json(const json& j) {
  std::vector<Message> out;
  for (const auto& m : j) out.push_back({m.at("role").get<std::string>(), m.at("content").get<std::string>()});
  return out;
}

/// Single-pass `{slot}` substitution; inserted values are never re-scanned.
/// Unknown `{...}` sequences are copied through unchanged.
inline std::string fill_slots(std::string_view tmpl, const std::vector<std::pair<std::string_view, std::string_view>>& slots) {
  std::string out;
  out.reserve(tmpl.size());
  std::size_t i = 0;
  while (i < tmpl.size()) {
    if (tmpl[i] == '{') {
      const auto close = tmpl.find('}', i + 1);
      if (close != std::string_view::npos) {
        const auto name = tmpl.substr(i + 1, close - i - 1);
        bool replaced = false;
        for (const auto& [slot, value] : slots)
          if (slot == name) {
            out += value;
            replaced = true;
            break;
          }
        if (replaced) {
          i = close + 1;
          continue;
        }
      }
    }
    out += tmpl[i++];
  }
  return out;
}

/// Prompt layout for retrieval-conditioned QA. `naive_system_template` is used
/// when no passages are supplied.
struct PromptTemplate {
  std::string system_template =
      "Answer the question based on the given passage. Only give me the answer and do not output any other words. "
      "The following are given passages:\n{retrieval_passages}";
  std::string naive_system_template =
      "Answer the question based on your own knowledge. Only give me the answer and do not output any other words.";
  std::string user_template = "Question: {question}";
  std::string doc_format = "Doc {index} (Title: {title}) {content}";

  void validate() const {
    auto require_once = [](const std::string& tmpl, std::string_view slot, const char* field) {
      const auto n = text::count_occurrences(tmpl, slot);
      if (n != 1)
        throw ValidationError(std::string("prompt.") + field, "slot " + std::string(slot) + " must appear exactly once (found " +
                                                                  std::to_string(n) + ")");
    };
    require_once(system_template, "{retrieval_passages}", "system_template");
    require_once(user_template, "{question}", "user_template");
    require_once(doc_format, "{index}", "doc_format");
    require_once(doc_format, "{title}", "doc_format");
    require_once(doc_format, "{content}", "doc_format");
  }
};

inline std::string format_passages(const std::vector<const Passage*>& passages, const PromptTemplate& tmpl) {
  std::string block;
  for (std::size_t i = 0; i < passages.size(); ++i) {
    if (i) block += '\n';
    const auto index = std::to_string(i + 1);
    block += fill_slots(tmpl.doc_format, {{"index", index}, {"title", passages[i]->title}, {"content", passages[i]->contents}});
  }
  return block;
}

/// System/user messages with the given context block; an empty block selects the naive prompt.
inline std::vector<Message> build_prompt_with_context(std::string_view question, std::string_view context,
                                                      const PromptTemplate& tmpl) {
  tmpl.validate();
  std::vector<Message> msgs;
  if (context.empty())
    msgs.push_back({"system", tmpl.naive_system_template});
  else
    msgs.push_back({"system", fill_slots(tmpl.system_template, {{"retrieval_passages", context}})});
  msgs.push_back({"user", fill_slots(tmpl.user_template, {{"question", question}})});
  return msgs;
}

inline std::vector<Message> build_prompt(std::string_view question, const std::vector<const Passage*>& passages,
                                         const PromptTemplate& tmpl = {}) {
  return build_prompt_with_context(question, format_passages(passages, tmpl), tmpl);
}

struct GenerationParams {
  std::size_t max_input_tokens = 2048;
  std::size_t max_new_tokens = 32;
  double temperature = 0.0;
  bool logprobs = false;
  std::vector<std::string> stop;

  void validate() const {
    if (max_new_tokens < 1) throw ValidationError("generator.max_new_tokens", "must be >= 1");
    if (max_input_tokens < 1) throw ValidationError("generator.max_input_tokens", "must be >= 1");
    if (!(temperature >= 0.0)) throw ValidationError("generator.temperature", "must be >= 0");
  }
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;

  friend bool operator==(const TokenLogprob&, const TokenLogprob&) = default;
};

struct GenerationOutput {
  std::string text;
  std::size_t token_count = 0;
  std::optional<std::size_t> prompt_tokens;
  std::optional<std::vector<TokenLogprob>> token_logprobs;
  std::string finish_reason = "stop";  // "stop" | "length"
};

struct Capabilities {
  bool logprobs = false;
  bool scoring = false;
};

/// Generator service contract.
class GeneratorClient {
 public:
  virtual ~GeneratorClient() = default;
  virtual Capabilities capabilities() const = 0;

  // `assistant_prefix` asks the service to continue a partially written answer.
  virtual GenerationOutput complete(const std::vector<Message>& messages, const GenerationParams& params,
                                    std::string_view assistant_prefix) const = 0;

  // Per-token logprobs of `continuation`, teacher-forced after `context`.
  virtual std::vector<TokenLogprob> score_tokens(const std::vector<Message>& context,
                                                 std::string_view continuation) const = 0;

  virtual std::string name() const = 0;
};

// Approximate token count used when a service omits usage data.
inline std::size_t approx_tokens(std::string_view s) { return text::word_count(s); }

inline std::size_t approx_tokens(const std::vector<Message>& msgs) {
  std::size_t n = 0;
  for (const auto& m : msgs) n += approx_tokens(m.content);
  return n;
}

// Text fed to echo-style scoring: message contents separated by blank lines.
inline std::string render_for_scoring(const std::vector<Message>& msgs) {
  std::string out;
  for (const auto& m : msgs) out += m.content + "\n\n";
  return out;
}

namespace detail {

inline void apply_stop(GenerationOutput& out, const std::vector<std::string>& stop) {
  std::size_t cut = std::string::npos;
  for (const auto& s : stop)
    if (!s.empty()) cut = std::min(cut, out.text.find(s));
  if (cut == std::string::npos) return;
  out.text.resize(cut);
  out.finish_reason = "stop";
  if (out.token_logprobs) {
    std::size_t consumed = 0, keep = 0;
    for (const auto& t : *out.token_logprobs) {
      if (consumed + t.token.size() > cut) break;
      consumed += t.token.size();
      ++keep;
    }
    out.token_logprobs->resize(keep);
    out.token_count = keep;
  } else {
    out.token_count = approx_tokens(out.text);
  }
}

}  // namespace detail

/// Validates params, calls the service and enforces the stop-sequence and
/// logprob contracts on its reply.
inline GenerationOutput generate(const GeneratorClient& client, const std::vector<Message>& messages,
                                 const GenerationParams& params, std::string_view assistant_prefix = {}) {
  params.validate();
  if (params.logprobs && !client.capabilities().logprobs) throw UnsupportedCapability("logprobs");
  GenerationOutput out = client.complete(messages, params, assistant_prefix);
  if (!params.logprobs) out.token_logprobs.reset();
  detail::apply_stop(out, params.stop);
  return out;
}

inline double score_sequence(const GeneratorClient& client, const std::vector<Message>& context,
                             std::string_view continuation) {
  if (!client.capabilities().scoring) throw UnsupportedCapability("scoring");
  if (continuation.empty()) return 0.0;
  double total = 0.0;
  for (const auto& t : client.score_tokens(context, continuation)) total += t.logprob;
  return total;
}

struct GeneratorClientConfig {
  std::string endpoint;
  std::string model;
  std::chrono::milliseconds timeout{60000};
  int max_retries = 3;
  Capabilities capabilities;
  std::string api_key;
};

/// OpenAI-compatible chat-completions client. Scoring uses the completions
/// endpoint with echo + logprobs over the rendered context and continuation.
class HttpGeneratorClient : public GeneratorClient {
 public:
  explicit HttpGeneratorClient(GeneratorClientConfig cfg)
      : cfg_(std::move(cfg)),
        client_(cfg_.endpoint, http::ClientOptions{cfg_.timeout, cfg_.max_retries, std::chrono::milliseconds(200), cfg_.api_key}) {}

  Capabilities capabilities() const override { return cfg_.capabilities; }
  std::string name() const override { return cfg_.model; }

  GenerationOutput complete(const std::vector<Message>& messages, const GenerationParams& params,
                            std::string_view assistant_prefix) const override {
    json msgs = to_json(messages);
    json body{{"model", cfg_.model},
              {"max_tokens", params.max_new_tokens},
              {"temperature", params.temperature},
              {"logprobs", params.logprobs}};
    if (!assistant_prefix.empty()) {
      msgs.push_back({{"role", "assistant"}, {"content", assistant_prefix}});
      body["continue_final_message"] = true;
      body["add_generation_prompt"] = false;
    }
    body["messages"] = std::move(msgs);
    if (!params.stop.empty()) body["stop"] = params.stop;

    json res;
    try {
      res = client_.post("/chat/completions", body);
    } catch (const ServiceError& e) {
      const std::string what = text::to_lower(e.what());
      if (what.find("context length") != std::string::npos || what.find("context_length") != std::string::npos)
        throw ContextLengthError(approx_tokens(messages) + approx_tokens(assistant_prefix), params.max_input_tokens);
      throw;
    }
    const auto& choice = res.at("choices").at(0);
    GenerationOutput out;
    out.text = choice.at("message").value("content", std::string{});
    out.finish_reason = choice.value("finish_reason", std::string("stop"));
    if (choice.contains("logprobs") && choice["logprobs"].is_object() && choice["logprobs"].contains("content")) {
      std::vector<TokenLogprob> lps;
      for (const auto& t : choice["logprobs"]["content"])
        lps.push_back({t.at("token").get<std::string>(), t.at("logprob").get<double>()});
      out.token_logprobs = std::move(lps);
    }
    if (res.contains("usage") && res["usage"].is_object()) {
      const auto& u = res["usage"];
      if (u.contains("completion_tokens")) out.token_count = u["completion_tokens"].get<std::size_t>();
      else out.token_count = approx_tokens(out.text);
      if (u.contains("prompt_tokens")) out.prompt_tokens = u["prompt_tokens"].get<std::size_t>();
    } else {
      out.token_count = approx_tokens(out.text);
    }
    return out;
  }

  std::vector<TokenLogprob> score_tokens(const std::vector<Message>& context,
                                         std::string_view continuation) const override {
    const std::string prefix = render_for_scoring(context);
    json res = client_.post("/completions", {{"model", cfg_.model},
                                             {"prompt", prefix + std::string(continuation)},
                                             {"max_tokens", 1},
                                             {"echo", true},
                                             {"logprobs", 1},
                                             {"temperature", 0.0}});
    const auto& lp = res.at("choices").at(0).at("logprobs");
    const auto& tokens = lp.at("tokens");
    const auto& logprobs = lp.at("token_logprobs");
    const auto& offsets = lp.at("text_offset");
    const std::size_t end = prefix.size() + continuation.size();
    std::vector<TokenLogprob> out;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      const auto off = offsets.at(i).get<std::size_t>();
      auto tok = tokens.at(i).get<std::string>();
      // A token that straddles the boundary (e.g. "\n\nParis") belongs to the continuation.
      if (off + tok.size() <= prefix.size() || off >= end || logprobs.at(i).is_null()) continue;
      out.push_back({std::move(tok), logprobs.at(i).get<double>()});
    }
    return out;
  }

  bool reachable() const { return client_.reachable("/models"); }

 private:
  GeneratorClientConfig cfg_;
  http::JsonClient client_;
};

}  // namespace ragforge
