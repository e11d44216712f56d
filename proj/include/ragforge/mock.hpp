#pragma once

// Deterministic in-process stand-ins for the generator and embedding services.
// They back the test suites and the `ragforge mock-serve` command.

#include <atomic>
#include <cmath>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "ragforge/embedding.hpp"
#include "ragforge/error.hpp"
#include "ragforge/generate.hpp"
#include "ragforge/text.hpp"

namespace ragforge::mock {

/// Splits text into whitespace-prefixed word tokens; concatenating the tokens
/// reproduces the input exactly.
inline std::vector<std::string> tokenize(std::string_view s) {
  std::vector<std::string> out;
  std::size_t i = 0;
  while (i < s.size()) {
    std::size_t j = i;
    while (j < s.size() && text::is_space(s[j])) ++j;
    while (j < s.size() && !text::is_space(s[j])) ++j;
    out.emplace_back(s.substr(i, j - i));
    i = j;
  }
  return out;
}

// Probability assigned to a generated token: a fixed function of its text, in [0.35, 1).
inline double token_probability(std::string_view token) {
  const auto h = text::fnv1a(text::trim(token));
  return 0.35 + 0.65 * static_cast<double>(h % 1000) / 1000.0;
}

inline std::string normalize_word(std::string_view w) { return text::strip_punctuation(text::to_lower(text::trim(w))); }

/// Teacher-forced logprob of each continuation token: -0.1 when the word
/// already occurs earlier in the text, -2.0 otherwise.
inline std::vector<TokenLogprob> echo_logprobs(std::string_view preceding, std::string_view continuation) {
  std::unordered_set<std::string> seen;
  for (const auto& w : text::split_whitespace(preceding)) seen.insert(normalize_word(w));
  std::vector<TokenLogprob> out;
  for (auto& tok : tokenize(continuation)) {
    auto w = normalize_word(tok);
    out.push_back({tok, seen.count(w) ? -0.1 : -2.0});
    seen.insert(std::move(w));
  }
  return out;
}

struct Request {
  std::vector<Message> messages;
  std::string assistant_prefix;
  GenerationParams params;
};

struct Reply {
  std::string text;
  // Per-token probabilities; when absent they derive from token_probability().
  std::optional<std::vector<double>> probabilities;
};

using Script = std::function<Reply(const Request&)>;

/// Default behavior: answer with the title of "Doc 1" when passages are
/// present, otherwise the first word of the context block, otherwise "unknown".
inline std::string reader_answer(const std::vector<Message>& messages) {
  if (messages.empty()) return "unknown";
  const std::string& sys = messages.front().content;
  const std::string marker = "Doc 1 (Title: ";
  if (auto pos = sys.find(marker); pos != std::string::npos) {
    const auto start = pos + marker.size();
    const auto end = sys.find(')', start);
    if (end != std::string::npos && end > start) return sys.substr(start, end - start);
  }
  if (auto pos = sys.find("passages:\n"); pos != std::string::npos) {
    auto words = text::split_whitespace(std::string_view(sys).substr(pos + 10));
    if (!words.empty()) {
      auto w = text::strip_punctuation(words.front());
      if (!w.empty()) return w;
    }
  }
  return "unknown";
}

// Continues `full` after `prefix`; empty when the prefix diverges.
inline std::string continue_after(const std::string& full, std::string_view prefix) {
  if (prefix.empty()) return full;
  if (text::starts_with(full, prefix)) return full.substr(prefix.size());
  return {};
}

inline Script reader_script() {
  return [](const Request& r) { return Reply{continue_after(reader_answer(r.messages), r.assistant_prefix), std::nullopt}; };
}

/// Scriptable deterministic generator. Thread-safe; records every request.
class MockGenerator : public GeneratorClient {
 public:
  explicit MockGenerator(Script script = reader_script(), Capabilities caps = {true, true})
      : script_(std::move(script)), caps_(caps) {}

  Capabilities capabilities() const override { return caps_; }
  std::string name() const override { return "mock"; }

  GenerationOutput complete(const std::vector<Message>& messages, const GenerationParams& params,
                            std::string_view assistant_prefix) const override {
    const std::size_t prompt_tokens = approx_tokens(messages) + approx_tokens(assistant_prefix);
    if (prompt_tokens > params.max_input_tokens) throw ContextLengthError(prompt_tokens, params.max_input_tokens);
    Request req{messages, std::string(assistant_prefix), params};
    {
      std::lock_guard lock(mu_);
      requests_.push_back(req);
    }
    ++generate_calls_;
    Reply reply = script_(req);
    auto tokens = tokenize(reply.text);
    GenerationOutput out;
    out.finish_reason = "stop";
    if (tokens.size() > params.max_new_tokens) {
      tokens.resize(params.max_new_tokens);
      out.finish_reason = "length";
    }
    std::vector<TokenLogprob> lps;
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      out.text += tokens[i];
      const double p = reply.probabilities && i < reply.probabilities->size() ? (*reply.probabilities)[i]
                                                                              : token_probability(tokens[i]);
      lps.push_back({tokens[i], std::log(p)});
    }
    out.token_count = tokens.size();
    out.prompt_tokens = prompt_tokens;
    if (params.logprobs && caps_.logprobs) out.token_logprobs = std::move(lps);
    return out;
  }

  std::vector<TokenLogprob> score_tokens(const std::vector<Message>& context,
                                         std::string_view continuation) const override {
    if (!caps_.scoring) throw UnsupportedCapability("scoring");
    ++score_calls_;
    if (score_override_) return score_override_(context, continuation);
    return echo_logprobs(render_for_scoring(context), continuation);
  }

  // Replaces the default echo scoring rule.
  void set_scorer(std::function<std::vector<TokenLogprob>(const std::vector<Message>&, std::string_view)> fn) {
    score_override_ = std::move(fn);
  }

  std::size_t generate_calls() const noexcept { return generate_calls_; }
  std::size_t score_calls() const noexcept { return score_calls_; }
  std::vector<Request> requests() const {
    std::lock_guard lock(mu_);
    return requests_;
  }

 private:
  Script script_;
  Capabilities caps_;
  std::function<std::vector<TokenLogprob>(const std::vector<Message>&, std::string_view)> score_override_;
  mutable std::atomic<std::size_t> generate_calls_{0};
  mutable std::atomic<std::size_t> score_calls_{0};
  mutable std::mutex mu_;
  mutable std::vector<Request> requests_;
};

/// Hashing embedder with request accounting (see hashing_embedding()).
inline std::shared_ptr<EmbeddingClient> make_embedder(std::size_t dim = 64, EmbeddingClientConfig cfg = {}) {
  cfg.model = "mock-hash-" + std::to_string(dim);
  return std::make_shared<EmbeddingClient>(std::move(cfg), hashing_transport(dim));
}

}  // namespace ragforge::mock
