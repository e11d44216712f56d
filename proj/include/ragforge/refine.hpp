#pragma once

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "ragforge/corpus.hpp"
#include "ragforge/embedding.hpp"
#include "ragforge/error.hpp"
#include "ragforge/generate.hpp"
#include "ragforge/text.hpp"

namespace ragforge {

enum class RefinerKind { extractive, perplexity, abstractive };

inline RefinerKind parse_refiner_kind(std::string_view s) {
  if (s == "extractive") return RefinerKind::extractive;
  if (s == "perplexity") return RefinerKind::perplexity;
  if (s == "abstractive") return RefinerKind::abstractive;
  throw ValidationError("refiner.type", "must be extractive, perplexity or abstractive (got '" + std::string(s) + "')");
}

inline std::string_view to_string(RefinerKind k) {
  switch (k) {
    case RefinerKind::extractive: return "extractive";
    case RefinerKind::perplexity: return "perplexity";
    case RefinerKind::abstractive: return "abstractive";
  }
  return "extractive";
}

inline constexpr double kPerplexityRate = 0.5;
inline constexpr double kBudgetRate = 0.55;

struct RefinerConfig {
  RefinerKind kind = RefinerKind::perplexity;
  std::optional<double> compression_rate;  // default depends on kind
  std::optional<std::size_t> token_budget;  // extractive: max words kept
  std::size_t max_tokens = 512;             // abstractive summary length

  double rate() const {
    if (compression_rate) return *compression_rate;
    return kind == RefinerKind::perplexity ? kPerplexityRate : kBudgetRate;
  }

  void validate() const {
    const double r = rate();
    if (!(r > 0.0 && r <= 1.0)) throw ValidationError("refiner.compression_rate", "must lie in (0, 1]");
    if (max_tokens < 1) throw ValidationError("refiner.max_tokens", "must be >= 1");
  }
};

struct RefineResult {
  std::string text;
  std::size_t words_before = 0;
  std::size_t words_after = 0;
  std::optional<std::string> warning;
};

/// Keeps the sentences most similar to the query, greedily by score, until
/// the next one would exceed `budget` words. Output keeps document order.
inline RefineResult extractive_refine(std::string_view query, const std::vector<const Passage*>& passages,
                                      std::size_t budget, const Embedder& embedder) {
  RefineResult res;
  std::vector<std::string> sentences;
  for (const auto* p : passages) {
    res.words_before += text::word_count(p->contents);
    for (auto& s : split_sentences(p->contents)) sentences.push_back(std::move(s));
  }
  if (sentences.empty()) return res;

  const auto q = embedder.embed({std::string(query)}, EmbedRole::query);
  const auto vs = embedder.embed(sentences, EmbedRole::passage);
  std::vector<double> score(sentences.size());
  for (std::size_t i = 0; i < sentences.size(); ++i) score[i] = cosine(q.front(), vs[i]);

  std::vector<std::size_t> order(sentences.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return score[a] > score[b]; });

  std::vector<std::size_t> kept;
  std::size_t used = 0;
  for (auto i : order) {
    const auto wc = text::word_count(sentences[i]);
    if (used + wc > budget) break;
    used += wc;
    kept.push_back(i);
  }
  if (kept.empty()) {
    res.warning = "budget of " + std::to_string(budget) + " words is smaller than every sentence";
    spdlog::warn("extractive refiner: {}", *res.warning);
    return res;
  }
  std::sort(kept.begin(), kept.end());
  std::vector<std::string_view> parts;
  for (auto i : kept) parts.push_back(sentences[i]);
  res.text = text::join(parts, " ");
  res.words_after = text::word_count(res.text);
  return res;
}

namespace detail {

struct WordSpan {
  std::size_t begin, end;
};

inline std::vector<WordSpan> word_spans(std::string_view s) {
  std::vector<WordSpan> out;
  std::size_t i = 0;
  while (i < s.size()) {
    while (i < s.size() && text::is_space(s[i])) ++i;
    std::size_t j = i;
    while (j < s.size() && !text::is_space(s[j])) ++j;
    if (j > i) out.push_back({i, j});
    i = j;
  }
  return out;
}

// Character offset of each token; tokens that cannot be aligned get npos.
inline std::vector<std::size_t> align_tokens(std::string_view s, const std::vector<TokenLogprob>& tokens) {
  std::vector<std::size_t> offsets;
  std::size_t pos = 0;
  for (const auto& t : tokens) {
    if (s.compare(pos, t.token.size(), t.token) == 0) {
      offsets.push_back(pos);
      pos += t.token.size();
      continue;
    }
    const auto core = text::trim(t.token);
    const auto found = core.empty() ? std::string_view::npos : s.find(core, pos);
    if (found == std::string_view::npos) {
      offsets.push_back(std::string_view::npos);
    } else {
      offsets.push_back(found);
      pos = found + core.size();
    }
  }
  return offsets;
}

}  // namespace detail

/// Selective-context style compression. Each word's self-information is the
/// maximum -logprob of the tokens it spans; the lowest-information words are
/// deleted (later positions first on ties) until ceil(rate * n) remain.
inline RefineResult perplexity_refine(std::string_view input, const GeneratorClient& scorer, double rate) {
  if (!(rate > 0.0 && rate <= 1.0)) throw ValidationError("compression_rate", "must lie in (0, 1]");
  RefineResult res;
  const auto words = detail::word_spans(input);
  res.words_before = words.size();
  if (rate == 1.0 || words.empty()) {
    res.text = std::string(input);
    res.words_after = words.size();
    return res;
  }
  if (!scorer.capabilities().scoring) throw UnsupportedCapability("scoring");
  const auto tokens = scorer.score_tokens({}, input);
  const auto offsets = detail::align_tokens(input, tokens);

  std::vector<double> info(words.size(), 0.0);
  std::size_t w = 0;
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (offsets[t] == std::string_view::npos) continue;
    const std::size_t b = offsets[t], e = b + tokens[t].token.size();
    while (w < words.size() && words[w].end <= b) ++w;
    for (std::size_t k = w; k < words.size() && words[k].begin < e; ++k)
      info[k] = std::max(info[k], -tokens[t].logprob);
  }

  const auto keep = static_cast<std::size_t>(std::ceil(rate * static_cast<double>(words.size()) - 1e-12));
  std::vector<std::size_t> order(words.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (info[a] != info[b]) return info[a] < info[b];
    return a > b;
  });
  std::vector<char> dropped(words.size(), 0);
  for (std::size_t i = 0; i + keep < words.size(); ++i) dropped[order[i]] = 1;

  for (std::size_t i = 0; i < words.size(); ++i) {
    if (dropped[i]) continue;
    if (!res.text.empty()) res.text += ' ';
    res.text += input.substr(words[i].begin, words[i].end - words[i].begin);
  }
  res.words_after = keep;
  return res;
}

inline constexpr std::string_view kSummaryTemplate =
    "Summarize the following passages to answer the question. Keep only information relevant to the "
    "question.\n\n{passages}\n\nQuestion: {question}\nSummary:";

/// One summarization request over the passages; empty input skips the call.
inline RefineResult abstractive_refine(std::string_view query, const std::vector<const Passage*>& passages,
                                       const GeneratorClient& summarizer, std::size_t max_tokens) {
  RefineResult res;
  if (passages.empty()) return res;
  std::vector<std::string_view> parts;
  for (const auto* p : passages) {
    res.words_before += text::word_count(p->contents);
    parts.push_back(p->contents);
  }
  const auto block = text::join(parts, "\n");
  std::vector<Message> msgs{{"user", fill_slots(kSummaryTemplate, {{"passages", block}, {"question", query}})}};
  GenerationParams params;
  params.max_new_tokens = max_tokens;
  params.max_input_tokens = std::max<std::size_t>(params.max_input_tokens, approx_tokens(msgs) + 1);
  auto out = generate(summarizer, msgs, params);
  res.text = std::string(text::trim(out.text));
  res.words_after = text::word_count(res.text);
  return res;
}

/// Refiner bound to its configuration and service clients.
class Refiner {
 public:
  Refiner(RefinerConfig cfg, std::shared_ptr<const Embedder> embedder, std::shared_ptr<const GeneratorClient> model)
      : cfg_(cfg), embedder_(std::move(embedder)), model_(std::move(model)) {
    cfg_.validate();
    if (cfg_.kind == RefinerKind::extractive && !embedder_)
      throw ValidationError("refiner", "extractive refiner needs an embedder");
    if (cfg_.kind != RefinerKind::extractive && !model_)
      throw ValidationError("refiner", std::string(to_string(cfg_.kind)) + " refiner needs a model client");
  }

  RefineResult refine(std::string_view query, const std::vector<const Passage*>& passages) const {
    switch (cfg_.kind) {
      case RefinerKind::extractive: {
        std::size_t total = 0;
        for (const auto* p : passages) total += text::word_count(p->contents);
        const std::size_t budget = cfg_.token_budget.value_or(
            static_cast<std::size_t>(std::ceil(cfg_.rate() * static_cast<double>(total))));
        return extractive_refine(query, passages, budget, *embedder_);
      }
      case RefinerKind::perplexity: {
        // Only retrieved text is compressed, never the surrounding prompt.
        std::vector<std::string_view> parts;
        for (const auto* p : passages) parts.push_back(p->contents);
        return perplexity_refine(text::join(parts, "\n"), *model_, cfg_.rate());
      }
      case RefinerKind::abstractive:
        return abstractive_refine(query, passages, *model_, cfg_.max_tokens);
    }
    return {};
  }

  const RefinerConfig& config() const noexcept { return cfg_; }

 private:
  RefinerConfig cfg_;
  std::shared_ptr<const Embedder> embedder_;
  std::shared_ptr<const GeneratorClient> model_;
};

}  // namespace ragforge
