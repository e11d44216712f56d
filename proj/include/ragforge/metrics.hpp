#pragma once

// Generation-aspect and retrieval-aspect QA metrics. All scores lie in [0, 1]
// and take the maximum over golden answers.

#include <algorithm>
#include <cmath>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "ragforge/text.hpp"

namespace ragforge::metrics {

using Tokens = std::vector<std::string>;

/// lowercase -> drop punctuation -> drop articles (a, an, the) -> whitespace split.
inline Tokens normalize_answer(std::string_view s) {
  Tokens out;
  for (auto& tok : text::split_whitespace(text::strip_punctuation(text::to_lower(s))))
    if (tok != "a" && tok != "an" && tok != "the") out.push_back(std::move(tok));
  return out;
}

inline std::string normalized_string(std::string_view s) { return text::join(normalize_answer(s), " "); }

// Tokenization for the overlap metrics (BLEU, ROUGE-L): lowercase, drop
// punctuation, split on whitespace. Articles are kept.
inline Tokens surface_tokens(std::string_view s) {
  return text::split_whitespace(text::strip_punctuation(text::to_lower(s)));
}

template <typename Fn>
double max_over_golds(const std::vector<std::string>& golds, Fn&& fn) {
  double best = 0.0;
  for (const auto& g : golds) best = std::max(best, fn(g));
  return best;
}

inline double exact_match(std::string_view pred, const std::vector<std::string>& golds) {
  const auto p = normalize_answer(pred);
  return max_over_golds(golds, [&](const std::string& g) { return normalize_answer(g) == p ? 1.0 : 0.0; });
}

inline double f1_tokens(const Tokens& pred, const Tokens& gold) {
  if (pred.empty() || gold.empty()) return pred.empty() && gold.empty() ? 1.0 : 0.0;
  std::unordered_map<std::string, int> counts;
  for (const auto& t : gold) ++counts[t];
  std::size_t overlap = 0;
  for (const auto& t : pred)
    if (auto it = counts.find(t); it != counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  if (overlap == 0) return 0.0;
  const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
  return 2.0 * precision * recall / (precision + recall);
}

inline double token_f1(std::string_view pred, const std::vector<std::string>& golds) {
  const auto p = normalize_answer(pred);
  return max_over_golds(golds, [&](const std::string& g) { return f1_tokens(p, normalize_answer(g)); });
}

// True when `needle` occurs as a contiguous run inside `hay`.
inline bool contains_sequence(const Tokens& hay, const Tokens& needle) {
  if (needle.empty()) return false;
  return std::search(hay.begin(), hay.end(), needle.begin(), needle.end()) != hay.end();
}

/// Cover-match: a normalized gold appears contiguously in the normalized prediction.
inline double accuracy(std::string_view pred, const std::vector<std::string>& golds) {
  const auto p = normalize_answer(pred);
  return max_over_golds(golds, [&](const std::string& g) {
    const auto gt = normalize_answer(g);
    if (gt.empty()) return p.empty() ? 1.0 : 0.0;
    return contains_sequence(p, gt) ? 1.0 : 0.0;
  });
}

/// Sentence BLEU-4 over normalized tokens, add-one smoothing on zero n-gram
/// matches, brevity penalty exp(1 - r/c) when c < r.
inline double bleu_tokens(const Tokens& cand, const Tokens& ref) {
  if (cand.empty() || ref.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<std::vector<std::string>, int> ref_counts;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) ++ref_counts[{ref.begin() + i, ref.begin() + i + n}];
    std::map<std::vector<std::string>, int> cand_counts;
    std::size_t total = 0;
    for (std::size_t i = 0; i + n <= cand.size(); ++i) {
      ++cand_counts[{cand.begin() + i, cand.begin() + i + n}];
      ++total;
    }
    std::size_t matched = 0;
    for (const auto& [gram, c] : cand_counts)
      if (auto it = ref_counts.find(gram); it != ref_counts.end())
        matched += static_cast<std::size_t>(std::min(c, it->second));
    double precision;
    if (total == 0 || matched == 0)
      precision = 1.0 / (static_cast<double>(total) + 1.0);
    else
      precision = static_cast<double>(matched) / static_cast<double>(total);
    log_sum += std::log(precision);
  }
  const double c = static_cast<double>(cand.size()), r = static_cast<double>(ref.size());
  const double bp = c < r ? std::exp(1.0 - r / c) : 1.0;
  return bp * std::exp(log_sum / 4.0);
}

inline double bleu(std::string_view pred, const std::vector<std::string>& golds) {
  const auto p = surface_tokens(pred);
  return max_over_golds(golds, [&](const std::string& g) { return bleu_tokens(p, surface_tokens(g)); });
}

inline std::size_t lcs_length(const Tokens& a, const Tokens& b) {
  std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = a[i - 1] == b[j - 1] ? prev[j - 1] + 1 : std::max(prev[j], cur[j - 1]);
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

inline double rouge_l_tokens(const Tokens& pred, const Tokens& gold) {
  if (pred.empty() || gold.empty()) return 0.0;
  const auto lcs = static_cast<double>(lcs_length(pred, gold));
  if (lcs == 0.0) return 0.0;
  const double p = lcs / static_cast<double>(pred.size()), r = lcs / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

inline double rouge_l(std::string_view pred, const std::vector<std::string>& golds) {
  const auto p = surface_tokens(pred);
  return max_over_golds(golds, [&](const std::string& g) { return rouge_l_tokens(p, surface_tokens(g)); });
}

/// A passage is relevant when any normalized gold occurs contiguously in it.
inline bool is_relevant(std::string_view contents, const std::vector<std::string>& golds) {
  const auto toks = normalize_answer(contents);
  for (const auto& g : golds)
    if (contains_sequence(toks, normalize_answer(g))) return true;
  return false;
}

enum class RecallMode { answer, set };

struct RetrievalScores {
  double recall = 0.0;
  double precision = 0.0;
  double f1 = 0.0;
  double average_precision = 0.0;
};

/// Scores the first k passages of a ranked list. In answer mode recall@k is 1
/// when any passage is relevant; in set mode it is the fraction of golds found.
inline RetrievalScores retrieval_scores(const std::vector<std::string>& ranked_contents,
                                        const std::vector<std::string>& golds, std::size_t k,
                                        RecallMode mode = RecallMode::answer) {
  RetrievalScores s;
  const std::size_t n = std::min(k, ranked_contents.size());
  if (n == 0 || golds.empty()) return s;
  std::size_t relevant = 0;
  double ap_sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!is_relevant(ranked_contents[i], golds)) continue;
    ++relevant;
    ap_sum += static_cast<double>(relevant) / static_cast<double>(i + 1);
  }
  s.precision = static_cast<double>(relevant) / static_cast<double>(n);
  s.average_precision = relevant ? ap_sum / static_cast<double>(relevant) : 0.0;
  if (mode == RecallMode::answer) {
    s.recall = relevant ? 1.0 : 0.0;
  } else {
    std::size_t found = 0;
    for (const auto& g : golds) {
      const auto gt = normalize_answer(g);
      for (std::size_t i = 0; i < n; ++i)
        if (contains_sequence(normalize_answer(ranked_contents[i]), gt)) {
          ++found;
          break;
        }
    }
    s.recall = static_cast<double>(found) / static_cast<double>(golds.size());
  }
  s.f1 = s.recall + s.precision > 0.0 ? 2.0 * s.recall * s.precision / (s.recall + s.precision) : 0.0;
  return s;
}

}  // namespace ragforge::metrics
