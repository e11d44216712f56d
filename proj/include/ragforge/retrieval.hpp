#pragma once

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <spdlog/spdlog.h>

#include "ragforge/corpus.hpp"
#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/text.hpp"

namespace ragforge {

/// A retrieval hit. Within a result list ranks are 1..k, scores are
/// non-increasing, and equal scores are ordered by ascending passage id.
struct ScoredPassage {
  std::string passage_id;
  double score = 0.0;
  std::size_t rank = 0;

  friend bool operator==(const ScoredPassage&, const ScoredPassage&) = default;
};

struct RetrievalRequest {
  std::string query;
  std::size_t top_k = 5;
};

inline bool ranks_before(const ScoredPassage& a, const ScoredPassage& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.passage_id < b.passage_id;
}

// Sorts by the result-list order, truncates to k and assigns 1-based ranks.
inline void finalize_ranking(std::vector<ScoredPassage>& hits, std::size_t k) {
  if (hits.size() > k) {
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(k), hits.end(), ranks_before);
    hits.resize(k);
  } else {
    std::sort(hits.begin(), hits.end(), ranks_before);
  }
  for (std::size_t i = 0; i < hits.size(); ++i) hits[i].rank = i + 1;
}

inline json to_json(const ScoredPassage& h) { return {{"id", h.passage_id}, {"score", h.score}, {"rank", h.rank}}; }

/// Contract shared by sparse and dense backends.
class Retriever {
 public:
  virtual ~Retriever() = default;

  virtual std::vector<ScoredPassage> search(std::string_view query, std::size_t k) const = 0;

  // Identifies backend type, parameters and corpus; cache entries are keyed on it.
  virtual std::string fingerprint() const = 0;

  virtual bool ready() const { return true; }

  virtual const Passage* lookup(std::string_view id) const = 0;
};

inline std::vector<ScoredPassage> retrieve(const Retriever& backend, const RetrievalRequest& req) {
  if (req.top_k < 1) throw ValidationError("top_k", "must be >= 1");
  if (!backend.ready()) throw Error("retriever backend is not initialized");
  auto hits = backend.search(req.query, req.top_k);
  finalize_ranking(hits, req.top_k);
  return hits;
}

inline std::string normalize_query(std::string_view q) { return text::collapse_whitespace(q); }

/// Stores raw retrieval results per (backend fingerprint, normalized query),
/// keeping the largest k requested; smaller requests are served as prefixes.
class RetrievalCache {
 public:
  struct Entry {
    std::size_t k = 0;
    std::vector<ScoredPassage> results;
  };

  std::optional<std::vector<ScoredPassage>> lookup(const std::string& backend, std::string_view query,
                                                   std::size_t k) const {
    std::shared_lock lock(mu_);
    auto it = entries_.find({backend, normalize_query(query)});
    if (it == entries_.end() || it->second.k < k) {
      ++misses_;
      return std::nullopt;
    }
    ++hits_;
    const auto& r = it->second.results;
    return std::vector<ScoredPassage>(r.begin(), r.begin() + static_cast<std::ptrdiff_t>(std::min(k, r.size())));
  }

  void store(const std::string& backend, std::string_view query, std::size_t k, std::vector<ScoredPassage> results) {
    std::unique_lock lock(mu_);
    auto& e = entries_[{backend, normalize_query(query)}];
    if (e.k > k) return;
    e.k = k;
    e.results = std::move(results);
  }

  std::size_t hits() const noexcept { return hits_; }
  std::size_t misses() const noexcept { return misses_; }
  std::size_t size() const {
    std::shared_lock lock(mu_);
    return entries_.size();
  }

  // Passages supplied by imported external results, for ids absent from the corpus.
  const Passage* external_passage(std::string_view id) const {
    std::shared_lock lock(mu_);
    auto it = external_.find(std::string(id));
    return it == external_.end() ? nullptr : &it->second;
  }

  /// Cache file: one `{"query","backend","k","results":[{"id","score"}]}` per line.
  /// Corrupt lines are skipped with a warning and behave as misses.
  void load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) return;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (text::trim(line).empty()) continue;
      try {
        auto obj = json::parse(line);
        std::vector<ScoredPassage> results;
        for (const auto& r : obj.at("results"))
          results.push_back({r.at("id").get<std::string>(), r.at("score").get<double>(), results.size() + 1});
        store(obj.at("backend").get<std::string>(), obj.at("query").get<std::string>(),
              obj.at("k").get<std::size_t>(), std::move(results));
      } catch (const std::exception& e) {
        spdlog::warn("retrieval cache {}:{} ignored: {}", path.string(), lineno, e.what());
      }
    }
  }

  void save(const std::filesystem::path& path) const {
    std::shared_lock lock(mu_);
    std::string out;
    for (const auto& [key, e] : entries_) {
      json results = json::array();
      for (const auto& r : e.results) results.push_back({{"id", r.passage_id}, {"score", r.score}});
      out += dump_line({{"query", key.second}, {"backend", key.first}, {"k", e.k}, {"results", results}}) + "\n";
    }
    write_file(path, out);
  }

  /// Imports results from an external retriever: each line maps query strings
  /// to `[{"id","contents","score"}...]`. Entries are filed under `backend`.
  void import_external(const std::filesystem::path& path, const std::string& backend) {
    for_each_jsonl(path, [&](json&& obj, std::size_t line) {
      for (auto& [query, list] : obj.items()) {
        if (!list.is_array()) throw FormatError("results for '" + query + "' must be a list", line);
        std::vector<ScoredPassage> results;
        for (const auto& r : list) {
          ScoredPassage h{r.at("id").get<std::string>(), r.value("score", 0.0), 0};
          if (r.contains("contents")) {
            Passage p;
            p.id = h.passage_id;
            p.title = r.value("title", std::string{});
            p.contents = r["contents"].get<std::string>();
            p.word_count = text::word_count(p.contents);
            std::unique_lock lock(mu_);
            external_.emplace(p.id, std::move(p));
          }
          results.push_back(std::move(h));
        }
        const std::size_t k = results.size();
        finalize_ranking(results, k);
        store(backend, query, k, std::move(results));
      }
    });
  }

 private:
  mutable std::shared_mutex mu_;
  std::map<std::pair<std::string, std::string>, Entry> entries_;
  std::unordered_map<std::string, Passage> external_;
  mutable std::atomic<std::size_t> hits_{0};
  mutable std::atomic<std::size_t> misses_{0};
};

inline std::vector<ScoredPassage> cached_retrieve(RetrievalCache& cache, const Retriever& backend,
                                                  const RetrievalRequest& req) {
  if (req.top_k < 1) throw ValidationError("top_k", "must be >= 1");
  const std::string fp = backend.fingerprint();
  if (auto hit = cache.lookup(fp, req.query, req.top_k)) return *hit;
  auto results = retrieve(backend, req);
  cache.store(fp, req.query, req.top_k, results);
  return results;
}

/// Retriever decorator answering from a cache before the wrapped backend.
class CachingRetriever : public Retriever {
 public:
  CachingRetriever(std::shared_ptr<const Retriever> inner, std::shared_ptr<RetrievalCache> cache)
      : inner_(std::move(inner)), cache_(std::move(cache)) {}

  std::vector<ScoredPassage> search(std::string_view query, std::size_t k) const override {
    return cached_retrieve(*cache_, *inner_, {std::string(query), k});
  }
  std::string fingerprint() const override { return inner_->fingerprint(); }
  bool ready() const override { return inner_->ready(); }
  const Passage* lookup(std::string_view id) const override {
    if (const Passage* p = inner_->lookup(id)) return p;
    return cache_->external_passage(id);
  }

  const RetrievalCache& cache() const noexcept { return *cache_; }

 private:
  std::shared_ptr<const Retriever> inner_;
  std::shared_ptr<RetrievalCache> cache_;
};

/// Second-stage scorer: one score per candidate passage.
class Reranker {
 public:
  virtual ~Reranker() = default;
  virtual std::vector<double> score(std::string_view query, const std::vector<const Passage*>& passages) const = 0;
  virtual std::string name() const = 0;
};

/// Replaces candidate scores with reranker scores and re-sorts. The passage
/// set is unchanged.
inline std::vector<ScoredPassage> rerank(const Reranker& scorer, std::string_view query,
                                         const std::vector<ScoredPassage>& candidates, const Retriever& source) {
  if (candidates.empty()) return {};
  std::vector<const Passage*> passages;
  passages.reserve(candidates.size());
  for (const auto& c : candidates) {
    const Passage* p = source.lookup(c.passage_id);
    if (!p) throw NotFound("passage '" + c.passage_id + "' not found for reranking");
    passages.push_back(p);
  }
  auto scores = scorer.score(query, passages);
  if (scores.size() != candidates.size())
    throw ServiceError("reranker returned " + std::to_string(scores.size()) + " scores for " +
                       std::to_string(candidates.size()) + " candidates");
  std::vector<ScoredPassage> out;
  out.reserve(candidates.size());
  for (std::size_t i = 0; i < candidates.size(); ++i) out.push_back({candidates[i].passage_id, scores[i], 0});
  finalize_ranking(out, out.size());
  return out;
}

/// Retriever decorator that reranks the wrapped backend's top-k.
class RerankingRetriever : public Retriever {
 public:
  RerankingRetriever(std::shared_ptr<const Retriever> inner, std::shared_ptr<const Reranker> reranker)
      : inner_(std::move(inner)), reranker_(std::move(reranker)) {}

  std::vector<ScoredPassage> search(std::string_view query, std::size_t k) const override {
    return rerank(*reranker_, query, retrieve(*inner_, {std::string(query), k}), *inner_);
  }
  std::string fingerprint() const override { return inner_->fingerprint() + "+rerank:" + reranker_->name(); }
  bool ready() const override { return inner_->ready(); }
  const Passage* lookup(std::string_view id) const override { return inner_->lookup(id); }

 private:
  std::shared_ptr<const Retriever> inner_;
  std::shared_ptr<const Reranker> reranker_;
};

}  // namespace ragforge
