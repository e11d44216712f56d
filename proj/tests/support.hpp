#pragma once

// Test doubles and independent oracles. The oracles deliberately avoid the
// library's own scoring code so they can catch errors in it.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ragforge/corpus.hpp"
#include "ragforge/embedding.hpp"
#include "ragforge/generate.hpp"
#include "ragforge/retrieval.hpp"

namespace testing_support {

using namespace ragforge;

inline std::filesystem::path source_dir() { return RAGFORGE_SOURCE_DIR; }

class TempDir {
 public:
  TempDir() {
    static std::atomic<int> counter{0};
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() /
            ("ragforge-test-" + std::to_string(rd()) + "-" + std::to_string(counter++));
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

inline std::shared_ptr<const PassageStore> make_store(const std::vector<std::pair<std::string, std::string>>& rows,
                                                      const std::vector<std::string>& titles = {}) {
  std::vector<Passage> ps;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    Passage p;
    p.id = rows[i].first;
    p.title = i < titles.size() ? titles[i] : rows[i].first;
    p.contents = rows[i].second;
    p.word_count = text::word_count(p.contents);
    ps.push_back(std::move(p));
  }
  return std::make_shared<const PassageStore>(std::move(ps));
}

/// Retriever returning scripted results per query; counts backend calls.
class StubRetriever : public Retriever {
 public:
  using Fn = std::function<std::vector<ScoredPassage>(std::string_view, std::size_t)>;
  StubRetriever(std::shared_ptr<const PassageStore> store, Fn fn, std::string fp = "stub")
      : store_(std::move(store)), fn_(std::move(fn)), fp_(std::move(fp)) {}

  std::vector<ScoredPassage> search(std::string_view q, std::size_t k) const override {
    ++calls_;
    {
      std::lock_guard lock(mu_);
      queries_.emplace_back(q);
    }
    return fn_(q, k);
  }
  std::string fingerprint() const override { return fp_; }
  const Passage* lookup(std::string_view id) const override { return store_->find(id); }

  std::size_t calls() const { return calls_; }
  std::vector<std::string> queries() const {
    std::lock_guard lock(mu_);
    return queries_;
  }

 private:
  std::shared_ptr<const PassageStore> store_;
  Fn fn_;
  std::string fp_;
  mutable std::atomic<std::size_t> calls_{0};
  mutable std::mutex mu_;
  mutable std::vector<std::string> queries_;
};

/// Results: the first min(k, n) passages of the store with the given scores.
inline StubRetriever::Fn fixed_results(const std::vector<std::string>& ids, const std::vector<double>& scores) {
  return [ids, scores](std::string_view, std::size_t k) {
    std::vector<ScoredPassage> out;
    for (std::size_t i = 0; i < ids.size() && i < k; ++i) out.push_back({ids[i], scores[i], i + 1});
    return out;
  };
}

/// Embedder giving identical strings identical pseudo-random unit vectors, and
/// optionally fixed vectors for chosen strings.
class StubEmbedder : public Embedder {
 public:
  explicit StubEmbedder(std::size_t dim = 16, std::map<std::string, Vector> fixed = {})
      : dim_(dim), fixed_(std::move(fixed)) {}

  std::vector<Vector> embed(const std::vector<std::string>& texts, EmbedRole) const override {
    ++calls_;
    std::vector<Vector> out;
    for (const auto& t : texts) {
      if (auto it = fixed_.find(t); it != fixed_.end()) {
        out.push_back(it->second);
        continue;
      }
      std::mt19937_64 rng(std::hash<std::string>{}(t));
      std::normal_distribution<double> nd;
      Vector v(dim_);
      double n = 0;
      for (auto& x : v) {
        x = static_cast<float>(nd(rng));
        n += x * x;
      }
      for (auto& x : v) x = static_cast<float>(x / std::sqrt(n));
      out.push_back(std::move(v));
    }
    return out;
  }
  std::string name() const override { return "stub"; }
  std::size_t calls() const { return calls_; }

 private:
  std::size_t dim_;
  std::map<std::string, Vector> fixed_;
  mutable std::atomic<std::size_t> calls_{0};
};

namespace oracle {

// Independent analyzer: lowercase, drop ASCII punctuation, split on whitespace.
inline std::vector<std::string> analyze(const std::string& s) {
  std::string clean;
  for (char c : s) {
    unsigned char u = static_cast<unsigned char>(c);
    if (std::ispunct(u)) continue;
    clean += static_cast<char>(std::tolower(u));
  }
  std::istringstream in(clean);
  std::vector<std::string> out;
  for (std::string w; in >> w;) out.push_back(w);
  return out;
}

struct Hit {
  std::string id;
  double score;
};

/// Brute-force BM25: scores every passage against every query term directly
/// from its token list; idf = ln(1 + (N - df + 0.5) / (df + 0.5)). Tokenizes
/// the corpus once so many queries can share it.
class Bm25Oracle {
 public:
  explicit Bm25Oracle(const std::vector<std::pair<std::string, std::string>>& docs) {
    double total = 0;
    for (const auto& [id, text] : docs) {
      ids_.push_back(id);
      toks_.push_back(analyze(text));
      total += static_cast<double>(toks_.back().size());
    }
    avgdl_ = docs.empty() ? 0.0 : total / static_cast<double>(docs.size());
  }

  std::vector<Hit> search(const std::string& query, std::size_t k, double k1, double b) const {
    const double N = static_cast<double>(ids_.size());
    const auto q = analyze(query);
    std::vector<double> dfs;
    for (const auto& term : q) {
      double df = 0;
      for (const auto& t : toks_) df += std::count(t.begin(), t.end(), term) > 0 ? 1 : 0;
      dfs.push_back(df);
    }
    std::vector<Hit> hits;
    for (std::size_t d = 0; d < ids_.size(); ++d) {
      double score = 0;
      bool any = false;
      for (std::size_t qi = 0; qi < q.size(); ++qi) {
        const double df = dfs[qi];
        const double tf = static_cast<double>(std::count(toks_[d].begin(), toks_[d].end(), q[qi]));
        if (tf == 0) continue;
        any = true;
        const double idf = std::log(1.0 + (N - df + 0.5) / (df + 0.5));
        const double len = static_cast<double>(toks_[d].size());
        score += idf * tf * (k1 + 1) / (tf + k1 * (1 - b + b * len / avgdl_));
      }
      if (any && score > 0) hits.push_back({ids_[d], score});
    }
    std::sort(hits.begin(), hits.end(), [](const Hit& x, const Hit& y) {
      if (x.score != y.score) return x.score > y.score;
      return x.id < y.id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
  }

 private:
  std::vector<std::string> ids_;
  std::vector<std::vector<std::string>> toks_;
  double avgdl_ = 0.0;
};

inline std::vector<Hit> bm25(const std::vector<std::pair<std::string, std::string>>& docs, const std::string& query,
                             std::size_t k, double k1, double b) {
  return Bm25Oracle(docs).search(query, k, k1, b);
}

/// Full scan over raw rows; cosine normalizes both sides on the fly.
inline std::vector<Hit> full_scan(const std::vector<std::string>& ids, const std::vector<std::vector<double>>& rows,
                                  const std::vector<double>& q, std::size_t k, bool cosine) {
  auto norm = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
  };
  std::vector<Hit> hits;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    double s = 0;
    for (std::size_t j = 0; j < q.size(); ++j) s += rows[i][j] * q[j];
    if (cosine) s /= norm(rows[i]) * norm(q);
    hits.push_back({ids[i], s});
  }
  std::sort(hits.begin(), hits.end(), [](const Hit& x, const Hit& y) {
    if (x.score != y.score) return x.score > y.score;
    return x.id < y.id;
  });
  if (hits.size() > k) hits.resize(k);
  return hits;
}

/// Windows [start, end) over S units by direct simulation: step by stride
/// while a full window fits, then add a tail only when units remain uncovered.
inline std::vector<std::pair<std::size_t, std::size_t>> windows(std::size_t S, std::size_t size, std::size_t stride) {
  std::vector<std::pair<std::size_t, std::size_t>> out;
  if (S == 0) return out;
  if (S <= size) return {{0, S}};
  std::size_t s = 0, covered = 0;
  while (s + size <= S) {
    out.push_back({s, s + size});
    covered = s + size;
    s += stride;
  }
  if (covered < S) out.push_back({s, S});
  return out;
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double z = 0;
  for (double v : x) z += std::exp(v);
  std::vector<double> out;
  for (double v : x) out.push_back(std::exp(v) / z);
  return out;
}

}  // namespace oracle

}  // namespace testing_support
