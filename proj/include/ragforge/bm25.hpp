#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "ragforge/corpus.hpp"
#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/retrieval.hpp"
#include "ragforge/text.hpp"

namespace ragforge::bm25 {

using Analyzer = std::function<std::vector<std::string>(std::string_view)>;

// lowercase -> strip punctuation -> whitespace split. No stemming, no stopwords.
inline std::vector<std::string> default_analyzer(std::string_view s) {
  return text::split_whitespace(text::strip_punctuation(text::to_lower(s)));
}

struct Params {
  double k1 = 0.9;
  double b = 0.4;

  void validate() const {
    if (!(k1 >= 0.0)) throw ValidationError("bm25.k1", "must be >= 0");
    if (!(b >= 0.0 && b <= 1.0)) throw ValidationError("bm25.b", "must lie in [0, 1]");
  }
};

struct Posting {
  std::uint32_t doc = 0;  // ordinal into InvertedIndex::ids
  std::uint32_t tf = 0;
};

/// Documents are numbered in ascending passage-id order, so postings sorted by
/// ordinal are also sorted by passage id.
struct InvertedIndex {
  std::vector<std::string> ids;
  std::vector<std::uint32_t> doc_len;
  std::unordered_map<std::string, std::vector<Posting>> postings;
  std::unordered_map<std::string, std::uint32_t> ordinal;
  double avgdl = 0.0;

  std::size_t N() const noexcept { return ids.size(); }

  std::size_t df(const std::string& term) const {
    auto it = postings.find(term);
    return it == postings.end() ? 0 : it->second.size();
  }

  std::uint32_t tf(const std::string& term, std::uint32_t doc) const {
    auto it = postings.find(term);
    if (it == postings.end()) return 0;
    auto p = std::lower_bound(it->second.begin(), it->second.end(), doc,
                              [](const Posting& a, std::uint32_t d) { return a.doc < d; });
    return p != it->second.end() && p->doc == doc ? p->tf : 0;
  }
};

inline InvertedIndex build_index(const PassageStore& store, const Analyzer& analyzer = default_analyzer) {
  InvertedIndex idx;
  std::vector<const Passage*> sorted;
  sorted.reserve(store.size());
  for (const auto& p : store.passages()) sorted.push_back(&p);
  std::sort(sorted.begin(), sorted.end(), [](const Passage* a, const Passage* b) { return a->id < b->id; });

  idx.ids.reserve(sorted.size());
  idx.doc_len.reserve(sorted.size());
  double total = 0.0;
  std::unordered_map<std::string, std::uint32_t> counts;
  for (std::uint32_t d = 0; d < sorted.size(); ++d) {
    idx.ids.push_back(sorted[d]->id);
    idx.ordinal.emplace(sorted[d]->id, d);
    counts.clear();
    const auto tokens = analyzer(sorted[d]->contents);
    for (const auto& t : tokens) ++counts[t];
    idx.doc_len.push_back(static_cast<std::uint32_t>(tokens.size()));
    total += static_cast<double>(tokens.size());
    for (const auto& [term, tf] : counts) idx.postings[term].push_back({d, tf});
  }
  idx.avgdl = idx.ids.empty() ? 0.0 : total / static_cast<double>(idx.ids.size());
  return idx;
}

inline double idf(std::size_t n_docs, std::size_t df) {
  const double N = static_cast<double>(n_docs), d = static_cast<double>(df);
  return std::log(1.0 + (N - d + 0.5) / (d + 0.5));
}

inline double term_weight(double idf_value, double tf, double doc_len, double avgdl, const Params& p) {
  const double norm = avgdl > 0.0 ? p.k1 * (1.0 - p.b + p.b * doc_len / avgdl) : p.k1;
  return idf_value * tf * (p.k1 + 1.0) / (tf + norm);
}

/// Score of one passage against analyzed query terms; repeated terms count repeatedly.
inline double bm25_score(const InvertedIndex& idx, const Params& params, const std::vector<std::string>& terms,
                         std::string_view passage_id) {
  auto it = idx.ordinal.find(std::string(passage_id));
  if (it == idx.ordinal.end()) throw NotFound("unknown passage id '" + std::string(passage_id) + "'");
  const std::uint32_t d = it->second;
  double score = 0.0;
  for (const auto& t : terms) {
    const auto tf = idx.tf(t, d);
    if (tf == 0) continue;
    score += term_weight(idf(idx.N(), idx.df(t)), tf, idx.doc_len[d], idx.avgdl, params);
  }
  return score;
}

/// Top-k by BM25; passages with zero score are excluded.
inline std::vector<ScoredPassage> search(const InvertedIndex& idx, const Params& params, std::string_view query,
                                         std::size_t k, const Analyzer& analyzer = default_analyzer) {
  if (k == 0 || idx.N() == 0) return {};
  std::vector<double> acc(idx.N(), 0.0);
  std::vector<char> seen(idx.N(), 0);
  std::vector<std::uint32_t> touched;
  for (const auto& t : analyzer(query)) {
    auto it = idx.postings.find(t);
    if (it == idx.postings.end()) continue;
    const double w_idf = idf(idx.N(), it->second.size());
    for (const auto& p : it->second) {
      if (!seen[p.doc]) {
        seen[p.doc] = 1;
        touched.push_back(p.doc);
      }
      acc[p.doc] += term_weight(w_idf, p.tf, idx.doc_len[p.doc], idx.avgdl, params);
    }
  }
  std::vector<ScoredPassage> hits;
  hits.reserve(touched.size());
  for (auto d : touched)
    if (acc[d] > 0.0) hits.push_back({idx.ids[d], acc[d], 0});
  finalize_ranking(hits, k);
  return hits;
}

// Index dump layout (JSONL, deterministic):
//   line 1: {"format":"ragforge-bm25","version":1,"N":..,"avgdl":..}
//   then one {"doc":id,"len":n} per document in ordinal order
//   then one {"term":t,"postings":[[ordinal,tf],...]} per term in byte order
inline std::string serialize(const InvertedIndex& idx) {
  std::string out = dump_line({{"format", "ragforge-bm25"}, {"version", 1}, {"N", idx.N()}, {"avgdl", idx.avgdl}}) + "\n";
  for (std::size_t d = 0; d < idx.N(); ++d) out += dump_line({{"doc", idx.ids[d]}, {"len", idx.doc_len[d]}}) + "\n";
  std::vector<const std::string*> terms;
  terms.reserve(idx.postings.size());
  for (const auto& [t, _] : idx.postings) terms.push_back(&t);
  std::sort(terms.begin(), terms.end(), [](const std::string* a, const std::string* b) { return *a < *b; });
  for (const auto* t : terms) {
    json list = json::array();
    for (const auto& p : idx.postings.at(*t)) list.push_back({p.doc, p.tf});
    out += dump_line({{"term", *t}, {"postings", list}}) + "\n";
  }
  return out;
}

inline void save_index(const InvertedIndex& idx, const std::filesystem::path& dir) {
  write_file(dir / "bm25.jsonl", serialize(idx));
}

inline InvertedIndex load_index(const std::filesystem::path& dir) {
  InvertedIndex idx;
  bool header = false;
  for_each_jsonl(dir / "bm25.jsonl", [&](json&& obj, std::size_t line) {
    if (!header) {
      if (obj.value("format", "") != "ragforge-bm25" || obj.value("version", 0) != 1)
        throw FormatError("not a ragforge-bm25 v1 index", line);
      idx.avgdl = obj.at("avgdl").get<double>();
      header = true;
    } else if (obj.contains("doc")) {
      idx.ordinal.emplace(obj["doc"].get<std::string>(), static_cast<std::uint32_t>(idx.ids.size()));
      idx.ids.push_back(obj["doc"].get<std::string>());
      idx.doc_len.push_back(obj.at("len").get<std::uint32_t>());
    } else {
      auto& list = idx.postings[obj.at("term").get<std::string>()];
      for (const auto& p : obj.at("postings")) list.push_back({p.at(0).get<std::uint32_t>(), p.at(1).get<std::uint32_t>()});
    }
  });
  if (!header) throw FormatError("empty index file");
  return idx;
}

/// Sparse retriever over a passage store.
class Bm25Retriever : public Retriever {
 public:
  Bm25Retriever(std::shared_ptr<const PassageStore> store, Params params = {})
      : Bm25Retriever(store, build_index(*store), params) {}

  Bm25Retriever(std::shared_ptr<const PassageStore> store, InvertedIndex index, Params params)
      : store_(std::move(store)), index_(std::move(index)), params_(params) {
    params_.validate();
    if (index_.N() != store_->size())
      throw ValidationError("index", "index covers " + std::to_string(index_.N()) + " passages, corpus has " +
                                         std::to_string(store_->size()));
    std::ostringstream fp;
    fp << "bm25:k1=" << params_.k1 << ",b=" << params_.b << ":" << store_->fingerprint();
    fingerprint_ = fp.str();
  }

  std::vector<ScoredPassage> search(std::string_view query, std::size_t k) const override {
    return bm25::search(index_, params_, query, k);
  }
  std::string fingerprint() const override { return fingerprint_; }
  const Passage* lookup(std::string_view id) const override { return store_->find(id); }

  const InvertedIndex& index() const noexcept { return index_; }
  const Params& params() const noexcept { return params_; }

 private:
  std::shared_ptr<const PassageStore> store_;
  InvertedIndex index_;
  Params params_;
  std::string fingerprint_;
};

}  // namespace ragforge::bm25
