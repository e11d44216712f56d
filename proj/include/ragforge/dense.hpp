#pragma once

#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ragforge/corpus.hpp"
#include "ragforge/embedding.hpp"
#include "ragforge/error.hpp"
#include "ragforge/http.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/retrieval.hpp"

namespace ragforge::dense {

enum class Metric { inner_product, cosine };

inline Metric parse_metric(std::string_view s) {
  if (s == "inner_product" || s == "ip") return Metric::inner_product;
  if (s == "cosine") return Metric::cosine;
  throw ValidationError("metric", "must be 'inner_product' or 'cosine' (got '" + std::string(s) + "')");
}

inline std::string_view to_string(Metric m) { return m == Metric::cosine ? "cosine" : "inner_product"; }

/// Row-major exact-search store. Under the cosine metric rows are unit-normalized.
struct VectorStore {
  std::size_t dim = 0;
  std::vector<std::string> ids;
  std::vector<float> data;
  Metric metric = Metric::inner_product;

  std::size_t rows() const noexcept { return ids.size(); }
  std::span<const float> row(std::size_t i) const { return {data.data() + i * dim, dim}; }

  void add(std::string id, Vector v) {
    if (ids.empty() && dim == 0) dim = v.size();
    if (v.size() != dim)
      throw ValidationError("vector", "row '" + id + "' has dimension " + std::to_string(v.size()) + ", store has " +
                                          std::to_string(dim));
    if (metric == Metric::cosine) normalize_in_place(v);
    ids.push_back(std::move(id));
    data.insert(data.end(), v.begin(), v.end());
  }
};

inline VectorStore build_vector_store(const PassageStore& store, const Embedder& embedder, Metric metric) {
  std::vector<std::string> texts;
  texts.reserve(store.size());
  for (const auto& p : store.passages()) {
    if (p.contents.empty()) throw ValidationError("corpus", "passage '" + p.id + "' is empty");
    texts.push_back(p.contents);
  }
  auto vectors = embedder.embed(texts, EmbedRole::passage);
  if (vectors.size() != store.size()) throw ServiceError("embedder returned the wrong number of vectors");
  VectorStore vs;
  vs.metric = metric;
  for (std::size_t i = 0; i < vectors.size(); ++i) vs.add(store.passages()[i].id, std::move(vectors[i]));
  return vs;
}

/// Precomputed vectors, JSONL `{"id":..., "vector":[...]}`.
inline VectorStore load_vectors(const std::filesystem::path& path, Metric metric) {
  VectorStore vs;
  vs.metric = metric;
  for_each_jsonl(path, [&](json&& obj, std::size_t line) {
    try {
      vs.add(obj.at("id").get<std::string>(), obj.at("vector").get<Vector>());
    } catch (const json::exception& e) {
      throw FormatError(e.what(), line);
    } catch (const ValidationError& e) {
      throw FormatError(e.what(), line);
    }
  });
  return vs;
}

inline void save_vectors(const VectorStore& vs, const std::filesystem::path& path) {
  std::string out;
  for (std::size_t i = 0; i < vs.rows(); ++i) {
    auto r = vs.row(i);
    out += dump_line({{"id", vs.ids[i]}, {"vector", Vector(r.begin(), r.end())}}) + "\n";
  }
  write_file(path, out);
}

/// Exact top-k by full scan.
inline std::vector<ScoredPassage> dense_search(const VectorStore& vs, Vector query, std::size_t k) {
  if (query.size() != vs.dim)
    throw ValidationError("query", "dimension " + std::to_string(query.size()) + " does not match store dimension " +
                                       std::to_string(vs.dim));
  if (vs.metric == Metric::cosine) normalize_in_place(query);
  std::vector<ScoredPassage> hits;
  hits.reserve(vs.rows());
  for (std::size_t i = 0; i < vs.rows(); ++i) {
    auto r = vs.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < vs.dim; ++j) s += static_cast<double>(r[j]) * static_cast<double>(query[j]);
    hits.push_back({vs.ids[i], s, 0});
  }
  finalize_ranking(hits, k);
  return hits;
}

/// OpenAI-compatible embeddings call: POST {base}/embeddings.
inline EmbedTransport http_transport(const EmbeddingClientConfig& cfg, std::string api_key = {}) {
  auto client = std::make_shared<http::JsonClient>(
      cfg.endpoint, http::ClientOptions{cfg.timeout, cfg.max_retries, std::chrono::milliseconds(200), std::move(api_key)});
  return [client](const std::string& model, const std::vector<std::string>& texts) {
    json res = client->post("/embeddings", {{"model", model}, {"input", texts}});
    std::vector<Vector> out(texts.size());
    std::vector<char> filled(texts.size(), 0);
    for (const auto& d : res.at("data")) {
      const auto i = d.at("index").get<std::size_t>();
      if (i >= out.size()) throw ServiceError("embedding response index out of range");
      out[i] = d.at("embedding").get<Vector>();
      filled[i] = 1;
    }
    for (char f : filled)
      if (!f) throw ServiceError("embedding response is missing entries");
    return out;
  };
}

class DenseRetriever : public Retriever {
 public:
  DenseRetriever(std::shared_ptr<const PassageStore> store, VectorStore vectors, std::shared_ptr<const Embedder> embedder)
      : store_(std::move(store)), vectors_(std::move(vectors)), embedder_(std::move(embedder)) {
    for (const auto& id : vectors_.ids)
      if (!store_->find(id)) throw ValidationError("vectors", "id '" + id + "' is not in the corpus");
  }

  std::vector<ScoredPassage> search(std::string_view query, std::size_t k) const override {
    auto q = embedder_->embed({std::string(query)}, EmbedRole::query);
    if (q.size() != 1) throw ServiceError("embedder returned no query vector");
    return dense_search(vectors_, std::move(q.front()), k);
  }

  std::string fingerprint() const override {
    return "dense:" + embedder_->name() + ":" + std::string(to_string(vectors_.metric)) + ":" + store_->fingerprint();
  }

  const Passage* lookup(std::string_view id) const override { return store_->find(id); }
  const VectorStore& vectors() const noexcept { return vectors_; }

 private:
  std::shared_ptr<const PassageStore> store_;
  VectorStore vectors_;
  std::shared_ptr<const Embedder> embedder_;
};

/// Scores candidates by cosine between query and passage embeddings.
class BiEncoderReranker : public Reranker {
 public:
  explicit BiEncoderReranker(std::shared_ptr<const Embedder> embedder) : embedder_(std::move(embedder)) {}

  std::vector<double> score(std::string_view query, const std::vector<const Passage*>& passages) const override {
    auto q = embedder_->embed({std::string(query)}, EmbedRole::query);
    std::vector<std::string> texts;
    texts.reserve(passages.size());
    for (const auto* p : passages) texts.push_back(p->contents);
    auto vs = embedder_->embed(texts, EmbedRole::passage);
    std::vector<double> out;
    out.reserve(vs.size());
    for (const auto& v : vs) out.push_back(cosine(q.front(), v));
    return out;
  }

  std::string name() const override { return "bi-encoder:" + embedder_->name(); }

 private:
  std::shared_ptr<const Embedder> embedder_;
};

/// Remote cross-encoder: POST {base}/rerank with {"model","query","documents"},
/// response {"results":[{"index","relevance_score"}...]}.
class CrossEncoderReranker : public Reranker {
 public:
  CrossEncoderReranker(std::string endpoint, std::string model, http::ClientOptions opts = {})
      : client_(endpoint, opts), model_(std::move(model)) {}

  std::vector<double> score(std::string_view query, const std::vector<const Passage*>& passages) const override {
    json docs = json::array();
    for (const auto* p : passages) docs.push_back(p->contents);
    json res = client_.post("/rerank", {{"model", model_}, {"query", query}, {"documents", docs}});
    std::vector<double> out(passages.size(), 0.0);
    for (const auto& r : res.at("results")) {
      const auto i = r.at("index").get<std::size_t>();
      if (i >= out.size()) throw ServiceError("rerank response index out of range");
      out[i] = r.at("relevance_score").get<double>();
    }
    return out;
  }

  std::string name() const override { return "cross-encoder:" + model_; }

 private:
  http::JsonClient client_;
  std::string model_;
};

}  // namespace ragforge::dense
