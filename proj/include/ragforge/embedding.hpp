#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/parallel.hpp"
#include "ragforge/text.hpp"

namespace ragforge {

using Vector = std::vector<float>;

enum class EmbedRole { query, passage };

struct EmbeddingClientConfig {
  std::string endpoint;
  std::string model = "e5-base-v2";
  std::size_t batch_size = 1024;
  std::string query_prefix = "query: ";
  std::string passage_prefix = "passage: ";
  std::chrono::milliseconds timeout{30000};
  int max_retries = 3;
  std::size_t parallelism = 1;  // concurrent in-flight batch requests

  void validate() const {
    if (batch_size < 1) throw ValidationError("embedder.batch_size", "must be >= 1");
    if (parallelism < 1) throw ValidationError("embedder.parallelism", "must be >= 1");
  }
};

/// Anything that maps texts to vectors, one per input, in input order.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual std::vector<Vector> embed(const std::vector<std::string>& texts, EmbedRole role) const = 0;
  virtual std::string name() const = 0;
};

// One service request: texts (already prefixed) in, vectors out.
using EmbedTransport = std::function<std::vector<Vector>(const std::string& model, const std::vector<std::string>&)>;

/// Batching, prefixing client over an embedding transport.
class EmbeddingClient : public Embedder {
 public:
  EmbeddingClient(EmbeddingClientConfig cfg, EmbedTransport transport)
      : cfg_(std::move(cfg)), transport_(std::move(transport)) {
    cfg_.validate();
  }

  std::vector<Vector> embed(const std::vector<std::string>& texts, EmbedRole role) const override {
    if (texts.empty()) return {};
    const std::string& prefix = role == EmbedRole::query ? cfg_.query_prefix : cfg_.passage_prefix;
    const std::size_t n_batches = (texts.size() + cfg_.batch_size - 1) / cfg_.batch_size;
    std::vector<std::vector<Vector>> batches(n_batches);
    parallel_for(n_batches, cfg_.parallelism, [&](std::size_t b) {
      const std::size_t begin = b * cfg_.batch_size;
      const std::size_t end = std::min(texts.size(), begin + cfg_.batch_size);
      std::vector<std::string> request;
      request.reserve(end - begin);
      for (std::size_t i = begin; i < end; ++i) request.push_back(prefix + texts[i]);
      ++requests_;
      batches[b] = transport_(cfg_.model, request);
      if (batches[b].size() != request.size())
        throw ServiceError("embedding service returned " + std::to_string(batches[b].size()) + " vectors for " +
                           std::to_string(request.size()) + " inputs");
    });
    std::vector<Vector> out;
    out.reserve(texts.size());
    for (auto& batch : batches)
      for (auto& v : batch) {
        if (!out.empty() && v.size() != out.front().size())
          throw ServiceError("embedding dimension mismatch: " + std::to_string(v.size()) + " vs " +
                             std::to_string(out.front().size()));
        out.push_back(std::move(v));
      }
    return out;
  }

  std::string name() const override { return cfg_.model; }
  std::size_t request_count() const noexcept { return requests_; }
  const EmbeddingClientConfig& config() const noexcept { return cfg_; }

 private:
  EmbeddingClientConfig cfg_;
  EmbedTransport transport_;
  mutable std::atomic<std::size_t> requests_{0};
};

inline double dot(const Vector& a, const Vector& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return s;
}

inline double norm(const Vector& a) { return std::sqrt(dot(a, a)); }

inline double cosine(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw ValidationError("vector", "dimension mismatch");
  const double na = norm(a), nb = norm(b);
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot(a, b) / (na * nb);
}

inline void normalize_in_place(Vector& v) {
  const double n = norm(v);
  if (n == 0.0) return;
  for (auto& x : v) x = static_cast<float>(x / n);
}

/// Deterministic offline embedding: signed feature hashing of lowercased,
/// punctuation-free words, L2-normalized. Equal strings give equal vectors.
inline Vector hashing_embedding(std::string_view s, std::size_t dim) {
  Vector v(dim, 0.0f);
  for (const auto& tok : text::split_whitespace(text::strip_punctuation(text::to_lower(s)))) {
    const auto h = text::fnv1a(tok);
    v[h % dim] += (h >> 63) ? 1.0f : -1.0f;
  }
  normalize_in_place(v);
  return v;
}

inline EmbedTransport hashing_transport(std::size_t dim) {
  return [dim](const std::string&, const std::vector<std::string>& texts) {
    std::vector<Vector> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(hashing_embedding(t, dim));
    return out;
  };
}

}  // namespace ragforge
