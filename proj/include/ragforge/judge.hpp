#pragma once

#include <algorithm>
#include <filesystem>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "ragforge/embedding.hpp"
#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"

namespace ragforge {

enum class Verdict { retrieve, no_retrieve };

inline std::string_view to_string(Verdict v) { return v == Verdict::retrieve ? "retrieve" : "no_retrieve"; }

inline Verdict parse_verdict(std::string_view s) {
  if (s == "retrieve") return Verdict::retrieve;
  if (s == "no_retrieve") return Verdict::no_retrieve;
  throw ValidationError("label", "must be 'retrieve' or 'no_retrieve' (got '" + std::string(s) + "')");
}

struct SkrEntry {
  std::string question;
  Vector embedding;
  Verdict label = Verdict::retrieve;
};

struct SkrTrainingSet {
  std::vector<SkrEntry> entries;
  std::size_t k = 5;

  void validate() const {
    if (k < 1) throw ValidationError("judger.k", "must be >= 1");
    if (entries.size() < k)
      throw ValidationError("judger.k", "training set has " + std::to_string(entries.size()) + " entries, fewer than k=" +
                                            std::to_string(k));
    for (const auto& e : entries)
      if (e.embedding.size() != entries.front().embedding.size())
        throw ValidationError("judger", "training embeddings have mixed dimensions");
  }
};

/// Training file: JSONL `{"question":..., "label":"retrieve"|"no_retrieve"}`;
/// questions are embedded at load with the query role.
inline SkrTrainingSet load_skr_training(const std::filesystem::path& path, const Embedder& embedder, std::size_t k = 5) {
  std::vector<std::string> questions;
  std::vector<Verdict> labels;
  for_each_jsonl(path, [&](json&& obj, std::size_t line) {
    try {
      questions.push_back(obj.at("question").get<std::string>());
      labels.push_back(parse_verdict(obj.at("label").get<std::string>()));
    } catch (const std::exception& e) {
      throw FormatError(e.what(), line);
    }
  });
  auto vectors = embedder.embed(questions, EmbedRole::query);
  SkrTrainingSet ts;
  ts.k = k;
  for (std::size_t i = 0; i < questions.size(); ++i)
    ts.entries.push_back({std::move(questions[i]), std::move(vectors[i]), labels[i]});
  ts.validate();
  return ts;
}

struct Neighbor {
  std::size_t ordinal = 0;
  std::string question;
  double similarity = 0.0;
  Verdict label = Verdict::retrieve;
};

struct Judgement {
  Verdict verdict = Verdict::retrieve;
  std::vector<Neighbor> neighbors;
};

inline json to_json(const Judgement& j) {
  json ns = json::array();
  for (const auto& n : j.neighbors)
    ns.push_back({{"ordinal", n.ordinal}, {"question", n.question}, {"similarity", n.similarity},
                  {"label", to_string(n.label)}});
  return {{"verdict", to_string(j.verdict)}, {"neighbors", ns}};
}

/// k-nearest training questions by cosine; majority label wins, ties retrieve.
inline Judgement skr_judge(const Vector& query, const SkrTrainingSet& ts) {
  ts.validate();
  std::vector<double> sims(ts.entries.size());
  for (std::size_t i = 0; i < ts.entries.size(); ++i) sims[i] = cosine(query, ts.entries[i].embedding);
  std::vector<std::size_t> order(ts.entries.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return sims[a] > sims[b]; });

  Judgement j;
  std::size_t retrieve_votes = 0;
  for (std::size_t r = 0; r < ts.k; ++r) {
    const auto i = order[r];
    j.neighbors.push_back({i, ts.entries[i].question, sims[i], ts.entries[i].label});
    if (ts.entries[i].label == Verdict::retrieve) ++retrieve_votes;
  }
  j.verdict = 2 * retrieve_votes >= ts.k ? Verdict::retrieve : Verdict::no_retrieve;
  return j;
}

/// Retrieval-necessity judger bound to its encoder.
class SkrJudger {
 public:
  SkrJudger(SkrTrainingSet ts, std::shared_ptr<const Embedder> embedder) : ts_(std::move(ts)), embedder_(std::move(embedder)) {
    ts_.validate();
  }

  Judgement judge(std::string_view query) const {
    auto q = embedder_->embed({std::string(query)}, EmbedRole::query);
    if (q.size() != 1) throw ServiceError("embedder returned no query vector");
    return skr_judge(q.front(), ts_);
  }

  const SkrTrainingSet& training() const noexcept { return ts_; }

 private:
  SkrTrainingSet ts_;
  std::shared_ptr<const Embedder> embedder_;
};

}  // namespace ragforge
