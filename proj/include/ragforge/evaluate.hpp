#pragma once

#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <spdlog/fmt/fmt.h>

#include "ragforge/dataspec.hpp"
#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/metrics.hpp"
#include "ragforge/trace.hpp"

namespace ragforge {

inline const std::vector<std::string>& generation_metric_names() {
  static const std::vector<std::string> names{"em", "f1", "acc", "bleu", "rouge_l"};
  return names;
}

inline const std::vector<std::string>& retrieval_metric_names() {
  static const std::vector<std::string> names{"recall", "precision", "retrieval_f1", "map"};
  return names;
}

inline std::vector<std::string> all_metric_names() {
  auto out = generation_metric_names();
  for (const auto& n : retrieval_metric_names()) out.push_back(n);
  return out;
}

inline void validate_metric_names(const std::vector<std::string>& names) {
  const auto known = all_metric_names();
  for (const auto& n : names)
    if (std::find(known.begin(), known.end(), n) == known.end())
      throw ValidationError("metrics", "unknown metric '" + n + "'");
}

struct EvalOptions {
  std::vector<std::string> metrics = all_metric_names();
  std::size_t k = 5;
  metrics::RecallMode recall_mode = metrics::RecallMode::answer;
};

struct TokenUsage {
  std::size_t prompt_tokens = 0;
  std::size_t generated_tokens = 0;
  std::optional<std::size_t> refine_words_before;
  std::optional<std::size_t> refine_words_after;
};

/// Aggregate metrics are means over the non-error items that carry the metric.
struct MetricReport {
  std::map<std::string, double> aggregate;
  std::map<std::string, std::map<std::string, double>> per_item;
  std::map<std::string, TokenUsage> usage_per_item;
  TokenUsage usage;
  std::vector<std::pair<std::string, std::string>> errors;  // (item id, message)
  std::vector<std::string> order;                           // item ids in trace order
};

namespace detail {

inline void add_usage(const json& steps, TokenUsage& u) {
  for (const auto& s : steps) {
    const auto& kind = s.at("kind").get_ref<const std::string&>();
    const auto& d = s.at("data");
    if (kind == "generate") {
      u.generated_tokens += d.value("token_count", std::size_t{0});
      u.prompt_tokens += d.value("prompt_tokens", std::size_t{0});
    } else if (kind == "refine" && d.contains("words_before")) {
      u.refine_words_before = u.refine_words_before.value_or(0) + d["words_before"].get<std::size_t>();
      u.refine_words_after = u.refine_words_after.value_or(0) + d["words_after"].get<std::size_t>();
    } else if (kind == "iteration") {
      add_usage(d.at("steps"), u);
    }
  }
}

// The list scored by retrieval metrics: the first retrieval of the trace
// (depth-first through iterations), replaced by its rerank when one follows.
inline std::optional<json> first_result_list(const json& steps) {
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const auto& kind = steps[i].at("kind").get_ref<const std::string&>();
    if (kind == "retrieve") {
      if (i + 1 < steps.size() && steps[i + 1].at("kind") == "rerank") return steps[i + 1]["data"]["results"];
      return steps[i]["data"]["results"];
    }
    if (kind == "iteration")
      if (auto r = first_result_list(steps[i]["data"]["steps"])) return r;
  }
  return std::nullopt;
}

}  // namespace detail

inline TokenUsage token_usage(const PipelineTrace& t) {
  TokenUsage u;
  detail::add_usage(steps_to_json(t.steps), u);
  return u;
}

inline MetricReport evaluate(const std::vector<PipelineTrace>& traces, const std::vector<Item>& items,
                             const EvalOptions& opts = {}) {
  validate_metric_names(opts.metrics);
  if (opts.k < 1) throw ValidationError("k", "must be >= 1");
  std::unordered_map<std::string, const Item*> by_id;
  for (const auto& it : items) by_id.emplace(it.id, &it);
  auto wants = [&](std::string_view m) { return std::find(opts.metrics.begin(), opts.metrics.end(), m) != opts.metrics.end(); };
  const auto ks = std::to_string(opts.k);

  MetricReport r;
  std::map<std::string, std::pair<double, std::size_t>> sums;
  for (const auto& t : traces) {
    auto it = by_id.find(t.item_id);
    if (it == by_id.end()) throw NotFound("trace item '" + t.item_id + "' is not in the dataset");
    r.order.push_back(t.item_id);
    const auto steps = steps_to_json(t.steps);
    TokenUsage u;
    detail::add_usage(steps, u);
    r.usage.prompt_tokens += u.prompt_tokens;
    r.usage.generated_tokens += u.generated_tokens;
    if (u.refine_words_before) {
      r.usage.refine_words_before = r.usage.refine_words_before.value_or(0) + *u.refine_words_before;
      r.usage.refine_words_after = r.usage.refine_words_after.value_or(0) + *u.refine_words_after;
    }
    r.usage_per_item[t.item_id] = u;
    if (t.error) {
      r.errors.emplace_back(t.item_id, *t.error);
      continue;
    }

    const auto& golds = it->second->golden_answers;
    auto& scores = r.per_item[t.item_id];
    const auto& pred = t.final_answer;
    if (wants("em")) scores["em"] = metrics::exact_match(pred, golds);
    if (wants("f1")) scores["f1"] = metrics::token_f1(pred, golds);
    if (wants("acc")) scores["acc"] = metrics::accuracy(pred, golds);
    if (wants("bleu")) scores["bleu"] = metrics::bleu(pred, golds);
    if (wants("rouge_l")) scores["rouge_l"] = metrics::rouge_l(pred, golds);
    if (auto list = detail::first_result_list(steps); list && !list->empty()) {
      std::vector<std::string> contents;
      for (const auto& p : *list) contents.push_back(p.value("contents", std::string{}));
      const auto rs = metrics::retrieval_scores(contents, golds, opts.k, opts.recall_mode);
      if (wants("recall")) scores["recall@" + ks] = rs.recall;
      if (wants("precision")) scores["precision@" + ks] = rs.precision;
      if (wants("retrieval_f1")) scores["f1@" + ks] = rs.f1;
      if (wants("map")) scores["map"] = rs.average_precision;
    }
    for (const auto& [name, v] : scores) {
      sums[name].first += v;
      ++sums[name].second;
    }
  }
  for (const auto& [name, s] : sums) r.aggregate[name] = s.first / static_cast<double>(s.second);
  return r;
}

inline json to_json(const TokenUsage& u) {
  json j{{"prompt_tokens", u.prompt_tokens}, {"generated_tokens", u.generated_tokens}};
  if (u.refine_words_before) {
    j["refine_before"] = *u.refine_words_before;
    j["refine_after"] = *u.refine_words_after;
    j["refine_delta"] = static_cast<long long>(*u.refine_words_before) - static_cast<long long>(*u.refine_words_after);
  }
  return j;
}

inline json to_json(const MetricReport& r) {
  json per_item = json::object();
  for (const auto& id : r.order) {
    auto it = r.per_item.find(id);
    per_item[id] = it == r.per_item.end() ? json(nullptr) : json(it->second);
  }
  json usage = to_json(r.usage);
  json usage_items = json::object();
  for (const auto& [id, u] : r.usage_per_item) usage_items[id] = to_json(u);
  usage["per_item"] = std::move(usage_items);
  json errors = json::array();
  for (const auto& [id, msg] : r.errors) errors.push_back({{"id", id}, {"error", msg}});
  return {{"aggregate", r.aggregate}, {"per_item", per_item}, {"token_usage", usage}, {"errors", errors}};
}

/// Header and one value row of the aggregate, optionally prefixed by label columns.
inline std::string aggregate_csv(const MetricReport& r, const std::vector<std::pair<std::string, std::string>>& labels = {}) {
  std::string head, row;
  auto cell = [](std::string& line, const std::string& v) {
    if (!line.empty()) line += ',';
    line += v;
  };
  for (const auto& [k, v] : labels) {
    cell(head, k);
    cell(row, v);
  }
  for (const auto& [k, v] : r.aggregate) {
    cell(head, k);
    cell(row, fmt::format("{:.6f}", v));
  }
  return head + "\n" + row + "\n";
}

}  // namespace ragforge
