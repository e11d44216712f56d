#pragma once

// Pipeline topologies: sequential, conditional (judger split/merge),
// branching (REPLUG, SuRe) and loops (Iter-RetGen, Self-Ask, FLARE).

#include <algorithm>
#include <array>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include <spdlog/spdlog.h>

#include "ragforge/corpus.hpp"
#include "ragforge/dataspec.hpp"
#include "ragforge/error.hpp"
#include "ragforge/generate.hpp"
#include "ragforge/judge.hpp"
#include "ragforge/metrics.hpp"
#include "ragforge/parallel.hpp"
#include "ragforge/refine.hpp"
#include "ragforge/retrieval.hpp"
#include "ragforge/text.hpp"
#include "ragforge/trace.hpp"

namespace ragforge {

enum class Topology { sequential, conditional, replug, sure, iter_retgen, self_ask, flare };

inline constexpr std::array<std::string_view, 7> kTopologyNames = {"sequential", "conditional", "replug", "sure",
                                                                   "iter_retgen", "self_ask",    "flare"};

inline std::string_view to_string(Topology t) { return kTopologyNames[static_cast<std::size_t>(t)]; }

inline Topology parse_topology(std::string_view s) {
  for (std::size_t i = 0; i < kTopologyNames.size(); ++i)
    if (kTopologyNames[i] == s) return static_cast<Topology>(i);
  throw ValidationError("pipeline.topology", "unknown topology '" + std::string(s) + "'");
}

struct SureTemplates {
  std::string summary =
      "Passages:\n{passages}\n\nQuestion: {question}\nCandidate answer: {candidate}\n\n"
      "Using only the passages, write a short summary explaining why the candidate answer is correct.\nSummary:";
  std::string ranking =
      "Question: {question}\n\nSummary 1: {summary1}\n\nSummary 2: {summary2}\n\n"
      "Which summary better supports an answer to the question? Reply with 1 or 2 only.";
  std::size_t summary_max_tokens = 128;
  std::size_t ranking_max_tokens = 4;
};

inline constexpr std::string_view kSelfAskInstruction =
    "Answer the question. When more facts are needed, ask one follow up question per line, read its "
    "intermediate answer, and finish with a line starting with \"So the final answer is:\". Follow the "
    "format of the examples.";

inline constexpr std::string_view kSelfAskExamples =
    "Question: Is the birthplace of the inventor of the telephone on the same continent as Lisbon?\n"
    "Are follow up questions needed here: Yes.\n"
    "Follow up: Who invented the telephone?\n"
    "Intermediate answer: Alexander Graham Bell.\n"
    "Follow up: Where was Alexander Graham Bell born?\n"
    "Intermediate answer: Edinburgh, Scotland.\n"
    "So the final answer is: Yes\n\n"
    "Question: What is the capital of the country that hosted the 2016 Summer Olympics?\n"
    "Are follow up questions needed here: Yes.\n"
    "Follow up: Which country hosted the 2016 Summer Olympics?\n"
    "Intermediate answer: Brazil.\n"
    "Follow up: What is the capital of Brazil?\n"
    "Intermediate answer: Brasilia.\n"
    "So the final answer is: Brasilia\n\n"
    "Question: How many legs does a spider have?\n"
    "Are follow up questions needed here: No.\n"
    "So the final answer is: 8";

inline constexpr std::string_view kSelfAskOpening = "Are follow up questions needed here:";
inline constexpr std::string_view kFollowUp = "Follow up:";
inline constexpr std::string_view kIntermediate = "Intermediate answer:";
inline constexpr std::string_view kFinalAnswer = "So the final answer is:";

struct PipelineConfig {
  Topology topology = Topology::sequential;
  std::size_t top_k = 5;
  std::size_t n_iter = 3;
  std::size_t max_rounds = 5;
  double flare_theta = 0.8;
  std::optional<std::size_t> replug_candidates;  // default: one per passage
  std::size_t self_ask_max_new_tokens = 100;
  SureTemplates sure;
  std::size_t parallelism = 4;

  void validate() const {
    if (top_k < 1) throw ValidationError("pipeline.top_k", "must be >= 1");
    if (n_iter < 1) throw ValidationError("pipeline.n_iter", "must be >= 1");
    if (max_rounds < 1) throw ValidationError("pipeline.max_rounds", "must be >= 1");
    if (!(flare_theta >= 0.0 && flare_theta <= 1.0)) throw ValidationError("pipeline.flare_theta", "must lie in [0, 1]");
    if (replug_candidates && *replug_candidates < 1) throw ValidationError("pipeline.replug_candidates", "must be >= 1");
    if (self_ask_max_new_tokens < 1) throw ValidationError("pipeline.self_ask_max_new_tokens", "must be >= 1");
    if (parallelism < 1) throw ValidationError("parallelism", "must be >= 1");
  }
};

/// Component handles shared by every worker. All are immutable or internally synchronized.
struct Components {
  std::shared_ptr<const Retriever> retriever;
  std::shared_ptr<const Reranker> reranker;
  std::shared_ptr<const Refiner> refiner;
  std::shared_ptr<const GeneratorClient> generator;
  std::shared_ptr<const SkrJudger> judger;
  PromptTemplate prompt;
  GenerationParams generation;
  bool rerank_fallback = true;
};

/// Checks that the topology's required components and capabilities are present.
/// Throws before any item runs.
inline void validate_components(const PipelineConfig& cfg, const Components& c) {
  cfg.validate();
  c.generation.validate();
  c.prompt.validate();
  if (!c.generator) throw ValidationError("generator", "required by every topology");
  if (!c.retriever) throw ValidationError("retriever", "required by topology '" + std::string(to_string(cfg.topology)) + "'");
  if (cfg.topology == Topology::conditional && !c.judger)
    throw ValidationError("judger", "required by topology 'conditional'");
  if ((cfg.topology == Topology::replug || cfg.topology == Topology::sure) && c.refiner)
    throw ValidationError("refiner", "not supported by branching topologies, which prompt with one passage per branch");
  if (cfg.topology == Topology::replug && !c.generator->capabilities().scoring) throw UnsupportedCapability("scoring");
  if (cfg.topology == Topology::flare && !c.generator->capabilities().logprobs) throw UnsupportedCapability("logprobs");
}

namespace detail {

inline std::vector<const Passage*> resolve(const std::vector<ScoredPassage>& hits, const Retriever& r) {
  std::vector<const Passage*> out;
  out.reserve(hits.size());
  for (const auto& h : hits) {
    const Passage* p = r.lookup(h.passage_id);
    if (!p) throw NotFound("passage '" + h.passage_id + "' is not in the corpus");
    out.push_back(p);
  }
  return out;
}

inline json results_json(const std::vector<ScoredPassage>& hits, const Retriever& r) {
  json out = json::array();
  for (const auto& h : hits) {
    const Passage* p = r.lookup(h.passage_id);
    out.push_back({{"id", h.passage_id},
                   {"title", p ? p->title : std::string{}},
                   {"contents", p ? p->contents : std::string{}},
                   {"score", h.score},
                   {"rank", h.rank}});
  }
  return out;
}

inline json generation_json(const GenerationOutput& out, std::string_view prefix) {
  json j{{"text", out.text}, {"token_count", out.token_count}, {"finish_reason", out.finish_reason}};
  if (out.token_logprobs) {
    json lps = json::array();
    for (const auto& t : *out.token_logprobs) lps.push_back({{"token", t.token}, {"logprob", t.logprob}});
    j["logprobs"] = std::move(lps);
  }
  if (!prefix.empty()) j["prefix"] = prefix;
  if (out.prompt_tokens) j["prompt_tokens"] = *out.prompt_tokens;
  return j;
}

inline std::vector<ScoredPassage> retrieve_step(const Components& c, std::string_view query, std::size_t k,
                                                TraceRecorder& rec, json trigger = nullptr) {
  rec.mark();
  auto hits = retrieve(*c.retriever, {std::string(query), k});
  json data{{"query", query}, {"top_k", k}, {"results", results_json(hits, *c.retriever)}};
  if (!trigger.is_null()) data["trigger"] = std::move(trigger);
  rec.add("retrieve", std::move(data));
  return hits;
}

inline std::vector<ScoredPassage> rerank_step(const Components& c, std::string_view query,
                                              std::vector<ScoredPassage> hits, TraceRecorder& rec) {
  if (!c.reranker) return hits;
  rec.mark();
  try {
    auto out = rerank(*c.reranker, query, hits, *c.retriever);
    rec.add("rerank", {{"results", results_json(out, *c.retriever)}});
    return out;
  } catch (const std::exception& e) {
    if (!c.rerank_fallback) throw;
    spdlog::warn("reranker failed, keeping retrieval order: {}", e.what());
    rec.add("rerank", {{"results", results_json(hits, *c.retriever)}, {"fallback", e.what()}});
    return hits;
  }
}

// Refined context text, or nullopt when the refiner failed (raw passages are used instead).
inline std::optional<std::string> refine_step(const Components& c, std::string_view question,
                                              const std::vector<const Passage*>& passages, TraceRecorder& rec) {
  rec.mark();
  const auto kind = std::string(to_string(c.refiner->config().kind));
  try {
    auto res = c.refiner->refine(question, passages);
    json data{{"kind", kind}, {"text", res.text}, {"words_before", res.words_before}, {"words_after", res.words_after}};
    if (res.warning) data["warning"] = *res.warning;
    rec.add("refine", std::move(data));
    return res.text;
  } catch (const std::exception& e) {
    spdlog::warn("refiner failed, using unrefined passages: {}", e.what());
    rec.add("refine", {{"kind", kind}, {"fallback", e.what()}});
    return std::nullopt;
  }
}

inline void prompt_step(const std::vector<Message>& msgs, std::size_t passage_count, bool refined, TraceRecorder& rec) {
  json data{{"messages", to_json(msgs)}, {"passage_count", passage_count}};
  if (refined) data["refined"] = true;
  rec.add("prompt", std::move(data));
}

inline GenerationOutput generate_step(const Components& c, const std::vector<Message>& msgs,
                                      const GenerationParams& params, std::string_view prefix, TraceRecorder& rec) {
  rec.mark();
  auto out = generate(*c.generator, msgs, params, prefix);
  rec.add("generate", generation_json(out, prefix));
  return out;
}

inline std::string answer_text(std::string_view s) { return std::string(text::trim(s)); }

// retrieve -> rerank? -> refine? -> prompt -> generate. Returns the answer.
inline std::string standard_rag(const Components& c, std::size_t top_k, std::string_view question,
                                std::string_view query, TraceRecorder& rec) {
  auto hits = retrieve_step(c, query, top_k, rec);
  hits = rerank_step(c, query, std::move(hits), rec);
  const auto passages = resolve(hits, *c.retriever);
  std::vector<Message> msgs;
  bool refined = false;
  if (c.refiner) {
    if (auto ctx = refine_step(c, question, passages, rec)) {
      msgs = build_prompt_with_context(question, *ctx, c.prompt);
      refined = true;
    }
  }
  if (!refined) msgs = build_prompt(question, passages, c.prompt);
  rec.mark();
  prompt_step(msgs, passages.size(), refined, rec);
  return answer_text(generate_step(c, msgs, c.generation, {}, rec).text);
}

inline std::string naive_generation(const Components& c, const GenerationParams& params, std::string_view question,
                                    TraceRecorder& rec) {
  const auto msgs = build_prompt(question, {}, c.prompt);
  rec.mark();
  prompt_step(msgs, 0, false, rec);
  return answer_text(generate_step(c, msgs, params, {}, rec).text);
}

// Runs fn for each index in `subset` with bounded parallelism. A throwing item
// is recorded as an error and never aborts the batch. Emits the final event.
inline void execute(std::vector<PipelineTrace>& traces, const std::vector<std::size_t>& subset, std::size_t workers,
                    const EventSink& sink, const std::function<void(TraceRecorder&)>& fn) {
  parallel_for(subset.size(), workers, [&](std::size_t n) {
    auto& t = traces[subset[n]];
    TraceRecorder rec(t, sink);
    try {
      fn(rec);
    } catch (const std::exception& e) {
      spdlog::warn("item '{}' failed: {}", t.item_id, e.what());
      t.error = e.what();
      t.final_answer.clear();
      if (sink) sink(t.item_id, Step{"error", {{"message", e.what()}}});
    }
    if (sink)
      sink(t.item_id, Step{"final", {{"final_answer", t.final_answer}, {"flags", t.flags}, {"details", t.details}}});
  });
}

inline std::vector<PipelineTrace> fresh_traces(const std::vector<Item>& items) {
  std::vector<PipelineTrace> out;
  out.reserve(items.size());
  for (const auto& it : items) {
    PipelineTrace t;
    t.item_id = it.id;
    t.question = it.question;
    out.push_back(std::move(t));
  }
  return out;
}

inline std::vector<std::size_t> all_indices(std::size_t n) {
  std::vector<std::size_t> v(n);
  for (std::size_t i = 0; i < n; ++i) v[i] = i;
  return v;
}

// Candidate answers, one per passage with a single-passage prompt each.
struct Candidates {
  std::vector<std::string> texts;                // deduplicated, generation order
  std::vector<std::vector<Message>> prompts;     // one per passage
};

inline Candidates branch_candidates(const Components& c, std::string_view question,
                                    const std::vector<const Passage*>& passages, std::size_t limit, TraceRecorder& rec) {
  Candidates out;
  std::unordered_set<std::string> seen;
  for (std::size_t d = 0; d < passages.size(); ++d) {
    out.prompts.push_back(build_prompt(question, {passages[d]}, c.prompt));
    if (d >= limit) continue;
    rec.mark();
    prompt_step(out.prompts.back(), 1, false, rec);
    auto answer = answer_text(generate_step(c, out.prompts.back(), c.generation, {}, rec).text);
    if (seen.insert(metrics::normalized_string(answer)).second) out.texts.push_back(std::move(answer));
  }
  return out;
}

}  // namespace detail

/// Numerically stable softmax.
inline std::vector<double> softmax(const std::vector<double>& xs) {
  if (xs.empty()) return {};
  const double m = *std::max_element(xs.begin(), xs.end());
  std::vector<double> out(xs.size());
  double z = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) z += (out[i] = std::exp(xs[i] - m));
  for (auto& v : out) v /= z;
  return out;
}

inline std::vector<PipelineTrace> run_naive(const std::vector<Item>& items, const Components& c,
                                            const PipelineConfig& cfg, const EventSink& sink = {}) {
  auto traces = detail::fresh_traces(items);
  detail::execute(traces, detail::all_indices(items.size()), cfg.parallelism, sink, [&](TraceRecorder& rec) {
    rec.trace().final_answer = detail::naive_generation(c, c.generation, rec.trace().question, rec);
  });
  return traces;
}

inline std::vector<PipelineTrace> run_sequential(const std::vector<Item>& items, const Components& c,
                                                 const PipelineConfig& cfg, const EventSink& sink = {}) {
  auto traces = detail::fresh_traces(items);
  detail::execute(traces, detail::all_indices(items.size()), cfg.parallelism, sink, [&](TraceRecorder& rec) {
    const auto& q = rec.trace().question;
    rec.trace().final_answer = detail::standard_rag(c, cfg.top_k, q, q, rec);
  });
  return traces;
}

/// Judges every item, runs the retrieve batch through standard RAG and the
/// rest through naive generation, and merges results in input order.
inline std::vector<PipelineTrace> run_conditional(const std::vector<Item>& items, const Components& c,
                                                  const PipelineConfig& cfg, const EventSink& sink = {}) {
  if (!c.judger) throw ValidationError("judger", "required by topology 'conditional'");
  auto traces = detail::fresh_traces(items);
  std::vector<Verdict> verdicts(items.size(), Verdict::retrieve);
  parallel_for(items.size(), cfg.parallelism, [&](std::size_t i) {
    TraceRecorder rec(traces[i], sink);
    try {
      auto j = c.judger->judge(items[i].question);
      verdicts[i] = j.verdict;
      rec.add("judger", to_json(j));
    } catch (const std::exception& e) {
      spdlog::warn("judger failed on item '{}', defaulting to retrieval: {}", items[i].id, e.what());
      rec.add("judger", {{"verdict", to_string(Verdict::retrieve)}, {"error", e.what()}});
    }
  });
  std::vector<std::size_t> with, without;
  for (std::size_t i = 0; i < items.size(); ++i) (verdicts[i] == Verdict::retrieve ? with : without).push_back(i);
  detail::execute(traces, with, cfg.parallelism, sink, [&](TraceRecorder& rec) {
    const auto& q = rec.trace().question;
    rec.trace().final_answer = detail::standard_rag(c, cfg.top_k, q, q, rec);
  });
  detail::execute(traces, without, cfg.parallelism, sink, [&](TraceRecorder& rec) {
    rec.trace().final_answer = detail::naive_generation(c, c.generation, rec.trace().question, rec);
  });
  return traces;
}

/// Weighted candidate score: sum over passages of lambda_d * exp(mean token
/// logprob of the candidate given passage d's prompt).
inline double replug_score(const GeneratorClient& g, const std::vector<std::vector<Message>>& prompts,
                           const std::vector<double>& lambda, std::string_view candidate) {
  double total = 0.0;
  for (std::size_t d = 0; d < prompts.size(); ++d) {
    const auto toks = g.score_tokens(prompts[d], candidate);
    if (toks.empty()) continue;
    double lp = 0.0;
    for (const auto& t : toks) lp += t.logprob;
    total += lambda[d] * std::exp(lp / static_cast<double>(toks.size()));
  }
  return total;
}

// Ties (within floating tolerance) go to the earlier index.
inline std::size_t argmax_first(const std::vector<double>& xs) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < xs.size(); ++i)
    if (xs[i] > xs[best] + 1e-12 * std::max(1.0, std::abs(xs[best]))) best = i;
  return best;
}

inline std::vector<PipelineTrace> run_replug(const std::vector<Item>& items, const Components& c,
                                             const PipelineConfig& cfg, const EventSink& sink = {}) {
  if (!c.generator->capabilities().scoring) throw UnsupportedCapability("scoring");
  auto traces = detail::fresh_traces(items);
  detail::execute(traces, detail::all_indices(items.size()), cfg.parallelism, sink, [&](TraceRecorder& rec) {
    const auto& q = rec.trace().question;
    auto hits = detail::retrieve_step(c, q, cfg.top_k, rec);
    hits = detail::rerank_step(c, q, std::move(hits), rec);
    const auto passages = detail::resolve(hits, *c.retriever);
    if (passages.empty()) {
      rec.trace().final_answer = detail::naive_generation(c, c.generation, q, rec);
      return;
    }
    std::vector<double> scores;
    for (const auto& h : hits) scores.push_back(h.score);
    const auto lambda = softmax(scores);
    auto cand = detail::branch_candidates(c, q, passages, cfg.replug_candidates.value_or(passages.size()), rec);

    std::vector<double> combined;
    json cands = json::array();
    for (const auto& text : cand.texts) {
      const double s = text.empty() ? 0.0 : replug_score(*c.generator, cand.prompts, lambda, text);
      combined.push_back(s);
      cands.push_back({{"text", text}, {"score", s}});
    }
    const auto best = argmax_first(combined);
    rec.trace().details = {{"weights", lambda}, {"candidates", cands}, {"winner", best}};
    rec.trace().final_answer = cand.texts[best];
  });
  return traces;
}

/// Counts a ranking vote: exactly one of the digits 1 and 2 must appear.
inline std::optional<int> parse_ranking_vote(std::string_view reply) {
  const bool one = reply.find('1') != std::string_view::npos;
  const bool two = reply.find('2') != std::string_view::npos;
  if (one == two) return std::nullopt;
  return one ? 1 : 2;
}

inline std::vector<PipelineTrace> run_sure(const std::vector<Item>& items, const Components& c,
                                           const PipelineConfig& cfg, const EventSink& sink = {}) {
  auto traces = detail::fresh_traces(items);
  detail::execute(traces, detail::all_indices(items.size()), cfg.parallelism, sink, [&](TraceRecorder& rec) {
    const auto& q = rec.trace().question;
    auto hits = detail::retrieve_step(c, q, cfg.top_k, rec);
    hits = detail::rerank_step(c, q, std::move(hits), rec);
    const auto passages = detail::resolve(hits, *c.retriever);
    if (passages.empty()) {
      rec.trace().final_answer = detail::naive_generation(c, c.generation, q, rec);
      return;
    }
    auto cand = detail::branch_candidates(c, q, passages, passages.size(), rec);
    const auto n = cand.texts.size();
    if (n == 1) {
      rec.trace().details = {{"candidates", cand.texts}, {"votes", json::array({0})}, {"winner", 0}};
      rec.trace().final_answer = cand.texts.front();
      return;
    }

    const auto block = format_passages(passages, c.prompt);
    std::vector<std::string> summaries;
    GenerationParams sp = c.generation;
    sp.max_new_tokens = cfg.sure.summary_max_tokens;
    for (const auto& text : cand.texts) {
      std::vector<Message> msgs{
          {"user", fill_slots(cfg.sure.summary, {{"passages", block}, {"question", q}, {"candidate", text}})}};
      rec.mark();
      detail::prompt_step(msgs, passages.size(), false, rec);
      summaries.push_back(detail::answer_text(detail::generate_step(c, msgs, sp, {}, rec).text));
    }

    GenerationParams rp = c.generation;
    rp.max_new_tokens = cfg.sure.ranking_max_tokens;
    std::vector<int> votes(n, 0);
    std::size_t discarded = 0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j) {
        std::vector<Message> msgs{{"user", fill_slots(cfg.sure.ranking, {{"question", q},
                                                                         {"summary1", summaries[i]},
                                                                         {"summary2", summaries[j]}})}};
        rec.mark();
        detail::prompt_step(msgs, 0, false, rec);
        const auto reply = detail::generate_step(c, msgs, rp, {}, rec).text;
        if (auto v = parse_ranking_vote(reply)) {
          ++votes[*v == 1 ? i : j];
        } else {
          ++discarded;
          spdlog::info("item '{}': unparseable ranking reply '{}' discarded", rec.trace().item_id, reply);
        }
      }
    std::size_t best = 0;
    for (std::size_t i = 1; i < n; ++i)
      if (votes[i] > votes[best]) best = i;
    rec.trace().details = {{"candidates", cand.texts}, {"votes", votes}, {"winner", best}, {"discarded", discarded}};
    rec.trace().final_answer = cand.texts[best];
  });
  return traces;
}

/// n_iter == 1 is plain standard RAG. Otherwise each cycle is recorded as an
/// iteration step and retrieves with the question plus the previous answer.
inline std::vector<PipelineTrace> run_iter_retgen(const std::vector<Item>& items, const Components& c,
                                                  const PipelineConfig& cfg, const EventSink& sink = {}) {
  if (cfg.n_iter == 1) return run_sequential(items, c, cfg, sink);
  auto traces = detail::fresh_traces(items);
  detail::execute(traces, detail::all_indices(items.size()), cfg.parallelism, sink, [&](TraceRecorder& rec) {
    const auto question = rec.trace().question;
    std::string answer;
    for (std::size_t t = 1; t <= cfg.n_iter; ++t) {
      const std::string query = t == 1 ? question : question + " " + answer;
      PipelineTrace sub;
      TraceRecorder sub_rec(sub);
      answer = detail::standard_rag(c, cfg.top_k, question, query, sub_rec);
      rec.add("iteration", {{"index", t}, {"query", query}, {"steps", steps_to_json(sub.steps)}, {"answer", answer}});
    }
    rec.trace().final_answer = answer;
  });
  return traces;
}

inline std::vector<Message> self_ask_prompt(std::string_view question) {
  return {{"system", std::string(kSelfAskInstruction) + "\n\n" + std::string(kSelfAskExamples)},
          {"user", "Question: " + std::string(question)}};
}

inline std::vector<PipelineTrace> run_self_ask(const std::vector<Item>& items, const Components& c,
                                               const PipelineConfig& cfg, const EventSink& sink = {}) {
  auto traces = detail::fresh_traces(items);
  detail::execute(traces, detail::all_indices(items.size()), cfg.parallelism, sink, [&](TraceRecorder& rec) {
    auto& tr = rec.trace();
    const auto msgs = self_ask_prompt(tr.question);
    detail::prompt_step(msgs, 0, false, rec);
    GenerationParams params = c.generation;
    params.max_new_tokens = cfg.self_ask_max_new_tokens;
    params.stop.push_back(std::string(kIntermediate));

    std::string transcript(kSelfAskOpening);
    std::optional<std::string> last_intermediate;
    std::size_t rounds = 0;
    for (;;) {
      const auto out = detail::generate_step(c, msgs, params, transcript, rec);
      std::optional<std::string> follow_up, final_answer;
      std::string consumed;
      for (const auto& raw : text::split_lines(out.text)) {
        const auto line = text::trim(raw);
        consumed += raw;
        consumed += '\n';
        if (text::starts_with(line, kFinalAnswer)) {
          final_answer = std::string(text::trim(line.substr(kFinalAnswer.size())));
          break;
        }
        if (text::starts_with(line, kFollowUp)) {
          follow_up = std::string(text::trim(line.substr(kFollowUp.size())));
          break;
        }
      }
      if (final_answer) {
        tr.final_answer = *final_answer;
        break;
      }
      if (!follow_up) {
        tr.final_answer = detail::answer_text(out.text);
        tr.flags["unparsed"] = true;
        break;
      }
      PipelineTrace sub;
      TraceRecorder sub_rec(sub);
      const auto answer = text::collapse_whitespace(detail::standard_rag(c, cfg.top_k, *follow_up, *follow_up, sub_rec));
      ++rounds;
      rec.add("iteration", {{"index", rounds}, {"query", *follow_up}, {"steps", steps_to_json(sub.steps)}, {"answer", answer}});
      last_intermediate = answer;
      transcript += consumed;
      if (!transcript.empty() && transcript.back() != '\n') transcript += '\n';
      transcript += std::string(kIntermediate) + " " + answer + "\n";
      if (rounds >= cfg.max_rounds) {
        tr.final_answer = *last_intermediate;
        tr.flags["truncated"] = true;
        break;
      }
    }
    tr.details = {{"rounds", rounds}};
  });
  return traces;
}

namespace detail {

struct SentenceProbe {
  std::size_t begin = 0, end = 0;  // byte span in the generated text
  double min_prob = 1.0;
  std::vector<std::size_t> tokens;  // token indices assigned to the sentence
};

// Maps each aligned token onto the sentence whose span ends after the token starts.
inline std::vector<SentenceProbe> probe_sentences(const std::string& s, const std::vector<TokenLogprob>& lps) {
  std::vector<SentenceProbe> out;
  for (auto [b, e] : sentence_spans(s)) out.push_back({b, e, 1.0, {}});
  const auto offsets = align_tokens(s, lps);
  std::size_t si = 0;
  for (std::size_t t = 0; t < lps.size(); ++t) {
    if (offsets[t] == std::string::npos) continue;
    while (si < out.size() && offsets[t] >= out[si].end) ++si;
    if (si == out.size()) break;
    out[si].tokens.push_back(t);
    out[si].min_prob = std::min(out[si].min_prob, std::exp(lps[t].logprob));
  }
  return out;
}

inline std::size_t tokens_before(const std::string& s, const std::vector<TokenLogprob>& lps, std::size_t end) {
  const auto offsets = align_tokens(s, lps);
  std::size_t n = 0;
  for (auto o : offsets)
    if (o != std::string::npos && o < end) ++n;
  return n;
}

}  // namespace detail

/// Sentence-level active retrieval. Generation starts without passages; the
/// first lookahead sentence holding a token with probability below theta
/// triggers retrieval on the sentence minus its low-confidence tokens, and
/// that sentence is regenerated with the fresh passages.
inline std::vector<PipelineTrace> run_flare(const std::vector<Item>& items, const Components& c,
                                            const PipelineConfig& cfg, const EventSink& sink = {}) {
  if (!c.generator->capabilities().logprobs) throw UnsupportedCapability("logprobs");
  auto traces = detail::fresh_traces(items);
  detail::execute(traces, detail::all_indices(items.size()), cfg.parallelism, sink, [&](TraceRecorder& rec) {
    auto& tr = rec.trace();
    const double theta = cfg.flare_theta;
    GenerationParams params = c.generation;
    params.logprobs = true;
    auto msgs = build_prompt(tr.question, {}, c.prompt);
    detail::prompt_step(msgs, 0, false, rec);

    std::string answer;
    std::size_t remaining = params.max_new_tokens;
    std::size_t triggers = 0;
    for (std::size_t guard = 0; remaining > 0 && guard <= 2 * params.max_new_tokens; ++guard) {
      GenerationParams p = params;
      p.max_new_tokens = remaining;
      const auto out = detail::generate_step(c, msgs, p, answer, rec);
      if (!out.token_logprobs) throw ServiceError("generator returned no logprobs");
      if (out.text.empty()) break;
      const auto& lps = *out.token_logprobs;
      const auto probes = detail::probe_sentences(out.text, lps);
      auto bad = std::find_if(probes.begin(), probes.end(), [&](const auto& s) { return s.min_prob < theta; });
      if (bad == probes.end()) {
        answer += out.text;
        break;
      }

      const std::size_t keep_end = bad == probes.begin() ? 0 : std::prev(bad)->end;
      answer += out.text.substr(0, keep_end);
      remaining -= std::min(remaining, detail::tokens_before(out.text, lps, keep_end));

      std::vector<std::string> kept;
      for (auto t : bad->tokens)
        if (std::exp(lps[t].logprob) >= theta) {
          auto w = std::string(text::trim(lps[t].token));
          if (!w.empty()) kept.push_back(std::move(w));
        }
      std::string query = kept.empty() ? tr.question : text::join(kept, " ");
      ++triggers;
      auto hits = detail::retrieve_step(
          c, query, cfg.top_k, rec,
          {{"sentence", out.text.substr(bad->begin, bad->end - bad->begin)}, {"min_prob", bad->min_prob}, {"index", triggers}});
      hits = detail::rerank_step(c, query, std::move(hits), rec);
      const auto passages = detail::resolve(hits, *c.retriever);
      msgs = build_prompt(tr.question, passages, c.prompt);
      rec.mark();
      detail::prompt_step(msgs, passages.size(), false, rec);
      if (remaining == 0) break;

      p.max_new_tokens = remaining;
      const auto regen = detail::generate_step(c, msgs, p, answer, rec);
      if (regen.text.empty()) break;
      const auto spans = sentence_spans(regen.text);
      const std::size_t first_end = spans.empty() ? regen.text.size() : spans.front().second;
      answer += regen.text.substr(0, first_end);
      const auto used = regen.token_logprobs ? detail::tokens_before(regen.text, *regen.token_logprobs, first_end)
                                             : approx_tokens(regen.text.substr(0, first_end));
      remaining -= std::min(remaining, used);
      if (spans.size() <= 1 && regen.finish_reason == "stop") break;
    }
    tr.final_answer = detail::answer_text(answer);
    // Without triggers the trace stays identical to plain generation.
    if (triggers > 0) tr.details = {{"triggers", triggers}};
  });
  return traces;
}

inline std::vector<PipelineTrace> run_pipeline(const std::vector<Item>& items, const Components& c,
                                               const PipelineConfig& cfg, const EventSink& sink = {}) {
  validate_components(cfg, c);
  switch (cfg.topology) {
    case Topology::sequential: return run_sequential(items, c, cfg, sink);
    case Topology::conditional: return run_conditional(items, c, cfg, sink);
    case Topology::replug: return run_replug(items, c, cfg, sink);
    case Topology::sure: return run_sure(items, c, cfg, sink);
    case Topology::iter_retgen: return run_iter_retgen(items, c, cfg, sink);
    case Topology::self_ask: return run_self_ask(items, c, cfg, sink);
    case Topology::flare: return run_flare(items, c, cfg, sink);
  }
  return {};
}

/// Registry served to clients that build configuration forms.
inline json pipeline_descriptors() {
  const json top_k{{"type", "integer"}, {"minimum", 1}, {"default", 5}};
  auto desc = [&](std::string_view name, std::string_view family, std::string_view summary, json requires_,
                  json params) {
    params["top_k"] = top_k;
    return json{{"name", name}, {"family", family}, {"description", summary}, {"requires", std::move(requires_)},
                {"optional", json::array({"reranker", "refiner"})}, {"params", std::move(params)}};
  };
  json out = json::array();
  out.push_back(desc("sequential", "sequential", "retrieve, optionally rerank and refine, then generate",
                     {"retriever", "generator"}, json::object()));
  out.push_back(desc("conditional", "conditional", "judger decides per item between retrieval and direct generation",
                     {"retriever", "generator", "judger"}, json::object()));
  auto replug = desc("replug", "branching", "one answer per passage, combined by softmax-weighted sequence scores",
                     {"retriever", "generator:scoring"},
                     {{"replug_candidates", {{"type", "integer"}, {"minimum", 1}, {"nullable", true}}}});
  replug["optional"] = json::array({"reranker"});
  out.push_back(replug);
  auto sure = desc("sure", "branching", "one answer per passage, ranked by pairwise comparison of summaries",
                   {"retriever", "generator"}, json::object());
  sure["optional"] = json::array({"reranker"});
  out.push_back(sure);
  out.push_back(desc("iter_retgen", "loop", "repeated retrieval and generation, each query extended by the last answer",
                     {"retriever", "generator"}, {{"n_iter", {{"type", "integer"}, {"minimum", 1}, {"default", 3}}}}));
  out.push_back(desc("self_ask", "loop", "follow-up questions answered with fresh retrieval until a final answer",
                     {"retriever", "generator"}, {{"max_rounds", {{"type", "integer"}, {"minimum", 1}, {"default", 5}}}}));
  out.push_back(desc("flare", "loop", "retrieval triggered by low-confidence sentences during generation",
                     {"retriever", "generator:logprobs"},
                     {{"flare_theta", {{"type", "number"}, {"minimum", 0}, {"maximum", 1}, {"default", 0.8}}}}));
  return out;
}

}  // namespace ragforge
