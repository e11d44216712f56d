#include <gtest/gtest.h>

#include <mutex>

#include "ragforge/bm25.hpp"
#include "ragforge/mock.hpp"
#include "ragforge/pipelines.hpp"
#include "support.hpp"

using namespace ragforge;
using namespace testing_support;

namespace {

std::shared_ptr<const PassageStore> facts() {
  return make_store({{"p1", "Brenoth is the capital city of Zorvia."},
                     {"p2", "The Kaltmark is the official currency of Zorvia."},
                     {"p3", "Dravic is the language spoken in Zorvia."},
                     {"p4", "Mount Selu is the highest peak in Zorvia."},
                     {"p5", "Tarnis is the capital city of Quelia."},
                     {"p6", "The Velmark is the official currency of Quelia."}},
                    {"Brenoth", "Kaltmark", "Dravic", "Mount Selu", "Tarnis", "Velmark"});
}

std::vector<Item> questions() {
  return {{"q1", "What is the capital city of Zorvia?", {"Brenoth"}, std::nullopt, {}},
          {"q2", "What is the official currency of Quelia?", {"Velmark"}, std::nullopt, {}},
          {"q3", "Which language is spoken in Zorvia?", {"Dravic"}, std::nullopt, {}}};
}

Components base(std::shared_ptr<const GeneratorClient> gen = std::make_shared<mock::MockGenerator>()) {
  Components c;
  c.retriever = std::make_shared<bm25::Bm25Retriever>(facts());
  c.generator = std::move(gen);
  return c;
}

PipelineConfig config(Topology t, std::size_t top_k = 3) {
  PipelineConfig cfg;
  cfg.topology = t;
  cfg.top_k = top_k;
  return cfg;
}

std::vector<std::string> kinds(const std::vector<Step>& steps) {
  std::vector<std::string> out;
  for (const auto& s : steps) out.push_back(s.kind);
  return out;
}

std::vector<std::string> kinds(const json& steps) {
  std::vector<std::string> out;
  for (const auto& s : steps) out.push_back(s["kind"]);
  return out;
}

bool starts_with(const std::string& s, std::string_view p) { return s.rfind(p, 0) == 0; }

// Scripted generator: `fn` gets the request; unmatched requests fall back to the reader.
std::shared_ptr<mock::MockGenerator> scripted(std::function<std::optional<mock::Reply>(const mock::Request&)> fn,
                                              Capabilities caps = {true, true}) {
  auto reader = mock::reader_script();
  return std::make_shared<mock::MockGenerator>(
      [fn, reader](const mock::Request& r) {
        if (auto reply = fn(r)) return *reply;
        return reader(r);
      },
      caps);
}

struct Events {
  std::mutex mu;
  std::vector<std::pair<std::string, Step>> list;
  EventSink sink() {
    return [this](const std::string& id, const Step& s) {
      std::lock_guard lock(mu);
      list.emplace_back(id, s);
    };
  }
};

class ThrowingEmbedder : public Embedder {
 public:
  std::vector<Vector> embed(const std::vector<std::string>&, EmbedRole) const override {
    throw ServiceError("encoder offline");
  }
  std::string name() const override { return "down"; }
};

std::shared_ptr<SkrJudger> judger_for(std::map<std::string, Vector> question_vectors) {
  SkrTrainingSet ts;
  ts.k = 1;
  ts.entries = {{"needs docs", {1, 0}, Verdict::retrieve}, {"chit chat", {0, 1}, Verdict::no_retrieve}};
  return std::make_shared<SkrJudger>(ts, std::make_shared<StubEmbedder>(2, std::move(question_vectors)));
}

}  // namespace

TEST(Sequential, RetrievePromptGenerate) {
  auto traces = run_pipeline(questions(), base(), config(Topology::sequential));
  ASSERT_EQ(traces.size(), 3u);
  for (const auto& t : traces) {
    EXPECT_EQ(kinds(t.steps), (std::vector<std::string>{"retrieve", "prompt", "generate"}));
    EXPECT_EQ(t.final_answer, t.steps[0].data["results"][0]["title"]);
    EXPECT_EQ(t.steps[0].data["results"].size(), 3u);
    EXPECT_EQ(t.steps[1].data["passage_count"], 3);
  }
  EXPECT_EQ(traces[0].final_answer, "Brenoth");
  EXPECT_EQ(traces[1].final_answer, "Velmark");
  EXPECT_EQ(traces[2].final_answer, "Dravic");
}

TEST(Sequential, RefinedContextReplacesPassages) {
  auto gen = scripted([](const mock::Request& r) -> std::optional<mock::Reply> {
    if (starts_with(r.messages[0].content, "Summarize")) return mock::Reply{"Condensed facts.", std::nullopt};
    return std::nullopt;
  });
  auto c = base(gen);
  RefinerConfig rc;
  rc.kind = RefinerKind::abstractive;
  c.refiner = std::make_shared<Refiner>(rc, nullptr, gen);
  auto t = run_pipeline({questions()[0]}, c, config(Topology::sequential)).front();
  EXPECT_EQ(kinds(t.steps), (std::vector<std::string>{"retrieve", "refine", "prompt", "generate"}));
  EXPECT_EQ(t.steps[1].data["text"], "Condensed facts.");
  const std::string system = t.steps[2].data["messages"][0]["content"];
  EXPECT_NE(system.find("Condensed facts."), std::string::npos);
  EXPECT_EQ(system.find("Doc 1"), std::string::npos);
  EXPECT_EQ(t.steps[2].data["refined"], true);
}

TEST(Sequential, RefinerFailureFallsBackToPassages) {
  auto c = base();
  RefinerConfig rc;  // perplexity, which needs scoring
  c.refiner = std::make_shared<Refiner>(rc, nullptr, std::make_shared<mock::MockGenerator>(mock::reader_script(),
                                                                                         Capabilities{false, false}));
  auto t = run_pipeline({questions()[0]}, c, config(Topology::sequential)).front();
  EXPECT_FALSE(t.error);
  EXPECT_TRUE(t.steps[1].data.contains("fallback"));
  EXPECT_FALSE(t.steps[2].data.contains("refined"));
  EXPECT_EQ(t.final_answer, "Brenoth");
}

TEST(Sequential, RerankerReordersContext) {
  struct Reverse : Reranker {
    std::vector<double> score(std::string_view, const std::vector<const Passage*>& ps) const override {
      std::vector<double> out;
      for (std::size_t i = 0; i < ps.size(); ++i) out.push_back(static_cast<double>(i));
      return out;
    }
    std::string name() const override { return "reverse"; }
  };
  auto c = base();
  c.reranker = std::make_shared<Reverse>();
  auto t = run_pipeline({questions()[0]}, c, config(Topology::sequential)).front();
  EXPECT_EQ(kinds(t.steps), (std::vector<std::string>{"retrieve", "rerank", "prompt", "generate"}));
  EXPECT_EQ(t.steps[1].data["results"][0]["id"], t.steps[0].data["results"][2]["id"]);
  EXPECT_EQ(t.final_answer, t.steps[1].data["results"][0]["title"]);
}

TEST(Conditional, AllNoRetrieveMatchesNaiveGeneration) {
  auto items = questions();
  std::map<std::string, Vector> vecs;
  for (const auto& it : items) vecs[it.question] = {0, 1};
  auto c = base();
  c.judger = judger_for(vecs);
  auto cond = run_pipeline(items, c, config(Topology::conditional));
  auto naive = run_naive(items, c, config(Topology::conditional));
  ASSERT_EQ(cond.size(), naive.size());
  for (std::size_t i = 0; i < cond.size(); ++i) {
    ASSERT_EQ(cond[i].steps.front().kind, "judger");
    EXPECT_EQ(cond[i].steps.front().data["verdict"], "no_retrieve");
    EXPECT_EQ(std::vector<Step>(cond[i].steps.begin() + 1, cond[i].steps.end()), naive[i].steps);
    EXPECT_EQ(cond[i].final_answer, naive[i].final_answer);
    EXPECT_EQ(cond[i].final_answer, "unknown");
  }
}

TEST(Conditional, MergesInInputOrder) {
  std::vector<Item> items;
  std::map<std::string, Vector> vecs;
  for (int i = 0; i < 40; ++i) {
    const auto q = "What is the capital city of Zorvia? #" + std::to_string(i);
    items.push_back({"i" + std::to_string(i), q, {"Brenoth"}, std::nullopt, {}});
    vecs[q] = (i * 7) % 3 ? Vector{1, 0} : Vector{0, 1};
  }
  auto c = base();
  c.judger = judger_for(vecs);
  auto cfg = config(Topology::conditional);
  cfg.parallelism = 6;
  auto traces = run_pipeline(items, c, cfg);
  ASSERT_EQ(traces.size(), items.size());
  for (std::size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(traces[i].item_id, items[i].id);
    const bool retrieve = (i * 7) % 3 != 0;
    EXPECT_EQ(traces[i].steps[1].kind, retrieve ? "retrieve" : "prompt");
    EXPECT_EQ(traces[i].final_answer, retrieve ? "Brenoth" : "unknown");
  }
}

TEST(Conditional, JudgerErrorDefaultsToRetrieval) {
  SkrTrainingSet ts;
  ts.k = 1;
  ts.entries = {{"x", {1, 0}, Verdict::no_retrieve}};
  auto c = base();
  c.judger = std::make_shared<SkrJudger>(ts, std::make_shared<ThrowingEmbedder>());
  auto t = run_pipeline({questions()[0]}, c, config(Topology::conditional)).front();
  EXPECT_FALSE(t.error);
  EXPECT_EQ(t.steps[0].data["verdict"], "retrieve");
  EXPECT_TRUE(t.steps[0].data.contains("error"));
  EXPECT_EQ(t.steps[1].kind, "retrieve");
  EXPECT_THROW(run_pipeline({questions()[0]}, base(), config(Topology::conditional)), ValidationError);
}

TEST(Replug, SinglePassageMatchesSequentialAnswer) {
  auto items = questions();
  auto rep = run_pipeline(items, base(), config(Topology::replug, 1));
  auto seq = run_pipeline(items, base(), config(Topology::sequential, 1));
  for (std::size_t i = 0; i < items.size(); ++i) {
    EXPECT_EQ(rep[i].final_answer, seq[i].final_answer);
    EXPECT_EQ(rep[i].details["weights"], json::array({1.0}));
    EXPECT_EQ(rep[i].details["winner"], 0);
  }
}

TEST(Replug, WeightsAndScoresMatchOracle) {
  auto store = facts();
  auto c = base();
  const std::vector<double> retrieval_scores{2.0, 1.0, 0.5};
  c.retriever = std::make_shared<StubRetriever>(store, fixed_results({"p1", "p5", "p3"}, retrieval_scores));
  auto gen = std::make_shared<mock::MockGenerator>();
  // Candidate logprob: -0.2 per token when the candidate appears in the prompt, else -1.5.
  gen->set_scorer([](const std::vector<Message>& ctx, std::string_view cand) {
    const bool inside = ctx[0].content.find(std::string(cand)) != std::string::npos;
    std::vector<TokenLogprob> out;
    for (auto& t : mock::tokenize(cand)) out.push_back({t, inside ? -0.2 : -1.5});
    return out;
  });
  c.generator = gen;
  auto t = run_pipeline({questions()[0]}, c, config(Topology::replug)).front();

  const auto lambda = oracle::softmax(retrieval_scores);
  ASSERT_EQ(t.details["weights"].size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(t.details["weights"][i].get<double>(), lambda[i], 1e-12);
  double sum = 0;
  for (const auto& w : t.details["weights"]) sum += w.get<double>();
  EXPECT_NEAR(sum, 1.0, 1e-12);

  // Each candidate is the title of exactly one passage, so it appears in that prompt only.
  const std::vector<std::string> titles{"Brenoth", "Tarnis", "Dravic"};
  ASSERT_EQ(t.details["candidates"].size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    EXPECT_EQ(t.details["candidates"][i]["text"], titles[i]);
    double want = 0;
    for (std::size_t d = 0; d < 3; ++d) want += lambda[d] * std::exp(d == i ? -0.2 : -1.5);
    EXPECT_NEAR(t.details["candidates"][i]["score"].get<double>(), want, 1e-12);
  }
  EXPECT_EQ(t.details["winner"], 0);
  EXPECT_EQ(t.final_answer, "Brenoth");
  EXPECT_EQ(gen->score_calls(), 9u);
}

TEST(Replug, HelpersAndCapabilityCheck) {
  EXPECT_EQ(argmax_first({1.0, 3.0, 3.0}), 1u);
  EXPECT_EQ(argmax_first({2.0, 2.0 + 1e-15}), 0u);
  auto sm = softmax({1000.0, 1000.0});
  EXPECT_DOUBLE_EQ(sm[0], 0.5);
  auto c = base(std::make_shared<mock::MockGenerator>(mock::reader_script(), Capabilities{true, false}));
  EXPECT_THROW(run_pipeline(questions(), c, config(Topology::replug)), UnsupportedCapability);
  auto r = base();
  RefinerConfig rc;
  r.refiner = std::make_shared<Refiner>(rc, nullptr, r.generator);
  EXPECT_THROW(run_pipeline(questions(), r, config(Topology::replug)), ValidationError);
}

TEST(Sure, SingleCandidateSkipsRanking) {
  auto gen = scripted([](const mock::Request&) -> std::optional<mock::Reply> { return mock::Reply{"Brenoth", {}}; });
  auto t = run_pipeline({questions()[0]}, base(gen), config(Topology::sure)).front();
  EXPECT_EQ(t.final_answer, "Brenoth");
  EXPECT_EQ(gen->generate_calls(), 3u);
  EXPECT_EQ(t.details["candidates"].size(), 1u);
}

TEST(Sure, PairwiseVotesPreferFirst) {
  std::atomic<int> summaries{0}, rankings{0};
  auto gen = scripted([&](const mock::Request& r) -> std::optional<mock::Reply> {
    const auto& m = r.messages[0].content;
    if (starts_with(m, "Passages:")) {
      ++summaries;
      return mock::Reply{"summary", {}};
    }
    if (m.find("Reply with 1 or 2") != std::string::npos) {
      ++rankings;
      return mock::Reply{"1", {}};
    }
    return std::nullopt;
  });
  auto t = run_pipeline({questions()[0]}, base(gen), config(Topology::sure)).front();
  ASSERT_EQ(t.details["candidates"].size(), 3u);
  EXPECT_EQ(summaries, 3);
  EXPECT_EQ(rankings, 3);  // C(3, 2)
  EXPECT_EQ(t.details["votes"], json::array({2, 1, 0}));
  EXPECT_EQ(t.final_answer, t.details["candidates"][0]);
  EXPECT_EQ(t.details["discarded"], 0);
}

TEST(Sure, UnparseableVotesAreDiscarded) {
  EXPECT_EQ(parse_ranking_vote("Summary 2 is better"), 2);
  EXPECT_EQ(parse_ranking_vote("1"), 1);
  EXPECT_FALSE(parse_ranking_vote("1 or 2"));
  EXPECT_FALSE(parse_ranking_vote("neither"));
  auto gen = scripted([](const mock::Request& r) -> std::optional<mock::Reply> {
    const auto& m = r.messages[0].content;
    if (starts_with(m, "Passages:")) return mock::Reply{"summary", {}};
    if (m.find("Reply with 1 or 2") != std::string::npos) return mock::Reply{"both", {}};
    return std::nullopt;
  });
  auto t = run_pipeline({questions()[0]}, base(gen), config(Topology::sure)).front();
  EXPECT_EQ(t.details["discarded"], 3);
  EXPECT_EQ(t.details["winner"], 0);
}

TEST(IterRetGen, SingleIterationIsSequential) {
  auto cfg = config(Topology::iter_retgen);
  cfg.n_iter = 1;
  auto a = run_pipeline(questions(), base(), cfg);
  auto b = run_pipeline(questions(), base(), config(Topology::sequential));
  EXPECT_EQ(traces_to_jsonl(a), traces_to_jsonl(b));
}

TEST(IterRetGen, EachCycleExtendsTheQuery) {
  auto cfg = config(Topology::iter_retgen);
  cfg.n_iter = 3;
  auto t = run_pipeline({questions()[0]}, base(), cfg).front();
  ASSERT_EQ(kinds(t.steps), (std::vector<std::string>{"iteration", "iteration", "iteration"}));
  const auto q = questions()[0].question;
  EXPECT_EQ(t.steps[0].data["query"], q);
  for (int i = 0; i < 3; ++i) {
    const auto& d = t.steps[i].data;
    EXPECT_EQ(d["index"], i + 1);
    EXPECT_EQ(kinds(d["steps"]), (std::vector<std::string>{"retrieve", "prompt", "generate"}));
    if (i > 0) {
      EXPECT_EQ(d["query"], q + " " + t.steps[i - 1].data["answer"].get<std::string>());
    }
    // The prompt always asks the original question.
    EXPECT_EQ(d["steps"][1]["data"]["messages"][1]["content"], "Question: " + q);
  }
  EXPECT_EQ(t.final_answer, t.steps[2].data["answer"]);
}

namespace {

bool is_self_ask(const mock::Request& r) { return starts_with(r.messages[0].content, std::string(kSelfAskInstruction)); }

}  // namespace

TEST(SelfAsk, DirectAnswer) {
  auto gen = scripted([](const mock::Request& r) -> std::optional<mock::Reply> {
    if (is_self_ask(r)) return mock::Reply{" No.\nSo the final answer is: Brenoth", {}};
    return std::nullopt;
  });
  auto t = run_pipeline({questions()[0]}, base(gen), config(Topology::self_ask)).front();
  EXPECT_EQ(t.final_answer, "Brenoth");
  EXPECT_EQ(kinds(t.steps), (std::vector<std::string>{"prompt", "generate"}));
  EXPECT_EQ(t.details["rounds"], 0);
  EXPECT_TRUE(t.flags.empty());
  EXPECT_EQ(gen->requests()[0].params.max_new_tokens, 100u);
  EXPECT_EQ(gen->requests()[0].assistant_prefix, std::string(kSelfAskOpening));
}

TEST(SelfAsk, FollowUpUsesRetrievalSubflow) {
  auto gen = scripted([](const mock::Request& r) -> std::optional<mock::Reply> {
    if (!is_self_ask(r)) return std::nullopt;
    if (r.assistant_prefix.find("Intermediate answer: Dravic") != std::string::npos)
      return mock::Reply{"So the final answer is: Dravic", {}};
    return mock::Reply{" Yes.\nFollow up: Which language is spoken in Zorvia?\n", {}};
  });
  auto t = run_pipeline({questions()[0]}, base(gen), config(Topology::self_ask)).front();
  EXPECT_EQ(t.final_answer, "Dravic");
  ASSERT_EQ(kinds(t.steps), (std::vector<std::string>{"prompt", "generate", "iteration", "generate"}));
  const auto& it = t.steps[2].data;
  EXPECT_EQ(it["query"], "Which language is spoken in Zorvia?");
  EXPECT_EQ(it["answer"], "Dravic");
  EXPECT_EQ(kinds(it["steps"]), (std::vector<std::string>{"retrieve", "prompt", "generate"}));
  EXPECT_EQ(t.steps[3].data["prefix"], std::string(kSelfAskOpening) +
                                           " Yes.\nFollow up: Which language is spoken in Zorvia?\n"
                                           "Intermediate answer: Dravic\n");
  EXPECT_EQ(t.details["rounds"], 1);
}

TEST(SelfAsk, TruncatesAfterMaxRounds) {
  auto gen = scripted([](const mock::Request& r) -> std::optional<mock::Reply> {
    if (is_self_ask(r)) return mock::Reply{"Follow up: What is the capital city of Zorvia?", {}};
    return std::nullopt;
  });
  auto t = run_pipeline({questions()[0]}, base(gen), config(Topology::self_ask)).front();
  EXPECT_EQ(t.details["rounds"], 5);
  EXPECT_EQ(t.flags["truncated"], true);
  EXPECT_EQ(t.final_answer, "Brenoth");
  EXPECT_EQ(std::count_if(t.steps.begin(), t.steps.end(), [](const Step& s) { return s.kind == "iteration"; }), 5);
}

TEST(SelfAsk, UnparsedReplyBecomesAnswer) {
  auto gen = scripted([](const mock::Request& r) -> std::optional<mock::Reply> {
    if (is_self_ask(r)) return mock::Reply{"  I believe it is Brenoth  ", {}};
    return std::nullopt;
  });
  auto t = run_pipeline({questions()[0]}, base(gen), config(Topology::self_ask)).front();
  EXPECT_EQ(t.final_answer, "I believe it is Brenoth");
  EXPECT_EQ(t.flags["unparsed"], true);
}

TEST(Flare, ZeroThresholdIsPlainGeneration) {
  auto c = base(scripted([](const mock::Request&) -> std::optional<mock::Reply> {
    return mock::Reply{"Brenoth is the capital. It is old.", {}};
  }));
  c.generation.logprobs = true;
  auto cfg = config(Topology::flare);
  cfg.flare_theta = 0.0;
  auto flare = run_pipeline(questions(), c, cfg);
  auto naive = run_naive(questions(), c, cfg);
  EXPECT_EQ(traces_to_jsonl(flare), traces_to_jsonl(naive));
}

TEST(Flare, ThresholdOneAlwaysTriggers) {
  auto cfg = config(Topology::flare);
  cfg.flare_theta = 1.0;
  auto t = run_pipeline({questions()[0]}, base(), cfg).front();
  ASSERT_GE(t.details["triggers"].get<int>(), 1);
  ASSERT_EQ(t.steps[2].kind, "retrieve");
  EXPECT_TRUE(t.steps[2].data.contains("trigger"));
  EXPECT_EQ(t.steps[3].kind, "prompt");
  EXPECT_EQ(t.steps[3].data["passage_count"], 3);
}

TEST(Flare, MasksLowConfidenceTokens) {
  auto gen = scripted([](const mock::Request& r) -> std::optional<mock::Reply> {
    if (r.messages[0].content.find("Doc 1") != std::string::npos) return mock::Reply{"Brenoth.", {{0.99}}};
    return mock::Reply{"Zorvia capital Brenoth.", {{0.9, 0.3, 0.95}}};
  });
  auto cfg = config(Topology::flare);
  cfg.flare_theta = 0.5;
  auto t = run_pipeline({questions()[0]}, base(gen), cfg).front();
  ASSERT_EQ(kinds(t.steps), (std::vector<std::string>{"prompt", "generate", "retrieve", "prompt", "generate"}));
  EXPECT_EQ(t.steps[2].data["query"], "Zorvia Brenoth.");
  EXPECT_EQ(t.steps[2].data["trigger"]["sentence"], "Zorvia capital Brenoth.");
  EXPECT_NEAR(t.steps[2].data["trigger"]["min_prob"].get<double>(), 0.3, 1e-12);
  EXPECT_EQ(t.final_answer, "Brenoth.");
  EXPECT_EQ(t.details["triggers"], 1);

  auto no_lp = base(std::make_shared<mock::MockGenerator>(mock::reader_script(), Capabilities{false, true}));
  EXPECT_THROW(run_pipeline(questions(), no_lp, cfg), UnsupportedCapability);
}

TEST(Execution, FailingItemDoesNotAbortBatch) {
  auto store = facts();
  auto c = base();
  c.retriever = std::make_shared<StubRetriever>(store, [](std::string_view q, std::size_t) -> std::vector<ScoredPassage> {
    if (q.find("currency") != std::string_view::npos) throw ServiceError("index shard down");
    return {{"p1", 1.0, 1}};
  });
  Events ev;
  auto traces = run_pipeline(questions(), c, config(Topology::sequential), ev.sink());
  ASSERT_EQ(traces.size(), 3u);
  EXPECT_FALSE(traces[0].error);
  ASSERT_TRUE(traces[1].error);
  EXPECT_NE(traces[1].error->find("index shard down"), std::string::npos);
  EXPECT_TRUE(traces[1].final_answer.empty());
  EXPECT_FALSE(traces[2].error);
  EXPECT_EQ(to_json(traces[1])["error"], *traces[1].error);

  std::vector<std::string> q2;
  for (const auto& [id, s] : ev.list)
    if (id == "q2") q2.push_back(s.kind);
  EXPECT_EQ(q2, (std::vector<std::string>{"error", "final"}));
}

TEST(Execution, ParallelismDoesNotChangeTraces) {
  std::vector<Item> items;
  for (int i = 0; i < 30; ++i) {
    auto it = questions()[static_cast<std::size_t>(i % 3)];
    it.id = "x" + std::to_string(i);
    items.push_back(it);
  }
  for (auto t : {Topology::sequential, Topology::replug, Topology::sure, Topology::iter_retgen, Topology::flare}) {
    auto one = config(t), many = config(t);
    one.parallelism = 1;
    many.parallelism = 8;
    EXPECT_EQ(traces_to_jsonl(run_pipeline(items, base(), one)), traces_to_jsonl(run_pipeline(items, base(), many)))
        << to_string(t);
  }
}

TEST(Execution, EventStreamRebuildsTraces) {
  auto gen = scripted([](const mock::Request& r) -> std::optional<mock::Reply> {
    if (is_self_ask(r)) {
      if (r.assistant_prefix.find("Intermediate") != std::string::npos)
        return mock::Reply{"So the final answer is: done", {}};
      return mock::Reply{"Follow up: What is the capital city of Quelia?", {}};
    }
    return std::nullopt;
  });
  std::vector<std::pair<std::string, std::string>> ids;
  for (const auto& it : questions()) ids.emplace_back(it.id, it.question);
  for (auto t : {Topology::sequential, Topology::iter_retgen, Topology::self_ask, Topology::sure}) {
    Events ev;
    auto cfg = config(t);
    auto traces = run_pipeline(questions(), base(gen), cfg, ev.sink());
    EXPECT_EQ(traces_to_jsonl(traces_from_events(ev.list, ids)), traces_to_jsonl(traces)) << to_string(t);
  }
}

TEST(Execution, TraceJsonRoundTrip) {
  auto traces = run_pipeline(questions(), base(), config(Topology::iter_retgen));
  TempDir tmp;
  save_traces(traces, tmp / "traces.jsonl");
  EXPECT_EQ(traces_to_jsonl(load_traces(tmp / "traces.jsonl")), traces_to_jsonl(traces));
  write_file(tmp / "old.jsonl", "{\"schema\": 0, \"id\": \"a\"}\n");
  EXPECT_THROW(load_traces(tmp / "old.jsonl"), FormatError);
}

TEST(Registry, DescribesSevenTopologies) {
  auto d = pipeline_descriptors();
  ASSERT_EQ(d.size(), 7u);
  for (std::size_t i = 0; i < d.size(); ++i) EXPECT_EQ(d[i]["name"], kTopologyNames[i]);
  EXPECT_EQ(parse_topology("flare"), Topology::flare);
  EXPECT_THROW(parse_topology("graph"), ValidationError);
}
