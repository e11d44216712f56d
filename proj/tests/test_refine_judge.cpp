#include <gtest/gtest.h>

#include <random>

#include "ragforge/judge.hpp"
#include "ragforge/mock.hpp"
#include "ragforge/refine.hpp"
#include "support.hpp"

using namespace ragforge;
using namespace testing_support;

namespace {

Passage passage(std::string id, std::string contents) {
  Passage p;
  p.id = id;
  p.title = id;
  p.contents = std::move(contents);
  p.word_count = text::word_count(p.contents);
  return p;
}

std::vector<std::string> words_of(const std::string& s) { return text::split_whitespace(s); }

bool is_subsequence(const std::vector<std::string>& sub, const std::vector<std::string>& full) {
  std::size_t j = 0;
  for (const auto& w : full)
    if (j < sub.size() && sub[j] == w) ++j;
  return j == sub.size();
}

// Scorer assigning each whitespace word a fixed logprob, in order.
std::shared_ptr<mock::MockGenerator> word_scorer(std::vector<double> lps) {
  auto gen = std::make_shared<mock::MockGenerator>();
  gen->set_scorer([lps](const std::vector<Message>&, std::string_view s) {
    std::vector<TokenLogprob> out;
    auto toks = mock::tokenize(s);
    for (std::size_t i = 0; i < toks.size(); ++i) out.push_back({toks[i], i < lps.size() ? lps[i] : -1.0});
    return out;
  });
  return gen;
}

SkrEntry entry(std::string q, Vector v, Verdict label) { return {std::move(q), std::move(v), label}; }

}  // namespace

TEST(ExtractiveRefiner, KeepsMostSimilarSentencesInDocumentOrder) {
  auto emb = StubEmbedder(3, {{"capital?", {1, 0, 0}},
                              {"Paris is the capital.", {1, 0, 0}},
                              {"Cats purr loudly.", {0, 1, 0}},
                              {"The capital hosts the government.", {0.8f, 0.6f, 0}}});
  auto a = passage("a", "Paris is the capital. Cats purr loudly.");
  auto b = passage("b", "The capital hosts the government.");

  auto r = extractive_refine("capital?", {&a, &b}, 9, emb);
  EXPECT_EQ(r.text, "Paris is the capital. The capital hosts the government.");
  EXPECT_EQ(r.words_before, 12u);
  EXPECT_EQ(r.words_after, 9u);
  EXPECT_FALSE(r.warning);

  EXPECT_EQ(extractive_refine("capital?", {&a, &b}, 5, emb).text, "Paris is the capital.");
  EXPECT_EQ(extractive_refine("capital?", {&a, &b}, 100, emb).words_after, 12u);

  auto tiny = extractive_refine("capital?", {&a, &b}, 3, emb);
  EXPECT_TRUE(tiny.text.empty());
  EXPECT_TRUE(tiny.warning);
  EXPECT_TRUE(extractive_refine("capital?", {}, 10, emb).text.empty());
}

TEST(PerplexityRefiner, RateOneIsIdentityWithoutScoring) {
  mock::MockGenerator no_scoring(mock::reader_script(), Capabilities{false, false});
  const std::string input = "  keep   every\nword here ";
  auto r = perplexity_refine(input, no_scoring, 1.0);
  EXPECT_EQ(r.text, input);
  EXPECT_EQ(r.words_before, 4u);
  EXPECT_EQ(r.words_after, 4u);
  EXPECT_THROW(perplexity_refine(input, no_scoring, 0.5), UnsupportedCapability);
  EXPECT_THROW(perplexity_refine(input, no_scoring, 0.0), ValidationError);
  EXPECT_THROW(perplexity_refine(input, no_scoring, 1.5), ValidationError);
}

TEST(PerplexityRefiner, DropsLowestInformationWords) {
  auto gen = word_scorer({-3.0, -0.1, -2.0, -0.5});
  EXPECT_EQ(perplexity_refine("w1 w2 w3 w4", *gen, 0.5).text, "w1 w3");
  EXPECT_EQ(perplexity_refine("w1 w2 w3 w4", *gen, 0.75).text, "w1 w3 w4");
}

TEST(PerplexityRefiner, UniformScoresKeepEarlierWords) {
  auto gen = word_scorer(std::vector<double>(10, -1.0));
  auto r = perplexity_refine("a b c d e f g h i j", *gen, 0.5);
  EXPECT_EQ(r.text, "a b c d e");
  EXPECT_EQ(r.words_after, 5u);
}

TEST(PerplexityRefiner, KeepsRateOfWordsAsSubsequence) {
  mock::MockGenerator gen;  // default echo scoring
  std::mt19937 rng(21);
  const std::vector<std::string> vocab{"river", "city", "the", "of", "Paris,", "north", "bridge", "old", "stone",
                                       "harbour", "is", "a", "capital."};
  std::uniform_int_distribution<std::size_t> len(1, 60), pick(0, vocab.size() - 1);
  std::uniform_real_distribution<double> rate(0.05, 1.0);
  for (int i = 0; i < 100; ++i) {
    std::string input;
    const auto n = len(rng);
    for (std::size_t w = 0; w < n; ++w) input += vocab[pick(rng)] + (w % 7 == 6 ? "\n" : " ");
    const double rho = rate(rng);
    auto r = perplexity_refine(input, gen, rho);
    const auto out = words_of(r.text);
    ASSERT_EQ(r.words_before, n);
    ASSERT_EQ(out.size(), r.words_after);
    ASSERT_EQ(out.size(), static_cast<std::size_t>(std::ceil(rho * n - 1e-12)));
    ASSERT_NEAR(static_cast<double>(out.size()), rho * n, 1.0);
    ASSERT_TRUE(is_subsequence(out, words_of(input)));
  }
}

TEST(AbstractiveRefiner, SummarizesInOneCall) {
  mock::MockGenerator gen([](const mock::Request&) { return mock::Reply{"  short summary here  ", std::nullopt}; });
  auto a = passage("a", "Alpha text.");
  auto b = passage("b", "Beta text longer.");
  auto r = abstractive_refine("what?", {&a, &b}, gen, 64);
  EXPECT_EQ(r.text, "short summary here");
  EXPECT_EQ(r.words_before, 5u);
  EXPECT_EQ(r.words_after, 3u);
  ASSERT_EQ(gen.generate_calls(), 1u);
  const auto& prompt = gen.requests()[0].messages[0].content;
  EXPECT_NE(prompt.find("Alpha text.\nBeta text longer."), std::string::npos);
  EXPECT_NE(prompt.find("Question: what?"), std::string::npos);

  EXPECT_TRUE(abstractive_refine("what?", {}, gen, 64).text.empty());
  EXPECT_EQ(gen.generate_calls(), 1u);
  EXPECT_EQ(abstractive_refine("what?", {&a}, gen, 1).text, "short");
}

TEST(Refiner, ConfigurationChecks) {
  RefinerConfig c;
  EXPECT_DOUBLE_EQ(c.rate(), 0.5);
  c.kind = RefinerKind::extractive;
  EXPECT_DOUBLE_EQ(c.rate(), 0.55);
  EXPECT_THROW(Refiner(c, nullptr, nullptr), ValidationError);
  c.compression_rate = 0.0;
  EXPECT_THROW(c.validate(), ValidationError);
  EXPECT_THROW(parse_refiner_kind("lossy"), ValidationError);
  RefinerConfig p;
  EXPECT_THROW(Refiner(p, nullptr, nullptr), ValidationError);
}

TEST(Refiner, ExtractiveBudgetFromRate) {
  RefinerConfig c;
  c.kind = RefinerKind::extractive;
  c.compression_rate = 0.5;
  auto emb = std::make_shared<StubEmbedder>(8);
  Refiner r(c, emb, nullptr);
  auto a = passage("a", "One two three four. Five six seven eight.");
  auto out = r.refine("q", {&a});
  EXPECT_EQ(out.words_before, 8u);
  EXPECT_EQ(out.words_after, 4u);
}

TEST(SkrJudge, MajorityOfNearestNeighbours) {
  SkrTrainingSet ts;
  ts.k = 3;
  ts.entries = {entry("r1", {1, 0}, Verdict::retrieve), entry("n1", {0.9f, 0.1f}, Verdict::no_retrieve),
                entry("n2", {0.8f, 0.2f}, Verdict::no_retrieve), entry("r2", {0, 1}, Verdict::retrieve),
                entry("r3", {0.1f, 0.9f}, Verdict::retrieve)};
  auto j = skr_judge({1, 0}, ts);
  EXPECT_EQ(j.verdict, Verdict::no_retrieve);
  ASSERT_EQ(j.neighbors.size(), 3u);
  EXPECT_EQ(j.neighbors[0].question, "r1");
  EXPECT_NEAR(j.neighbors[0].similarity, 1.0, 1e-9);
  EXPECT_EQ(skr_judge({0, 1}, ts).verdict, Verdict::retrieve);
  EXPECT_EQ(to_json(j)["verdict"], "no_retrieve");
}

TEST(SkrJudge, TieFavoursRetrieval) {
  SkrTrainingSet ts;
  ts.k = 2;
  ts.entries = {entry("r", {1, 0}, Verdict::retrieve), entry("n", {0.9f, 0.1f}, Verdict::no_retrieve),
                entry("far", {-1, 0}, Verdict::no_retrieve)};
  EXPECT_EQ(skr_judge({1, 0}, ts).verdict, Verdict::retrieve);
  ts.k = 4;
  EXPECT_THROW(skr_judge({1, 0}, ts), ValidationError);
}

TEST(SkrJudge, IndependentOfTrainingOrder) {
  std::mt19937 rng(4);
  std::normal_distribution<float> nd;
  SkrTrainingSet ts;
  ts.k = 5;
  for (int i = 0; i < 40; ++i) {
    Vector v(6);
    for (auto& x : v) x = nd(rng);
    ts.entries.push_back(entry("q" + std::to_string(i), v, i % 3 ? Verdict::retrieve : Verdict::no_retrieve));
  }
  std::vector<Vector> queries;
  std::vector<Verdict> before;
  for (int i = 0; i < 30; ++i) {
    Vector q(6);
    for (auto& x : q) x = nd(rng);
    queries.push_back(q);
    before.push_back(skr_judge(q, ts).verdict);
  }
  // A training question is its own nearest neighbour.
  EXPECT_EQ(skr_judge(ts.entries[7].embedding, ts).neighbors[0].question, "q7");
  for (int t = 0; t < 5; ++t) {
    std::shuffle(ts.entries.begin(), ts.entries.end(), rng);
    for (std::size_t i = 0; i < queries.size(); ++i) ASSERT_EQ(skr_judge(queries[i], ts).verdict, before[i]);
  }
}

TEST(SkrJudger, LoadsToyTrainingSet) {
  auto emb = mock::make_embedder(64);
  auto ts = load_skr_training(source_dir() / "data/toy/skr_train.jsonl", *emb, 5);
  EXPECT_EQ(ts.entries.size(), 40u);
  SkrJudger judger(ts, emb);
  EXPECT_EQ(judger.judge("What is the capital city of Zorvia?").verdict, Verdict::retrieve);
  EXPECT_EQ(judger.judge("What is 6 plus 7?").verdict, Verdict::no_retrieve);
  EXPECT_THROW(load_skr_training(source_dir() / "data/toy/skr_train.jsonl", *emb, 41), ValidationError);

  TempDir tmp;
  write_file(tmp / "bad.jsonl", "{\"question\": \"q\", \"label\": \"maybe\"}\n");
  EXPECT_THROW(load_skr_training(tmp / "bad.jsonl", *emb, 1), FormatError);
}
