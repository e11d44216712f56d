#include <gtest/gtest.h>

#include <thread>

#include "ragforge/mock.hpp"
#include "ragforge/service.hpp"
#include "support.hpp"

using namespace ragforge;
using namespace testing_support;
using namespace std::chrono_literals;

namespace {

struct Frame {
  std::size_t seq = 0;
  std::string event;
  json data;
};

std::vector<Frame> parse_sse(const std::string& body) {
  std::vector<Frame> out;
  std::size_t start = 0;
  while (start < body.size()) {
    auto end = body.find("\n\n", start);
    if (end == std::string::npos) break;
    Frame f;
    std::istringstream block(body.substr(start, end - start));
    for (std::string line; std::getline(block, line);) {
      if (line.starts_with("id: ")) f.seq = std::stoul(line.substr(4));
      else if (line.starts_with("event: ")) f.event = line.substr(7);
      else if (line.starts_with("data: ")) f.data = json::parse(line.substr(6));
    }
    out.push_back(f);
    start = end + 2;
  }
  return out;
}

std::vector<Frame> steps_of(const std::vector<Frame>& frames) {
  std::vector<Frame> out;
  for (const auto& f : frames)
    if (f.event == "step") out.push_back(f);
  return out;
}

// Generator that blocks until the gate opens, so a run can be observed mid-flight.
struct Gate {
  std::atomic<bool> open{false};
};

std::shared_ptr<mock::MockGenerator> gated_reader(std::shared_ptr<Gate> gate) {
  auto reader = mock::reader_script();
  return std::make_shared<mock::MockGenerator>([gate, reader](const mock::Request& r) {
    while (!gate->open) std::this_thread::sleep_for(2ms);
    return reader(r);
  });
}

class ServiceTest : public ::testing::Test {
 protected:
  void SetUp() override { boot({}); }

  void boot(Overrides ov) {
    svc_.reset();
    service::ServiceOptions so;
    so.output_dir = tmp_.path() / "runs";
    so.base_dir = source_dir() / "data/toy";
    so.corpora = {{"toy", source_dir() / "data/toy/corpus.jsonl"}};
    so.overrides = std::move(ov);
    so.probe_services = false;
    svc_ = std::make_unique<service::Service>(so);
    port_ = svc_->start();
    client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);
    client_->set_read_timeout(30, 0);
  }

  json toy_config() const { return load_config(source_dir() / "data/toy/toy.yaml").snapshot; }

  httplib::Result post(const std::string& path, const json& body) {
    return client_->Post(path, body.dump(), "application/json");
  }

  json get_json(const std::string& path, int expect = 200) {
    auto r = client_->Get(path);
    EXPECT_TRUE(r);
    if (!r) return nullptr;
    EXPECT_EQ(r->status, expect) << path << ": " << r->body;
    return json::parse(r->body);
  }

  std::string start_run(const json& body) {
    auto r = post("/runs", body);
    EXPECT_TRUE(r);
    EXPECT_EQ(r->status, 202) << r->body;
    return json::parse(r->body).at("run_id").get<std::string>();
  }

  // Full event stream of a run, read until the end frame.
  std::vector<Frame> stream(const std::string& id, std::size_t last_seen = 0) {
    httplib::Headers h;
    if (last_seen) h.emplace("Last-Event-ID", std::to_string(last_seen));
    auto r = client_->Get("/runs/" + id + "/events", h);
    EXPECT_TRUE(r);
    if (!r) return {};
    EXPECT_EQ(r->status, 200);
    return parse_sse(r->body);
  }

  std::string wait_done(const std::string& id) {
    for (int i = 0; i < 3000; ++i) {
      auto h = get_json("/runs/" + id);
      const auto s = h.value("status", std::string{});
      if (s == "done" || s == "failed") return s;
      std::this_thread::sleep_for(10ms);
    }
    return "timeout";
  }

  TempDir tmp_;
  std::unique_ptr<service::Service> svc_;
  std::unique_ptr<httplib::Client> client_;
  int port_ = 0;
};

}  // namespace

TEST_F(ServiceTest, SingleQuestionRun) {
  auto r = post("/runs", {{"config", toy_config()}, {"question", "What is the capital city of Krothberia?"}});
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 202);
  auto handle = json::parse(r->body);
  EXPECT_EQ(handle["status"], "running");
  EXPECT_EQ(handle["config"]["pipeline"]["topology"], "sequential");
  const auto id = handle["run_id"].get<std::string>();

  auto frames = stream(id);
  ASSERT_FALSE(frames.empty());
  EXPECT_EQ(frames.back().event, "end");
  EXPECT_EQ(frames.back().data["status"], "done");
  std::vector<std::string> kinds;
  for (const auto& f : steps_of(frames)) kinds.push_back(f.data["kind"]);
  EXPECT_EQ(kinds, (std::vector<std::string>{"retrieve", "prompt", "generate", "final"}));
  EXPECT_EQ(steps_of(frames).back().data["data"]["final_answer"], "Norbriol");
  EXPECT_EQ(wait_done(id), "done");

  auto trace = get_json("/runs/" + id + "/trace");
  ASSERT_EQ(trace.size(), 1u);
  EXPECT_EQ(trace[0]["final_answer"], "Norbriol");
}

TEST_F(ServiceTest, InvalidConfigNamesTheField) {
  auto cfg = toy_config();
  cfg["pipeline"]["topology"] = "flare";
  cfg["pipeline"]["flare_theta"] = 1.5;
  auto r = post("/runs", {{"config", cfg}, {"question", "q"}});
  ASSERT_TRUE(r);
  EXPECT_EQ(r->status, 400);
  auto body = json::parse(r->body);
  EXPECT_EQ(body["path"], "pipeline.flare_theta");
  EXPECT_NE(body["error"].get<std::string>().find("pipeline.flare_theta"), std::string::npos);

  EXPECT_EQ(client_->Post("/runs", "{not json", "application/json")->status, 400);
  EXPECT_EQ(post("/runs", {{"question", "q"}})->status, 400);
  EXPECT_EQ(post("/runs", {{"config", toy_config()}, {"question", 3}})->status, 400);
}

TEST_F(ServiceTest, DatasetRunStreamsEveryItem) {
  const auto id = start_run({{"config", toy_config()}});
  auto frames = stream(id);
  auto steps = steps_of(frames);
  std::size_t finals = 0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    EXPECT_EQ(steps[i].seq, i + 1);
    EXPECT_EQ(steps[i].data["run_id"], id);
    finals += steps[i].data["kind"] == "final";
  }
  EXPECT_EQ(finals, 10u);
  EXPECT_EQ(steps.size(), 40u);
  EXPECT_EQ(wait_done(id), "done");

  // /evaluate with no overrides reproduces the run's report.
  auto r = post("/evaluate", {{"run_id", id}});
  ASSERT_TRUE(r);
  ASSERT_EQ(r->status, 200) << r->body;
  EXPECT_EQ(json::parse(r->body), get_json("/runs/" + id + "/report"));
  auto narrowed = json::parse(post("/evaluate", {{"run_id", id}, {"metrics", {"em"}}})->body);
  EXPECT_EQ(narrowed["aggregate"].size(), 1u);
  EXPECT_EQ(post("/evaluate", {{"run_id", id}, {"recall_mode", "fuzzy"}})->status, 400);
  EXPECT_EQ(post("/evaluate", {{"run_id", "nope"}})->status, 404);

  // Per-item kinds match the sequential layout.
  std::map<std::string, std::vector<std::string>> by_item;
  for (const auto& f : steps) by_item[f.data["item_id"]].push_back(f.data["kind"]);
  ASSERT_EQ(by_item.size(), 10u);
  for (const auto& [item, kinds] : by_item)
    EXPECT_EQ(kinds, (std::vector<std::string>{"retrieve", "prompt", "generate", "final"})) << item;
}

TEST_F(ServiceTest, LiveRunRejectsTraceAndResumesWithoutDuplicates) {
  auto gate = std::make_shared<Gate>();
  Overrides ov;
  ov.generator = gated_reader(gate);
  boot(ov);

  const auto id = start_run({{"config", toy_config()}});
  EXPECT_EQ(get_json("/runs/" + id)["status"], "running");
  auto busy = client_->Get("/runs/" + id + "/trace");
  ASSERT_TRUE(busy);
  EXPECT_EQ(busy->status, 409);
  EXPECT_EQ(json::parse(busy->body)["status"], "running");
  EXPECT_EQ(client_->Get("/runs/" + id + "/report")->status, 409);
  EXPECT_EQ(post("/evaluate", {{"run_id", id}})->status, 409);

  // Read the first few frames, then drop the connection.
  std::string partial;
  std::size_t last_seq = 0;
  client_->Get("/runs/" + id + "/events", [&](const char* data, std::size_t n) {
    partial.append(data, n);
    auto frames = steps_of(parse_sse(partial));
    if (!frames.empty()) last_seq = frames.back().seq;
    return frames.size() < 3;
  });
  gate->open = true;
  auto first = steps_of(parse_sse(partial));
  ASSERT_GE(first.size(), 3u);

  auto rest = stream(id, last_seq);
  EXPECT_EQ(rest.back().event, "end");
  std::vector<std::size_t> seqs;
  for (const auto& f : first) seqs.push_back(f.seq);
  for (const auto& f : steps_of(rest)) seqs.push_back(f.seq);
  ASSERT_EQ(seqs.size(), 40u);
  for (std::size_t i = 0; i < seqs.size(); ++i) EXPECT_EQ(seqs[i], i + 1);

  EXPECT_EQ(wait_done(id), "done");
  EXPECT_EQ(client_->Get("/runs/" + id + "/trace")->status, 200);
  EXPECT_EQ(steps_of(stream(id, 38)).size(), 2u);
  EXPECT_EQ(client_->Get("/runs/" + id + "/events?cursor=x")->status, 400);
}

TEST_F(ServiceTest, FinishedRunsAreServedFromDisk) {
  const auto id = start_run({{"config", toy_config()}});
  const auto live = steps_of(stream(id));
  ASSERT_EQ(wait_done(id), "done");
  const auto report = get_json("/runs/" + id + "/report");

  boot({});  // a fresh service sees only the output directory
  EXPECT_EQ(get_json("/runs/" + id)["status"], "done");
  const auto replay = steps_of(stream(id));
  // Live events interleave items as workers finish; replay follows trace order.
  auto per_item = [](const std::vector<Frame>& frames) {
    std::map<std::string, std::vector<json>> out;
    for (const auto& f : frames) out[f.data["item_id"]].push_back({f.data["kind"], f.data["data"]});
    return out;
  };
  ASSERT_EQ(replay.size(), live.size());
  EXPECT_EQ(per_item(replay), per_item(live));
  for (std::size_t i = 0; i < replay.size(); ++i) EXPECT_EQ(replay[i].seq, i + 1);
  EXPECT_EQ(steps_of(stream(id, 30)).size(), 10u);
  EXPECT_EQ(get_json("/runs/" + id + "/report"), report);
  EXPECT_EQ(json::parse(post("/evaluate", {{"run_id", id}})->body), report);
  get_json("/runs/unknown", 404);
  get_json("/runs/unknown/trace", 404);
  EXPECT_EQ(client_->Get("/runs/unknown/events")->status, 404);
}

TEST_F(ServiceTest, Registry) {
  auto pipelines = get_json("/pipelines");
  ASSERT_EQ(pipelines.size(), 7u);
  std::set<std::string> names;
  for (const auto& p : pipelines) names.insert(p["name"]);
  EXPECT_EQ(names, (std::set<std::string>{"sequential", "conditional", "replug", "sure", "iter_retgen", "self_ask",
                                          "flare"}));

  auto schema = get_json("/schema");
  EXPECT_EQ(schema["version"], kVersion);
  EXPECT_EQ(schema["pipelines"], pipelines);
  EXPECT_TRUE(schema.contains("step_event"));

  auto corpora = get_json("/corpora");
  ASSERT_EQ(corpora.size(), 1u);
  EXPECT_EQ(corpora[0]["name"], "toy");
  EXPECT_EQ(corpora[0]["passages"], 100);
}

TEST_F(ServiceTest, CorsHeaders) {
  auto r = client_->Get("/pipelines");
  ASSERT_TRUE(r);
  EXPECT_EQ(r->get_header_value("Access-Control-Allow-Origin"), "*");
  auto pre = client_->Options("/runs");
  ASSERT_TRUE(pre);
  EXPECT_EQ(pre->status, 204);
  EXPECT_NE(pre->get_header_value("Access-Control-Allow-Methods").find("POST"), std::string::npos);
}

TEST_F(ServiceTest, IndexBuilds) {
  // Large enough that the build is still running when the second request lands.
  std::string rows;
  for (int i = 0; i < 15000; ++i)
    rows += json{{"id", "p" + std::to_string(i)}, {"contents", "word" + std::to_string(i % 977) + " shared text body"}}
                .dump() +
            "\n";
  write_file(tmp_ / "big.jsonl", rows);
  service::ServiceOptions so;
  so.output_dir = tmp_.path() / "runs";
  so.corpora = {{"big", tmp_ / "big.jsonl"}};
  so.probe_services = false;
  svc_ = std::make_unique<service::Service>(so);
  port_ = svc_->start();
  client_ = std::make_unique<httplib::Client>("127.0.0.1", port_);

  EXPECT_EQ(post("/indexes", {{"corpus", "nope"}})->status, 404);
  get_json("/indexes/nope", 404);
  EXPECT_EQ(post("/indexes", {{"corpus", "big"}, {"k1", -1.0}})->status, 400);

  auto first = post("/indexes", {{"corpus", "big"}});
  ASSERT_EQ(first->status, 202);
  EXPECT_EQ(json::parse(first->body)["status"], "running");
  EXPECT_EQ(post("/indexes", {{"corpus", "big"}})->status, 409);

  std::string status;
  for (int i = 0; i < 6000 && status != "done"; ++i) {
    status = get_json("/indexes/big")["status"];
    std::this_thread::sleep_for(10ms);
  }
  ASSERT_EQ(status, "done");
  const auto index = bm25::load_index(tmp_.path() / "runs" / "indexes" / "big");
  EXPECT_EQ(index.N(), 15000u);
  EXPECT_EQ(post("/indexes", {{"corpus", "big"}})->status, 202);
}
