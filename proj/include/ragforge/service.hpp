#pragma once

// HTTP API over the runner: live runs with server-sent step events, corpora,
// index builds, the pipeline registry and evaluation. Every run persists to
// the runner's output layout, so responses are views over those artifacts.

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <spdlog/spdlog.h>

#include "httplib.h"
#include "ragforge/bm25.hpp"
#include "ragforge/config.hpp"
#include "ragforge/evaluate.hpp"
#include "ragforge/pipelines.hpp"
#include "ragforge/runner.hpp"
#include "ragforge/trace.hpp"

namespace ragforge::service {

enum class RunStatus { pending, running, done, failed };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::pending: return "pending";
    case RunStatus::running: return "running";
    case RunStatus::done: return "done";
    case RunStatus::failed: return "failed";
  }
  return "pending";
}

/// Step event as streamed: sequence numbers are 1-based and strictly increasing per run.
struct StepEvent {
  std::size_t seq = 0;
  std::string item_id;
  Step step;
};

inline json to_json(const StepEvent& e, const std::string& run_id) {
  return {{"run_id", run_id}, {"seq", e.seq}, {"item_id", e.item_id}, {"kind", e.step.kind}, {"data", e.step.data}};
}

inline std::string sse_frame(const StepEvent& e, const std::string& run_id) {
  return "id: " + std::to_string(e.seq) + "\nevent: step\ndata: " + to_json(e, run_id).dump() + "\n\n";
}

/// Events regenerated from persisted traces, for runs not held in memory.
inline std::vector<StepEvent> events_from_traces(const std::vector<PipelineTrace>& traces) {
  std::vector<StepEvent> out;
  for (const auto& t : traces) {
    for (const auto& s : t.steps) out.push_back({out.size() + 1, t.item_id, s});
    if (t.error) out.push_back({out.size() + 1, t.item_id, {"error", {{"message", *t.error}}}});
    out.push_back({out.size() + 1, t.item_id,
                   {"final", {{"final_answer", t.final_answer}, {"flags", t.flags}, {"details", t.details}}}});
  }
  return out;
}

class RunState {
 public:
  RunState(std::string id, json config) : id_(std::move(id)), config_(std::move(config)) {}

  void append(const std::string& item_id, const Step& step) {
    {
      std::lock_guard lock(mu_);
      events_.push_back({events_.size() + 1, item_id, step});
    }
    cv_.notify_all();
  }

  void set_status(RunStatus s, std::string error = {}) {
    {
      std::lock_guard lock(mu_);
      // Transitions only move forward.
      if (static_cast<int>(s) <= static_cast<int>(status_)) return;
      status_ = s;
      if (!error.empty()) error_ = std::move(error);
    }
    cv_.notify_all();
  }

  // Events with seq > cursor; waits up to `timeout` for news while the run is live.
  std::vector<StepEvent> events_after(std::size_t cursor, std::chrono::milliseconds timeout, bool& terminal) {
    std::unique_lock lock(mu_);
    cv_.wait_for(lock, timeout, [&] { return events_.size() > cursor || is_terminal(); });
    terminal = is_terminal();
    if (cursor >= events_.size()) return {};
    return {events_.begin() + static_cast<std::ptrdiff_t>(cursor), events_.end()};
  }

  RunStatus status() const {
    std::lock_guard lock(mu_);
    return status_;
  }

  json handle() const {
    std::lock_guard lock(mu_);
    json j{{"run_id", id_}, {"status", to_string(status_)}, {"config", config_}, {"event_cursor", events_.size()}};
    if (!error_.empty()) j["error"] = error_;
    return j;
  }

  const std::string& id() const noexcept { return id_; }
  std::jthread worker;

 private:
  bool is_terminal() const { return status_ == RunStatus::done || status_ == RunStatus::failed; }

  std::string id_;
  json config_;
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::vector<StepEvent> events_;
  RunStatus status_ = RunStatus::pending;
  std::string error_;
};

struct ServiceOptions {
  std::filesystem::path output_dir = "out";
  std::filesystem::path base_dir = ".";             // resolves relative paths in posted configs
  std::map<std::string, std::filesystem::path> corpora;  // name -> passage JSONL
  Overrides overrides;                                // e.g. an in-process generator
  bool probe_services = true;
  std::string cors_origin = "*";
};

class Service {
 public:
  explicit Service(ServiceOptions opts) : opts_(std::move(opts)) { routes(); }

  ~Service() { stop(); }

  int start(const std::string& host = "127.0.0.1", int port = 0) {
    port_ = port == 0 ? server_.bind_to_any_port(host) : (server_.bind_to_port(host, port) ? port : -1);
    if (port_ < 0) throw Error("service could not bind " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
    return port_;
  }

  void listen(const std::string& host, int port) {
    port_ = port;
    spdlog::info("serving on http://{}:{}", host, port);
    if (!server_.listen(host, port)) throw Error("service could not listen on " + host + ":" + std::to_string(port));
  }

  void stop() {
    stopping_ = true;
    server_.stop();
    if (thread_.joinable()) thread_.join();
    std::vector<std::shared_ptr<RunState>> runs;
    {
      std::lock_guard lock(mu_);
      for (auto& [id, r] : runs_) runs.push_back(r);
    }
    for (auto& r : runs)
      if (r->worker.joinable()) r->worker.join();
    // Index workers take mu_ when they finish, so join them unlocked.
    std::vector<std::jthread> builds;
    {
      std::lock_guard lock(mu_);
      for (auto& [id, t] : index_jobs_) builds.push_back(std::move(t.worker));
    }
    builds.clear();
  }

  int port() const noexcept { return port_; }

 private:
  struct IndexJob {
    std::string corpus;
    std::string status = "running";
    std::string error;
    std::jthread worker;
  };

  static void reply(httplib::Response& res, const json& body, int status = 200) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }
  static void error(httplib::Response& res, int status, const std::string& msg, json extra = json::object()) {
    extra["error"] = msg;
    reply(res, extra, status);
  }

  std::shared_ptr<RunState> find_run(const std::string& id) const {
    std::lock_guard lock(mu_);
    auto it = runs_.find(id);
    return it == runs_.end() ? nullptr : it->second;
  }

  std::filesystem::path run_dir(const std::string& id) const { return opts_.output_dir / id; }

  bool persisted(const std::string& id) const {
    if (id.find('/') != std::string::npos || id.find("..") != std::string::npos) return false;
    return std::filesystem::exists(run_dir(id) / "manifest.json");
  }

  void routes() {
    server_.set_default_headers({{"Access-Control-Allow-Origin", opts_.cors_origin},
                                 {"Access-Control-Allow-Headers", "Content-Type, Last-Event-ID"},
                                 {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"}});
    server_.Options(R"(.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

    server_.Post("/runs", [this](const httplib::Request& req, httplib::Response& res) { post_run(req, res); });

    server_.Get(R"(/runs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      if (auto r = find_run(id)) return reply(res, r->handle());
      if (!persisted(id)) return error(res, 404, "unknown run '" + id + "'");
      const auto manifest = json::parse(read_file(run_dir(id) / "manifest.json"));
      reply(res, {{"run_id", id}, {"status", "done"}, {"config", manifest.at("config")}});
    });

    server_.Get(R"(/runs/([^/]+)/events)", [this](const httplib::Request& req, httplib::Response& res) {
      stream_events(req, res);
    });

    server_.Get(R"(/runs/([^/]+)/(trace|report))", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1], what = req.matches[2];
      auto r = find_run(id);
      if (!r && !persisted(id)) return error(res, 404, "unknown run '" + id + "'");
      if (r && r->status() != RunStatus::done) {
        if (r->status() == RunStatus::failed) return error(res, 409, "run failed", {{"status", "failed"}});
        return error(res, 409, "run is still in progress", {{"status", to_string(r->status())}});
      }
      if (what == "report") return reply(res, json::parse(read_file(run_dir(id) / "report.json")));
      json out = json::array();
      for (const auto& t : load_traces(run_dir(id) / "traces.jsonl")) out.push_back(ragforge::to_json(t));
      reply(res, out);
    });

    server_.Get("/corpora", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      for (const auto& [name, path] : opts_.corpora) {
        json entry{{"name", name}, {"path", path.string()}};
        try {
          const auto stats = corpus_stats(load_corpus(path));
          entry["passages"] = stats.passage_count;
          if (stats.average_defined) entry["average_words"] = stats.average_words;
        } catch (const std::exception& e) {
          entry["error"] = e.what();
        }
        out.push_back(entry);
      }
      reply(res, out);
    });

    server_.Post("/indexes", [this](const httplib::Request& req, httplib::Response& res) { post_index(req, res); });
    server_.Get(R"(/indexes/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard lock(mu_);
      auto it = index_jobs_.find(req.matches[1]);
      if (it == index_jobs_.end()) return error(res, 404, "unknown index build");
      json j{{"corpus", it->second.corpus}, {"status", it->second.status}};
      if (!it->second.error.empty()) j["error"] = it->second.error;
      reply(res, j);
    });

    server_.Get("/pipelines", [](const httplib::Request&, httplib::Response& res) { reply(res, pipeline_descriptors()); });

    server_.Post("/evaluate", [this](const httplib::Request& req, httplib::Response& res) { post_evaluate(req, res); });

    server_.Get("/schema", [](const httplib::Request&, httplib::Response& res) { reply(res, api_schema()); });
  }

  void post_run(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error& e) {
      return error(res, 400, std::string("invalid JSON: ") + e.what());
    }
    if (!body.is_object() || !body.contains("config")) return error(res, 400, "body must hold 'config'");
    const bool single = body.contains("question");
    ExperimentConfig cfg;
    try {
      cfg = config_from_json(body["config"], opts_.base_dir, !single);
      if (single && !body["question"].is_string()) throw ValidationError("question", "must be a string");
    } catch (const ValidationError& e) {
      return error(res, 400, e.what(), {{"path", e.path()}});
    } catch (const std::exception& e) {
      return error(res, 400, e.what());
    }
    if (opts_.probe_services) {
      try {
        preflight(cfg);
      } catch (const ServiceError& e) {
        return error(res, 503, e.what());
      }
    }
    cfg.output_dir = opts_.output_dir;

    RunOptions ro;
    ro.run_id = make_run_id(cfg) + "-" + std::to_string(++counter_);
    ro.overrides = opts_.overrides;
    ro.probe_services = false;
    if (single) {
      Item item;
      item.id = body.value("item_id", std::string("q1"));
      item.question = body["question"].get<std::string>();
      if (body.contains("golden_answers")) item.golden_answers = body["golden_answers"].get<std::vector<std::string>>();
      ro.items = std::vector<Item>{item};
    }
    auto state = std::make_shared<RunState>(*ro.run_id, cfg.snapshot);
    ro.sink = [state](const std::string& item_id, const Step& step) { state->append(item_id, step); };
    state->set_status(RunStatus::running);
    {
      std::lock_guard lock(mu_);
      runs_[state->id()] = state;
    }
    state->worker = std::jthread([state, cfg, ro] {
      try {
        run_experiment(cfg, ro);
        state->set_status(RunStatus::done);
      } catch (const std::exception& e) {
        spdlog::error("run {} failed: {}", state->id(), e.what());
        state->set_status(RunStatus::failed, e.what());
      }
    });
    reply(res, state->handle(), 202);
  }

  void stream_events(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    std::size_t cursor = 0;
    try {
      if (req.has_header("Last-Event-ID")) cursor = std::stoul(req.get_header_value("Last-Event-ID"));
      else if (req.has_param("cursor")) cursor = std::stoul(req.get_param_value("cursor"));
    } catch (const std::exception&) {
      return error(res, 400, "invalid event cursor");
    }
    auto state = find_run(id);
    if (!state) {
      if (!persisted(id)) return error(res, 404, "unknown run '" + id + "'");
      // Replay a finished run from its trace file.
      std::string body;
      for (const auto& e : events_from_traces(load_traces(run_dir(id) / "traces.jsonl")))
        if (e.seq > cursor) body += sse_frame(e, id);
      body += "event: end\ndata: {\"status\":\"done\"}\n\n";
      res.set_content(body, "text/event-stream");
      return;
    }
    res.set_header("Cache-Control", "no-cache");
    auto pos = std::make_shared<std::size_t>(cursor);
    res.set_chunked_content_provider("text/event-stream", [this, state, pos](std::size_t, httplib::DataSink& sink) {
      bool terminal = false;
      auto events = state->events_after(*pos, std::chrono::milliseconds(200), terminal);
      std::string chunk;
      for (const auto& e : events) chunk += sse_frame(e, state->id());
      if (!chunk.empty()) {
        if (!sink.write(chunk.data(), chunk.size())) return false;
        *pos = events.back().seq;
      }
      if (terminal && events.empty()) {
        const std::string end = "event: end\ndata: " + json{{"status", to_string(state->status())}}.dump() + "\n\n";
        sink.write(end.data(), end.size());
        sink.done();
      }
      return !stopping_.load();
    });
  }

  void post_index(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error& e) {
      return error(res, 400, std::string("invalid JSON: ") + e.what());
    }
    const auto corpus = body.value("corpus", std::string{});
    auto it = opts_.corpora.find(corpus);
    if (it == opts_.corpora.end()) return error(res, 404, "unknown corpus '" + corpus + "'");
    bm25::Params params{body.value("k1", 0.9), body.value("b", 0.4)};
    try {
      params.validate();
    } catch (const ValidationError& e) {
      return error(res, 400, e.what(), {{"path", e.path()}});
    }
    std::lock_guard lock(mu_);
    auto& job = index_jobs_[corpus];
    if (job.status == "running" && job.worker.joinable()) return error(res, 409, "index build already in progress");
    if (job.worker.joinable()) job.worker.join();
    job.corpus = corpus;
    job.status = "running";
    job.error.clear();
    const auto out_dir = opts_.output_dir / "indexes" / corpus;
    const auto path = it->second;
    job.worker = std::jthread([this, corpus, path, out_dir] {
      std::string status = "done", err;
      try {
        bm25::save_index(bm25::build_index(load_corpus(path)), out_dir);
      } catch (const std::exception& e) {
        status = "failed";
        err = e.what();
      }
      std::lock_guard lock(mu_);
      index_jobs_[corpus].status = status;
      index_jobs_[corpus].error = err;
    });
    reply(res, {{"index_id", corpus}, {"corpus", corpus}, {"status", "running"}, {"path", out_dir.string()}}, 202);
  }

  void post_evaluate(const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::parse_error& e) {
      return error(res, 400, std::string("invalid JSON: ") + e.what());
    }
    const auto id = body.value("run_id", std::string{});
    auto r = find_run(id);
    if (!r && !persisted(id)) return error(res, 404, "unknown run '" + id + "'");
    if (r && r->status() != RunStatus::done)
      return error(res, 409, "run is not finished", {{"status", to_string(r->status())}});
    try {
      reply(res, ragforge::to_json(evaluate_run(run_dir(id), body, opts_.base_dir)));
    } catch (const ValidationError& e) {
      error(res, 400, e.what(), {{"path", e.path()}});
    } catch (const std::exception& e) {
      error(res, 500, e.what());
    }
  }

 public:
  static json api_schema() {
    return {
        {"version", kVersion},
        {"config", {{"format", "same keys as the YAML experiment config"}, {"top_level_keys", kTopLevelKeys}}},
        {"run_request",
         {{"config", "object (experiment config)"},
          {"question", "string, optional; runs a single question instead of the configured dataset"},
          {"golden_answers", "list of strings, optional"}}},
        {"run_handle", {{"run_id", "string"}, {"status", {"pending", "running", "done", "failed"}}, {"config", "object"},
                        {"event_cursor", "integer"}}},
        {"step_event",
         {{"run_id", "string"},
          {"seq", "integer, strictly increasing per run"},
          {"item_id", "string"},
          {"kind", {"judger", "retrieve", "rerank", "refine", "prompt", "generate", "iteration", "final", "error"}},
          {"data", "object, step-specific"}}},
        {"trace", {{"schema", kTraceSchemaVersion}, {"fields", {"id", "question", "steps", "final_answer", "flags", "details", "error"}}}},
        {"report", {{"fields", {"aggregate", "per_item", "token_usage", "errors"}}}},
        {"pipelines", pipeline_descriptors()}};
  }

 private:
  ServiceOptions opts_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
  std::atomic<bool> stopping_{false};
  std::atomic<std::size_t> counter_{0};
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<RunState>> runs_;
  std::map<std::string, IndexJob> index_jobs_;
};

}  // namespace ragforge::service
