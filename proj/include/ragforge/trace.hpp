#pragma once

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ragforge/error.hpp"
#include "ragforge/jsonl.hpp"

namespace ragforge {

inline constexpr int kTraceSchemaVersion = 1;

/// One pipeline step. `kind` is one of judger, retrieve, rerank, refine,
/// prompt, generate, iteration; `data` is the step-specific payload.
struct Step {
  std::string kind;
  json data = json::object();

  friend bool operator==(const Step&, const Step&) = default;
};

/// Per-item record of a pipeline run.
struct PipelineTrace {
  std::string item_id;
  std::string question;
  std::vector<Step> steps;
  std::string final_answer;
  json flags = json::object();    // e.g. truncated, unparsed
  json details = json::object();  // topology-specific summary (weights, votes)
  std::optional<std::string> error;

  // Wall time per step in milliseconds. Kept out of the trace file so traces
  // stay byte-reproducible; the runner writes it to timings.jsonl.
  std::vector<double> step_ms;
};

inline json steps_to_json(const std::vector<Step>& steps) {
  json out = json::array();
  for (const auto& s : steps) out.push_back({{"kind", s.kind}, {"data", s.data}});
  return out;
}

inline std::vector<Step> steps_from_json(const json& j) {
  std::vector<Step> out;
  for (const auto& s : j) out.push_back({s.at("kind").get<std::string>(), s.at("data")});
  return out;
}

inline json to_json(const PipelineTrace& t) {
  json j{{"schema", kTraceSchemaVersion},
         {"id", t.item_id},
         {"question", t.question},
         {"steps", steps_to_json(t.steps)},
         {"final_answer", t.final_answer}};
  if (!t.flags.empty()) j["flags"] = t.flags;
  if (!t.details.empty()) j["details"] = t.details;
  if (t.error) j["error"] = *t.error;
  return j;
}

inline PipelineTrace trace_from_json(const json& j) {
  if (j.value("schema", 0) != kTraceSchemaVersion)
    throw FormatError("unsupported trace schema " + j.value("schema", json()).dump());
  PipelineTrace t;
  t.item_id = j.at("id").get<std::string>();
  t.question = j.at("question").get<std::string>();
  t.steps = steps_from_json(j.at("steps"));
  t.final_answer = j.at("final_answer").get<std::string>();
  t.flags = j.value("flags", json::object());
  t.details = j.value("details", json::object());
  if (j.contains("error")) t.error = j["error"].get<std::string>();
  return t;
}

inline std::string traces_to_jsonl(const std::vector<PipelineTrace>& traces) {
  std::string out;
  for (const auto& t : traces) out += dump_line(to_json(t)) + "\n";
  return out;
}

inline void save_traces(const std::vector<PipelineTrace>& traces, const std::filesystem::path& path) {
  write_file(path, traces_to_jsonl(traces));
}

inline std::vector<PipelineTrace> load_traces(const std::filesystem::path& path) {
  std::vector<PipelineTrace> out;
  for_each_jsonl(path, [&](json&& obj, std::size_t line) {
    try {
      out.push_back(trace_from_json(obj));
    } catch (const FormatError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError(e.what(), line);
    }
  });
  return out;
}

/// Receives each step as it is recorded. A final call per item carries kind
/// "final" (and "error" beforehand when the item failed).
using EventSink = std::function<void(const std::string& item_id, const Step& step)>;

/// Appends steps to a trace, timing each one and forwarding it to the sink.
class TraceRecorder {
 public:
  TraceRecorder(PipelineTrace& trace, EventSink sink = {})
      : trace_(trace), sink_(std::move(sink)), mark_(std::chrono::steady_clock::now()) {}

  void add(std::string kind, json data) {
    const auto now = std::chrono::steady_clock::now();
    trace_.step_ms.push_back(std::chrono::duration<double, std::milli>(now - mark_).count());
    mark_ = now;
    trace_.steps.push_back({std::move(kind), std::move(data)});
    if (sink_) sink_(trace_.item_id, trace_.steps.back());
  }

  // Restarts the step timer, e.g. before a step whose work begins now.
  void mark() { mark_ = std::chrono::steady_clock::now(); }

  PipelineTrace& trace() noexcept { return trace_; }
  const EventSink& sink() const noexcept { return sink_; }

 private:
  PipelineTrace& trace_;
  EventSink sink_;
  std::chrono::steady_clock::time_point mark_;
};

/// Rebuilds traces from an ordered event stream (as produced through an EventSink).
inline std::vector<PipelineTrace> traces_from_events(const std::vector<std::pair<std::string, Step>>& events,
                                                     const std::vector<std::pair<std::string, std::string>>& items) {
  std::vector<PipelineTrace> out;
  std::unordered_map<std::string, std::size_t> index;
  for (const auto& [id, question] : items) {
    index.emplace(id, out.size());
    out.push_back({id, question, {}, {}, json::object(), json::object(), std::nullopt, {}});
  }
  for (const auto& [id, step] : events) {
    auto it = index.find(id);
    if (it == index.end()) continue;
    auto& t = out[it->second];
    if (step.kind == "final") {
      t.final_answer = step.data.value("final_answer", std::string{});
      t.flags = step.data.value("flags", json::object());
      t.details = step.data.value("details", json::object());
    } else if (step.kind == "error") {
      t.error = step.data.value("message", std::string{});
    } else {
      t.steps.push_back(step);
    }
  }
  return out;
}

}  // namespace ragforge
