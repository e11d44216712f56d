#pragma once

// Builds components from a config, runs experiments and sweeps, and persists
// run artifacts under <output_dir>/<run_id>/.

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <memory>
#include <optional>
#include <regex>
#include <string>
#include <vector>

#include <spdlog/spdlog.h>

#include "ragforge/bm25.hpp"
#include "ragforge/config.hpp"
#include "ragforge/corpus.hpp"
#include "ragforge/dataspec.hpp"
#include "ragforge/dense.hpp"
#include "ragforge/evaluate.hpp"
#include "ragforge/judge.hpp"
#include "ragforge/mock.hpp"
#include "ragforge/pipelines.hpp"
#include "ragforge/refine.hpp"
#include "ragforge/retrieval.hpp"
#include "ragforge/trace.hpp"

namespace ragforge {

inline constexpr std::string_view kVersion = "0.1.0";

inline std::string env_or_empty(const std::string& name) {
  if (name.empty()) return {};
  const char* v = std::getenv(name.c_str());
  return v ? v : "";
}

inline std::shared_ptr<const PassageStore> build_store(const CorpusSpec& spec, std::size_t workers = 1) {
  if (spec.path) return std::make_shared<const PassageStore>(load_corpus(*spec.path));
  return std::make_shared<const PassageStore>(chunk_documents(load_documents(*spec.documents), spec.chunk, workers));
}

inline std::shared_ptr<const Embedder> build_embedder(const EmbedderSpec& spec) {
  if (spec.type == "mock") return mock::make_embedder(spec.dim, spec.client);
  return std::make_shared<EmbeddingClient>(spec.client, dense::http_transport(spec.client, env_or_empty(spec.api_key_env)));
}

inline std::shared_ptr<const GeneratorClient> build_generator(const GeneratorSpec& spec) {
  if (spec.type == "mock") return std::make_shared<mock::MockGenerator>(mock::reader_script(), spec.capabilities);
  GeneratorClientConfig g;
  g.endpoint = spec.endpoint;
  g.model = spec.model;
  g.timeout = std::chrono::milliseconds(spec.timeout_ms);
  g.max_retries = static_cast<int>(spec.max_retries);
  g.capabilities = spec.capabilities;
  g.api_key = env_or_empty(spec.api_key_env);
  return std::make_shared<HttpGeneratorClient>(g);
}

inline Dataset load_items(const DatasetSpec& spec, std::uint64_t seed) {
  Dataset ds = load_dataset(spec.path, spec.split);
  if (spec.filter_key) {
    const json want = spec.filter_equals;
    ds = filter_by_metadata(ds, *spec.filter_key, [&](const json& v) { return v == want; });
  }
  if (spec.sample) {
    try {
      ds = select(ds, spec.random_sample ? SelectMode::Random(seed) : SelectMode::Sequential(), *spec.sample);
    } catch (const ValidationError& e) {
      throw ValidationError("dataset.sample", detail::bare_message(e));
    }
  }
  return ds;
}

/// Everything a run needs, built from a config.
struct Runtime {
  std::shared_ptr<const PassageStore> store;
  std::shared_ptr<const Embedder> embedder;
  std::shared_ptr<RetrievalCache> cache;
  Components components;
};

/// Components supplied by the caller instead of being built from the config.
struct Overrides {
  std::shared_ptr<const GeneratorClient> generator;
  std::shared_ptr<const Embedder> embedder;
  std::shared_ptr<const PassageStore> store;
};

inline Runtime build_runtime(const ExperimentConfig& cfg, const Overrides& ov = {}) {
  Runtime rt;
  rt.store = ov.store ? ov.store : build_store(cfg.corpus, cfg.pipeline.parallelism);
  if (ov.embedder) rt.embedder = ov.embedder;
  else if (cfg.embedder) rt.embedder = build_embedder(*cfg.embedder);
  auto& c = rt.components;
  c.generator = ov.generator ? ov.generator : build_generator(cfg.generator);
  c.generation = cfg.generator.params;
  c.prompt = cfg.prompt;

  std::shared_ptr<const Retriever> retriever;
  if (cfg.retriever.type == "bm25") {
    const auto& ip = cfg.retriever.index_path;
    if (ip && std::filesystem::exists(*ip / "bm25.jsonl")) {
      retriever = std::make_shared<bm25::Bm25Retriever>(rt.store, bm25::load_index(*ip), cfg.retriever.bm25);
    } else {
      auto r = std::make_shared<bm25::Bm25Retriever>(rt.store, cfg.retriever.bm25);
      if (ip) bm25::save_index(r->index(), *ip);
      retriever = r;
    }
  } else {
    auto vectors = cfg.retriever.vectors_path ? dense::load_vectors(*cfg.retriever.vectors_path, cfg.retriever.metric)
                                              : dense::build_vector_store(*rt.store, *rt.embedder, cfg.retriever.metric);
    retriever = std::make_shared<dense::DenseRetriever>(rt.store, std::move(vectors), rt.embedder);
  }
  if (cfg.retriever.cache) {
    rt.cache = std::make_shared<RetrievalCache>();
    if (cfg.retriever.cache_path) rt.cache->load(*cfg.retriever.cache_path);
    retriever = std::make_shared<CachingRetriever>(retriever, rt.cache);
  }
  c.retriever = retriever;

  if (cfg.reranker) {
    if (cfg.reranker->type == "bi_encoder") c.reranker = std::make_shared<dense::BiEncoderReranker>(rt.embedder);
    else c.reranker = std::make_shared<dense::CrossEncoderReranker>(cfg.reranker->endpoint, cfg.reranker->model);
    c.rerank_fallback = cfg.reranker->fallback;
  }
  if (cfg.refiner) c.refiner = std::make_shared<Refiner>(*cfg.refiner, rt.embedder, c.generator);
  if (cfg.judger)
    c.judger = std::make_shared<SkrJudger>(load_skr_training(cfg.judger->training_path, *rt.embedder, cfg.judger->k),
                                           rt.embedder);
  return rt;
}

/// Probes every remote service the config names; throws one ServiceError
/// listing all unreachable ones.
inline void preflight(const ExperimentConfig& cfg) {
  std::vector<std::string> down;
  auto probe = [&](const std::string& what, const std::string& endpoint) {
    if (!http::JsonClient(endpoint).reachable("/models")) down.push_back(what + " at " + endpoint);
  };
  if (cfg.generator.type == "http") probe("generator", cfg.generator.endpoint);
  if (cfg.embedder && cfg.embedder->type == "http") probe("embedder", cfg.embedder->client.endpoint);
  if (cfg.reranker && cfg.reranker->type == "cross_encoder") probe("reranker", cfg.reranker->endpoint);
  if (!down.empty()) throw ServiceError("unreachable services: " + text::join(down, ", "));
}

inline std::string config_hash(const json& snapshot) { return text::hex64(text::fnv1a(snapshot.dump())).substr(0, 8); }

inline std::string utc_timestamp(const char* fmt = "%Y%m%dT%H%M%SZ") {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, fmt, &tm);
  return buf;
}

inline std::string make_run_id(const ExperimentConfig& cfg) { return utc_timestamp() + "-" + config_hash(cfg.snapshot); }

struct RunOptions {
  bool force = false;
  std::optional<std::string> run_id;
  std::optional<std::vector<Item>> items;  // replaces the configured dataset
  EventSink sink;
  Overrides overrides;
  bool probe_services = true;
};

struct RunResult {
  std::string run_id;
  std::filesystem::path dir;
  json manifest;
  std::vector<PipelineTrace> traces;
  MetricReport report;
};

inline json report_json(const std::vector<PipelineTrace>& traces, const std::vector<Item>& items, const EvalOptions& opts) {
  return to_json(evaluate(traces, items, opts));
}

/// Claims the run directory; an existing one is an error unless `force`.
inline std::filesystem::path prepare_run_dir(const std::filesystem::path& dir, bool force) {
  if (std::filesystem::exists(dir)) {
    if (!force) throw Error("output directory " + dir.string() + " already exists (use --force to overwrite)");
    std::filesystem::remove_all(dir);
  }
  std::filesystem::create_directories(dir);
  return dir;
}

inline RunResult run_experiment(const ExperimentConfig& cfg, const RunOptions& opts = {}) {
  if (opts.probe_services) preflight(cfg);
  RunResult res;
  res.run_id = opts.run_id.value_or(make_run_id(cfg));
  res.dir = prepare_run_dir(cfg.output_dir / res.run_id, opts.force);

  const auto started = std::chrono::steady_clock::now();
  const auto started_at = utc_timestamp("%Y-%m-%dT%H:%M:%SZ");
  std::vector<Item> items = opts.items ? *opts.items : load_items(cfg.dataset, cfg.seed).items;
  const Runtime rt = build_runtime(cfg, opts.overrides);
  res.traces = run_pipeline(items, rt.components, cfg.pipeline, opts.sink);
  res.report = evaluate(res.traces, items, cfg.eval);
  const double elapsed =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();

  save_traces(res.traces, res.dir / "traces.jsonl");
  write_file(res.dir / "report.json", to_json(res.report).dump(2) + "\n");
  write_file(res.dir / "report.csv", aggregate_csv(res.report));
  std::string timings;
  for (const auto& t : res.traces) timings += dump_line({{"id", t.item_id}, {"step_ms", t.step_ms}}) + "\n";
  write_file(res.dir / "timings.jsonl", timings);
  if (rt.cache && cfg.retriever.cache_path) rt.cache->save(*cfg.retriever.cache_path);

  json items_json = json::array();
  if (opts.items)
    for (const auto& it : items) items_json.push_back(item_to_json(it));
  res.manifest = {{"run_id", res.run_id},
                  {"name", cfg.name},
                  {"version", kVersion},
                  {"config", cfg.snapshot},
                  {"seed", cfg.seed},
                  {"started_at", started_at},
                  {"duration_ms", elapsed},
                  {"item_count", items.size()},
                  {"error_count", res.report.errors.size()}};
  if (opts.items) res.manifest["items"] = std::move(items_json);
  if (rt.cache) res.manifest["cache"] = {{"hits", rt.cache->hits()}, {"misses", rt.cache->misses()}};
  write_file(res.dir / "manifest.json", res.manifest.dump(2) + "\n");
  spdlog::info("run {}: {} items, {} errors, {:.0f} ms", res.run_id, items.size(), res.report.errors.size(), elapsed);
  return res;
}

/// Items a persisted run was executed on: inline items recorded in the
/// manifest, else the dataset its config names.
inline std::vector<Item> manifest_items(const json& manifest, const std::filesystem::path& base = ".") {
  std::vector<Item> items;
  if (manifest.contains("items")) {
    for (const auto& j : manifest["items"]) items.push_back(item_from_json(j));
    return items;
  }
  const auto cfg = config_from_json(manifest.at("config"), base);
  return load_items(cfg.dataset, cfg.seed).items;
}

/// Re-evaluates a run directory. `request` may override metrics, k and recall_mode.
inline MetricReport evaluate_run(const std::filesystem::path& dir, const json& request = json::object(),
                                 const std::filesystem::path& base = ".") {
  const auto manifest = json::parse(read_file(dir / "manifest.json"));
  const auto cfg = config_from_json(manifest.at("config"), base, !manifest.contains("items"));
  EvalOptions eo = cfg.eval;
  if (request.contains("metrics")) eo.metrics = request["metrics"].get<std::vector<std::string>>();
  if (request.contains("k")) eo.k = request["k"].get<std::size_t>();
  if (request.contains("recall_mode")) {
    const auto m = request["recall_mode"].get<std::string>();
    if (m != "answer" && m != "set") throw ValidationError("recall_mode", "must be 'answer' or 'set'");
    eo.recall_mode = m == "set" ? metrics::RecallMode::set : metrics::RecallMode::answer;
  }
  return evaluate(load_traces(dir / "traces.jsonl"), manifest_items(manifest, base), eo);
}

/// Re-parses a config snapshot with one key replaced.
inline ExperimentConfig with_override(const ExperimentConfig& cfg, std::string_view path, const json& value) {
  json j = cfg.snapshot;
  set_config_path(j, path, value);
  return config_from_json(j, ".", !cfg.dataset.path.empty());
}

struct SweepResult {
  std::string axis;
  std::vector<json> values;
  std::vector<RunResult> runs;
  json table;  // [{"value": v, "metrics": {...}}]
  std::filesystem::path dir;
};

// "recall@3" -> "recall@k" so rows of a top_k sweep share columns.
inline std::string sweep_column(const std::string& metric) {
  static const std::regex at_k(R"(@\d+$)");
  return std::regex_replace(metric, at_k, "@k");
}

/// One run per value of `axis`; writes comparison.json and comparison.csv.
inline SweepResult sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<json>& values,
                         RunOptions opts = {}) {
  // Axis must name an existing key; chunk.stride is accepted although its default is derived.
  if (!has_config_path(cfg.snapshot, axis) && axis != "corpus.chunk.stride")
    throw ValidationError("axis", "'" + axis + "' does not name a config key");
  if (values.empty()) throw ValidationError("values", "at least one value is required");
  SweepResult out;
  out.axis = axis;
  out.values = values;
  const std::string sweep_id = opts.run_id.value_or(utc_timestamp() + "-" + config_hash(cfg.snapshot)) + "-sweep";
  out.dir = prepare_run_dir(cfg.output_dir / sweep_id, opts.force);
  out.table = json::array();
  std::vector<std::string> columns;
  std::string rows;
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto run_cfg = with_override(cfg, axis, values[i]);
    run_cfg.output_dir = out.dir;
    RunOptions ro = opts;
    ro.run_id = "run-" + std::to_string(i);
    ro.force = true;
    auto r = run_experiment(run_cfg, ro);
    json metrics = json::object();
    for (const auto& [k, v] : r.report.aggregate) metrics[sweep_column(k)] = v;
    if (columns.empty())
      for (const auto& [k, v] : metrics.items()) columns.push_back(k);
    std::string row = values[i].is_string() ? values[i].get<std::string>() : values[i].dump();
    for (const auto& c : columns) row += "," + (metrics.contains(c) ? fmt::format("{:.6f}", metrics[c].get<double>()) : "");
    rows += row + "\n";
    out.table.push_back({{"value", values[i]}, {"run_id", r.run_id}, {"metrics", metrics}});
    out.runs.push_back(std::move(r));
  }
  std::string csv = axis;
  for (const auto& c : columns) csv += "," + c;
  write_file(out.dir / "comparison.csv", csv + "\n" + rows);
  write_file(out.dir / "comparison.json", json{{"axis", axis}, {"rows", out.table}}.dump(2) + "\n");
  return out;
}

}  // namespace ragforge
