#pragma once

// Experiment configuration: YAML in, strictly validated and fully defaulted
// config out. The normalized JSON snapshot re-parses to the same config.

#include <charconv>
#include <cstdlib>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <yaml-cpp/yaml.h>

#include "ragforge/corpus.hpp"
#include "ragforge/bm25.hpp"
#include "ragforge/dataspec.hpp"
#include "ragforge/dense.hpp"
#include "ragforge/error.hpp"
#include "ragforge/evaluate.hpp"
#include "ragforge/generate.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/pipelines.hpp"
#include "ragforge/refine.hpp"
#include "ragforge/text.hpp"

namespace ragforge {

inline json yaml_to_json(const YAML::Node& n) {
  switch (n.Type()) {
    case YAML::NodeType::Undefined:
    case YAML::NodeType::Null: return nullptr;
    case YAML::NodeType::Sequence: {
      json out = json::array();
      for (const auto& e : n) out.push_back(yaml_to_json(e));
      return out;
    }
    case YAML::NodeType::Map: {
      json out = json::object();
      for (const auto& kv : n) out[kv.first.as<std::string>()] = yaml_to_json(kv.second);
      return out;
    }
    case YAML::NodeType::Scalar: break;
  }
  const std::string& s = n.Scalar();
  if (n.Tag() == "!") return s;  // quoted
  if (s == "true" || s == "True") return true;
  if (s == "false" || s == "False") return false;
  if (s == "~" || s == "null" || s == "Null") return nullptr;
  long long i = 0;
  if (auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), i); ec == std::errc{} && p == s.data() + s.size())
    return i;
  if (!s.empty()) {
    char* end = nullptr;
    const double d = std::strtod(s.c_str(), &end);
    if (end == s.c_str() + s.size() && (std::isdigit(static_cast<unsigned char>(s.front())) || s.front() == '-' ||
                                        s.front() == '.' || s.front() == '+'))
      return d;
  }
  return s;
}

inline json load_yaml(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw NotFound("config file not found: " + path.string());
  try {
    return yaml_to_json(YAML::LoadFile(path.string()));
  } catch (const YAML::Exception& e) {
    throw FormatError(e.what(), e.mark.line >= 0 ? static_cast<std::size_t>(e.mark.line) + 1 : 0);
  }
}

namespace detail {

inline std::string suggest(std::string_view key, const std::vector<std::string_view>& allowed) {
  std::string best;
  std::size_t best_d = std::string::npos;
  for (auto a : allowed) {
    const auto d = text::edit_distance(key, a);
    if (d < best_d) {
      best_d = d;
      best = a;
    }
  }
  if (best_d <= std::max<std::size_t>(2, key.size() / 3)) return " (did you mean '" + best + "'?)";
  return {};
}

/// Typed view over one mapping of the raw config. Every value read is copied,
/// with defaults applied, into the normalized output object.
class Section {
 public:
  Section(const json& in, json& out, std::string path, std::vector<std::string_view> allowed)
      : in_(in), out_(out), path_(std::move(path)) {
    if (in_.is_null()) return;
    if (!in_.is_object()) throw ValidationError(path_, "must be a mapping");
    for (const auto& [k, v] : in_.items())
      if (std::find(allowed.begin(), allowed.end(), k) == allowed.end())
        throw ValidationError(at(k), "unknown key '" + k + "'" + suggest(k, allowed));
  }

  bool has(const std::string& key) const { return in_.is_object() && in_.contains(key) && !in_.at(key).is_null(); }
  std::string at(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

  std::string str(const std::string& key, std::string def) { return record(key, has(key) ? as_string(key) : def); }
  std::optional<std::string> opt_str(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return record(key, as_string(key));
  }
  std::size_t count(const std::string& key, std::size_t def) { return record(key, has(key) ? as_count(key) : def); }
  std::optional<std::size_t> opt_count(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return record(key, as_count(key));
  }
  double number(const std::string& key, double def) { return record(key, has(key) ? as_number(key) : def); }
  std::optional<double> opt_number(const std::string& key) {
    if (!has(key)) return std::nullopt;
    return record(key, as_number(key));
  }
  bool flag(const std::string& key, bool def) {
    if (!has(key)) return record(key, def);
    if (!in_.at(key).is_boolean()) throw ValidationError(at(key), "must be true or false");
    return record(key, in_.at(key).get<bool>());
  }
  std::vector<std::string> strings(const std::string& key, std::vector<std::string> def) {
    if (!has(key)) return record(key, def);
    const auto& v = in_.at(key);
    if (!v.is_array()) throw ValidationError(at(key), "must be a list of strings");
    std::vector<std::string> out;
    for (const auto& e : v) {
      if (!e.is_string()) throw ValidationError(at(key), "must be a list of strings");
      out.push_back(e.get<std::string>());
    }
    return record(key, out);
  }
  // Existing file or directory, resolved against the config's directory.
  std::filesystem::path existing_path(const std::string& key, const std::filesystem::path& base) {
    auto p = resolve(as_string(key), base);
    if (!std::filesystem::exists(p)) throw ValidationError(at(key), "path does not exist: " + p.string());
    return record(key, p.string());
  }
  std::filesystem::path any_path(const std::string& key, const std::filesystem::path& base) {
    return record(key, resolve(as_string(key), base).string());
  }
  const json& raw(const std::string& key) const { return in_.at(key); }
  void put(const std::string& key, json v) { out_[key] = std::move(v); }

  Section sub(const std::string& key, std::vector<std::string_view> allowed) {
    out_[key] = json::object();
    static const json null_json;
    return Section(has(key) ? in_.at(key) : null_json, out_[key], at(key), std::move(allowed));
  }

 private:
  static std::filesystem::path resolve(const std::string& s, const std::filesystem::path& base) {
    std::filesystem::path p(s);
    if (p.is_relative()) p = base / p;
    return p.lexically_normal();
  }
  template <typename T>
  T record(const std::string& key, T v) {
    out_[key] = v;
    return v;
  }
  std::string as_string(const std::string& key) const {
    if (!has(key)) throw ValidationError(at(key), "is required");
    const auto& v = in_.at(key);
    if (v.is_string()) return v.get<std::string>();
    if (v.is_number()) return v.dump();
    throw ValidationError(at(key), "must be a string");
  }
  std::size_t as_count(const std::string& key) const {
    const auto& v = in_.at(key);
    if (!v.is_number_integer() || v.get<long long>() < 0) throw ValidationError(at(key), "must be a non-negative integer");
    return v.get<std::size_t>();
  }
  double as_number(const std::string& key) const {
    const auto& v = in_.at(key);
    if (!v.is_number()) throw ValidationError(at(key), "must be a number");
    return v.get<double>();
  }

  const json& in_;
  json& out_;
  std::string path_;
};

// The message of a ValidationError without its "path: " prefix.
inline std::string bare_message(const ValidationError& e) {
  const std::string what = e.what();
  return e.path().empty() ? what : what.substr(e.path().size() + 2);
}

template <typename Fn>
auto parse_enum(const std::string& path, const std::string& value, Fn&& fn) {
  try {
    return fn(value);
  } catch (const ValidationError& e) {
    throw ValidationError(path, bare_message(e));
  }
}

}  // namespace detail

struct DatasetSpec {
  std::filesystem::path path;
  Split split = Split::test;
  std::optional<std::size_t> sample;
  bool random_sample = false;
  std::optional<std::string> filter_key;
  json filter_equals;
};

struct CorpusSpec {
  std::optional<std::filesystem::path> path;       // passage JSONL
  std::optional<std::filesystem::path> documents;  // raw documents, chunked at load
  ChunkPolicy chunk;
};

struct RetrieverSpec {
  std::string type = "bm25";
  bm25::Params bm25;
  std::optional<std::filesystem::path> index_path;
  dense::Metric metric = dense::Metric::inner_product;
  std::optional<std::filesystem::path> vectors_path;
  bool cache = false;
  std::optional<std::filesystem::path> cache_path;
};

struct RerankerSpec {
  std::string type = "bi_encoder";
  std::string endpoint;
  std::string model;
  bool fallback = true;
};

struct JudgerSpec {
  std::filesystem::path training_path;
  std::size_t k = 5;
};

struct GeneratorSpec {
  std::string type = "mock";
  std::string endpoint;
  std::string model = "mock";
  std::string api_key_env;
  GenerationParams params;
  Capabilities capabilities{true, true};
  std::size_t timeout_ms = 60000;
  std::size_t max_retries = 3;
};

struct EmbedderSpec {
  std::string type = "mock";
  std::size_t dim = 64;
  std::string api_key_env;
  EmbeddingClientConfig client;
};

struct ExperimentConfig {
  std::string name = "experiment";
  DatasetSpec dataset;
  CorpusSpec corpus;
  RetrieverSpec retriever;
  std::optional<RerankerSpec> reranker;
  std::optional<RefinerConfig> refiner;
  std::optional<JudgerSpec> judger;
  GeneratorSpec generator;
  std::optional<EmbedderSpec> embedder;
  PipelineConfig pipeline;
  PromptTemplate prompt;
  EvalOptions eval;
  std::filesystem::path output_dir = "out";
  std::uint64_t seed = 0;
  json snapshot;  // normalized, defaults filled; re-parses to this config
};

inline const std::vector<std::string_view> kTopLevelKeys = {"name",     "dataset",   "corpus",    "retriever", "reranker",
                                                            "refiner",  "judger",    "generator", "embedder",  "pipeline",
                                                            "prompt",   "metrics",   "recall_mode", "output",  "seed",
                                                            "parallelism"};

/// Validates a raw config object. Relative paths resolve against `base`. Without
/// `require_dataset` the dataset section may be omitted (single-question runs).
inline ExperimentConfig config_from_json(const json& raw, const std::filesystem::path& base = ".",
                                         bool require_dataset = true) {
  using detail::Section;
  ExperimentConfig cfg;
  json out = json::object();
  Section root(raw, out, "", kTopLevelKeys);
  cfg.name = root.str("name", "experiment");

  if (root.has("dataset") || require_dataset) {
    if (!root.has("dataset")) throw ValidationError("dataset", "is required");
    auto s = root.sub("dataset", {"path", "split", "sample", "sample_mode", "filter"});
    cfg.dataset.path = s.existing_path("path", base);
    cfg.dataset.split = detail::parse_enum(s.at("split"), s.str("split", "test"), parse_split);
    cfg.dataset.sample = s.opt_count("sample");
    const auto mode = s.str("sample_mode", "sequential");
    if (mode != "sequential" && mode != "random")
      throw ValidationError(s.at("sample_mode"), "must be 'sequential' or 'random'");
    cfg.dataset.random_sample = mode == "random";
    if (s.has("filter")) {
      auto f = s.sub("filter", {"key", "equals"});
      cfg.dataset.filter_key = f.str("key", "");
      if (!f.has("equals")) throw ValidationError(f.at("equals"), "is required");
      cfg.dataset.filter_equals = f.raw("equals");
      f.put("equals", cfg.dataset.filter_equals);
    }
  }

  {
    if (!root.has("corpus")) throw ValidationError("corpus", "is required");
    auto s = root.sub("corpus", {"path", "documents", "chunk"});
    if (s.has("path") == s.has("documents"))
      throw ValidationError("corpus", "exactly one of 'path' or 'documents' must be given");
    if (s.has("path")) cfg.corpus.path = s.existing_path("path", base);
    if (s.has("documents")) cfg.corpus.documents = s.existing_path("documents", base);
    auto c = s.sub("chunk", {"unit", "size", "stride"});
    cfg.corpus.chunk.unit = detail::parse_enum(c.at("unit"), c.str("unit", "sentences"), parse_chunk_unit);
    cfg.corpus.chunk.size = c.count("size", 6);
    // An unset stride stays unset in the snapshot so it follows size in sweeps.
    cfg.corpus.chunk.stride =
        c.has("stride") ? c.count("stride", 0) : std::max<std::size_t>(1, cfg.corpus.chunk.size / 2);
    try {
      cfg.corpus.chunk.validate();
    } catch (const ValidationError& e) {
      throw ValidationError("corpus." + e.path(), detail::bare_message(e));
    }
  }

  {
    auto s = root.sub("retriever", {"type", "k1", "b", "index_path", "metric", "vectors_path", "cache", "cache_path"});
    cfg.retriever.type = s.str("type", "bm25");
    if (cfg.retriever.type == "bm25") {
      cfg.retriever.bm25.k1 = s.number("k1", 0.9);
      cfg.retriever.bm25.b = s.number("b", 0.4);
      if (!(cfg.retriever.bm25.k1 >= 0.0)) throw ValidationError(s.at("k1"), "must be >= 0");
      if (!(cfg.retriever.bm25.b >= 0.0 && cfg.retriever.bm25.b <= 1.0)) throw ValidationError(s.at("b"), "must lie in [0, 1]");
      if (s.has("index_path")) cfg.retriever.index_path = s.any_path("index_path", base);
      if (s.has("metric") || s.has("vectors_path"))
        throw ValidationError("retriever", "'metric' and 'vectors_path' apply to dense retrievers only");
    } else if (cfg.retriever.type == "dense") {
      cfg.retriever.metric = detail::parse_enum(s.at("metric"), s.str("metric", "inner_product"), dense::parse_metric);
      if (s.has("vectors_path")) cfg.retriever.vectors_path = s.existing_path("vectors_path", base);
      if (s.has("k1") || s.has("b") || s.has("index_path"))
        throw ValidationError("retriever", "'k1', 'b' and 'index_path' apply to bm25 retrievers only");
    } else {
      throw ValidationError(s.at("type"), "must be 'bm25' or 'dense' (got '" + cfg.retriever.type + "')");
    }
    cfg.retriever.cache = s.flag("cache", false);
    if (s.has("cache_path")) cfg.retriever.cache_path = s.any_path("cache_path", base);
  }

  if (root.has("reranker")) {
    auto s = root.sub("reranker", {"type", "endpoint", "model", "fallback"});
    RerankerSpec r;
    r.type = s.str("type", "bi_encoder");
    if (r.type != "bi_encoder" && r.type != "cross_encoder")
      throw ValidationError(s.at("type"), "must be 'bi_encoder' or 'cross_encoder'");
    if (r.type == "cross_encoder") {
      r.endpoint = s.str("endpoint", "");
      if (r.endpoint.empty()) throw ValidationError(s.at("endpoint"), "is required for cross_encoder");
      http::parse_endpoint(r.endpoint);
      r.model = s.str("model", "reranker");
    }
    r.fallback = s.flag("fallback", true);
    cfg.reranker = r;
  }

  if (root.has("refiner")) {
    auto s = root.sub("refiner", {"type", "compression_rate", "token_budget", "max_tokens"});
    RefinerConfig r;
    r.kind = detail::parse_enum(s.at("type"), s.str("type", "perplexity"), parse_refiner_kind);
    r.compression_rate = s.number("compression_rate", r.rate());
    r.token_budget = s.opt_count("token_budget");
    r.max_tokens = s.count("max_tokens", 512);
    r.validate();
    cfg.refiner = r;
  }

  if (root.has("judger")) {
    auto s = root.sub("judger", {"training_path", "k"});
    JudgerSpec j;
    j.training_path = s.existing_path("training_path", base);
    j.k = s.count("k", 5);
    if (j.k < 1) throw ValidationError(s.at("k"), "must be >= 1");
    cfg.judger = j;
  }

  {
    auto s = root.sub("generator", {"type", "endpoint", "model", "api_key_env", "max_input_tokens", "max_new_tokens",
                                    "temperature", "stop", "logprobs", "scoring", "timeout_ms", "max_retries"});
    auto& g = cfg.generator;
    g.type = s.str("type", "mock");
    if (g.type != "mock" && g.type != "http") throw ValidationError(s.at("type"), "must be 'mock' or 'http'");
    if (g.type == "http") {
      g.endpoint = s.str("endpoint", "");
      if (g.endpoint.empty()) throw ValidationError(s.at("endpoint"), "is required for http generators");
      http::parse_endpoint(g.endpoint);
      g.model = s.str("model", "");
      if (g.model.empty()) throw ValidationError(s.at("model"), "is required for http generators");
      g.api_key_env = s.str("api_key_env", "");
      g.timeout_ms = s.count("timeout_ms", 60000);
      g.max_retries = s.count("max_retries", 3);
    }
    g.params.max_input_tokens = s.count("max_input_tokens", 2048);
    g.params.max_new_tokens = s.count("max_new_tokens", 32);
    g.params.temperature = s.number("temperature", 0.0);
    g.params.stop = s.strings("stop", {});
    const bool mock = g.type == "mock";
    g.capabilities.logprobs = s.flag("logprobs", mock);
    g.capabilities.scoring = s.flag("scoring", mock);
    g.params.validate();
  }

  if (root.has("embedder")) {
    auto s = root.sub("embedder", {"type", "dim", "endpoint", "model", "batch_size", "query_prefix", "passage_prefix",
                                   "api_key_env", "parallelism"});
    EmbedderSpec e;
    e.type = s.str("type", "mock");
    if (e.type != "mock" && e.type != "http") throw ValidationError(s.at("type"), "must be 'mock' or 'http'");
    if (e.type == "mock") {
      e.dim = s.count("dim", 64);
      if (e.dim < 1) throw ValidationError(s.at("dim"), "must be >= 1");
    } else {
      e.client.endpoint = s.str("endpoint", "");
      if (e.client.endpoint.empty()) throw ValidationError(s.at("endpoint"), "is required for http embedders");
      http::parse_endpoint(e.client.endpoint);
      e.client.model = s.str("model", "e5-base-v2");
      e.api_key_env = s.str("api_key_env", "");
    }
    e.client.batch_size = s.count("batch_size", 1024);
    e.client.query_prefix = s.str("query_prefix", "query: ");
    e.client.passage_prefix = s.str("passage_prefix", "passage: ");
    e.client.parallelism = s.count("parallelism", 1);
    e.client.validate();
    cfg.embedder = e;
  }

  {
    auto s = root.sub("pipeline", {"topology", "top_k", "n_iter", "max_rounds", "flare_theta", "replug_candidates",
                                   "self_ask_max_new_tokens", "sure"});
    auto& p = cfg.pipeline;
    p.topology = detail::parse_enum(s.at("topology"), s.str("topology", "sequential"), parse_topology);
    p.top_k = s.count("top_k", 5);
    p.n_iter = s.count("n_iter", 3);
    p.max_rounds = s.count("max_rounds", 5);
    p.flare_theta = s.number("flare_theta", 0.8);
    p.replug_candidates = s.opt_count("replug_candidates");
    p.self_ask_max_new_tokens = s.count("self_ask_max_new_tokens", 100);
    auto u = s.sub("sure", {"summary_template", "ranking_template", "summary_max_tokens", "ranking_max_tokens"});
    p.sure.summary = u.str("summary_template", p.sure.summary);
    p.sure.ranking = u.str("ranking_template", p.sure.ranking);
    p.sure.summary_max_tokens = u.count("summary_max_tokens", p.sure.summary_max_tokens);
    p.sure.ranking_max_tokens = u.count("ranking_max_tokens", p.sure.ranking_max_tokens);
    p.parallelism = root.count("parallelism", 4);
    p.validate();
  }

  {
    auto s = root.sub("prompt", {"system_template", "naive_system_template", "user_template", "doc_format"});
    auto& t = cfg.prompt;
    t.system_template = s.str("system_template", t.system_template);
    t.naive_system_template = s.str("naive_system_template", t.naive_system_template);
    t.user_template = s.str("user_template", t.user_template);
    t.doc_format = s.str("doc_format", t.doc_format);
    t.validate();
  }

  cfg.eval.metrics = root.strings("metrics", all_metric_names());
  validate_metric_names(cfg.eval.metrics);
  cfg.eval.k = cfg.pipeline.top_k;
  const auto mode = root.str("recall_mode", "answer");
  if (mode != "answer" && mode != "set") throw ValidationError("recall_mode", "must be 'answer' or 'set'");
  cfg.eval.recall_mode = mode == "set" ? metrics::RecallMode::set : metrics::RecallMode::answer;
  {
    auto s = root.sub("output", {"dir"});
    if (s.has("dir")) {
      cfg.output_dir = s.any_path("dir", base);
    } else {
      s.put("dir", "out");
      cfg.output_dir = "out";
    }
  }
  cfg.seed = root.count("seed", 0);

  // Cross-section requirements.
  const auto topo = cfg.pipeline.topology;
  if (topo == Topology::conditional && !cfg.judger) throw ValidationError("judger", "required by topology 'conditional'");
  if ((topo == Topology::replug || topo == Topology::sure) && cfg.refiner)
    throw ValidationError("refiner", "not supported by branching topologies");
  if (topo == Topology::replug && !cfg.generator.capabilities.scoring)
    throw ValidationError("generator.scoring", "topology 'replug' needs a generator with scoring support");
  if (topo == Topology::flare && !cfg.generator.capabilities.logprobs)
    throw ValidationError("generator.logprobs", "topology 'flare' needs a generator with logprobs support");
  auto need_embedder = [&](const char* who) {
    if (!cfg.embedder) throw ValidationError("embedder", std::string("required by ") + who);
  };
  if (cfg.retriever.type == "dense") need_embedder("dense retrieval");
  if (cfg.reranker && cfg.reranker->type == "bi_encoder") need_embedder("the bi_encoder reranker");
  if (cfg.refiner && cfg.refiner->kind == RefinerKind::extractive) need_embedder("the extractive refiner");
  if (cfg.judger) need_embedder("the judger");

  cfg.snapshot = std::move(out);
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  return config_from_json(load_yaml(path), path.has_parent_path() ? path.parent_path() : std::filesystem::path("."));
}

/// Sets a dotted key path (e.g. "pipeline.top_k") inside a config object.
inline void set_config_path(json& cfg, std::string_view dotted, json value) {
  json* node = &cfg;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const std::string key(dotted.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
    if (key.empty()) throw ValidationError(std::string(dotted), "invalid key path");
    if (dot == std::string_view::npos) {
      (*node)[key] = std::move(value);
      return;
    }
    if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

inline bool has_config_path(const json& cfg, std::string_view dotted) {
  const json* node = &cfg;
  std::size_t start = 0;
  for (;;) {
    const auto dot = dotted.find('.', start);
    const std::string key(dotted.substr(start, dot == std::string_view::npos ? std::string_view::npos : dot - start));
    if (!node->is_object() || !node->contains(key)) return false;
    node = &(*node)[key];
    if (dot == std::string_view::npos) return true;
    start = dot + 1;
  }
}

}  // namespace ragforge
