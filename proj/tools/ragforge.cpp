// ragforge command line: chunk, index, run, sweep, eval, serve, mock-serve.

#include <iostream>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>
#include <yaml-cpp/yaml.h>

#include "ragforge/mock_server.hpp"
#include "ragforge/runner.hpp"
#include "ragforge/service.hpp"

namespace {

using namespace ragforge;

// Each sweep value is parsed as a YAML scalar, so "5" is a number and "cosine" a string.
std::vector<json> parse_values(const std::vector<std::string>& raw) {
  std::vector<json> out;
  for (const auto& v : raw) out.push_back(yaml_to_json(YAML::Load(v)));
  return out;
}

struct RunFlags {
  std::string config;
  bool force = false;
  std::optional<std::size_t> sample;
  std::optional<std::uint64_t> seed;
  std::string output;
};

void add_run_flags(CLI::App* cmd, RunFlags& f) {
  cmd->add_option("-c,--config", f.config, "experiment YAML")->required()->check(CLI::ExistingFile);
  cmd->add_flag("--force", f.force, "overwrite an existing output directory");
  cmd->add_option("--sample", f.sample, "evaluate only the first n items (or n random items with sample_mode: random)");
  cmd->add_option("--seed", f.seed, "seed for sampling");
  cmd->add_option("--output", f.output, "output directory (overrides output.dir)");
}

ExperimentConfig resolve_config(const RunFlags& f) {
  auto cfg = load_config(f.config);
  if (!f.sample && !f.seed && f.output.empty()) return cfg;
  json j = cfg.snapshot;
  if (f.sample) set_config_path(j, "dataset.sample", *f.sample);
  if (f.seed) set_config_path(j, "seed", *f.seed);
  if (!f.output.empty()) set_config_path(j, "output.dir", f.output);
  return config_from_json(j);
}

std::map<std::string, std::filesystem::path> parse_corpora(const std::vector<std::string>& specs) {
  std::map<std::string, std::filesystem::path> out;
  for (const auto& s : specs) {
    const auto eq = s.find('=');
    std::filesystem::path p = eq == std::string::npos ? s : s.substr(eq + 1);
    std::string name = eq == std::string::npos ? p.stem().string() : s.substr(0, eq);
    out[name] = p;
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ragforge: modular retrieval-augmented generation experiments"};
  app.set_version_flag("--version", std::string(kVersion));
  app.require_subcommand(1);
  bool verbose = false;
  app.add_flag("-v,--verbose", verbose, "debug logging");

  // chunk
  std::string chunk_in, chunk_out, unit = "sentences";
  std::size_t size = 6;
  std::optional<std::size_t> stride;
  auto* chunk = app.add_subcommand("chunk", "split documents into overlapping passages");
  chunk->add_option("--input", chunk_in, "documents JSONL (id, title, text)")->required()->check(CLI::ExistingFile);
  chunk->add_option("--output", chunk_out, "passage JSONL (id, title, contents)")->required();
  chunk->add_option("--unit", unit, "sentences | words")->check(CLI::IsMember({"sentences", "words"}));
  chunk->add_option("--size", size, "window size in units");
  chunk->add_option("--stride", stride, "window step in units (default size/2)");

  // index
  std::string index_type = "bm25", index_corpus, index_out, metric = "inner_product";
  double k1 = 0.9, b = 0.4;
  std::size_t dim = 64;
  auto* index = app.add_subcommand("index", "build a retrieval index");
  index->add_option("--type", index_type, "bm25 | dense")->check(CLI::IsMember({"bm25", "dense"}));
  index->add_option("--corpus", index_corpus, "passage JSONL")->required()->check(CLI::ExistingFile);
  index->add_option("--out", index_out, "index directory")->required();
  index->add_option("--k1", k1, "BM25 k1");
  index->add_option("--b", b, "BM25 b");
  index->add_option("--metric", metric, "dense metric")->check(CLI::IsMember({"inner_product", "cosine"}));
  index->add_option("--dim", dim, "mock embedder dimension for dense indexes");

  // run / sweep
  RunFlags run_flags, sweep_flags;
  auto* run = app.add_subcommand("run", "run one experiment");
  add_run_flags(run, run_flags);
  std::string axis;
  std::vector<std::string> values;
  auto* sweep_cmd = app.add_subcommand("sweep", "run one experiment per value of a config key");
  add_run_flags(sweep_cmd, sweep_flags);
  sweep_cmd->add_option("--axis", axis, "dotted config key, e.g. pipeline.top_k")->required();
  sweep_cmd->add_option("--values", values, "comma-separated values, e.g. 1,3,5,10")->required()->delimiter(',');

  // eval
  std::string eval_run, eval_out;
  std::vector<std::string> eval_metrics;
  std::optional<std::size_t> eval_k;
  auto* eval = app.add_subcommand("eval", "re-evaluate a finished run directory");
  eval->add_option("--run", eval_run, "run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--metrics", eval_metrics, "comma-separated metric names")->delimiter(',');
  eval->add_option("--k", eval_k, "cutoff for retrieval metrics");
  eval->add_option("--output", eval_out, "write the report here instead of stdout");

  // serve
  std::string host = "127.0.0.1", serve_out = "out";
  int port = 8000;
  std::vector<std::string> corpora;
  bool no_probe = false;
  auto* serve = app.add_subcommand("serve", "start the HTTP API");
  serve->add_option("--host", host);
  serve->add_option("--port", port);
  serve->add_option("--output", serve_out, "run output directory");
  serve->add_option("--corpus", corpora, "name=path of a passage JSONL (repeatable)");
  serve->add_flag("--no-probe", no_probe, "skip service reachability checks");

  // mock-serve
  std::string mock_host = "127.0.0.1";
  int mock_port = 8100;
  std::size_t mock_dim = 64;
  auto* mock_serve = app.add_subcommand("mock-serve", "serve the deterministic mock generator, embedder and reranker");
  mock_serve->add_option("--host", mock_host);
  mock_serve->add_option("--port", mock_port);
  mock_serve->add_option("--dim", mock_dim, "embedding dimension");

  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(verbose ? spdlog::level::debug : spdlog::level::info);

  try {
    if (*chunk) {
      ChunkPolicy policy{parse_chunk_unit(unit), size, stride.value_or(std::max<std::size_t>(1, size / 2))};
      policy.validate();
      const auto passages = chunk_documents(load_documents(chunk_in), policy);
      save_corpus(passages, chunk_out);
      spdlog::info("wrote {} passages to {}", passages.size(), chunk_out);
    } else if (*index) {
      const auto store = load_corpus(index_corpus);
      if (index_type == "bm25") {
        bm25::Params params{k1, b};
        params.validate();
        bm25::save_index(bm25::build_index(store), index_out);
        spdlog::info("bm25 index over {} passages written to {}", store.size(), index_out);
      } else {
        auto embedder = mock::make_embedder(dim);
        std::filesystem::create_directories(index_out);
        const auto path = std::filesystem::path(index_out) / "vectors.jsonl";
        dense::save_vectors(dense::build_vector_store(store, *embedder, dense::parse_metric(metric)), path);
        spdlog::info("dense index over {} passages written to {}", store.size(), path.string());
      }
    } else if (*run) {
      RunOptions ro;
      ro.force = run_flags.force;
      auto r = run_experiment(resolve_config(run_flags), ro);
      std::cout << r.dir.string() << "\n" << json(r.report.aggregate).dump(2) << "\n";
    } else if (*sweep_cmd) {
      RunOptions ro;
      ro.force = sweep_flags.force;
      auto s = sweep(resolve_config(sweep_flags), axis, parse_values(values), ro);
      std::cout << s.dir.string() << "\n" << read_file(s.dir / "comparison.csv");
    } else if (*eval) {
      json request = json::object();
      if (!eval_metrics.empty()) request["metrics"] = eval_metrics;
      if (eval_k) request["k"] = *eval_k;
      const auto body = to_json(evaluate_run(eval_run, request)).dump(2) + "\n";
      if (eval_out.empty()) std::cout << body;
      else write_file(eval_out, body);
    } else if (*serve) {
      service::ServiceOptions so;
      so.output_dir = serve_out;
      so.corpora = parse_corpora(corpora);
      so.probe_services = !no_probe;
      service::Service svc(so);
      svc.listen(host, port);
    } else if (*mock_serve) {
      mock::ServerOptions mo;
      mo.dim = mock_dim;
      mock::MockServer server(mo);
      spdlog::info("mock services on http://{}:{}{}", mock_host, mock_port, mo.base_path);
      server.listen(mock_host, mock_port);
    }
  } catch (const ValidationError& e) {
    spdlog::error("invalid configuration: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 0;
}
