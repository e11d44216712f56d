#pragma once

// Everything: corpus and datasets, retrieval, generation, pipelines,
// evaluation, the runner and the HTTP service.

#include "ragforge/bm25.hpp"
#include "ragforge/config.hpp"
#include "ragforge/corpus.hpp"
#include "ragforge/dataspec.hpp"
#include "ragforge/dense.hpp"
#include "ragforge/embedding.hpp"
#include "ragforge/error.hpp"
#include "ragforge/evaluate.hpp"
#include "ragforge/generate.hpp"
#include "ragforge/http.hpp"
#include "ragforge/judge.hpp"
#include "ragforge/jsonl.hpp"
#include "ragforge/metrics.hpp"
#include "ragforge/mock.hpp"
#include "ragforge/mock_server.hpp"
#include "ragforge/parallel.hpp"
#include "ragforge/pipelines.hpp"
#include "ragforge/refine.hpp"
#include "ragforge/retrieval.hpp"
#include "ragforge/runner.hpp"
#include "ragforge/service.hpp"
#include "ragforge/text.hpp"
#include "ragforge/trace.hpp"
