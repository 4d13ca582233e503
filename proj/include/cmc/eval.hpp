#pragma once

// Retrieval metrics: rank-1 identification against a distractor-padded
// gallery, and mean average precision. Both score by cosine similarity and
// break ties in favour of the lower gallery index.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "cmc/embedding_set.hpp"

namespace cmc {

struct IdentificationTask {
  EmbeddingSet probes;
  EmbeddingSet gallery_true;  // exactly one entry per probe identity
  EmbeddingSet distractors;   // identities disjoint from the probes; may be empty
};

void validate(const IdentificationTask& task);

struct MapTask {
  EmbeddingSet queries;
  EmbeddingSet gallery;
};

enum class MetricKind { rank1, map };

const char* to_string(MetricKind k);
MetricKind metric_kind_from_string(const std::string& s);

struct RetrievalReport {
  std::string method;
  std::string scenario;
  std::uint64_t seed = 0;
  MetricKind metric = MetricKind::rank1;
  double value = 0.0;
  std::vector<double> per_query;  // hit (0/1) or AP per probe/query
};

struct SeedSummary {
  double median = 0.0;
  double min = 0.0;
  double max = 0.0;
};

SeedSummary summarize(std::span<const double> values);

// Gallery order is gallery_true followed by distractors.
RetrievalReport rank1_identification(const IdentificationTask& task);

RetrievalReport mean_average_precision(const EmbeddingSet& queries,
                                       const EmbeddingSet& gallery);

// Builds the identification protocol from a sample-aligned eval pair. The
// lower half of the (sorted) identities are probe identities: their first
// sample on the gallery side is the gallery_true entry and their remaining
// samples on the probe side are probes. Every gallery-side sample of the
// upper half is a distractor.
IdentificationTask make_identification_task(const EmbeddingSet& probe_side,
                                            const EmbeddingSet& gallery_side);

// The first `queries_per_identity` samples of each identity are queries (from
// the probe side); the rest are the gallery (from the gallery side).
MapTask make_map_task(const EmbeddingSet& probe_side,
                      const EmbeddingSet& gallery_side,
                      Index queries_per_identity = 4);

}  // namespace cmc
