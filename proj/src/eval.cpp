#include "cmc/eval.hpp"

#include <algorithm>
#include <map>
#include <numeric>
#include <set>

namespace cmc {

namespace {

Tensor2<double> unit_rows(const EmbeddingSet& s, const char* what) {
  Tensor2<double> x = s.data.cast<double>();
  for (Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (!(n > 1e-12)) {
      fail(ErrorKind::degenerate_embedding,
           std::string(what) + " row " + std::to_string(i) + " has zero norm");
    }
    x.row(i) /= n;
  }
  return x;
}

// Cosine scores of unit rows. Each entry is a dot product in a fixed order,
// so identical rows score identically wherever they sit; a blocked matrix
// product can round them differently and break exact ties by position.
Tensor2<double> cosine_scores(const Tensor2<double>& q, const Tensor2<double>& g) {
  Tensor2<double> out(q.rows(), g.rows());
  const Index dim = q.cols();
  for (Index i = 0; i < q.rows(); ++i) {
    for (Index j = 0; j < g.rows(); ++j) {
      double s = 0.0;
      for (Index k = 0; k < dim; ++k) s += q(i, k) * g(j, k);
      out(i, j) = s;
    }
  }
  return out;
}

void require_same_dim(const EmbeddingSet& a, const EmbeddingSet& b,
                      const char* what) {
  if (a.dim() != b.dim()) {
    fail(ErrorKind::dimension, std::string(what) + ": dims " +
                                   std::to_string(a.dim()) + " vs " +
                                   std::to_string(b.dim()));
  }
}

}  // namespace

const char* to_string(MetricKind k) {
  return k == MetricKind::rank1 ? "rank1" : "map";
}

MetricKind metric_kind_from_string(const std::string& s) {
  if (s == "rank1") return MetricKind::rank1;
  if (s == "map" || s == "mAP") return MetricKind::map;
  fail(ErrorKind::config, "unknown metric '" + s + "'");
}

SeedSummary summarize(std::span<const double> values) {
  if (values.empty()) return {};
  std::vector<double> v(values.begin(), values.end());
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  const double median = n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  return {median, v.front(), v.back()};
}

void validate(const IdentificationTask& task) {
  if (task.probes.n() == 0) fail(ErrorKind::config, "identification: no probes");
  if (task.gallery_true.n() == 0) {
    fail(ErrorKind::config, "identification: empty gallery_true");
  }
  require_same_dim(task.probes, task.gallery_true, "identification gallery_true");
  if (task.distractors.n() > 0) {
    require_same_dim(task.probes, task.distractors, "identification distractors");
  }
  std::set<std::uint32_t> gallery_ids;
  for (auto id : task.gallery_true.labels) {
    if (!gallery_ids.insert(id).second) {
      fail(ErrorKind::label, "identification: identity " + std::to_string(id) +
                                 " appears twice in gallery_true");
    }
  }
  std::set<std::uint32_t> probe_ids;
  for (auto id : task.probes.labels) {
    if (!gallery_ids.count(id)) {
      fail(ErrorKind::label, "identification: probe identity " +
                                 std::to_string(id) + " has no gallery_true entry");
    }
    probe_ids.insert(id);
  }
  for (auto id : task.distractors.labels) {
    if (probe_ids.count(id)) {
      fail(ErrorKind::label, "identification: distractor identity " +
                                 std::to_string(id) + " is also a probe identity");
    }
  }
}

RetrievalReport rank1_identification(const IdentificationTask& task) {
  validate(task);
  const Tensor2<double> probes = unit_rows(task.probes, "probe");
  Tensor2<double> gallery(task.gallery_true.n() + task.distractors.n(),
                          task.probes.dim());
  gallery.topRows(task.gallery_true.n()) = unit_rows(task.gallery_true, "gallery_true");
  if (task.distractors.n() > 0) {
    gallery.bottomRows(task.distractors.n()) = unit_rows(task.distractors, "distractor");
  }
  std::map<std::uint32_t, Index> true_index;
  for (std::size_t j = 0; j < task.gallery_true.labels.size(); ++j) {
    true_index[task.gallery_true.labels[j]] = static_cast<Index>(j);
  }

  const Tensor2<double> sims = cosine_scores(probes, gallery);
  RetrievalReport report;
  report.metric = MetricKind::rank1;
  report.per_query.resize(static_cast<std::size_t>(probes.rows()));
  double hits = 0.0;
  for (Index i = 0; i < sims.rows(); ++i) {
    Index best = 0;
    for (Index j = 1; j < sims.cols(); ++j) {
      if (sims(i, j) > sims(i, best)) best = j;
    }
    const double hit =
        best == true_index.at(task.probes.labels[static_cast<std::size_t>(i)]) ? 1.0 : 0.0;
    report.per_query[static_cast<std::size_t>(i)] = hit;
    hits += hit;
  }
  report.value = hits / static_cast<double>(probes.rows());
  return report;
}

RetrievalReport mean_average_precision(const EmbeddingSet& queries,
                                       const EmbeddingSet& gallery) {
  if (queries.n() == 0) fail(ErrorKind::config, "mAP: no queries");
  if (gallery.n() == 0) fail(ErrorKind::config, "mAP: empty gallery");
  require_same_dim(queries, gallery, "mAP gallery");
  const std::set<std::uint32_t> gallery_ids(gallery.labels.begin(), gallery.labels.end());
  for (auto id : queries.labels) {
    if (!gallery_ids.count(id)) {
      fail(ErrorKind::label, "mAP: query identity " + std::to_string(id) +
                                 " has no positive in the gallery");
    }
  }

  const Tensor2<double> q = unit_rows(queries, "query");
  const Tensor2<double> g = unit_rows(gallery, "gallery");
  const Tensor2<double> sims = cosine_scores(q, g);

  RetrievalReport report;
  report.metric = MetricKind::map;
  report.per_query.resize(static_cast<std::size_t>(q.rows()));
  std::vector<Index> order(static_cast<std::size_t>(g.rows()));
  double total = 0.0;
  for (Index i = 0; i < sims.rows(); ++i) {
    std::iota(order.begin(), order.end(), Index{0});
    std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) {
      return sims(i, a) > sims(i, b);
    });
    const std::uint32_t id = queries.labels[static_cast<std::size_t>(i)];
    double found = 0.0;
    double ap = 0.0;
    for (std::size_t r = 0; r < order.size(); ++r) {
      if (gallery.labels[static_cast<std::size_t>(order[r])] == id) {
        found += 1.0;
        ap += found / static_cast<double>(r + 1);
      }
    }
    ap /= found;
    report.per_query[static_cast<std::size_t>(i)] = ap;
    total += ap;
  }
  report.value = total / static_cast<double>(q.rows());
  return report;
}

IdentificationTask make_identification_task(const EmbeddingSet& probe_side,
                                            const EmbeddingSet& gallery_side) {
  if (probe_side.n() != gallery_side.n() || probe_side.labels != gallery_side.labels) {
    fail(ErrorKind::pairing, "identification split needs sample-aligned sets");
  }
  const auto ids = distinct_labels(probe_side.labels);
  if (ids.size() < 2) fail(ErrorKind::config, "identification split needs >= 2 identities");
  const std::size_t n_probe_ids = (ids.size() + 1) / 2;
  const std::set<std::uint32_t> probe_ids(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_probe_ids));

  std::vector<Index> probe_rows, true_rows, distractor_rows;
  std::set<std::uint32_t> seen;
  for (std::size_t i = 0; i < probe_side.labels.size(); ++i) {
    const auto id = probe_side.labels[i];
    const auto row = static_cast<Index>(i);
    if (!probe_ids.count(id)) {
      distractor_rows.push_back(row);
    } else if (seen.insert(id).second) {
      true_rows.push_back(row);
    } else {
      probe_rows.push_back(row);
    }
  }
  return {probe_side.select(probe_rows), gallery_side.select(true_rows),
          gallery_side.select(distractor_rows)};
}

MapTask make_map_task(const EmbeddingSet& probe_side,
                      const EmbeddingSet& gallery_side,
                      Index queries_per_identity) {
  if (probe_side.n() != gallery_side.n() || probe_side.labels != gallery_side.labels) {
    fail(ErrorKind::pairing, "mAP split needs sample-aligned sets");
  }
  std::map<std::uint32_t, Index> count;
  std::vector<Index> query_rows, gallery_rows;
  for (std::size_t i = 0; i < probe_side.labels.size(); ++i) {
    auto& c = count[probe_side.labels[i]];
    (c < queries_per_identity ? query_rows : gallery_rows).push_back(static_cast<Index>(i));
    ++c;
  }
  return {probe_side.select(query_rows), gallery_side.select(gallery_rows)};
}

}  // namespace cmc
