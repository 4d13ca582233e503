#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <set>

#include "doctest.h"

#include "cmc/comparison.hpp"
#include "cmc/eval.hpp"
#include "oracles.hpp"

using namespace cmc;

namespace {

EmbeddingSet make_set(std::initializer_list<std::initializer_list<float>> rows,
                      std::vector<std::uint32_t> labels) {
  EmbeddingSet s;
  s.data.resize(static_cast<Index>(rows.size()), static_cast<Index>(rows.begin()->size()));
  Index i = 0;
  for (const auto& r : rows) {
    Index j = 0;
    for (float v : r) s.data(i, j++) = v;
    ++i;
  }
  s.labels = std::move(labels);
  return s;
}

// Probes of the given identities, one true entry per identity, and
// distractors with identities above every probe identity.
IdentificationTask random_task(std::mt19937_64& rng, Index probes, Index ids,
                               Index distractors, Index dim) {
  IdentificationTask t;
  t.probes = oracle::random_set(probes, dim, static_cast<std::uint32_t>(ids), rng);
  t.gallery_true = oracle::random_set(ids, dim, 1, rng);
  std::iota(t.gallery_true.labels.begin(), t.gallery_true.labels.end(), 0u);
  t.distractors = oracle::random_set(distractors, dim, 50, rng, static_cast<std::uint32_t>(ids));
  return t;
}

MapTask random_map_task(std::mt19937_64& rng, Index queries, Index gallery, Index dim) {
  MapTask t;
  t.gallery = oracle::random_set(gallery, dim, 10, rng);
  std::uniform_int_distribution<Index> pick(0, gallery - 1);
  t.queries = oracle::random_set(queries, dim, 1, rng);
  for (auto& y : t.queries.labels) y = t.gallery.labels[static_cast<std::size_t>(pick(rng))];
  return t;
}

double mean(const std::vector<int>& v) {
  return static_cast<double>(std::accumulate(v.begin(), v.end(), 0)) / static_cast<double>(v.size());
}

}  // namespace

TEST_CASE("rank-1: probes identical to their true entries score 1") {
  std::mt19937_64 rng(1);
  IdentificationTask t;
  t.gallery_true = oracle::random_set(20, 8, 1, rng);
  std::iota(t.gallery_true.labels.begin(), t.gallery_true.labels.end(), 0u);
  t.probes = t.gallery_true;
  CHECK(rank1_identification(t).value == 1.0);
}

TEST_CASE("rank-1: a distractor equal to the probe beats an orthogonal true entry") {
  IdentificationTask t;
  t.probes = make_set({{1, 0, 0}, {0, 0, 1}}, {0, 1});
  t.gallery_true = make_set({{0, 1, 0}, {0, 0, 2}}, {0, 1});
  t.distractors = make_set({{3, 0, 0}}, {9});
  const auto r = rank1_identification(t);
  CHECK(r.per_query[0] == 0.0);
  CHECK(r.per_query[1] == 1.0);
  CHECK(r.value == 0.5);
}

TEST_CASE("rank-1: ties go to the lower gallery index") {
  IdentificationTask t;
  t.probes = make_set({{1, 0}}, {0});
  t.gallery_true = make_set({{1, 1}}, {0});
  t.distractors = make_set({{1, -1}}, {5});
  CHECK(rank1_identification(t).value == 1.0);
  // The same tie with the distractor first in a gallery_true slot loses.
  IdentificationTask u;
  u.probes = make_set({{1, 0}}, {1});
  u.gallery_true = make_set({{1, -1}, {1, 1}}, {0, 1});
  CHECK(rank1_identification(u).value == 0.0);
}

TEST_CASE("rank-1 matches the exhaustive oracle on 100 random instances") {
  std::mt19937_64 rng(2);
  std::uniform_int_distribution<Index> n_probe(1, 50), n_dis(0, 200), n_id(1, 20);
  for (int trial = 0; trial < 100; ++trial) {
    const Index ids = n_id(rng);
    const IdentificationTask t = random_task(rng, n_probe(rng), ids, n_dis(rng), 6);
    const auto got = rank1_identification(t);
    const auto want = oracle::rank1_hits(t.probes, t.gallery_true, t.distractors);
    REQUIRE(got.per_query.size() == want.size());
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got.per_query[i] == want[i]);
    CHECK(got.value == mean(want));
  }
}

TEST_CASE("rank-1 on the fixed 50-probe, 200-distractor shape matches exactly") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const IdentificationTask t = random_task(rng, 50, 25, 200, 16);
    CHECK(rank1_identification(t).value == mean(oracle::rank1_hits(t.probes, t.gallery_true, t.distractors)));
  }
}

TEST_CASE("mAP: closed forms") {
  // Positives first: AP 1.
  const EmbeddingSet q = make_set({{1, 0}}, {0});
  CHECK(mean_average_precision(q, make_set({{1, 0.1f}, {1, 0.2f}, {-1, 0}}, {0, 0, 1})).value == 1.0);
  // Single positive at rank 2: AP 0.5.
  CHECK(mean_average_precision(q, make_set({{1, 0}, {1, 1}, {-1, 0}}, {1, 0, 2})).value == 0.5);
  // Positives at ranks 1 and 3: (1/1 + 2/3) / 2.
  CHECK(mean_average_precision(q, make_set({{1, 0}, {1, 1}, {1, 2}}, {0, 1, 0})).value ==
        doctest::Approx(5.0 / 6.0).epsilon(1e-15));
}

TEST_CASE("mAP matches the brute-force oracle on 100 random instances") {
  std::mt19937_64 rng(4);
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const MapTask t = random_map_task(rng, 30, 100, 5);
    const auto got = mean_average_precision(t.queries, t.gallery);
    const auto want = oracle::average_precisions(t.queries, t.gallery);
    double m = 0;
    for (std::size_t i = 0; i < want.size(); ++i) {
      worst = std::max(worst, std::abs(got.per_query[i] - want[i]));
      m += want[i];
    }
    worst = std::max(worst, std::abs(got.value - m / static_cast<double>(want.size())));
  }
  CHECK(worst <= 1e-12);
}

TEST_CASE("mAP with tied scores follows the lower-index rule") {
  const EmbeddingSet q = make_set({{1, 0}}, {0});
  // Both items score the same; the positive sits second.
  CHECK(mean_average_precision(q, make_set({{1, 1}, {1, -1}}, {1, 0})).value == 0.5);
  CHECK(mean_average_precision(q, make_set({{1, -1}, {1, 1}}, {0, 1})).value == 1.0);
  const auto want = oracle::average_precisions(q, make_set({{1, 1}, {1, -1}}, {1, 0}));
  CHECK(want[0] == 0.5);
}

TEST_CASE("duplicated rows tie exactly at any position in a large gallery") {
  std::mt19937_64 rng(31);
  std::uniform_int_distribution<Index> pick(0, 9);
  MapTask m;
  m.gallery = oracle::random_set(300, 64, 40, rng);
  for (Index i = 10; i < 300; i += 3) m.gallery.data.row(i) = m.gallery.data.row(pick(rng));
  m.queries = oracle::random_set(40, 64, 1, rng);
  for (Index i = 0; i < 40; ++i) {
    m.queries.data.row(i) = m.gallery.data.row(pick(rng));
    m.queries.labels[static_cast<std::size_t>(i)] = m.gallery.labels[static_cast<std::size_t>(10 + 3 * i)];
  }
  const auto aps = oracle::average_precisions(m.queries, m.gallery);
  const auto r = mean_average_precision(m.queries, m.gallery);
  for (std::size_t i = 0; i < aps.size(); ++i) CHECK(std::abs(r.per_query[i] - aps[i]) < 1e-12);

  IdentificationTask t;
  t.gallery_true = oracle::random_set(40, 64, 1, rng);
  std::iota(t.gallery_true.labels.begin(), t.gallery_true.labels.end(), 0u);
  t.distractors = oracle::random_set(300, 64, 20, rng, 1000);
  for (Index i = 0; i < 300; i += 2) t.distractors.data.row(i) = t.gallery_true.data.row(i % 40);
  t.probes = t.gallery_true;
  // Every probe ties with a later distractor copy and must keep its true entry.
  CHECK(rank1_identification(t).value == 1.0);
}

TEST_CASE("metrics are invariant to gallery permutation and positive rescaling") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    IdentificationTask t = random_task(rng, 30, 10, 60, 8);
    const double r1 = rank1_identification(t).value;
    IdentificationTask scaled = t;
    scaled.probes.data *= 3.5f;
    scaled.gallery_true.data *= 0.25f;
    scaled.distractors.data *= 7.0f;
    CHECK(rank1_identification(scaled).value == r1);
    std::vector<Index> perm(static_cast<std::size_t>(t.distractors.n()));
    std::iota(perm.begin(), perm.end(), Index{0});
    std::shuffle(perm.begin(), perm.end(), rng);
    IdentificationTask permuted = t;
    permuted.distractors = t.distractors.select(perm);
    CHECK(rank1_identification(permuted).value == r1);

    const MapTask m = random_map_task(rng, 20, 60, 8);
    const double ap = mean_average_precision(m.queries, m.gallery).value;
    std::vector<Index> gp(static_cast<std::size_t>(m.gallery.n()));
    std::iota(gp.begin(), gp.end(), Index{0});
    std::shuffle(gp.begin(), gp.end(), rng);
    EmbeddingSet g2 = m.gallery.select(gp);
    g2.data *= 2.0f;
    CHECK(mean_average_precision(m.queries, g2).value == doctest::Approx(ap).epsilon(1e-12));
  }
}

TEST_CASE("metrics stay in [0, 1]") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    const auto r = rank1_identification(random_task(rng, 10, 5, 30, 3));
    CHECK(r.value >= 0.0);
    CHECK(r.value <= 1.0);
    const MapTask m = random_map_task(rng, 5, 20, 3);
    const auto a = mean_average_precision(m.queries, m.gallery);
    CHECK(a.value > 0.0);
    CHECK(a.value <= 1.0);
  }
}

TEST_CASE("invalid tasks are rejected") {
  std::mt19937_64 rng(7);
  IdentificationTask t = random_task(rng, 5, 3, 4, 3);
  IdentificationTask dup = t;
  dup.gallery_true.labels[1] = dup.gallery_true.labels[0];
  CHECK_THROWS_AS(rank1_identification(dup), Error);
  IdentificationTask empty = t;
  empty.probes = t.probes.select(std::vector<Index>{});
  CHECK_THROWS_AS(rank1_identification(empty), Error);
  IdentificationTask overlap = t;
  overlap.distractors.labels[0] = t.probes.labels[0];
  CHECK_THROWS_AS(rank1_identification(overlap), Error);
  IdentificationTask zero = t;
  zero.probes.data.row(0).setZero();
  CHECK_THROWS_AS(rank1_identification(zero), Error);

  const EmbeddingSet q = make_set({{1, 0}}, {42});
  try {
    mean_average_precision(q, make_set({{1, 0}}, {1}));
    FAIL("expected a label error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::label);
    CHECK(std::string(e.what()).find("42") != std::string::npos);
  }
}

TEST_CASE("summaries report median, min and max") {
  const std::vector<double> odd{0.3, 0.1, 0.2};
  CHECK(summarize(odd).median == 0.2);
  CHECK(summarize(odd).min == 0.1);
  CHECK(summarize(odd).max == 0.3);
  const std::vector<double> even{0.4, 0.1, 0.2, 0.3};
  CHECK(summarize(even).median == doctest::Approx(0.25));
}

TEST_CASE("identification split from aligned eval sets") {
  std::mt19937_64 rng(8);
  EmbeddingSet p = oracle::random_set(40, 4, 1, rng);
  for (Index i = 0; i < 40; ++i) p.labels[static_cast<std::size_t>(i)] = 100 + static_cast<std::uint32_t>(i / 10);
  EmbeddingSet g = oracle::random_set(40, 4, 1, rng);
  g.labels = p.labels;
  const IdentificationTask t = make_identification_task(p, g);
  CHECK(t.gallery_true.n() == 2);
  CHECK(t.probes.n() == 18);
  CHECK(t.distractors.n() == 20);
  CHECK(t.gallery_true.labels == std::vector<std::uint32_t>{100, 101});
  CHECK(t.gallery_true.data.row(0) == g.data.row(0));
  CHECK(t.probes.data.row(0) == p.data.row(1));
  const std::set<std::uint32_t> dis(t.distractors.labels.begin(), t.distractors.labels.end());
  CHECK(dis == std::set<std::uint32_t>{102, 103});
  CHECK_NOTHROW(validate(t));

  const MapTask m = make_map_task(p, g, 4);
  CHECK(m.queries.n() == 16);
  CHECK(m.gallery.n() == 24);

  g.labels[0] = 7;
  CHECK_THROWS_AS(make_identification_task(p, g), Error);
}

TEST_CASE("identical models: every method matches the within-model reference") {
  ScenarioSpec spec = ScenarioSpec::similar();
  spec.query.noise = 0.0;
  spec.gallery = spec.query;
  const Scenario sc = generate_scenario(spec, 3);
  REQUIRE(sc.train.query.data == sc.train.gallery.data);
  const std::vector<std::uint64_t> seeds{1};
  const auto methods = default_methods();
  ComparisonOptions opt;
  opt.with_map = false;
  const ComparisonMatrix m = run_comparison(sc, methods, seeds, opt);
  const double ref = m.find("reference:untransformed", Direction::q_to_g)->rank1[0];
  CHECK(ref == doctest::Approx(sc.calibration_rank1_query));
  MESSAGE(m.to_text());
  for (const auto& e : methods) {
    for (Direction d : {Direction::q_to_g, Direction::g_to_q}) {
      INFO(e.name << " " << std::string(to_string(d)));
      CHECK(m.find(e.name, d)->rank1[0] >= ref - 0.01);
    }
  }
}

TEST_CASE("comparison and ablation matrices: shapes and renderings") {
  ScenarioSpec spec = ScenarioSpec::mixed();
  spec.train_classes = 20;
  spec.eval_classes = 10;
  spec.samples_per_class = 8;
  const Scenario sc = generate_scenario(spec, 4);
  TrainPlan base;
  base.total_epochs = 2;
  base.lr_drops = {};
  base.batch_size = 32;
  const std::vector<std::uint64_t> seeds{1, 2};
  const ComparisonMatrix m = run_comparison(sc, default_methods(base), seeds);
  // Reference rows: query-only and gallery-only; dims differ, so no cross row.
  CHECK(m.rows.size() == 2 + 3 * 2);
  CHECK(m.find("reference:untransformed", Direction::q_to_g) == nullptr);
  CHECK(m.find("unified", Direction::g_to_q)->rank1.size() == 2);
  for (const auto& r : m.rows) {
    for (double v : r.rank1) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  const auto j = m.to_json();
  CHECK(j.at("rows").size() == m.rows.size());
  CHECK(j.at("rows")[2].contains("map_median"));
  const std::string csv = m.to_csv();
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 1 + 2 + 3 * 2 * 2);
  CHECK(m.to_text().find("unified") != std::string::npos);

  TrainPlan pre = base;
  pre.weights.kl_post_margin = false;
  const ComparisonMatrix a = run_ablation(sc, pre, std::vector<std::uint64_t>{1});
  REQUIRE(a.rows.size() == 4);
  CHECK(a.rows[0].method == "cls");
  CHECK(a.rows[1].method == "cls+sim");
  CHECK(a.rows[2].method == "cls+kl");
  CHECK(a.rows[3].method == "cls+sim+kl");
}
