#include "cmc/comparison.hpp"

#include <atomic>
#include <cmath>
#include <cstdio>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

namespace cmc {

namespace {

PairedDataset oriented(const PairedDataset& d, Direction dir) {
  if (dir == Direction::q_to_g) return d;
  return PairedDataset{d.gallery, d.query};
}

struct CellResult {
  std::vector<std::pair<double, double>> per_direction;
};

// One training run; unified models serve every direction, baselines are
// trained separately per direction.
CellResult run_cell(const Scenario& sc, const TrainPlan& plan,
                    std::span<const Direction> dirs, bool with_map) {
  CellResult out;
  if (plan.method == Method::unified) {
    const TrainedModel m = train(sc.train, plan);
    const EmbeddingSet q = m.embed_query(sc.eval.query);
    const EmbeddingSet g = m.embed_gallery(sc.eval.gallery);
    for (Direction d : dirs) {
      out.per_direction.push_back(d == Direction::q_to_g
                                      ? evaluate_transformed(q, g, with_map)
                                      : evaluate_transformed(g, q, with_map));
    }
    return out;
  }
  for (Direction d : dirs) {
    out.per_direction.push_back(train_and_evaluate(sc, plan, d, with_map));
  }
  return out;
}

void parallel_for(std::size_t count, unsigned threads,
                  const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex err_mu;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  const unsigned n = std::min<std::size_t>(threads, count);
  for (unsigned t = 0; t < n; ++t) {
    pool.emplace_back([&]() {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

std::string pct(double v) {
  if (std::isnan(v)) return "-";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2f", 100.0 * v);
  return buf;
}

}  // namespace

const char* to_string(Direction d) {
  return d == Direction::q_to_g ? "Q->G" : "G->Q";
}

const ComparisonRow* ComparisonMatrix::find(const std::string& method,
                                            Direction d) const {
  for (const auto& r : rows) {
    if (r.method == method && r.direction == d) return &r;
  }
  return nullptr;
}

nlohmann::json ComparisonMatrix::to_json() const {
  nlohmann::json j;
  j["scenario"] = scenario;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    const SeedSummary s1 = r.rank1_summary();
    nlohmann::json row = {{"method", r.method},
                          {"direction", to_string(r.direction)},
                          {"reference", r.reference},
                          {"seeds", r.seeds},
                          {"rank1", r.rank1},
                          {"rank1_median", s1.median},
                          {"rank1_min", s1.min},
                          {"rank1_max", s1.max}};
    bool have_map = !r.map.empty();
    for (double v : r.map) have_map = have_map && !std::isnan(v);
    if (have_map) {
      const SeedSummary sm = r.map_summary();
      row["map"] = r.map;
      row["map_median"] = sm.median;
      row["map_min"] = sm.min;
      row["map_max"] = sm.max;
    }
    j["rows"].push_back(row);
  }
  return j;
}

std::string ComparisonMatrix::to_csv() const {
  std::ostringstream os;
  os << "scenario,method,direction,reference,seed,rank1,map\n";
  os << std::setprecision(17);
  for (const auto& r : rows) {
    for (std::size_t i = 0; i < r.rank1.size(); ++i) {
      os << scenario << ',' << r.method << ',' << to_string(r.direction) << ','
         << (r.reference ? 1 : 0) << ',' << r.seeds[i] << ',' << r.rank1[i] << ',';
      if (i < r.map.size() && !std::isnan(r.map[i])) os << r.map[i];
      os << '\n';
    }
  }
  return os.str();
}

std::string ComparisonMatrix::to_text() const {
  std::size_t w = 6;
  for (const auto& r : rows) w = std::max(w, r.method.size());
  std::ostringstream os;
  os << "scenario: " << scenario << "  (median over seeds, percent)\n";
  os << std::left << std::setw(static_cast<int>(w)) << "method" << "  "
     << std::setw(5) << "dir" << "  " << std::right << std::setw(8) << "rank-1"
     << "  " << std::setw(8) << "min" << "  " << std::setw(8) << "max" << "  "
     << std::setw(8) << "mAP" << "  seeds\n";
  for (const auto& r : rows) {
    const SeedSummary s = r.rank1_summary();
    const double map = r.map.empty() ? std::nan("") : r.map_summary().median;
    os << std::left << std::setw(static_cast<int>(w)) << r.method << "  "
       << std::setw(5) << to_string(r.direction) << "  " << std::right
       << std::setw(8) << pct(s.median) << "  " << std::setw(8) << pct(s.min)
       << "  " << std::setw(8) << pct(s.max) << "  " << std::setw(8) << pct(map)
       << "  " << r.rank1.size() << '\n';
  }
  return os.str();
}

std::vector<MethodEntry> default_methods(const TrainPlan& base) {
  std::vector<MethodEntry> out;
  for (Method m : {Method::mlp_baseline, Method::rbt_baseline, Method::unified}) {
    TrainPlan p = base;
    p.method = m;
    out.push_back({to_string(m), p});
  }
  return out;
}

std::pair<double, double> evaluate_transformed(const EmbeddingSet& probe_side,
                                               const EmbeddingSet& gallery_side,
                                               bool with_map) {
  const double r1 =
      rank1_identification(make_identification_task(probe_side, gallery_side)).value;
  double map = std::numeric_limits<double>::quiet_NaN();
  if (with_map) {
    const MapTask t = make_map_task(probe_side, gallery_side);
    map = mean_average_precision(t.queries, t.gallery).value;
  }
  return {r1, map};
}

std::pair<double, double> train_and_evaluate(const Scenario& sc, const TrainPlan& plan,
                                             Direction dir, bool with_map) {
  if (plan.method == Method::unified) {
    const TrainedModel m = train(sc.train, plan);
    const EmbeddingSet q = m.embed_query(sc.eval.query);
    const EmbeddingSet g = m.embed_gallery(sc.eval.gallery);
    return dir == Direction::q_to_g ? evaluate_transformed(q, g, with_map)
                                    : evaluate_transformed(g, q, with_map);
  }
  const PairedDataset train_pair = oriented(sc.train, dir);
  const PairedDataset eval_pair = oriented(sc.eval, dir);
  const TrainedModel m = train(train_pair, plan);
  return evaluate_transformed(m.embed_query(eval_pair.query),
                              m.embed_gallery(eval_pair.gallery), with_map);
}

ComparisonMatrix run_comparison(const Scenario& sc, std::span<const MethodEntry> methods,
                                std::span<const std::uint64_t> seeds,
                                const ComparisonOptions& options) {
  if (seeds.empty()) fail(ErrorKind::config, "comparison needs at least one seed");
  ComparisonMatrix out;
  out.scenario = sc.spec.name;
  const auto& dirs = options.directions;

  if (options.include_references) {
    auto add_ref = [&](const std::string& name, Direction d, const EmbeddingSet& p,
                       const EmbeddingSet& g) {
      const auto [r1, map] = evaluate_transformed(normalize_set(p), normalize_set(g),
                                                  options.with_map);
      ComparisonRow row{name, d, true, {0}, {r1}, {map}};
      out.rows.push_back(row);
    };
    add_ref("reference:query_only", Direction::q_to_g, sc.eval.query, sc.eval.query);
    add_ref("reference:gallery_only", Direction::q_to_g, sc.eval.gallery, sc.eval.gallery);
    if (sc.eval.query.dim() == sc.eval.gallery.dim()) {
      for (Direction d : dirs) {
        const bool fwd = d == Direction::q_to_g;
        add_ref("reference:untransformed", d, fwd ? sc.eval.query : sc.eval.gallery,
                fwd ? sc.eval.gallery : sc.eval.query);
      }
    }
  }

  const std::size_t cells = methods.size() * seeds.size();
  std::vector<CellResult> results(cells);
  parallel_for(cells, options.threads, [&](std::size_t c) {
    const MethodEntry& m = methods[c / seeds.size()];
    TrainPlan plan = m.plan;
    plan.seed = seeds[c % seeds.size()];
    results[c] = run_cell(sc, plan, dirs, options.with_map);
    spdlog::info("{} seed {} done", m.name, plan.seed);
  });

  for (std::size_t mi = 0; mi < methods.size(); ++mi) {
    for (std::size_t di = 0; di < dirs.size(); ++di) {
      ComparisonRow row{methods[mi].name, dirs[di], false, {}, {}, {}};
      for (std::size_t si = 0; si < seeds.size(); ++si) {
        const auto& r = results[mi * seeds.size() + si].per_direction[di];
        row.seeds.push_back(seeds[si]);
        row.rank1.push_back(r.first);
        row.map.push_back(r.second);
      }
      out.rows.push_back(std::move(row));
    }
  }
  return out;
}

ComparisonMatrix run_ablation(const Scenario& sc, const TrainPlan& base,
                              std::span<const std::uint64_t> seeds, unsigned threads) {
  struct Variant {
    const char* name;
    LossWeights w;
  };
  auto with = [&](bool sim, bool kl) {
    LossWeights w = base.weights;
    if (!sim) w.lambda1 = 0.0;
    if (!kl) w.lambda3 = 0.0;
    return w;
  };
  const Variant variants[] = {
      {"cls", with(false, false)},
      {"cls+sim", with(true, false)},
      {"cls+kl", with(false, true)},
      {"cls+sim+kl", with(true, true)},
  };
  std::vector<MethodEntry> methods;
  for (const auto& v : variants) {
    TrainPlan p = base;
    p.method = Method::unified;
    p.weights = v.w;
    methods.push_back({v.name, p});
  }
  ComparisonOptions opts;
  opts.directions = {Direction::q_to_g};
  opts.include_references = false;
  opts.with_map = false;
  opts.threads = threads;
  ComparisonMatrix m = run_comparison(sc, methods, seeds, opts);
  m.scenario = sc.spec.name + " (loss ablation)";
  return m;
}

}  // namespace cmc
