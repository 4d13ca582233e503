#pragma once

// Method x direction x seed comparison matrices and the loss ablation.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmc/eval.hpp"
#include "cmc/scenario.hpp"
#include "cmc/trainer.hpp"

namespace cmc {

enum class Direction { q_to_g, g_to_q };

const char* to_string(Direction d);

struct MethodEntry {
  std::string name;
  TrainPlan plan;
};

struct ComparisonRow {
  std::string method;
  Direction direction = Direction::q_to_g;
  bool reference = false;  // untransformed reference row
  std::vector<std::uint64_t> seeds;
  std::vector<double> rank1;
  std::vector<double> map;

  SeedSummary rank1_summary() const { return summarize(rank1); }
  SeedSummary map_summary() const { return summarize(map); }
};

struct ComparisonMatrix {
  std::string scenario;
  std::vector<ComparisonRow> rows;

  const ComparisonRow* find(const std::string& method, Direction d) const;

  nlohmann::json to_json() const;
  std::string to_csv() const;   // one line per (row, seed)
  std::string to_text() const;  // aligned table of medians, in percent
};

struct ComparisonOptions {
  std::vector<Direction> directions{Direction::q_to_g, Direction::g_to_q};
  bool include_references = true;
  bool with_map = true;
  unsigned threads = 1;
};

// The three methods of the comparison with the default plan settings.
std::vector<MethodEntry> default_methods(const TrainPlan& base = {});

// Baselines are trained once per direction (T_q maps the probe side into the
// gallery side). The unified model is trained once per seed and evaluated in
// both directions.
ComparisonMatrix run_comparison(const Scenario& scenario,
                                std::span<const MethodEntry> methods,
                                std::span<const std::uint64_t> seeds,
                                const ComparisonOptions& options = {});

// Rows: cls, cls+sim, cls+kl, cls+sim+kl (unified method, Q->G).
ComparisonMatrix run_ablation(const Scenario& scenario, const TrainPlan& base,
                              std::span<const std::uint64_t> seeds,
                              unsigned threads = 1);

// Trains one plan on the scenario's training split in the given direction and
// returns (rank1, mAP) on its eval split.
std::pair<double, double> train_and_evaluate(const Scenario& scenario,
                                             const TrainPlan& plan,
                                             Direction direction,
                                             bool with_map = true);

// Rank-1 / mAP from sample-aligned, already transformed eval embeddings
// (mAP is NaN when with_map is false).
std::pair<double, double> evaluate_transformed(const EmbeddingSet& probe_side,
                                               const EmbeddingSet& gallery_side,
                                               bool with_map = true);

}  // namespace cmc
