#pragma once

// Training for the three methods of the comparison:
//   mlp_baseline  T_q = MLP, T_g = identity, similarity loss only
//   rbt_baseline  T_q = RBT, T_g = identity, similarity loss only
//   unified       T_q = RBT, T_g = RBT, shared head, sim + dual cls + KL

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "cmc/embedding_set.hpp"
#include "cmc/heads_losses.hpp"
#include "cmc/rbt_net.hpp"

namespace cmc {

enum class Method { mlp_baseline, rbt_baseline, unified };

const char* to_string(Method m);
// Accepts "mlp"/"mlp_baseline", "rbt"/"rbt_baseline", "unified".
Method method_from_string(const std::string& s);

struct TrainPlan {
  Method method = Method::unified;
  // in_dim/unified_dim are resolved from the data; unified_dim 0 selects
  // min(d_q, d_g) for the unified method and d_g for the baselines.
  RbtConfig rbt;
  MlpConfig mlp;
  // num_classes/feat_dim are resolved from the data.
  HeadConfig head;
  LossWeights weights;
  double lr0 = 0.1;
  std::vector<int> lr_drops{20, 25};
  double lr_drop_factor = 0.1;
  int total_epochs = 30;
  Index batch_size = 128;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;
  bool normalize_inputs = true;

  TrainPlan() { rbt.unified_dim = 0; }
};

void validate(const TrainPlan& plan);

// Piecewise-constant schedule: lr0 divided by 1/lr_drop_factor at each drop.
double lr_at_epoch(const TrainPlan& plan, int epoch);

struct EpochRecord {
  int epoch = 0;
  double lr = 0.0;
  LossBreakdown loss;
  std::optional<double> heldout_rank1;
};

struct TrainHistory {
  std::vector<EpochRecord> epochs;
};

// One JSON object per line.
void write_history_jsonl(const TrainHistory& h, std::ostream& os);

struct TrainedModel {
  TrainPlan plan;  // with resolved dims
  TransformNet<float> query_net;
  TransformNet<float> gallery_net;
  std::optional<SharedHead<float>> head;
  TrainHistory history;

  Index unified_dim() const { return query_net.out_dim(); }

  // Input normalization (per plan) followed by the eval-mode transform.
  EmbeddingSet embed_query(const EmbeddingSet& s) const;
  EmbeddingSet embed_gallery(const EmbeddingSet& s) const;
};

struct TrainOptions {
  // Called after every epoch; may fill heldout_rank1.
  std::function<void(const TrainedModel&, EpochRecord&)> on_epoch;
};

// Deterministic for a fixed plan.seed. Returned nets are in eval mode.
TrainedModel train(const PairedDataset& data, const TrainPlan& plan,
                   const TrainOptions& options = {});

// Plan with dims filled in for the given data shape.
TrainPlan resolve_plan(const TrainPlan& plan, Index query_dim,
                       Index gallery_dim, Index num_classes);

struct TransformStats {
  Index rows = 0;
  double seconds = 0.0;
  double rows_per_second = 0.0;
};

// Row-wise eval-mode transform, processed in chunks; labels and order kept.
EmbeddingSet transform_set(const TransformNet<float>& net, const EmbeddingSet& s,
                           TransformStats* stats = nullptr,
                           Index chunk_rows = 8192);

// Rows rescaled to unit RMS (L2 norm sqrt(dim)), which matches the scale of
// batch-normalized network outputs. Cosine scores are unaffected.
Tensor2<float> unit_rms_rows(const Tensor2<float>& x);
EmbeddingSet normalize_set(const EmbeddingSet& s);

}  // namespace cmc
