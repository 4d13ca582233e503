#include "cmc/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

namespace cmc {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t x = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Tensor2<float> gather_rows(const Tensor2<float>& x, std::span<const Index> rows) {
  Tensor2<float> out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.row(static_cast<Index>(i)) = x.row(rows[i]);
  }
  return out;
}

void append(std::vector<NamedParam<float>>& dst, const ParamList<float>& src) {
  dst.insert(dst.end(), src.params.begin(), src.params.end());
}

}  // namespace

const char* to_string(Method m) {
  switch (m) {
    case Method::mlp_baseline: return "mlp_baseline";
    case Method::rbt_baseline: return "rbt_baseline";
    case Method::unified: return "unified";
  }
  return "unknown";
}

Method method_from_string(const std::string& s) {
  if (s == "mlp" || s == "mlp_baseline") return Method::mlp_baseline;
  if (s == "rbt" || s == "rbt_baseline") return Method::rbt_baseline;
  if (s == "unified" || s == "ours") return Method::unified;
  fail(ErrorKind::config, "unknown method '" + s + "'");
}

void validate(const TrainPlan& p) {
  if (p.total_epochs < 1) fail(ErrorKind::config, "total_epochs must be >= 1");
  if (!(p.lr0 > 0.0)) fail(ErrorKind::config, "lr0 must be > 0");
  if (!(p.lr_drop_factor > 0.0 && p.lr_drop_factor <= 1.0)) {
    fail(ErrorKind::config, "lr_drop_factor must lie in (0, 1]");
  }
  int prev = 0;
  for (int d : p.lr_drops) {
    if (d <= prev || d >= p.total_epochs) {
      fail(ErrorKind::config,
           "lr_drops must be strictly increasing, positive and < total_epochs");
    }
    prev = d;
  }
  if (p.batch_size < 2) fail(ErrorKind::config, "batch_size must be >= 2");
  validate(SgdConfig{p.lr0, p.momentum, p.weight_decay});
  validate(p.weights);
}

double lr_at_epoch(const TrainPlan& plan, int epoch) {
  if (epoch < 0 || epoch >= plan.total_epochs) {
    fail(ErrorKind::config, "epoch " + std::to_string(epoch) + " outside [0, " +
                                std::to_string(plan.total_epochs) + ")");
  }
  double lr = plan.lr0;
  for (int d : plan.lr_drops) {
    if (epoch >= d) lr *= plan.lr_drop_factor;
  }
  return lr;
}

void write_history_jsonl(const TrainHistory& h, std::ostream& os) {
  for (const auto& e : h.epochs) {
    nlohmann::json j = {{"epoch", e.epoch},
                        {"lr", e.lr},
                        {"total", e.loss.total},
                        {"sim", e.loss.sim},
                        {"cls", e.loss.cls},
                        {"kl", e.loss.kl}};
    if (e.heldout_rank1) j["heldout_rank1"] = *e.heldout_rank1;
    os << j.dump() << '\n';
  }
}

TrainPlan resolve_plan(const TrainPlan& plan, Index query_dim, Index gallery_dim,
                       Index num_classes) {
  TrainPlan p = plan;
  const bool unified = p.method == Method::unified;
  const Index u = p.rbt.unified_dim > 0
                      ? p.rbt.unified_dim
                      : (unified ? std::min(query_dim, gallery_dim) : gallery_dim);
  if (!unified && u != gallery_dim) {
    fail(ErrorKind::config, "baseline transforms map into the gallery space: unified_dim " +
                                std::to_string(u) + " must equal gallery dim " +
                                std::to_string(gallery_dim));
  }
  p.rbt.in_dim = query_dim;
  p.rbt.unified_dim = u;
  p.mlp.in_dim = query_dim;
  p.mlp.out_dim = u;
  p.head.num_classes = num_classes;
  p.head.feat_dim = u;
  return p;
}

Tensor2<float> unit_rms_rows(const Tensor2<float>& x) {
  return l2_normalize_rows(x) * std::sqrt(static_cast<float>(x.cols()));
}

EmbeddingSet normalize_set(const EmbeddingSet& s) {
  EmbeddingSet out = s;
  out.data = unit_rms_rows(s.data);
  return out;
}

EmbeddingSet transform_set(const TransformNet<float>& net, const EmbeddingSet& s,
                           TransformStats* stats, Index chunk_rows) {
  if (s.dim() != net.in_dim()) {
    fail(ErrorKind::dimension, "transform expects " + std::to_string(net.in_dim()) +
                                   "-d input, set '" + s.model_tag + "' is " +
                                   std::to_string(s.dim()) + "-d");
  }
  if (net.kind() != TransformKind::identity && net.mode() != Mode::eval) {
    fail(ErrorKind::config, "transform_set requires an eval-mode network");
  }
  const auto start = std::chrono::steady_clock::now();
  EmbeddingSet out;
  out.labels = s.labels;
  out.model_tag = s.model_tag;
  if (net.kind() == TransformKind::identity) {
    out.data = s.data;
  } else {
    TransformNet<float> worker = net;
    out.data.resize(s.n(), net.out_dim());
    for (Index r = 0; r < s.n(); r += chunk_rows) {
      const Index rows = std::min(chunk_rows, s.n() - r);
      out.data.middleRows(r, rows) = worker.forward(s.data.middleRows(r, rows));
    }
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!out.data.allFinite()) {
    fail(ErrorKind::numeric, "transform produced non-finite values");
  }
  const double rate = secs > 0.0 ? static_cast<double>(s.n()) / secs : 0.0;
  spdlog::debug("transformed {} rows in {:.3f}s ({:.0f} rows/s)", s.n(), secs, rate);
  if (stats) *stats = {s.n(), secs, rate};
  return out;
}

EmbeddingSet TrainedModel::embed_query(const EmbeddingSet& s) const {
  return transform_set(query_net, plan.normalize_inputs ? normalize_set(s) : s);
}

EmbeddingSet TrainedModel::embed_gallery(const EmbeddingSet& s) const {
  return transform_set(gallery_net, plan.normalize_inputs ? normalize_set(s) : s);
}

TrainedModel train(const PairedDataset& data, const TrainPlan& plan_in,
                   const TrainOptions& options) {
  validate(data);
  validate(plan_in);

  // Contiguous class indices for the head.
  const auto ids = distinct_labels(data.labels());
  std::map<std::uint32_t, std::uint32_t> class_of;
  for (std::size_t c = 0; c < ids.size(); ++c) {
    class_of[ids[c]] = static_cast<std::uint32_t>(c);
  }
  std::vector<std::uint32_t> classes(data.labels().size());
  for (std::size_t i = 0; i < classes.size(); ++i) classes[i] = class_of[data.labels()[i]];

  const TrainPlan plan = resolve_plan(plan_in, data.query.dim(), data.gallery.dim(),
                                      static_cast<Index>(ids.size()));
  const bool unified = plan.method == Method::unified;

  auto make_query_net = [&]() {
    const std::uint64_t s = derive_seed(plan.seed, 1);
    if (plan.method == Method::mlp_baseline) {
      return build_mlp_baseline<float>(plan.mlp.in_dim, plan.mlp.out_dim,
                                       plan.mlp.hidden_layers, s, plan.mlp.hidden_width);
    }
    return build_transform<float>(plan.rbt, s);
  };
  auto make_gallery_net = [&]() {
    if (!unified) return make_identity<float>(data.gallery.dim());
    RbtConfig g = plan.rbt;
    g.in_dim = data.gallery.dim();
    return build_transform<float>(g, derive_seed(plan.seed, 2));
  };

  TrainedModel model{plan, make_query_net(), make_gallery_net(), std::nullopt, {}};
  if (unified) {
    model.head.emplace(plan.head);
    model.head->init(derive_seed(plan.seed, 3));
  }
  model.query_net.set_mode(Mode::train);
  model.gallery_net.set_mode(Mode::train);

  std::vector<NamedParam<float>> params;
  append(params, model.query_net.parameters("tq"));
  if (unified) {
    append(params, model.gallery_net.parameters("tg"));
    append(params, model.head->parameters("head"));
  }

  const Tensor2<float> xq =
      plan.normalize_inputs ? unit_rms_rows(data.query.data) : data.query.data;
  const Tensor2<float> xg =
      plan.normalize_inputs ? unit_rms_rows(data.gallery.data) : data.gallery.data;

  std::mt19937_64 shuffle_rng(derive_seed(plan.seed, 4));
  std::vector<Index> order(static_cast<std::size_t>(data.n()));
  std::iota(order.begin(), order.end(), Index{0});
  const Index n = data.n();
  const Index bs = std::min(plan.batch_size, n);

  for (int epoch = 0; epoch < plan.total_epochs; ++epoch) {
    const SgdConfig sgd{lr_at_epoch(plan, epoch), plan.momentum, plan.weight_decay};
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    LossBreakdown sum;
    Index seen = 0;
    int batch = 0;
    for (Index start = 0; start < n; start += bs, ++batch) {
      const Index rows = std::min(bs, n - start);
      if (rows < 2) break;  // train-mode BN needs two rows
      const std::span<const Index> idx(order.data() + start, static_cast<std::size_t>(rows));
      const Tensor2<float> bq = gather_rows(xq, idx);
      const Tensor2<float> bg = gather_rows(xg, idx);

      const Tensor2<float> fq = model.query_net.forward(bq);
      LossBreakdown parts;
      if (unified) {
        std::vector<std::uint32_t> y(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
          y[i] = classes[static_cast<std::size_t>(idx[i])];
        }
        const Tensor2<float> fg = model.gallery_net.forward(bg);
        const TotalLoss<float> loss = total_loss(fq, fg, y, *model.head, plan.weights);
        parts = loss.parts;
        if (std::isfinite(parts.total)) {
          model.query_net.backward(loss.grad_q);
          model.gallery_net.backward(loss.grad_g);
        }
      } else {
        const PairGrad<float> loss = sim_loss(fq, bg);
        parts.sim = parts.total = loss.value;
        if (std::isfinite(parts.total)) model.query_net.backward(loss.grad_q);
      }
      if (!std::isfinite(parts.total)) {
        fail(ErrorKind::numeric, "non-finite loss at epoch " + std::to_string(epoch) +
                                     ", batch " + std::to_string(batch) + " (" +
                                     to_string(plan.method) + ")");
      }
      sgd_step<float>(params, sgd);

      const double w = static_cast<double>(rows);
      sum.total += w * parts.total;
      sum.sim += w * parts.sim;
      sum.cls += w * parts.cls;
      sum.kl += w * parts.kl;
      seen += rows;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.lr = sgd.lr;
    const double inv = 1.0 / static_cast<double>(seen);
    rec.loss = {sum.total * inv, sum.sim * inv, sum.cls * inv, sum.kl * inv};
    if (options.on_epoch) {
      model.query_net.set_mode(Mode::eval);
      model.gallery_net.set_mode(Mode::eval);
      options.on_epoch(model, rec);
      model.query_net.set_mode(Mode::train);
      model.gallery_net.set_mode(Mode::train);
    }
    spdlog::debug("{} epoch {} lr {} loss {:.5f} (sim {:.5f} cls {:.5f} kl {:.5f})",
                  to_string(plan.method), epoch, rec.lr, rec.loss.total, rec.loss.sim,
                  rec.loss.cls, rec.loss.kl);
    model.history.epochs.push_back(rec);
  }

  model.query_net.set_mode(Mode::eval);
  model.gallery_net.set_mode(Mode::eval);
  return model;
}

}  // namespace cmc
