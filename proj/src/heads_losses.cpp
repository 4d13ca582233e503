#include "cmc/heads_losses.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <vector>

namespace cmc {

namespace {

constexpr double kCosClamp = 1e-7;
constexpr double kCosTolerance = 1e-4;

template <typename T>
using ColVec = Eigen::Matrix<T, Eigen::Dynamic, 1>;

void check_labels(Labels labels, Index rows, Index classes) {
  if (static_cast<Index>(labels.size()) != rows) {
    fail(ErrorKind::label, "got " + std::to_string(labels.size()) +
                               " labels for " + std::to_string(rows) + " rows");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (static_cast<Index>(labels[i]) >= classes) {
      fail(ErrorKind::label, "label " + std::to_string(labels[i]) +
                                 " at row " + std::to_string(i) +
                                 " is outside [0, " + std::to_string(classes) +
                                 ")");
    }
  }
}

template <typename T>
Tensor2<T> log_softmax_rows(const Tensor2<T>& z) {
  Tensor2<T> out = z;
  for (Index i = 0; i < z.rows(); ++i) {
    const T mx = z.row(i).maxCoeff();
    const T lse = mx + std::log((z.row(i).array() - mx).exp().sum());
    out.row(i).array() -= lse;
  }
  return out;
}

// Gradient of y = x / |x| applied row-wise: (g - y (y . g)) / |x|.
template <typename T>
Tensor2<T> normalize_backward(const Tensor2<T>& y, const ColVec<T>& norms,
                              const Tensor2<T>& g) {
  const ColVec<T> dots = (g.array() * y.array()).rowwise().sum();
  Tensor2<T> dx = g - (y.array().colwise() * dots.array()).matrix();
  dx.array().colwise() /= norms.array();
  return dx;
}

bool is_angular(HeadKind k) {
  return k == HeadKind::arcface || k == HeadKind::am_softmax;
}

double smoothing_of(const HeadConfig& cfg) {
  return cfg.kind == HeadKind::label_smoothing_softmax ? cfg.smoothing : 0.0;
}

}  // namespace

const char* to_string(HeadKind kind) {
  switch (kind) {
    case HeadKind::softmax: return "softmax";
    case HeadKind::label_smoothing_softmax: return "label_smoothing_softmax";
    case HeadKind::am_softmax: return "am_softmax";
    case HeadKind::arcface: return "arcface";
  }
  return "unknown";
}

HeadKind head_kind_from_string(const std::string& s) {
  if (s == "softmax") return HeadKind::softmax;
  if (s == "label_smoothing_softmax") return HeadKind::label_smoothing_softmax;
  if (s == "am_softmax") return HeadKind::am_softmax;
  if (s == "arcface") return HeadKind::arcface;
  fail(ErrorKind::config, "unknown head kind '" + s + "'");
}

HeadConfig HeadConfig::defaults_for(HeadKind kind, Index num_classes,
                                    Index feat_dim) {
  HeadConfig c;
  c.kind = kind;
  c.num_classes = num_classes;
  c.feat_dim = feat_dim;
  c.s = 64.0;
  c.m = kind == HeadKind::am_softmax ? 0.35 : kind == HeadKind::arcface ? 0.5 : 0.0;
  c.smoothing = kind == HeadKind::label_smoothing_softmax ? 0.1 : 0.0;
  return c;
}

void validate(const HeadConfig& c) {
  if (c.num_classes < 1) fail(ErrorKind::config, "head: num_classes must be >= 1");
  if (c.feat_dim < 1) fail(ErrorKind::config, "head: feat_dim must be >= 1");
  if (!(c.s > 0.0)) fail(ErrorKind::config, "head: scale s must be > 0");
  if (c.kind == HeadKind::arcface &&
      !(c.m >= 0.0 && c.m < std::numbers::pi / 2.0)) {
    fail(ErrorKind::config, "head: arcface margin must lie in [0, pi/2)");
  }
  if (c.kind == HeadKind::am_softmax && !(c.m >= 0.0)) {
    fail(ErrorKind::config, "head: am_softmax margin must be >= 0");
  }
  if (!(c.smoothing >= 0.0 && c.smoothing < 1.0)) {
    fail(ErrorKind::config, "head: smoothing must lie in [0, 1)");
  }
}

void validate(const LossWeights& w) {
  if (!(w.lambda1 >= 0.0) || !(w.lambda2 >= 0.0) || !(w.lambda3 >= 0.0)) {
    fail(ErrorKind::config, "loss weights must be non-negative");
  }
}

// ------------------------------------------------------------------ the head

template <typename T>
SharedHead<T>::SharedHead(const HeadConfig& cfg)
    : cfg_(cfg), W_(cfg.num_classes, cfg.feat_dim), b_(1, cfg.num_classes) {
  validate(cfg);
}

template <typename T>
void SharedHead<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const double bound = 1.0 / std::sqrt(static_cast<double>(cfg_.feat_dim));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < W_.value.size(); ++i) {
    W_.value.data()[i] = static_cast<T>(dist(rng));
  }
  b_.value.setZero();
}

template <typename T>
HeadForward<T> SharedHead<T>::forward(const Tensor2<T>& f, Labels labels) const {
  require_shape(f.rows(), f.cols(), f.rows(), cfg_.feat_dim, "head features");
  check_labels(labels, f.rows(), cfg_.num_classes);

  HeadForward<T> out;
  out.features = f;
  out.labels.assign(labels.begin(), labels.end());

  if (!is_angular(cfg_.kind)) {
    out.logits = f * W_.value.transpose();
    out.logits.rowwise() += b_.value.row(0);
    out.plain_logits = out.logits;
    return out;
  }

  out.feat_norm = f.rowwise().norm();
  out.w_norm = W_.value.rowwise().norm();
  for (Index i = 0; i < f.rows(); ++i) {
    if (!(static_cast<double>(out.feat_norm(i)) > 1e-12)) {
      fail(ErrorKind::degenerate_embedding,
           "head: feature row " + std::to_string(i) + " has zero norm");
    }
  }
  for (Index j = 0; j < W_.value.rows(); ++j) {
    if (!(static_cast<double>(out.w_norm(j)) > 1e-12)) {
      fail(ErrorKind::numeric,
           "head: class weight " + std::to_string(j) + " has zero norm");
    }
  }
  out.feat_hat = f.array().colwise() / out.feat_norm.array();
  out.w_hat = W_.value.array().colwise() / out.w_norm.array();
  out.raw_cosine = out.feat_hat * out.w_hat.transpose();

  const T lo = static_cast<T>(-1.0 + kCosClamp);
  const T hi = static_cast<T>(1.0 - kCosClamp);
  if (!out.raw_cosine.allFinite() ||
      out.raw_cosine.cwiseAbs().maxCoeff() > static_cast<T>(1.0 + kCosTolerance)) {
    fail(ErrorKind::numeric, "head: cosine outside [-1, 1]");
  }
  // Values use the cosine clipped to [-1, 1]; the tighter clamp only guards
  // the arcface slope, which divides by sin(theta).
  const Tensor2<T> cosine = out.raw_cosine.cwiseMax(T(-1)).cwiseMin(T(1));
  const T s = static_cast<T>(cfg_.s);
  const T m = static_cast<T>(cfg_.m);
  out.logits = s * cosine;
  out.plain_logits = out.logits;
  out.target_slope.assign(static_cast<std::size_t>(f.rows()), T(1));
  for (Index i = 0; i < f.rows(); ++i) {
    const Index y = labels[static_cast<std::size_t>(i)];
    const T c = cosine(i, y);
    if (cfg_.kind == HeadKind::am_softmax) {
      out.logits(i, y) = s * (c - m);
    } else if (m != T(0)) {
      // cos(theta + m) = c cos m - sin(theta) sin m
      const T sin_theta = std::sqrt(std::max(T(0), T(1) - c * c));
      out.logits(i, y) = s * (c * std::cos(m) - sin_theta * std::sin(m));
      const T cc = std::clamp(c, lo, hi);
      out.target_slope[static_cast<std::size_t>(i)] =
          std::cos(m) + cc * std::sin(m) / std::sqrt(T(1) - cc * cc);
    }
  }
  return out;
}

template <typename T>
Tensor2<T> SharedHead<T>::backward(const HeadForward<T>& fwd,
                                   const Tensor2<T>& grad_logits) {
  return backward(fwd, grad_logits,
                  Tensor2<T>::Zero(grad_logits.rows(), grad_logits.cols()));
}

template <typename T>
Tensor2<T> SharedHead<T>::backward(const HeadForward<T>& fwd,
                                   const Tensor2<T>& grad_logits,
                                   const Tensor2<T>& grad_plain) {
  require_shape(grad_logits.rows(), grad_logits.cols(), fwd.logits.rows(),
                fwd.logits.cols(), "head backward: grad_logits");
  require_shape(grad_plain.rows(), grad_plain.cols(), fwd.logits.rows(),
                fwd.logits.cols(), "head backward: grad_plain");
  if (!is_angular(cfg_.kind)) {
    const Tensor2<T> g = grad_logits + grad_plain;
    W_.grad.noalias() += g.transpose() * fwd.features;
    b_.grad.row(0) += g.colwise().sum();
    return g * W_.value;
  }

  const T s = static_cast<T>(cfg_.s);
  const T lo = static_cast<T>(-1.0 + kCosClamp);
  const T hi = static_cast<T>(1.0 - kCosClamp);
  Tensor2<T> g_cos = s * grad_logits;
  for (Index i = 0; i < g_cos.rows(); ++i) {
    const Index y = fwd.labels[static_cast<std::size_t>(i)];
    g_cos(i, y) *= fwd.target_slope[static_cast<std::size_t>(i)];
  }
  g_cos += s * grad_plain;
  g_cos = (fwd.raw_cosine.array() < lo || fwd.raw_cosine.array() > hi)
              .select(T(0), g_cos);

  const Tensor2<T> g_fhat = g_cos * fwd.w_hat;
  const Tensor2<T> g_what = g_cos.transpose() * fwd.feat_hat;
  W_.grad += normalize_backward(fwd.w_hat, fwd.w_norm, g_what);
  return normalize_backward(fwd.feat_hat, fwd.feat_norm, g_fhat);
}

template <typename T>
ParamList<T> SharedHead<T>::parameters(const std::string& prefix) {
  ParamList<T> out;
  out.params.push_back({prefix + ".W", &W_});
  if (!is_angular(cfg_.kind)) out.params.push_back({prefix + ".b", &b_});
  return out;
}

// --------------------------------------------------------------------- losses

template <typename T>
PairGrad<T> sim_loss(const Tensor2<T>& fq, const Tensor2<T>& fg) {
  require_shape(fg.rows(), fg.cols(), fq.rows(), fq.cols(), "sim_loss: fg vs fq");
  const Index n = fq.rows();
  PairGrad<T> out;
  out.grad_q = fq - fg;
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const T norm = out.grad_q.row(i).norm();
    total += static_cast<double>(norm);
    if (norm > T(0)) {
      out.grad_q.row(i) /= norm * static_cast<T>(n);
    } else {
      out.grad_q.row(i).setZero();
    }
  }
  out.value = n > 0 ? total / static_cast<double>(n) : 0.0;
  out.grad_g = -out.grad_q;
  return out;
}

template <typename T>
LogitGrad<T> softmax_cross_entropy(const Tensor2<T>& logits, Labels labels,
                                   double smoothing) {
  const Index n = logits.rows();
  const Index c = logits.cols();
  check_labels(labels, n, c);
  const Tensor2<T> logp = log_softmax_rows(logits);
  const T eps = static_cast<T>(smoothing);
  const T off = eps / static_cast<T>(c);
  const T on = T(1) - eps + off;

  LogitGrad<T> out;
  out.grad = logp.array().exp();
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const Index y = labels[static_cast<std::size_t>(i)];
    double row = 0.0;
    if (eps > T(0)) {
      row -= static_cast<double>(off) * static_cast<double>(logp.row(i).sum());
      row -= static_cast<double>(on - off) * static_cast<double>(logp(i, y));
      out.grad.row(i).array() -= off;
      out.grad(i, y) -= on - off;
    } else {
      row -= static_cast<double>(logp(i, y));
      out.grad(i, y) -= T(1);
    }
    total += row;
  }
  out.grad /= static_cast<T>(n);
  out.value = total / static_cast<double>(n);
  return out;
}

template <typename T>
PairGrad<T> kl_divergence(const Tensor2<T>& zq, const Tensor2<T>& zg) {
  require_shape(zg.rows(), zg.cols(), zq.rows(), zq.cols(), "kl: logits_g vs logits_q");
  const Index n = zq.rows();
  const Tensor2<T> lq = log_softmax_rows(zq);
  const Tensor2<T> lg = log_softmax_rows(zg);
  const Tensor2<T> pq = lq.array().exp();
  const Tensor2<T> pg = lg.array().exp();
  const Tensor2<T> diff = lq - lg;

  PairGrad<T> out;
  out.grad_q.resize(n, zq.cols());
  double total = 0.0;
  for (Index i = 0; i < n; ++i) {
    const T kl = (pq.row(i).array() * diff.row(i).array()).sum();
    total += static_cast<double>(kl);
    out.grad_q.row(i) = pq.row(i).array() * (diff.row(i).array() - kl);
  }
  const T inv_n = T(1) / static_cast<T>(n);
  out.grad_q *= inv_n;
  out.grad_g = (pg - pq) * inv_n;
  out.value = total / static_cast<double>(n);
  return out;
}

template <typename T>
PairGrad<T> dual_cls_loss(const Tensor2<T>& fq, const Tensor2<T>& fg,
                          Labels labels, SharedHead<T>& head) {
  require_shape(fg.rows(), fg.cols(), fq.rows(), fq.cols(), "dual_cls: fg vs fq");
  const double eps = smoothing_of(head.config());
  const HeadForward<T> hq = head.forward(fq, labels);
  const HeadForward<T> hg = head.forward(fg, labels);
  const LogitGrad<T> cq = softmax_cross_entropy(hq.logits, labels, eps);
  const LogitGrad<T> cg = softmax_cross_entropy(hg.logits, labels, eps);
  PairGrad<T> out;
  out.value = cq.value + cg.value;
  out.grad_q = head.backward(hq, cq.grad);
  out.grad_g = head.backward(hg, cg.grad);
  return out;
}

template <typename T>
PairGrad<T> kl_loss(const Tensor2<T>& fq, const Tensor2<T>& fg, Labels labels,
                    SharedHead<T>& head, bool post_margin) {
  require_shape(fg.rows(), fg.cols(), fq.rows(), fq.cols(), "kl_loss: fg vs fq");
  const HeadForward<T> hq = head.forward(fq, labels);
  const HeadForward<T> hg = head.forward(fg, labels);
  PairGrad<T> out;
  if (post_margin) {
    const PairGrad<T> kl = kl_divergence(hq.logits, hg.logits);
    out.value = kl.value;
    out.grad_q = head.backward(hq, kl.grad_q);
    out.grad_g = head.backward(hg, kl.grad_g);
  } else {
    const PairGrad<T> kl = kl_divergence(hq.plain_logits, hg.plain_logits);
    const Tensor2<T> zero = Tensor2<T>::Zero(kl.grad_q.rows(), kl.grad_q.cols());
    out.value = kl.value;
    out.grad_q = head.backward(hq, zero, kl.grad_q);
    out.grad_g = head.backward(hg, zero, kl.grad_g);
  }
  return out;
}

template <typename T>
TotalLoss<T> total_loss(const Tensor2<T>& fq, const Tensor2<T>& fg,
                        Labels labels, SharedHead<T>& head,
                        const LossWeights& w) {
  validate(w);
  TotalLoss<T> out;
  const PairGrad<T> sim = sim_loss(fq, fg);
  out.parts.sim = sim.value;
  out.grad_q = static_cast<T>(w.lambda1) * sim.grad_q;
  out.grad_g = static_cast<T>(w.lambda1) * sim.grad_g;

  const double eps = smoothing_of(head.config());
  const HeadForward<T> hq = head.forward(fq, labels);
  const HeadForward<T> hg = head.forward(fg, labels);
  const LogitGrad<T> cq = softmax_cross_entropy(hq.logits, labels, eps);
  const LogitGrad<T> cg = softmax_cross_entropy(hg.logits, labels, eps);
  const PairGrad<T> kl = w.kl_post_margin
                             ? kl_divergence(hq.logits, hg.logits)
                             : kl_divergence(hq.plain_logits, hg.plain_logits);
  out.parts.cls = cq.value + cg.value;
  out.parts.kl = kl.value;
  out.parts.total = w.lambda1 * out.parts.sim + w.lambda2 * out.parts.cls +
                    w.lambda3 * out.parts.kl;

  if (w.lambda2 > 0.0 || w.lambda3 > 0.0) {
    const T l2 = static_cast<T>(w.lambda2);
    const T l3 = static_cast<T>(w.lambda3);
    if (w.kl_post_margin) {
      out.grad_q += head.backward(hq, l2 * cq.grad + l3 * kl.grad_q);
      out.grad_g += head.backward(hg, l2 * cg.grad + l3 * kl.grad_g);
    } else {
      out.grad_q += head.backward(hq, l2 * cq.grad, l3 * kl.grad_q);
      out.grad_g += head.backward(hg, l2 * cg.grad, l3 * kl.grad_g);
    }
  }
  return out;
}

#define CMC_INSTANTIATE_HEADS(T)                                              \
  template class SharedHead<T>;                                               \
  template PairGrad<T> sim_loss<T>(const Tensor2<T>&, const Tensor2<T>&);     \
  template LogitGrad<T> softmax_cross_entropy<T>(const Tensor2<T>&, Labels,   \
                                                 double);                     \
  template PairGrad<T> kl_divergence<T>(const Tensor2<T>&, const Tensor2<T>&);\
  template PairGrad<T> dual_cls_loss<T>(const Tensor2<T>&, const Tensor2<T>&, \
                                        Labels, SharedHead<T>&);              \
  template PairGrad<T> kl_loss<T>(const Tensor2<T>&, const Tensor2<T>&,       \
                                  Labels, SharedHead<T>&, bool);              \
  template TotalLoss<T> total_loss<T>(const Tensor2<T>&, const Tensor2<T>&,   \
                                      Labels, SharedHead<T>&,                 \
                                      const LossWeights&);

CMC_INSTANTIATE_HEADS(float)
CMC_INSTANTIATE_HEADS(double)

#undef CMC_INSTANTIATE_HEADS

}  // namespace cmc
