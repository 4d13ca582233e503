#pragma once

// Shared classification head and the three training losses of the unified
// objective: similarity, dual classification, and KL agreement.

#include <cstdint>
#include <random>
#include <span>
#include <string>

#include "cmc/kernel.hpp"

namespace cmc {

enum class HeadKind { softmax, label_smoothing_softmax, am_softmax, arcface };

const char* to_string(HeadKind kind);
HeadKind head_kind_from_string(const std::string& s);

struct HeadConfig {
  HeadKind kind = HeadKind::arcface;
  Index num_classes = 2;
  Index feat_dim = 512;
  double s = 64.0;
  double m = 0.5;
  double smoothing = 0.0;

  // s=64 throughout; m=0.5 for arcface, 0.35 for am_softmax; eps=0.1 for
  // label smoothing.
  static HeadConfig defaults_for(HeadKind kind, Index num_classes,
                                 Index feat_dim);
};

void validate(const HeadConfig& cfg);

struct LossWeights {
  double lambda1 = 1.0;  // similarity
  double lambda2 = 1.0;  // dual classification
  double lambda3 = 0.25; // KL
  bool kl_post_margin = true;  // KL on the margin-applied logits, else on s*cos
};

void validate(const LossWeights& w);

using Labels = std::span<const std::uint32_t>;

// Cached forward state of one head evaluation. Angular heads keep the
// normalized features/weights and the clamped cosines.
template <typename T>
struct HeadForward {
  Tensor2<T> logits;
  Tensor2<T> plain_logits;  // no margin; equals logits for affine kinds
  Tensor2<T> features;
  Tensor2<T> feat_hat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> feat_norm;
  Tensor2<T> w_hat;
  Eigen::Matrix<T, Eigen::Dynamic, 1> w_norm;
  Tensor2<T> raw_cosine;  // before clamping
  std::vector<std::uint32_t> labels;
  std::vector<T> target_slope;  // d(target logit / s) / d(cos)
};

template <typename T>
class SharedHead {
 public:
  SharedHead() = default;
  explicit SharedHead(const HeadConfig& cfg);

  void init(std::uint64_t seed);

  const HeadConfig& config() const { return cfg_; }
  Param<T>& weight() { return W_; }
  Param<T>& bias() { return b_; }

  // Logits for a batch. Angular kinds normalize features and class weights
  // internally and ignore the bias.
  HeadForward<T> forward(const Tensor2<T>& features, Labels labels) const;

  // Accumulates W/b gradients; returns the gradient w.r.t. the features.
  Tensor2<T> backward(const HeadForward<T>& fwd, const Tensor2<T>& grad_logits);
  // Same, with an extra gradient arriving on plain_logits.
  Tensor2<T> backward(const HeadForward<T>& fwd, const Tensor2<T>& grad_logits,
                      const Tensor2<T>& grad_plain);

  ParamList<T> parameters(const std::string& prefix = "head");

 private:
  HeadConfig cfg_;
  Param<T> W_;  // C x U
  Param<T> b_;  // 1 x C
};

template <typename T>
struct PairGrad {
  double value = 0.0;
  Tensor2<T> grad_q;
  Tensor2<T> grad_g;
};

// mean_i |fq_i - fg_i|_2. The subgradient at a zero difference is 0.
template <typename T>
PairGrad<T> sim_loss(const Tensor2<T>& fq, const Tensor2<T>& fg);

template <typename T>
struct LogitGrad {
  double value = 0.0;
  Tensor2<T> grad;
};

// Mean cross entropy against one-hot targets mixed with uniform mass eps.
template <typename T>
LogitGrad<T> softmax_cross_entropy(const Tensor2<T>& logits, Labels labels,
                                   double smoothing = 0.0);

// mean_i KL(softmax(zq_i) || softmax(zg_i)), computed in log space.
template <typename T>
PairGrad<T> kl_divergence(const Tensor2<T>& logits_q, const Tensor2<T>& logits_g);

// Gradients w.r.t. the features; head parameter gradients accumulate.
template <typename T>
PairGrad<T> dual_cls_loss(const Tensor2<T>& fq, const Tensor2<T>& fg,
                          Labels labels, SharedHead<T>& head);

template <typename T>
PairGrad<T> kl_loss(const Tensor2<T>& fq, const Tensor2<T>& fg, Labels labels,
                    SharedHead<T>& head, bool post_margin = true);

struct LossBreakdown {
  double total = 0.0;
  double sim = 0.0;
  double cls = 0.0;
  double kl = 0.0;
};

template <typename T>
struct TotalLoss {
  LossBreakdown parts;
  Tensor2<T> grad_q;
  Tensor2<T> grad_g;
};

// lambda1 * sim + lambda2 * cls + lambda3 * kl. Terms with zero weight are
// still reported but contribute no gradient.
template <typename T>
TotalLoss<T> total_loss(const Tensor2<T>& fq, const Tensor2<T>& fg,
                        Labels labels, SharedHead<T>& head,
                        const LossWeights& weights);

}  // namespace cmc
