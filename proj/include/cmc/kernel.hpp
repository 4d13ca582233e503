#pragma once

// Dense layers with hand-written forward/backward rules, plus the SGD step.
//
// Every layer caches what its backward pass needs during forward(); calling
// backward() without a preceding forward() on the same layer is undefined.
// Parameter gradients accumulate until sgd_step() (or zero_grad()) clears them.

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "cmc/error.hpp"

namespace cmc {

using Index = Eigen::Index;

template <typename T>
using Tensor2 = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

enum class Mode { train, eval };

template <typename T>
struct Param {
  Tensor2<T> value;
  Tensor2<T> grad;
  Tensor2<T> velocity;

  Param() = default;
  Param(Index rows, Index cols)
      : value(Tensor2<T>::Zero(rows, cols)),
        grad(Tensor2<T>::Zero(rows, cols)),
        velocity(Tensor2<T>::Zero(rows, cols)) {}

  Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

// A named view onto a learnable parameter or a non-learnable buffer, used by
// the optimizer, the checkpoint writer and the gradient checker.
template <typename T>
struct NamedParam {
  std::string name;
  Param<T>* param;
};

template <typename T>
struct NamedBuffer {
  std::string name;
  Tensor2<T>* value;
};

template <typename T>
struct ParamList {
  std::vector<NamedParam<T>> params;
  std::vector<NamedBuffer<T>> buffers;
};

// Throws a dimension error naming both shapes unless a and b agree.
void require_shape(Index rows, Index cols, Index want_rows, Index want_cols,
                   const char* what);

template <typename T>
void require_finite(const Tensor2<T>& x, const char* what);

// ---------------------------------------------------------------------------
// Fully connected: y = x W^T + b, W is out x in, b is 1 x out.

template <typename T>
struct LinearParams {
  Param<T> W;
  Param<T> b;
};

template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(Index in_dim, Index out_dim);

  // W, b ~ U(-1/sqrt(in), 1/sqrt(in)).
  void init_uniform(std::mt19937_64& rng);

  Tensor2<T> forward(const Tensor2<T>& x);
  Tensor2<T> backward(const Tensor2<T>& grad_out);

  Index in_dim() const { return p_.W.value.cols(); }
  Index out_dim() const { return p_.W.value.rows(); }

  LinearParams<T>& params() { return p_; }
  const LinearParams<T>& params() const { return p_; }

  void collect(ParamList<T>& out, const std::string& prefix);

 private:
  LinearParams<T> p_;
  Tensor2<T> input_;
};

// ---------------------------------------------------------------------------
// Per-feature batch normalization over the batch dimension.

template <typename T>
struct BatchNormParams {
  Param<T> gamma;
  Param<T> beta;
  Tensor2<T> running_mean;
  Tensor2<T> running_var;
  T eps = T(1e-5);
  T momentum = T(0.1);
  Mode mode = Mode::train;
};

template <typename T>
class BatchNorm {
 public:
  BatchNorm() = default;
  explicit BatchNorm(Index dim, T eps = T(1e-5), T momentum = T(0.1));

  Tensor2<T> forward(const Tensor2<T>& x);
  Tensor2<T> backward(const Tensor2<T>& grad_out);

  void set_mode(Mode mode) { p_.mode = mode; }
  Mode mode() const { return p_.mode; }
  Index dim() const { return p_.gamma.value.cols(); }

  BatchNormParams<T>& params() { return p_; }
  const BatchNormParams<T>& params() const { return p_; }

  void collect(ParamList<T>& out, const std::string& prefix);

 private:
  BatchNormParams<T> p_;
  Tensor2<T> xhat_;
  Tensor2<T> inv_std_;  // 1 x d
  Mode cached_mode_ = Mode::train;
};

// ---------------------------------------------------------------------------

template <typename T>
class Relu {
 public:
  Tensor2<T> forward(const Tensor2<T>& x);
  // Gradient passes where the forward input was strictly positive.
  Tensor2<T> backward(const Tensor2<T>& grad_out) const;

 private:
  Tensor2<T> input_;
};

template <typename T>
class L2Normalize {
 public:
  static constexpr double kNormFloor = 1e-12;

  Tensor2<T> forward(const Tensor2<T>& x);
  Tensor2<T> backward(const Tensor2<T>& grad_out) const;

 private:
  Tensor2<T> output_;
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms_;
};

// Row-wise L2 normalization without caching; throws on rows below the floor.
template <typename T>
Tensor2<T> l2_normalize_rows(const Tensor2<T>& x);

// ---------------------------------------------------------------------------
// Column-chunk split/merge. The backward of split is concat and vice versa.

template <typename T>
std::vector<Tensor2<T>> split_columns(const Tensor2<T>& x, Index parts);

template <typename T>
Tensor2<T> concat_columns(std::span<const Tensor2<T>> chunks);

template <typename T>
std::vector<Tensor2<T>> split4(const Tensor2<T>& x) {
  return split_columns(x, 4);
}

template <typename T>
Tensor2<T> concat4(std::span<const Tensor2<T>> chunks) {
  if (chunks.size() != 4) {
    fail(ErrorKind::config, "concat4 expects 4 chunks, got " +
                                std::to_string(chunks.size()));
  }
  return concat_columns(chunks);
}

// ---------------------------------------------------------------------------

struct SgdConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 5e-4;
};

void validate(const SgdConfig& cfg);

// v <- momentum * v + grad + weight_decay * value; value <- value - lr * v.
// Gradients are zeroed afterwards.
template <typename T>
void sgd_step(std::span<const NamedParam<T>> params, const SgdConfig& cfg);

template <typename T>
void zero_grad(std::span<const NamedParam<T>> params) {
  for (const auto& p : params) p.param->zero_grad();
}

}  // namespace cmc
