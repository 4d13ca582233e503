#include "cmc/kernel.hpp"

#include <cmath>
#include <sstream>

namespace cmc {

namespace {

std::string shape_str(Index r, Index c) {
  std::ostringstream os;
  os << r << "x" << c;
  return os.str();
}

}  // namespace

void require_shape(Index rows, Index cols, Index want_rows, Index want_cols,
                   const char* what) {
  if (rows != want_rows || cols != want_cols) {
    fail(ErrorKind::dimension, std::string(what) + ": got " +
                                   shape_str(rows, cols) + ", expected " +
                                   shape_str(want_rows, want_cols));
  }
}

template <typename T>
void require_finite(const Tensor2<T>& x, const char* what) {
  if (!x.allFinite()) {
    fail(ErrorKind::numeric, std::string(what) + ": non-finite value");
  }
}

// --------------------------------------------------------------------- Linear

template <typename T>
Linear<T>::Linear(Index in_dim, Index out_dim) {
  if (in_dim < 1 || out_dim < 1) {
    fail(ErrorKind::config, "linear layer needs positive dims, got " +
                                shape_str(out_dim, in_dim));
  }
  p_.W = Param<T>(out_dim, in_dim);
  p_.b = Param<T>(1, out_dim);
}

template <typename T>
void Linear<T>::init_uniform(std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_dim()));
  std::uniform_real_distribution<double> dist(-bound, bound);
  for (Index i = 0; i < p_.W.value.size(); ++i) {
    p_.W.value.data()[i] = static_cast<T>(dist(rng));
  }
  for (Index i = 0; i < p_.b.value.size(); ++i) {
    p_.b.value.data()[i] = static_cast<T>(dist(rng));
  }
}

template <typename T>
Tensor2<T> Linear<T>::forward(const Tensor2<T>& x) {
  if (x.cols() != in_dim()) {
    fail(ErrorKind::dimension, "linear forward: input " +
                                   shape_str(x.rows(), x.cols()) +
                                   " vs weight " +
                                   shape_str(out_dim(), in_dim()));
  }
  input_ = x;
  Tensor2<T> y = x * p_.W.value.transpose();
  y.rowwise() += p_.b.value.row(0);
  return y;
}

template <typename T>
Tensor2<T> Linear<T>::backward(const Tensor2<T>& grad_out) {
  require_shape(grad_out.rows(), grad_out.cols(), input_.rows(), out_dim(),
                "linear backward: grad_out");
  p_.W.grad.noalias() += grad_out.transpose() * input_;
  p_.b.grad.row(0) += grad_out.colwise().sum();
  return grad_out * p_.W.value;
}

template <typename T>
void Linear<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.params.push_back({prefix + ".W", &p_.W});
  out.params.push_back({prefix + ".b", &p_.b});
}

// ------------------------------------------------------------------ BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(Index dim, T eps, T momentum) {
  if (dim < 1) fail(ErrorKind::config, "batchnorm needs dim >= 1");
  if (!(eps > T(0))) fail(ErrorKind::config, "batchnorm eps must be > 0");
  if (!(momentum > T(0) && momentum < T(1))) {
    fail(ErrorKind::config, "batchnorm momentum must lie in (0,1)");
  }
  p_.gamma = Param<T>(1, dim);
  p_.gamma.value.setOnes();
  p_.beta = Param<T>(1, dim);
  p_.running_mean = Tensor2<T>::Zero(1, dim);
  p_.running_var = Tensor2<T>::Ones(1, dim);
  p_.eps = eps;
  p_.momentum = momentum;
}

template <typename T>
Tensor2<T> BatchNorm<T>::forward(const Tensor2<T>& x) {
  const Index n = x.rows();
  const Index d = dim();
  if (x.cols() != d) {
    fail(ErrorKind::dimension, "batchnorm forward: input " +
                                   shape_str(n, x.cols()) + ", expected N x " +
                                   std::to_string(d));
  }
  cached_mode_ = p_.mode;
  if (p_.mode == Mode::train) {
    if (n < 2) {
      fail(ErrorKind::batch_too_small,
           "batchnorm in train mode needs N >= 2, got N = " +
               std::to_string(n));
    }
    const Tensor2<T> mean = x.colwise().mean();
    xhat_ = x.rowwise() - mean.row(0);
    const Tensor2<T> var = xhat_.array().square().colwise().mean();
    inv_std_ = (var.array() + p_.eps).rsqrt();
    xhat_.array().rowwise() *= inv_std_.array().row(0);

    const T m = p_.momentum;
    const T unbias = static_cast<T>(n) / static_cast<T>(n - 1);
    p_.running_mean = (T(1) - m) * p_.running_mean + m * mean;
    p_.running_var = (T(1) - m) * p_.running_var + (m * unbias) * var;
  } else {
    inv_std_ = (p_.running_var.array() + p_.eps).rsqrt();
    xhat_ = x.rowwise() - p_.running_mean.row(0);
    xhat_.array().rowwise() *= inv_std_.array().row(0);
  }
  Tensor2<T> y = xhat_;
  y.array().rowwise() *= p_.gamma.value.array().row(0);
  y.rowwise() += p_.beta.value.row(0);
  return y;
}

template <typename T>
Tensor2<T> BatchNorm<T>::backward(const Tensor2<T>& grad_out) {
  const Index n = xhat_.rows();
  require_shape(grad_out.rows(), grad_out.cols(), n, dim(),
                "batchnorm backward: grad_out");
  p_.gamma.grad.row(0) +=
      (grad_out.array() * xhat_.array()).colwise().sum().matrix();
  p_.beta.grad.row(0) += grad_out.colwise().sum();

  Tensor2<T> dxhat = grad_out;
  dxhat.array().rowwise() *= p_.gamma.value.array().row(0);

  if (cached_mode_ == Mode::eval) {
    dxhat.array().rowwise() *= inv_std_.array().row(0);
    return dxhat;
  }
  // dx = inv_std / N * (N dxhat - sum(dxhat) - xhat * sum(dxhat * xhat))
  const Tensor2<T> sum_d = dxhat.colwise().sum();
  const Tensor2<T> sum_dx = (dxhat.array() * xhat_.array()).colwise().sum();
  const T inv_n = T(1) / static_cast<T>(n);
  Tensor2<T> dx = dxhat;
  dx.rowwise() -= inv_n * sum_d.row(0);
  Tensor2<T> proj = xhat_;
  proj.array().rowwise() *= (inv_n * sum_dx.array()).row(0);
  dx -= proj;
  dx.array().rowwise() *= inv_std_.array().row(0);
  return dx;
}

template <typename T>
void BatchNorm<T>::collect(ParamList<T>& out, const std::string& prefix) {
  out.params.push_back({prefix + ".gamma", &p_.gamma});
  out.params.push_back({prefix + ".beta", &p_.beta});
  out.buffers.push_back({prefix + ".running_mean", &p_.running_mean});
  out.buffers.push_back({prefix + ".running_var", &p_.running_var});
}

// ----------------------------------------------------------------------- ReLU

template <typename T>
Tensor2<T> Relu<T>::forward(const Tensor2<T>& x) {
  input_ = x;
  return x.cwiseMax(T(0));
}

template <typename T>
Tensor2<T> Relu<T>::backward(const Tensor2<T>& grad_out) const {
  require_shape(grad_out.rows(), grad_out.cols(), input_.rows(),
                input_.cols(), "relu backward: grad_out");
  return (input_.array() > T(0)).select(grad_out, T(0));
}

// ---------------------------------------------------------------- L2Normalize

template <typename T>
Tensor2<T> l2_normalize_rows(const Tensor2<T>& x) {
  Tensor2<T> y = x;
  for (Index i = 0; i < x.rows(); ++i) {
    const T n = x.row(i).norm();
    if (!(static_cast<double>(n) > L2Normalize<T>::kNormFloor)) {
      fail(ErrorKind::degenerate_embedding,
           "row " + std::to_string(i) + " has norm below the floor");
    }
    y.row(i) /= n;
  }
  return y;
}

template <typename T>
Tensor2<T> L2Normalize<T>::forward(const Tensor2<T>& x) {
  norms_ = x.rowwise().norm();
  for (Index i = 0; i < x.rows(); ++i) {
    if (!(static_cast<double>(norms_(i)) > kNormFloor)) {
      fail(ErrorKind::degenerate_embedding,
           "row " + std::to_string(i) + " has norm below the floor");
    }
  }
  output_ = x.array().colwise() / norms_.array();
  return output_;
}

template <typename T>
Tensor2<T> L2Normalize<T>::backward(const Tensor2<T>& grad_out) const {
  require_shape(grad_out.rows(), grad_out.cols(), output_.rows(),
                output_.cols(), "l2_normalize backward: grad_out");
  // dx = (g - y (y . g)) / |x|
  const Eigen::Matrix<T, Eigen::Dynamic, 1> dots =
      (grad_out.array() * output_.array()).rowwise().sum();
  Tensor2<T> dx = grad_out - (output_.array().colwise() * dots.array()).matrix();
  dx.array().colwise() /= norms_.array();
  return dx;
}

// -------------------------------------------------------------- split/concat

template <typename T>
std::vector<Tensor2<T>> split_columns(const Tensor2<T>& x, Index parts) {
  if (parts < 1 || x.cols() % parts != 0) {
    fail(ErrorKind::config, "cannot split " + std::to_string(x.cols()) +
                                " columns into " + std::to_string(parts) +
                                " equal chunks");
  }
  const Index w = x.cols() / parts;
  std::vector<Tensor2<T>> out;
  out.reserve(static_cast<std::size_t>(parts));
  for (Index p = 0; p < parts; ++p) {
    out.emplace_back(x.middleCols(p * w, w));
  }
  return out;
}

template <typename T>
Tensor2<T> concat_columns(std::span<const Tensor2<T>> chunks) {
  if (chunks.empty()) fail(ErrorKind::config, "concat of zero chunks");
  const Index rows = chunks.front().rows();
  Index cols = 0;
  for (const auto& c : chunks) {
    if (c.rows() != rows) {
      fail(ErrorKind::dimension, "concat: chunk rows " +
                                     std::to_string(c.rows()) + " vs " +
                                     std::to_string(rows));
    }
    cols += c.cols();
  }
  Tensor2<T> out(rows, cols);
  Index at = 0;
  for (const auto& c : chunks) {
    out.middleCols(at, c.cols()) = c;
    at += c.cols();
  }
  return out;
}

// ------------------------------------------------------------------------ SGD

void validate(const SgdConfig& cfg) {
  if (!(cfg.lr > 0.0)) {
    fail(ErrorKind::config, "learning rate must be > 0, got " +
                                std::to_string(cfg.lr));
  }
  if (!(cfg.momentum >= 0.0 && cfg.momentum < 1.0)) {
    fail(ErrorKind::config, "momentum must lie in [0,1)");
  }
  if (!(cfg.weight_decay >= 0.0)) {
    fail(ErrorKind::config, "weight decay must be >= 0");
  }
}

template <typename T>
void sgd_step(std::span<const NamedParam<T>> params, const SgdConfig& cfg) {
  validate(cfg);
  const T lr = static_cast<T>(cfg.lr);
  const T mu = static_cast<T>(cfg.momentum);
  const T wd = static_cast<T>(cfg.weight_decay);
  for (const auto& np : params) {
    Param<T>& p = *np.param;
    p.velocity = mu * p.velocity + p.grad + wd * p.value;
    p.value -= lr * p.velocity;
    p.grad.setZero();
  }
}

// ------------------------------------------------------------ instantiation

#define CMC_INSTANTIATE_KERNEL(T)                                           \
  template void require_finite<T>(const Tensor2<T>&, const char*);         \
  template class Linear<T>;                                                \
  template class BatchNorm<T>;                                             \
  template class Relu<T>;                                                  \
  template class L2Normalize<T>;                                           \
  template Tensor2<T> l2_normalize_rows<T>(const Tensor2<T>&);             \
  template std::vector<Tensor2<T>> split_columns<T>(const Tensor2<T>&,     \
                                                    Index);                \
  template Tensor2<T> concat_columns<T>(std::span<const Tensor2<T>>);      \
  template void sgd_step<T>(std::span<const NamedParam<T>>, const SgdConfig&);

CMC_INSTANTIATE_KERNEL(float)
CMC_INSTANTIATE_KERNEL(double)

#undef CMC_INSTANTIATE_KERNEL

}  // namespace cmc
