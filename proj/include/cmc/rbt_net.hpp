#pragma once

// Transformation networks mapping one model's embeddings into the unified
// space: residual bottleneck (RBT) nets, the MLP baseline, and identity.
//
// RBT layout:
//   stem:  FC(d_in -> U), BN(U), ReLU (optional)
//   block: split U into P chunks; each chunk runs
//          FC(U/P -> w), BN(w), ReLU, FC(w -> U/P), BN(U/P), ReLU (optional);
//          chunks are concatenated, added to the block input, then ReLU
//          (optional).
// The optional ReLUs default to off: with them on the output is nonnegative
// and cannot reach a signed target space.

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "cmc/kernel.hpp"

namespace cmc {

enum class TransformKind { rbt, mlp, identity };

const char* to_string(TransformKind kind);
TransformKind transform_kind_from_string(const std::string& s);

struct RbtConfig {
  Index in_dim = 512;
  Index unified_dim = 512;
  Index num_blocks = 4;
  Index num_paths = 4;
  Index bottleneck = 0;  // 0 selects unified_dim / (2 * num_paths)
  bool stem_relu = false;
  bool path_relu = false;  // ReLU closing each path, before the merge
  bool output_relu = false;
  bool zero_init_residual = true;  // last BN gamma of every path starts at 0

  Index resolved_bottleneck() const {
    return bottleneck > 0 ? bottleneck : unified_dim / (2 * num_paths);
  }
};

void validate(const RbtConfig& cfg);

struct MlpConfig {
  Index in_dim = 512;
  Index out_dim = 512;
  Index hidden_layers = 2;
  Index hidden_width = 512;
};

void validate(const MlpConfig& cfg);

// Everything needed to rebuild a network's shape.
struct TransformSpec {
  TransformKind kind = TransformKind::identity;
  RbtConfig rbt;
  MlpConfig mlp;
  Index identity_dim = 0;

  Index in_dim() const;
  Index out_dim() const;
};

template <typename T>
class RbtPath {
 public:
  RbtPath(Index chunk_dim, Index width, bool out_relu);
  void init(std::mt19937_64& rng, bool zero_last_gamma);
  Tensor2<T> forward(const Tensor2<T>& x);
  Tensor2<T> backward(const Tensor2<T>& grad_out);
  void set_mode(Mode mode);
  void collect(ParamList<T>& out, const std::string& prefix);

 private:
  Linear<T> fc1_;
  BatchNorm<T> bn1_;
  Relu<T> relu1_;
  Linear<T> fc2_;
  BatchNorm<T> bn2_;
  Relu<T> relu2_;
  bool out_relu_;
};

template <typename T>
class RbtBlock {
 public:
  RbtBlock(Index dim, Index paths, Index width, bool path_relu, bool output_relu);
  void init(std::mt19937_64& rng, bool zero_last_gamma);
  Tensor2<T> forward(const Tensor2<T>& x);
  Tensor2<T> backward(const Tensor2<T>& grad_out);
  void set_mode(Mode mode);
  void collect(ParamList<T>& out, const std::string& prefix);

 private:
  std::vector<RbtPath<T>> paths_;
  bool output_relu_;
  Relu<T> out_relu_;
};

template <typename T>
class TransformNet {
 public:
  explicit TransformNet(const TransformSpec& spec);

  const TransformSpec& spec() const { return spec_; }
  TransformKind kind() const { return spec_.kind; }
  Index in_dim() const { return spec_.in_dim(); }
  Index out_dim() const { return spec_.out_dim(); }

  // Deterministic for a fixed seed.
  void init(std::uint64_t seed);

  Tensor2<T> forward(const Tensor2<T>& x);
  Tensor2<T> backward(const Tensor2<T>& grad_out);

  void set_mode(Mode mode);
  Mode mode() const { return mode_; }

  // Learnable parameters and BN running statistics, with stable names.
  ParamList<T> parameters(const std::string& prefix = "");

  // Learnable scalars (FC weights/biases, BN gamma/beta).
  std::int64_t param_count() const;
  // Multiply-adds per sample of the forward pass (FC weights).
  std::int64_t flop_estimate() const;

  // Copies every parameter and buffer value into another precision.
  template <typename U>
  TransformNet<U> cast() const;

 private:
  template <typename U>
  friend class TransformNet;

  TransformSpec spec_;
  Mode mode_ = Mode::train;

  // rbt
  Linear<T> stem_fc_;
  BatchNorm<T> stem_bn_;
  Relu<T> stem_relu_;
  std::vector<RbtBlock<T>> blocks_;

  // mlp
  std::vector<Linear<T>> mlp_fc_;
  std::vector<Relu<T>> mlp_relu_;
};

template <typename T>
TransformNet<T> build_transform(const RbtConfig& cfg, std::uint64_t seed);

template <typename T>
TransformNet<T> build_mlp_baseline(Index in_dim, Index out_dim,
                                   Index hidden_layers, std::uint64_t seed,
                                   Index hidden_width = 512);

template <typename T>
TransformNet<T> make_identity(Index dim);

template <typename T>
TransformNet<T> build_from_spec(const TransformSpec& spec, std::uint64_t seed);

// Parameter count from the architecture alone, without allocating.
std::int64_t param_count(const TransformSpec& spec);

// Rounds to millions at two decimals, e.g. 535040 -> "0.54M".
std::string format_millions(std::int64_t count);

// ----------------------------------------------------------------- template

template <typename T>
template <typename U>
TransformNet<U> TransformNet<T>::cast() const {
  TransformNet<U> out(spec_);
  auto& self = const_cast<TransformNet<T>&>(*this);
  ParamList<T> src = self.parameters();
  ParamList<U> dst = out.parameters();
  for (std::size_t i = 0; i < src.params.size(); ++i) {
    dst.params[i].param->value = src.params[i].param->value.template cast<U>();
  }
  for (std::size_t i = 0; i < src.buffers.size(); ++i) {
    *dst.buffers[i].value = src.buffers[i].value->template cast<U>();
  }
  out.set_mode(mode_);
  return out;
}

}  // namespace cmc
