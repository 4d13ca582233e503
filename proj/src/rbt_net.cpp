#include "cmc/rbt_net.hpp"

#include <cmath>
#include <cstdio>

namespace cmc {

const char* to_string(TransformKind kind) {
  switch (kind) {
    case TransformKind::rbt: return "rbt";
    case TransformKind::mlp: return "mlp";
    case TransformKind::identity: return "identity";
  }
  return "unknown";
}

TransformKind transform_kind_from_string(const std::string& s) {
  if (s == "rbt") return TransformKind::rbt;
  if (s == "mlp") return TransformKind::mlp;
  if (s == "identity") return TransformKind::identity;
  fail(ErrorKind::config, "unknown transform kind '" + s + "'");
}

void validate(const RbtConfig& cfg) {
  if (cfg.in_dim < 1 || cfg.unified_dim < 1) {
    fail(ErrorKind::config, "rbt: in_dim and unified_dim must be >= 1");
  }
  if (cfg.num_blocks < 1) fail(ErrorKind::config, "rbt: num_blocks must be >= 1");
  if (cfg.num_paths < 1) fail(ErrorKind::config, "rbt: num_paths must be >= 1");
  if (cfg.unified_dim % cfg.num_paths != 0) {
    fail(ErrorKind::config, "rbt: unified_dim " +
                                std::to_string(cfg.unified_dim) +
                                " is not divisible by num_paths " +
                                std::to_string(cfg.num_paths));
  }
  if (cfg.resolved_bottleneck() < 1) {
    fail(ErrorKind::config, "rbt: bottleneck width must be >= 1");
  }
}

void validate(const MlpConfig& cfg) {
  if (cfg.in_dim < 1 || cfg.out_dim < 1 || cfg.hidden_width < 1) {
    fail(ErrorKind::config, "mlp: dims must be >= 1");
  }
  if (cfg.hidden_layers < 1) {
    fail(ErrorKind::config, "mlp: hidden_layers must be >= 1");
  }
}

Index TransformSpec::in_dim() const {
  switch (kind) {
    case TransformKind::rbt: return rbt.in_dim;
    case TransformKind::mlp: return mlp.in_dim;
    case TransformKind::identity: return identity_dim;
  }
  return 0;
}

Index TransformSpec::out_dim() const {
  switch (kind) {
    case TransformKind::rbt: return rbt.unified_dim;
    case TransformKind::mlp: return mlp.out_dim;
    case TransformKind::identity: return identity_dim;
  }
  return 0;
}

// -------------------------------------------------------------------- RbtPath

template <typename T>
RbtPath<T>::RbtPath(Index chunk_dim, Index width, bool out_relu)
    : fc1_(chunk_dim, width), bn1_(width), fc2_(width, chunk_dim),
      bn2_(chunk_dim), out_relu_(out_relu) {}

template <typename T>
void RbtPath<T>::init(std::mt19937_64& rng, bool zero_last_gamma) {
  fc1_.init_uniform(rng);
  fc2_.init_uniform(rng);
  if (zero_last_gamma) bn2_.params().gamma.value.setZero();
}

template <typename T>
Tensor2<T> RbtPath<T>::forward(const Tensor2<T>& x) {
  Tensor2<T> h = relu1_.forward(bn1_.forward(fc1_.forward(x)));
  h = bn2_.forward(fc2_.forward(h));
  return out_relu_ ? relu2_.forward(h) : h;
}

template <typename T>
Tensor2<T> RbtPath<T>::backward(const Tensor2<T>& grad_out) {
  Tensor2<T> g = out_relu_ ? relu2_.backward(grad_out) : grad_out;
  g = fc2_.backward(bn2_.backward(g));
  return fc1_.backward(bn1_.backward(relu1_.backward(g)));
}

template <typename T>
void RbtPath<T>::set_mode(Mode mode) {
  bn1_.set_mode(mode);
  bn2_.set_mode(mode);
}

template <typename T>
void RbtPath<T>::collect(ParamList<T>& out, const std::string& prefix) {
  fc1_.collect(out, prefix + ".fc1");
  bn1_.collect(out, prefix + ".bn1");
  fc2_.collect(out, prefix + ".fc2");
  bn2_.collect(out, prefix + ".bn2");
}

// ------------------------------------------------------------------- RbtBlock

template <typename T>
RbtBlock<T>::RbtBlock(Index dim, Index paths, Index width, bool path_relu,
                      bool output_relu)
    : output_relu_(output_relu) {
  paths_.reserve(static_cast<std::size_t>(paths));
  for (Index p = 0; p < paths; ++p) paths_.emplace_back(dim / paths, width, path_relu);
}

template <typename T>
void RbtBlock<T>::init(std::mt19937_64& rng, bool zero_last_gamma) {
  for (auto& p : paths_) p.init(rng, zero_last_gamma);
}

template <typename T>
Tensor2<T> RbtBlock<T>::forward(const Tensor2<T>& x) {
  auto chunks = split_columns(x, static_cast<Index>(paths_.size()));
  for (std::size_t p = 0; p < paths_.size(); ++p) {
    chunks[p] = paths_[p].forward(chunks[p]);
  }
  Tensor2<T> y = concat_columns<T>(chunks);
  y += x;
  return output_relu_ ? out_relu_.forward(y) : y;
}

template <typename T>
Tensor2<T> RbtBlock<T>::backward(const Tensor2<T>& grad_out) {
  const Tensor2<T> g = output_relu_ ? out_relu_.backward(grad_out) : grad_out;
  auto chunks = split_columns(g, static_cast<Index>(paths_.size()));
  for (std::size_t p = 0; p < paths_.size(); ++p) {
    chunks[p] = paths_[p].backward(chunks[p]);
  }
  Tensor2<T> dx = concat_columns<T>(chunks);
  dx += g;
  return dx;
}

template <typename T>
void RbtBlock<T>::set_mode(Mode mode) {
  for (auto& p : paths_) p.set_mode(mode);
}

template <typename T>
void RbtBlock<T>::collect(ParamList<T>& out, const std::string& prefix) {
  for (std::size_t p = 0; p < paths_.size(); ++p) {
    paths_[p].collect(out, prefix + ".path" + std::to_string(p));
  }
}

// --------------------------------------------------------------- TransformNet

template <typename T>
TransformNet<T>::TransformNet(const TransformSpec& spec) : spec_(spec) {
  switch (spec.kind) {
    case TransformKind::rbt: {
      const RbtConfig& c = spec.rbt;
      validate(c);
      stem_fc_ = Linear<T>(c.in_dim, c.unified_dim);
      stem_bn_ = BatchNorm<T>(c.unified_dim);
      blocks_.reserve(static_cast<std::size_t>(c.num_blocks));
      for (Index b = 0; b < c.num_blocks; ++b) {
        blocks_.emplace_back(c.unified_dim, c.num_paths,
                             c.resolved_bottleneck(), c.path_relu, c.output_relu);
      }
      break;
    }
    case TransformKind::mlp: {
      const MlpConfig& c = spec.mlp;
      validate(c);
      Index in = c.in_dim;
      for (Index l = 0; l < c.hidden_layers; ++l) {
        mlp_fc_.emplace_back(in, c.hidden_width);
        mlp_relu_.emplace_back();
        in = c.hidden_width;
      }
      mlp_fc_.emplace_back(in, c.out_dim);
      break;
    }
    case TransformKind::identity:
      if (spec.identity_dim < 1) {
        fail(ErrorKind::config, "identity transform needs dim >= 1");
      }
      break;
  }
}

template <typename T>
void TransformNet<T>::init(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  stem_fc_.init_uniform(rng);
  for (auto& b : blocks_) b.init(rng, spec_.rbt.zero_init_residual);
  for (auto& fc : mlp_fc_) fc.init_uniform(rng);
}

template <typename T>
Tensor2<T> TransformNet<T>::forward(const Tensor2<T>& x) {
  if (x.cols() != in_dim()) {
    fail(ErrorKind::dimension, std::string(to_string(kind())) +
                                   " transform expects " +
                                   std::to_string(in_dim()) +
                                   " input columns, got " +
                                   std::to_string(x.cols()));
  }
  switch (spec_.kind) {
    case TransformKind::identity:
      return x;
    case TransformKind::rbt: {
      Tensor2<T> h = stem_bn_.forward(stem_fc_.forward(x));
      if (spec_.rbt.stem_relu) h = stem_relu_.forward(h);
      for (auto& b : blocks_) h = b.forward(h);
      return h;
    }
    case TransformKind::mlp: {
      Tensor2<T> h = x;
      for (std::size_t l = 0; l < mlp_relu_.size(); ++l) {
        h = mlp_relu_[l].forward(mlp_fc_[l].forward(h));
      }
      return mlp_fc_.back().forward(h);
    }
  }
  return x;
}

template <typename T>
Tensor2<T> TransformNet<T>::backward(const Tensor2<T>& grad_out) {
  switch (spec_.kind) {
    case TransformKind::identity:
      return grad_out;
    case TransformKind::rbt: {
      Tensor2<T> g = grad_out;
      for (auto it = blocks_.rbegin(); it != blocks_.rend(); ++it) {
        g = it->backward(g);
      }
      if (spec_.rbt.stem_relu) g = stem_relu_.backward(g);
      return stem_fc_.backward(stem_bn_.backward(g));
    }
    case TransformKind::mlp: {
      Tensor2<T> g = mlp_fc_.back().backward(grad_out);
      for (std::size_t l = mlp_relu_.size(); l-- > 0;) {
        g = mlp_fc_[l].backward(mlp_relu_[l].backward(g));
      }
      return g;
    }
  }
  return grad_out;
}

template <typename T>
void TransformNet<T>::set_mode(Mode mode) {
  mode_ = mode;
  stem_bn_.set_mode(mode);
  for (auto& b : blocks_) b.set_mode(mode);
}

template <typename T>
ParamList<T> TransformNet<T>::parameters(const std::string& prefix) {
  ParamList<T> out;
  const std::string p = prefix.empty() ? "" : prefix + ".";
  if (spec_.kind == TransformKind::rbt) {
    stem_fc_.collect(out, p + "stem.fc");
    stem_bn_.collect(out, p + "stem.bn");
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      blocks_[b].collect(out, p + "block" + std::to_string(b));
    }
  } else if (spec_.kind == TransformKind::mlp) {
    for (std::size_t l = 0; l < mlp_fc_.size(); ++l) {
      mlp_fc_[l].collect(out, p + "fc" + std::to_string(l));
    }
  }
  return out;
}

template <typename T>
std::int64_t TransformNet<T>::param_count() const {
  auto& self = const_cast<TransformNet<T>&>(*this);
  std::int64_t n = 0;
  for (const auto& p : self.parameters().params) n += p.param->size();
  return n;
}

template <typename T>
std::int64_t TransformNet<T>::flop_estimate() const {
  auto& self = const_cast<TransformNet<T>&>(*this);
  std::int64_t n = 0;
  for (const auto& p : self.parameters().params) {
    const auto& name = p.name;
    if (name.size() >= 2 && name.compare(name.size() - 2, 2, ".W") == 0) {
      n += p.param->size();
    }
  }
  return n;
}

// ------------------------------------------------------------------ builders

template <typename T>
TransformNet<T> build_transform(const RbtConfig& cfg, std::uint64_t seed) {
  TransformSpec spec;
  spec.kind = TransformKind::rbt;
  spec.rbt = cfg;
  TransformNet<T> net(spec);
  net.init(seed);
  return net;
}

template <typename T>
TransformNet<T> build_mlp_baseline(Index in_dim, Index out_dim,
                                   Index hidden_layers, std::uint64_t seed,
                                   Index hidden_width) {
  TransformSpec spec;
  spec.kind = TransformKind::mlp;
  spec.mlp = MlpConfig{in_dim, out_dim, hidden_layers, hidden_width};
  TransformNet<T> net(spec);
  net.init(seed);
  return net;
}

template <typename T>
TransformNet<T> make_identity(Index dim) {
  TransformSpec spec;
  spec.kind = TransformKind::identity;
  spec.identity_dim = dim;
  return TransformNet<T>(spec);
}

template <typename T>
TransformNet<T> build_from_spec(const TransformSpec& spec, std::uint64_t seed) {
  TransformNet<T> net(spec);
  net.init(seed);
  return net;
}

std::int64_t param_count(const TransformSpec& spec) {
  auto fc = [](std::int64_t in, std::int64_t out) { return in * out + out; };
  switch (spec.kind) {
    case TransformKind::identity:
      return 0;
    case TransformKind::rbt: {
      const RbtConfig& c = spec.rbt;
      const std::int64_t u = c.unified_dim;
      const std::int64_t chunk = u / c.num_paths;
      const std::int64_t w = c.resolved_bottleneck();
      const std::int64_t stem = fc(c.in_dim, u) + 2 * u;
      const std::int64_t path = fc(chunk, w) + 2 * w + fc(w, chunk) + 2 * chunk;
      return stem + c.num_blocks * c.num_paths * path;
    }
    case TransformKind::mlp: {
      const MlpConfig& c = spec.mlp;
      std::int64_t n = fc(c.in_dim, c.hidden_width);
      n += (c.hidden_layers - 1) * fc(c.hidden_width, c.hidden_width);
      return n + fc(c.hidden_width, c.out_dim);
    }
  }
  return 0;
}

std::string format_millions(std::int64_t count) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(count) / 1e6);
  return buf;
}

#define CMC_INSTANTIATE_NET(T)                                               \
  template class RbtPath<T>;                                                 \
  template class RbtBlock<T>;                                                \
  template class TransformNet<T>;                                            \
  template TransformNet<T> build_transform<T>(const RbtConfig&, std::uint64_t); \
  template TransformNet<T> build_mlp_baseline<T>(Index, Index, Index,        \
                                                 std::uint64_t, Index);      \
  template TransformNet<T> make_identity<T>(Index);                          \
  template TransformNet<T> build_from_spec<T>(const TransformSpec&,          \
                                              std::uint64_t);

CMC_INSTANTIATE_NET(float)
CMC_INSTANTIATE_NET(double)

#undef CMC_INSTANTIATE_NET

}  // namespace cmc
