#include "cmc/scenario.hpp"

#include <cmath>
#include <random>

#include "cmc/eval.hpp"

namespace cmc {

namespace {

// splitmix64 finalizer; derives independent stream seeds from one seed.
std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

Tensor2<double> gaussian(Index rows, Index cols, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  Tensor2<double> t(rows, cols);
  for (Index i = 0; i < t.size(); ++i) t.data()[i] = nd(rng);
  return t;
}

EmbeddingSet encode(const Tensor2<double>& codes, std::span<const std::uint32_t> labels,
                    const ModelSpec& m, std::mt19937_64& noise_rng,
                    const std::string& tag) {
  std::mt19937_64 proj_rng(m.projection_seed);
  const Tensor2<double> a = gaussian(m.out_dim, codes.cols(), proj_rng);
  const double scale = m.gain / std::sqrt(static_cast<double>(codes.cols()));
  Tensor2<double> x = scale * (codes * a.transpose());
  switch (m.nonlinearity) {
    case Nonlinearity::tanh: x = x.array().tanh(); break;
    case Nonlinearity::relu: x = x.cwiseMax(0.0); break;
    case Nonlinearity::none: break;
  }
  for (Index i = 0; i < x.rows(); ++i) {
    const double n = x.row(i).norm();
    if (n > 0.0) x.row(i) /= n;
  }
  if (m.noise > 0.0) x += m.noise * gaussian(x.rows(), x.cols(), noise_rng);

  EmbeddingSet out;
  out.data = x.cast<float>();
  out.labels.assign(labels.begin(), labels.end());
  out.model_tag = tag;
  return out;
}

void validate_model(const ModelSpec& m, const std::string& path) {
  if (m.out_dim < 1) fail(ErrorKind::config, path + ".out_dim must be >= 1");
  if (!(m.noise >= 0.0)) fail(ErrorKind::config, path + ".noise must be >= 0");
  if (!(m.gain > 0.0)) fail(ErrorKind::config, path + ".gain must be > 0");
}

}  // namespace

const char* to_string(Nonlinearity nl) {
  switch (nl) {
    case Nonlinearity::tanh: return "tanh";
    case Nonlinearity::relu: return "relu";
    case Nonlinearity::none: return "none";
  }
  return "unknown";
}

Nonlinearity nonlinearity_from_string(const std::string& s) {
  if (s == "tanh") return Nonlinearity::tanh;
  if (s == "relu") return Nonlinearity::relu;
  if (s == "none") return Nonlinearity::none;
  fail(ErrorKind::config, "unknown nonlinearity '" + s + "'");
}

const char* to_string(ShiftLevel s) {
  return s == ShiftLevel::similar ? "similar" : "large";
}

ShiftLevel shift_level_from_string(const std::string& s) {
  if (s == "similar") return ShiftLevel::similar;
  if (s == "large") return ShiftLevel::large;
  fail(ErrorKind::config, "unknown shift level '" + s + "'");
}

ScenarioSpec ScenarioSpec::similar() {
  ScenarioSpec s;
  s.name = "similar";
  s.shift = ShiftLevel::similar;
  s.query = ModelSpec{101, Nonlinearity::tanh, 64, 0.02, 1.0};
  s.gallery = ModelSpec{202, Nonlinearity::tanh, 64, 0.02, 1.0};
  return s;
}

ScenarioSpec ScenarioSpec::large() {
  ScenarioSpec s;
  s.name = "large";
  s.shift = ShiftLevel::large;
  s.query = ModelSpec{101, Nonlinearity::tanh, 64, 0.02, 1.0};
  s.gallery = ModelSpec{303, Nonlinearity::relu, 64, 0.02, 1.0};
  return s;
}

ScenarioSpec ScenarioSpec::mixed() {
  ScenarioSpec s = large();
  s.name = "mixed";
  s.gallery.out_dim = 96;
  return s;
}

void validate(const ScenarioSpec& s) {
  if (s.latent_dim < 1) fail(ErrorKind::config, "latent_dim must be >= 1");
  if (s.nuisance_dim < 0) fail(ErrorKind::config, "nuisance_dim must be >= 0");
  if (!(s.intra_class >= 0.0)) fail(ErrorKind::config, "intra_class must be >= 0");
  if (!(s.nuisance >= 0.0)) fail(ErrorKind::config, "nuisance must be >= 0");
  if (s.train_classes < 2) fail(ErrorKind::config, "train_classes must be >= 2");
  if (s.eval_classes < 2) fail(ErrorKind::config, "eval_classes must be >= 2");
  if (s.samples_per_class < 2) fail(ErrorKind::config, "samples_per_class must be >= 2");
  validate_model(s.query, "query");
  validate_model(s.gallery, "gallery");
  const bool same_nl = s.query.nonlinearity == s.gallery.nonlinearity;
  if (s.shift == ShiftLevel::similar && !same_nl) {
    fail(ErrorKind::config, "shift: 'similar' requires query.nonlinearity == gallery.nonlinearity");
  }
  if (s.shift == ShiftLevel::large && same_nl) {
    fail(ErrorKind::config, "shift: 'large' requires query.nonlinearity != gallery.nonlinearity");
  }
}

Scenario generate_scenario(const ScenarioSpec& spec, std::uint64_t seed) {
  validate(spec);
  const Index k = spec.latent_dim;
  const Index kn = spec.nuisance_dim;
  const Index classes = spec.train_classes + spec.eval_classes;
  const Index per = spec.samples_per_class;

  std::mt19937_64 latent_rng(mix(seed));
  const Tensor2<double> centres = gaussian(classes, k, latent_rng);

  auto build = [&](Index first_class, Index count, std::uint64_t stream) {
    std::mt19937_64 rng(mix(seed ^ mix(stream)));
    const Index rows = count * per;
    Tensor2<double> codes(rows, k + kn);
    std::vector<std::uint32_t> labels(static_cast<std::size_t>(rows));
    const Tensor2<double> jitter = gaussian(rows, k, rng);
    const Tensor2<double> nuisance = gaussian(rows, kn, rng);
    for (Index r = 0; r < rows; ++r) {
      const Index c = first_class + r / per;
      labels[static_cast<std::size_t>(r)] = static_cast<std::uint32_t>(c);
      codes.row(r).head(k) = centres.row(c) + spec.intra_class * jitter.row(r);
      if (kn > 0) codes.row(r).tail(kn) = spec.nuisance * nuisance.row(r);
    }
    std::mt19937_64 noise_q(mix(seed ^ mix(stream + 101)));
    std::mt19937_64 noise_g(mix(seed ^ mix(stream + 202)));
    PairedDataset d;
    d.query = encode(codes, labels, spec.query, noise_q, "query");
    d.gallery = encode(codes, labels, spec.gallery, noise_g, "gallery");
    return d;
  };

  Scenario sc;
  sc.spec = spec;
  sc.seed = seed;
  sc.train = build(0, spec.train_classes, 1);
  sc.eval = build(spec.train_classes, spec.eval_classes, 2);

  const auto train_ids = distinct_labels(sc.train.labels());
  const auto eval_ids = distinct_labels(sc.eval.labels());
  if (!train_ids.empty() && !eval_ids.empty() && train_ids.back() >= eval_ids.front()) {
    fail(ErrorKind::config, "scenario: train and eval identities overlap");
  }

  sc.calibration_rank1_query =
      rank1_identification(make_identification_task(sc.eval.query, sc.eval.query)).value;
  sc.calibration_rank1_gallery =
      rank1_identification(make_identification_task(sc.eval.gallery, sc.eval.gallery)).value;
  sc.degenerate = sc.calibration_rank1_query < 0.5 || sc.calibration_rank1_gallery < 0.5;
  return sc;
}

}  // namespace cmc
