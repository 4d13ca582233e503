#include <cmath>
#include <random>
#include <set>
#include <string>

#include "doctest.h"

#include "cmc/gradcheck.hpp"
#include "cmc/rbt_net.hpp"

using namespace cmc;
using M = Tensor2<double>;

namespace {

RbtConfig face(Index blocks) {
  RbtConfig c;
  c.in_dim = 512;
  c.unified_dim = 512;
  c.num_blocks = blocks;
  c.num_paths = 4;
  c.bottleneck = 64;
  return c;
}

// Independent count: stem FC + BN, then per block and path two FCs and two BNs.
std::int64_t rbt_count_by_hand(std::int64_t d, std::int64_t u, std::int64_t n,
                               std::int64_t p, std::int64_t w) {
  const std::int64_t chunk = u / p;
  const std::int64_t stem = d * u + u + 2 * u;
  const std::int64_t path = (chunk * w + w) + 2 * w + (w * chunk + chunk) + 2 * chunk;
  return stem + n * p * path;
}

void randomize(TransformNet<double>& net, std::mt19937_64& rng) {
  for (auto& p : net.parameters().params) {
    const bool is_gamma = p.name.size() > 6 && p.name.substr(p.name.size() - 6) == ".gamma";
    p.param->value = is_gamma ? random_tensor(p.param->value.rows(), p.param->value.cols(), rng, 0.5, 1.5)
                              : random_tensor(p.param->value.rows(), p.param->value.cols(), rng, -0.8, 0.8);
  }
}

GradCheckResult check_net(TransformNet<double>& net, M& x, std::mt19937_64& rng, double h) {
  const M r = random_tensor(x.rows(), net.out_dim(), rng);
  ParamList<double> pl = net.parameters();
  M gx;
  auto objective = [&] { return (net.forward(x).array() * r.array()).sum(); };
  auto analytic = [&] {
    for (auto& p : pl.params) p.param->zero_grad();
    net.forward(x);
    gx = net.backward(r);
  };
  std::vector<GradCheckTarget> targets{{"input", &x, &gx}};
  for (auto& p : pl.params) targets.push_back({p.name, &p.param->value, &p.param->grad});
  return finite_diff_check(objective, analytic, targets, h);
}

}  // namespace

TEST_CASE("parameter counts: RBT(1..4), MLP(1..2), unified pair") {
  const std::int64_t rbt[] = {331520, 399360, 467200, 535040};
  const char* rounded[] = {"0.33M", "0.40M", "0.47M", "0.54M"};
  for (Index n = 1; n <= 4; ++n) {
    TransformSpec s;
    s.kind = TransformKind::rbt;
    s.rbt = face(n);
    CHECK(param_count(s) == rbt[n - 1]);
    CHECK(param_count(s) == rbt_count_by_hand(512, 512, n, 4, 64));
    CHECK(format_millions(param_count(s)) == rounded[n - 1]);
  }
  TransformSpec m;
  m.kind = TransformKind::mlp;
  m.mlp = MlpConfig{512, 512, 2, 512};
  CHECK(param_count(m) == 787968);
  CHECK(format_millions(param_count(m)) == "0.79M");
  m.mlp.hidden_layers = 1;
  CHECK(param_count(m) == 525312);
  CHECK(format_millions(param_count(m)) == "0.53M");

  TransformSpec q;
  q.kind = TransformKind::rbt;
  q.rbt = face(4);
  CHECK(2 * param_count(q) == 1070080);
  // Rounding the pair directly gives 1.07M; the table's 1.08M is the sum of
  // the two per-network figures.
  CHECK(format_millions(2 * param_count(q)) == "1.07M");
  const double each = std::stod(format_millions(param_count(q)));
  CHECK(each + each == doctest::Approx(1.08));

  m.mlp.hidden_layers = 3;
  CHECK(format_millions(param_count(m)) == "1.05M");
  m.mlp.hidden_layers = 4;
  CHECK(format_millions(param_count(m)) == "1.31M");
}

TEST_CASE("parameter count is affine in depth: 263680 + 67840 n") {
  for (Index n = 1; n <= 10; ++n) {
    TransformSpec s;
    s.kind = TransformKind::rbt;
    s.rbt = face(n);
    CHECK(param_count(s) == 263680 + 67840 * n);
  }
}

TEST_CASE("default bottleneck resolves to U / (2P)") {
  RbtConfig c;
  c.unified_dim = 512;
  c.num_paths = 4;
  c.bottleneck = 0;
  CHECK(c.resolved_bottleneck() == 64);
  c.bottleneck = 16;
  CHECK(c.resolved_bottleneck() == 16);
}

TEST_CASE("allocated nets agree with the architecture-only count") {
  std::mt19937_64 rng(1);
  std::uniform_int_distribution<int> pick(1, 4);
  for (int trial = 0; trial < 20; ++trial) {
    RbtConfig c;
    c.num_paths = pick(rng);
    c.unified_dim = c.num_paths * 2 * pick(rng);
    c.in_dim = pick(rng) * 3;
    c.num_blocks = pick(rng);
    c.bottleneck = pick(rng);
    TransformSpec s;
    s.kind = TransformKind::rbt;
    s.rbt = c;
    CHECK(build_transform<float>(c, 1).param_count() == param_count(s));
    CHECK(param_count(s) == rbt_count_by_hand(c.in_dim, c.unified_dim, c.num_blocks,
                                              c.num_paths, c.bottleneck));
  }
}

TEST_CASE("identity transform returns its input") {
  std::mt19937_64 rng(2);
  auto id = make_identity<double>(7);
  const M x = random_tensor(5, 7, rng);
  CHECK(id.forward(x) == x);
  CHECK(id.param_count() == 0);
  CHECK(id.parameters().params.empty());
}

TEST_CASE("MLP on all-zero input gives the same row for every sample") {
  auto net = build_mlp_baseline<double>(6, 5, 2, 3, 16);
  const M y = net.forward(M::Zero(4, 6));
  for (Index i = 1; i < 4; ++i) CHECK(y.row(i) == y.row(0));
}

TEST_CASE("eval-mode output of a row does not depend on its batch") {
  RbtConfig c;
  c.in_dim = 12;
  c.unified_dim = 16;
  c.num_blocks = 2;
  auto net = build_transform<double>(c, 4);
  std::mt19937_64 rng(4);
  // A few train-mode passes to move the running statistics off their init.
  for (int i = 0; i < 3; ++i) net.forward(random_tensor(32, 12, rng));
  net.set_mode(Mode::eval);
  const M x = random_tensor(9, 12, rng);
  const M batch = net.forward(x);
  for (Index i = 0; i < x.rows(); ++i) {
    const M alone = net.forward(x.row(i));
    CHECK((alone.row(0) - batch.row(i)).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("zero-initialised residual branches make every block an identity") {
  std::mt19937_64 rng(5);
  RbtBlock<double> block(8, 4, 2, false, false);
  block.init(rng, true);
  const M x = random_tensor(6, 8, rng);
  CHECK(block.forward(x) == x);
}

TEST_CASE("RBT block: finite differences over 20 seeds") {
  double worst = 0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(600 + seed);
    RbtBlock<double> block(8, 4, 3, seed % 2 == 0, seed % 3 == 0);
    block.init(rng, false);
    ParamList<double> pl;
    block.collect(pl, "b");
    for (auto& p : pl.params) {
      p.param->value = random_tensor(p.param->value.rows(), p.param->value.cols(), rng, 0.5, 1.5);
    }
    M x = random_tensor(6, 8, rng);
    // ReLU kinks: a step of 1e-7 keeps the chance of straddling one negligible.
    worst = std::max(worst, check_layer(block, x, pl.params, rng, 1e-7).max_rel_error);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("full RBT network: finite differences over 20 seeds") {
  double worst = 0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(700 + seed);
    RbtConfig c;
    c.in_dim = 6;
    c.unified_dim = 8;
    c.num_blocks = 2;
    c.num_paths = 4;
    c.bottleneck = 2;
    c.stem_relu = seed % 2 == 1;
    c.output_relu = seed % 4 == 3;
    TransformSpec s;
    s.kind = TransformKind::rbt;
    s.rbt = c;
    TransformNet<double> net(s);
    randomize(net, rng);
    M x = random_tensor(5, 6, rng);
    const GradCheckResult r = check_net(net, x, rng, 1e-7);
    if (r.max_rel_error > worst) worst = r.max_rel_error;
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("MLP network: finite differences over 20 seeds") {
  double worst = 0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(800 + seed);
    TransformSpec s;
    s.kind = TransformKind::mlp;
    s.mlp = MlpConfig{5, 4, 1 + seed % 3, 6};
    TransformNet<double> net(s);
    randomize(net, rng);
    M x = random_tensor(4, 5, rng);
    worst = std::max(worst, check_net(net, x, rng, 1e-7).max_rel_error);
  }
  CHECK(worst < 1e-5);
}

TEST_CASE("initialization is deterministic per seed") {
  RbtConfig c;
  c.in_dim = 10;
  c.unified_dim = 8;
  auto a = build_transform<float>(c, 11);
  auto b = build_transform<float>(c, 11);
  auto d = build_transform<float>(c, 12);
  auto pa = a.parameters().params, pb = b.parameters().params, pd = d.parameters().params;
  bool all_same = true, any_diff = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    all_same = all_same && pa[i].param->value == pb[i].param->value;
    any_diff = any_diff || pa[i].param->value != pd[i].param->value;
  }
  CHECK(all_same);
  CHECK(any_diff);
}

TEST_CASE("parameter names are unique and stable") {
  RbtConfig c;
  c.in_dim = 8;
  c.unified_dim = 8;
  c.num_blocks = 2;
  auto net = build_transform<float>(c, 1);
  const auto pl = net.parameters("tq");
  std::set<std::string> names;
  for (const auto& p : pl.params) names.insert(p.name);
  for (const auto& b : pl.buffers) names.insert(b.name);
  CHECK(names.size() == pl.params.size() + pl.buffers.size());
  CHECK(names.count("tq.stem.fc.W") == 1);
  CHECK(names.count("tq.stem.bn.running_var") == 1);
  CHECK(names.count("tq.block1.path3.fc2.b") == 1);
}

TEST_CASE("cast to double preserves the forward pass") {
  RbtConfig c;
  c.in_dim = 10;
  c.unified_dim = 8;
  auto f = build_transform<float>(c, 3);
  f.set_mode(Mode::eval);
  auto d = f.cast<double>();
  CHECK(d.mode() == Mode::eval);
  std::mt19937_64 rng(3);
  const M x = random_tensor(4, 10, rng);
  const M yd = d.forward(x);
  const M yf = f.forward(x.cast<float>()).cast<double>();
  CHECK((yd - yf).cwiseAbs().maxCoeff() < 1e-4);
}

TEST_CASE("configuration errors") {
  RbtConfig c;
  c.unified_dim = 10;
  c.num_paths = 4;
  CHECK_THROWS_AS(validate(c), Error);
  c = RbtConfig{};
  c.num_blocks = 0;
  CHECK_THROWS_AS(validate(c), Error);
  CHECK_THROWS_AS(validate(MlpConfig{4, 4, 0, 8}), Error);
  auto net = build_transform<double>(RbtConfig{}, 1);
  CHECK_THROWS_AS(net.forward(M::Zero(2, 3)), Error);
  CHECK(transform_kind_from_string("rbt") == TransformKind::rbt);
  CHECK_THROWS_AS(transform_kind_from_string("resnet"), Error);
}

TEST_CASE("flop estimate counts FC weights") {
  TransformSpec s;
  s.kind = TransformKind::rbt;
  s.rbt = face(1);
  TransformNet<float> net(s);
  CHECK(net.flop_estimate() == 512 * 512 + 4 * (128 * 64 + 64 * 128));
}
