#include <unistd.h>

#include <algorithm>
#include <cstring>
#include <filesystem>
#include <functional>
#include <random>
#include <set>
#include <string>

#include "doctest.h"

#include "cmc/config_json.hpp"
#include "cmc/eval.hpp"
#include "cmc/io.hpp"
#include "cmc/scenario.hpp"
#include "cmc/trainer.hpp"
#include "oracles.hpp"

using namespace cmc;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static const fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / ("cmc_test_data_io_" + std::to_string(::getpid()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

ErrorKind kind_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.kind();
  }
  FAIL("expected an error");
  return ErrorKind::io;
}

std::string message_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.what();
  }
  return "";
}

void put_u32(std::vector<char>& b, std::size_t at, std::uint32_t v) {
  std::memcpy(b.data() + at, &v, 4);
}

ScenarioSpec small(ScenarioSpec s) {
  s.train_classes = 30;
  s.eval_classes = 10;
  s.samples_per_class = 6;
  return s;
}

TrainedModel tiny_model(Method method, std::uint64_t seed) {
  const Scenario sc = generate_scenario(small(ScenarioSpec::mixed()), seed);
  TrainPlan p;
  p.method = method;
  p.total_epochs = 2;
  p.lr_drops = {};
  p.batch_size = 32;
  p.seed = seed;
  if (method != Method::unified) p.rbt.unified_dim = 96;
  return train(sc.train, p);
}

}  // namespace

TEST_CASE("noise-free identical model specs give identical sets") {
  ScenarioSpec s = small(ScenarioSpec::similar());
  s.query.noise = 0.0;
  s.gallery = s.query;
  const Scenario sc = generate_scenario(s, 1);
  CHECK(sc.train.query.data == sc.train.gallery.data);
  CHECK(sc.eval.query.data == sc.eval.gallery.data);
}

TEST_CASE("default regimes meet their calibration targets") {
  const Scenario sim = generate_scenario(ScenarioSpec::similar(), 1);
  MESSAGE("similar: within-model rank-1 " << sim.calibration_rank1_query << " / "
                                          << sim.calibration_rank1_gallery);
  CHECK(sim.calibration_rank1_query >= 0.9);
  CHECK(sim.calibration_rank1_gallery >= 0.9);
  CHECK_FALSE(sim.degenerate);

  const Scenario large = generate_scenario(ScenarioSpec::large(), 1);
  const IdentificationTask t = make_identification_task(normalize_set(large.eval.query),
                                                        normalize_set(large.eval.gallery));
  const double cross = rank1_identification(t).value;
  MESSAGE("large: untransformed cross-model rank-1 " << cross);
  CHECK(cross <= 0.2);
  CHECK(large.calibration_rank1_query >= 0.5);
  CHECK(large.calibration_rank1_gallery >= 0.5);
}

TEST_CASE("scenario shapes, disjoint identities, purity") {
  const ScenarioSpec spec = small(ScenarioSpec::mixed());
  const Scenario a = generate_scenario(spec, 5);
  const Scenario b = generate_scenario(spec, 5);
  const Scenario c = generate_scenario(spec, 6);
  CHECK(a.train.n() == 30 * 6);
  CHECK(a.eval.n() == 10 * 6);
  CHECK(a.train.query.dim() == 64);
  CHECK(a.train.gallery.dim() == 96);
  CHECK(a.train.query.labels == a.train.gallery.labels);
  CHECK_NOTHROW(validate(a.train));
  CHECK(a.train.query.data == b.train.query.data);
  CHECK(a.eval.gallery.data == b.eval.gallery.data);
  CHECK(a.calibration_rank1_gallery == b.calibration_rank1_gallery);
  CHECK(a.train.query.data != c.train.query.data);
  const auto tr = distinct_labels(a.train.labels());
  const auto ev = distinct_labels(a.eval.labels());
  CHECK(tr.size() == 30);
  CHECK(ev.size() == 10);
  for (auto id : ev) CHECK_FALSE(std::binary_search(tr.begin(), tr.end(), id));
}

TEST_CASE("scenario validation names the offending field") {
  ScenarioSpec s = ScenarioSpec::similar();
  s.gallery.noise = -1;
  CHECK(message_of([&] { validate(s); }).find("gallery.noise") != std::string::npos);
  s = ScenarioSpec::similar();
  s.train_classes = 1;
  CHECK(message_of([&] { validate(s); }).find("train_classes") != std::string::npos);
  s = ScenarioSpec::similar();
  s.gallery.nonlinearity = Nonlinearity::relu;
  CHECK_THROWS_AS(validate(s), Error);
}

TEST_CASE("heavy noise raises the degenerate flag") {
  ScenarioSpec s = small(ScenarioSpec::similar());
  s.query.noise = 5.0;
  CHECK(generate_scenario(s, 2).degenerate);
}

TEST_CASE("embedding files round-trip bit for bit") {
  std::mt19937_64 rng(3);
  EmbeddingSet s = oracle::random_set(17, 5, 1000, rng);
  s.model_tag = "resnet-ish";
  const std::string path = (temp_dir() / "a.emb").string();
  save_embeddings(s, path);
  const EmbeddingSet t = load_embeddings(path);
  CHECK(t.data == s.data);
  CHECK(t.labels == s.labels);
  CHECK(t.model_tag == s.model_tag);
  CHECK(encode_embeddings(t) == read_file(path));
  // Header: magic, version, n, dim, tag length.
  const auto bytes = read_file(path);
  CHECK(bytes.size() == 4 + 4 + 4 + 4 + 2 + 10 + 17 * 5 * 4 + 17 * 4);
  CHECK(std::string(bytes.data(), 4) == "EMB1");
}

TEST_CASE("malformed embedding files give distinct errors") {
  std::mt19937_64 rng(4);
  const EmbeddingSet s = oracle::random_set(4, 3, 10, rng);
  const auto good = encode_embeddings(s);

  auto bad_magic = good;
  bad_magic[0] = 'X';
  CHECK(kind_of([&] { decode_embeddings(bad_magic); }) == ErrorKind::bad_magic);

  auto bad_version = good;
  put_u32(bad_version, 4, 2);
  CHECK(kind_of([&] { decode_embeddings(bad_version); }) == ErrorKind::unsupported_version);

  // n * dim floats followed by only n - 1 labels.
  auto short_labels = good;
  short_labels.resize(good.size() - 4);
  CHECK(kind_of([&] { decode_embeddings(short_labels); }) == ErrorKind::payload_length);

  auto truncated = good;
  truncated.resize(30);
  CHECK(kind_of([&] { decode_embeddings(truncated); }) == ErrorKind::truncated);

  auto trailing = good;
  trailing.push_back(0);
  CHECK(kind_of([&] { decode_embeddings(trailing); }) == ErrorKind::payload_length);

  EmbeddingSet mismatched = s;
  mismatched.labels.pop_back();
  CHECK(kind_of([&] { encode_embeddings(mismatched); }) == ErrorKind::label);

  CHECK(kind_of([&] { load_embeddings((temp_dir() / "missing.emb").string()); }) == ErrorKind::io);
}

TEST_CASE("checkpoints round-trip and reproduce the transforms bit for bit") {
  for (Method method : {Method::unified, Method::rbt_baseline, Method::mlp_baseline}) {
    INFO(std::string(to_string(method)));
    const TrainedModel m = tiny_model(method, 7);
    const std::string path = (temp_dir() / "m.ckpt").string();
    save_checkpoint(m, path);
    const TrainedModel r = load_checkpoint(path);
    CHECK(encode_checkpoint(make_checkpoint(r)) == read_file(path));
    CHECK(r.head.has_value() == m.head.has_value());
    CHECK(r.query_net.mode() == Mode::eval);

    const Scenario sc = generate_scenario(small(ScenarioSpec::mixed()), 7);
    CHECK(r.embed_query(sc.eval.query).data == m.embed_query(sc.eval.query).data);
    CHECK(r.embed_gallery(sc.eval.gallery).data == m.embed_gallery(sc.eval.gallery).data);

    // Transform-then-save equals save-then-transform.
    const std::string raw = (temp_dir() / "raw.emb").string();
    const std::string a = (temp_dir() / "t1.emb").string();
    const std::string b = (temp_dir() / "t2.emb").string();
    save_embeddings(m.embed_query(sc.eval.query), a);
    save_embeddings(sc.eval.query, raw);
    save_embeddings(r.embed_query(load_embeddings(raw)), b);
    CHECK(read_file(a) == read_file(b));
  }
}

TEST_CASE("baseline checkpoints store no gallery-side blobs") {
  const TrainedModel m = tiny_model(Method::rbt_baseline, 8);
  const CheckpointFile ck = make_checkpoint(m);
  for (const auto& b : ck.blobs) {
    CHECK(b.name.rfind("tg.", 0) != 0);
    CHECK(b.name.rfind("head.", 0) != 0);
  }
  CHECK(ck.header.at("head").is_null());
}

TEST_CASE("identity-transform checkpoint has zero blobs and loads") {
  TrainedModel m{TrainPlan{}, make_identity<float>(8), make_identity<float>(8), std::nullopt, {}};
  m.plan.method = Method::rbt_baseline;
  const CheckpointFile ck = make_checkpoint(m);
  CHECK(ck.blobs.empty());
  const TrainedModel r = restore_checkpoint(decode_checkpoint(encode_checkpoint(ck)));
  CHECK(r.query_net.kind() == TransformKind::identity);
  std::mt19937_64 rng(9);
  const EmbeddingSet s = oracle::random_set(5, 8, 2, rng);
  CHECK(transform_set(r.query_net, s).data == s.data);
}

TEST_CASE("loading into a mismatched network names the blob") {
  const TrainedModel m = tiny_model(Method::unified, 9);
  const CheckpointFile ck = make_checkpoint(m);
  TransformSpec other = m.query_net.spec();
  other.rbt.bottleneck = other.rbt.resolved_bottleneck() + 1;
  TransformNet<float> net(other);
  try {
    restore_parameters(net, ck.blobs, "tq");
    FAIL("expected a dimension error");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::dimension);
    CHECK(std::string(e.what()).find("tq.block0.path0.fc1.W") != std::string::npos);
  }
}

TEST_CASE("checkpoint version and framing errors") {
  const TrainedModel m = tiny_model(Method::rbt_baseline, 10);
  const auto good = encode_checkpoint(make_checkpoint(m));
  auto newer = good;
  put_u32(newer, 4, kCheckpointFormatVersion + 1);
  CHECK(kind_of([&] { decode_checkpoint(newer); }) == ErrorKind::unsupported_version);
  CHECK(message_of([&] { decode_checkpoint(newer); }).find("upgrade required") != std::string::npos);
  auto magic = good;
  magic[3] = 'X';
  CHECK(kind_of([&] { decode_checkpoint(magic); }) == ErrorKind::bad_magic);
  auto cut = good;
  cut.resize(good.size() - 3);
  CHECK(kind_of([&] { decode_checkpoint(cut); }) == ErrorKind::truncated);
}

TEST_CASE("plan JSON: empty document gives the default schedule") {
  const TrainPlan p = plan_from_json(Json::object());
  CHECK(p.lr0 == 0.1);
  CHECK(p.lr_drops == std::vector<int>{20, 25});
  CHECK(p.total_epochs == 30);
  CHECK(p.momentum == 0.9);
  CHECK(p.weight_decay == 5e-4);
  CHECK(p.method == Method::unified);
  CHECK(p.head.kind == HeadKind::arcface);
  CHECK(p.head.s == 64.0);
  CHECK(p.head.m == 0.5);
  CHECK(p.weights.lambda3 == 0.25);
  CHECK(p.weights.kl_post_margin);
}

TEST_CASE("plan JSON round-trips and rejects unknown or mistyped fields") {
  TrainPlan p;
  p.method = Method::rbt_baseline;
  p.rbt.num_blocks = 2;
  p.head = HeadConfig::defaults_for(HeadKind::am_softmax, 5, 16);
  p.weights.kl_post_margin = false;
  p.seed = 99;
  const TrainPlan q = plan_from_json(to_json(p));
  CHECK(to_json(q) == to_json(p));

  CHECK(message_of([] { plan_from_json(Json{{"rbt", {{"blocks", 2}}}}); }).find("rbt.blocks") !=
        std::string::npos);
  CHECK(message_of([] { plan_from_json(Json{{"lr0", "fast"}}); }).find("lr0") != std::string::npos);
  CHECK(kind_of([] { plan_from_json(Json{{"lr_drops", {25, 20}}}); }) == ErrorKind::config);
  CHECK(kind_of([] { plan_from_json(Json{{"head", {{"kind", "arcface"}, {"m", 3.0}}}}); }) ==
        ErrorKind::config);
}

TEST_CASE("choosing a head kind brings that kind's defaults") {
  CHECK(plan_from_json(Json{{"head", {{"kind", "am_softmax"}}}}).head.m == 0.35);
  CHECK(plan_from_json(Json{{"head", {{"kind", "label_smoothing_softmax"}}}}).head.smoothing == 0.1);
  CHECK(plan_from_json(Json{{"head", {{"kind", "am_softmax"}, {"m", 0.2}}}}).head.m == 0.2);
}

TEST_CASE("scenario JSON round-trips and starts from the chosen preset") {
  const ScenarioSpec s = ScenarioSpec::mixed();
  CHECK(to_json(scenario_spec_from_json(to_json(s))) == to_json(s));
  const ScenarioSpec l = scenario_spec_from_json(Json{{"shift", "large"}});
  CHECK(l.gallery.nonlinearity == Nonlinearity::relu);
  CHECK(kind_of([] { scenario_spec_from_json(Json{{"gallery", {{"noise", -1.0}}}}); }) ==
        ErrorKind::config);
  CHECK(message_of([] { scenario_spec_from_json(Json{{"query", {{"colour", 1}}}}); })
            .find("query.colour") != std::string::npos);
}
