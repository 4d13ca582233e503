// Command-line driver: generate, train, transform, eval, compare, ablate.
// Exit codes: 0 success, 1 I/O or file format, 2 validation, 3 numeric.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "cmc/comparison.hpp"
#include "cmc/config_json.hpp"
#include "cmc/eval.hpp"
#include "cmc/io.hpp"
#include "cmc/scenario.hpp"
#include "cmc/trainer.hpp"

#ifndef CMC_VERSION
#define CMC_VERSION "dev"
#endif

namespace fs = std::filesystem;
using namespace cmc;

namespace {

struct Globals {
  std::uint64_t seed = 0;
  bool seed_given = false;
  unsigned threads = 1;
  std::string out_dir = ".";
  std::string log_level = "info";
  std::vector<std::string> argv;
};

void write_text(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  write_file(path.string(), std::vector<char>(text.begin(), text.end()));
}

// Resolved configuration next to the outputs; enough to rerun the command.
void write_manifest(const fs::path& path, const Globals& g, const std::string& command,
                    const Json& config, const std::vector<std::string>& outputs) {
  const Json m = {{"tool", "cmc"},
                  {"version", CMC_VERSION},
                  {"command", command},
                  {"argv", g.argv},
                  {"seed", g.seed},
                  {"threads", g.threads},
                  {"config", config},
                  {"outputs", outputs}};
  write_text(path, m.dump(2) + "\n");
  spdlog::debug("manifest written to {}", path.string());
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  for (const auto& item : split_list(s)) {
    try {
      std::size_t used = 0;
      out.push_back(std::stoull(item, &used));
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      fail(ErrorKind::config, "--seeds: '" + item + "' is not a non-negative integer");
    }
  }
  if (out.empty()) fail(ErrorKind::config, "--seeds: empty list");
  return out;
}

Json plan_json_from(const std::string& path) {
  return path.empty() ? Json::object() : read_json_file(path);
}

void print_tables(const ComparisonMatrix& m, const fs::path& stem) {
  write_text(stem.string() + ".json", m.to_json().dump(2) + "\n");
  write_text(stem.string() + ".csv", m.to_csv());
  write_text(stem.string() + ".txt", m.to_text());
  std::cout << m.to_text();
}

// ------------------------------------------------------------------ commands

struct GenerateArgs {
  std::string spec;
  std::string preset = "similar";
  std::string out;
};

int cmd_generate(const Globals& g, const GenerateArgs& a) {
  ScenarioSpec spec;
  if (!a.spec.empty()) {
    spec = scenario_spec_from_json(read_json_file(a.spec));
  } else if (a.preset == "large") {
    spec = ScenarioSpec::large();
  } else if (a.preset == "mixed") {
    spec = ScenarioSpec::mixed();
  } else {
    spec = ScenarioSpec::similar();
  }
  const Scenario sc = generate_scenario(spec, g.seed);
  const fs::path dir = a.out.empty() ? fs::path(g.out_dir) : fs::path(a.out);
  save_scenario(sc, dir.string());
  if (sc.degenerate) {
    spdlog::warn("scenario is degenerate: within-model rank-1 {:.3f} / {:.3f} (< 0.5)",
                 sc.calibration_rank1_query, sc.calibration_rank1_gallery);
  }
  std::vector<std::string> outputs;
  for (const char* f : kScenarioFiles) outputs.push_back((dir / f).string());
  outputs.push_back((dir / "scenario.json").string());
  write_manifest(dir / "manifest.json", g, "generate", {{"spec", to_json(spec)}}, outputs);
  std::cout << "scenario '" << spec.name << "' seed " << g.seed << ": " << sc.train.n()
            << " train / " << sc.eval.n() << " eval samples, within-model rank-1 "
            << sc.calibration_rank1_query << " / " << sc.calibration_rank1_gallery << " -> "
            << dir.string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string query;
  std::string gallery;
  std::string method;
  std::string plan;
  std::string out;
};

int cmd_train(const Globals& g, const TrainArgs& a) {
  const PairedDataset data{load_embeddings(a.query), load_embeddings(a.gallery)};
  validate(data);
  const Json pj = plan_json_from(a.plan);
  TrainPlan plan = plan_from_json(pj);
  if (!a.method.empty()) plan.method = method_from_string(a.method);
  if (g.seed_given || !pj.contains("seed")) plan.seed = g.seed;
  if (plan.method != Method::unified && (pj.contains("head") || pj.contains("weights"))) {
    spdlog::warn("method {} trains with the similarity loss only; head and loss-weight "
                 "settings in the plan are ignored",
                 to_string(plan.method));
  }

  const TrainedModel model = train(data, plan);
  const fs::path ckpt = a.out.empty() ? fs::path(g.out_dir) / "model.ckpt" : fs::path(a.out);
  if (ckpt.has_parent_path()) fs::create_directories(ckpt.parent_path());
  save_checkpoint(model, ckpt.string());
  std::ostringstream log;
  write_history_jsonl(model.history, log);
  const std::string history = ckpt.string() + ".history.jsonl";
  write_text(history, log.str());
  write_manifest(ckpt.string() + ".manifest.json", g, "train",
                 {{"plan", to_json(model.plan)}, {"query", a.query}, {"gallery", a.gallery}},
                 {ckpt.string(), history});
  const auto& last = model.history.epochs.back();
  std::cout << "trained " << to_string(model.plan.method) << " for "
            << model.history.epochs.size() << " epochs, final loss " << last.loss.total
            << " -> " << ckpt.string() << "\n";
  return 0;
}

TrainedModel model_or_identity(const std::string& ckpt, Index probe_dim, Index gallery_dim) {
  if (!ckpt.empty()) return load_checkpoint(ckpt);
  TrainedModel m{TrainPlan{}, make_identity<float>(probe_dim), make_identity<float>(gallery_dim),
                 std::nullopt, {}};
  m.plan.normalize_inputs = false;
  return m;
}

void require_input_dim(const TransformNet<float>& net, const EmbeddingSet& s,
                       const std::string& what, const TrainedModel& m) {
  if (s.dim() != net.in_dim()) {
    fail(ErrorKind::dimension, what + " is " + std::to_string(s.dim()) +
                                   "-d but the checkpoint expects " +
                                   std::to_string(net.in_dim()) + "-d input (U = " +
                                   std::to_string(m.unified_dim()) + ")");
  }
}

struct TransformArgs {
  std::string ckpt;
  std::string in;
  std::string side = "gallery";
  std::string out;
};

int cmd_transform(const Globals& g, const TransformArgs& a) {
  const TrainedModel m = load_checkpoint(a.ckpt);
  const EmbeddingSet s = load_embeddings(a.in);
  const bool query = a.side == "query";
  const TransformNet<float>& net = query ? m.query_net : m.gallery_net;
  require_input_dim(net, s, a.in, m);
  TransformStats stats;
  const EmbeddingSet in = m.plan.normalize_inputs ? normalize_set(s) : s;
  const EmbeddingSet out = transform_set(net, in, &stats);
  const fs::path path = a.out.empty() ? fs::path(g.out_dir) / "transformed.emb" : fs::path(a.out);
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_embeddings(out, path.string());
  write_manifest(path.string() + ".manifest.json", g, "transform",
                 {{"ckpt", a.ckpt}, {"in", a.in}, {"side", a.side}}, {path.string()});
  std::cout << "transformed " << stats.rows << " rows (" << a.side << " side) in "
            << stats.seconds << " s, " << static_cast<long long>(stats.rows_per_second)
            << " rows/s -> " << path.string() << "\n";
  return 0;
}

struct EvalArgs {
  std::string ckpt;
  std::string probe;
  std::string gallery;
  std::string distractors;
  std::string metric = "rank1";
  bool split = false;
};

int cmd_eval(const Globals& g, const EvalArgs& a) {
  const MetricKind metric = metric_kind_from_string(a.metric);
  const EmbeddingSet probe = load_embeddings(a.probe);
  const EmbeddingSet gallery = load_embeddings(a.gallery);
  EmbeddingSet distractors;
  distractors.data.resize(0, gallery.dim());
  if (!a.distractors.empty()) distractors = load_embeddings(a.distractors);
  const TrainedModel m = model_or_identity(a.ckpt, probe.dim(), gallery.dim());
  require_input_dim(m.query_net, probe, a.probe, m);
  require_input_dim(m.gallery_net, gallery, a.gallery, m);
  if (distractors.n() > 0) require_input_dim(m.gallery_net, distractors, a.distractors, m);

  const EmbeddingSet p = m.embed_query(probe);
  const EmbeddingSet gt = m.embed_gallery(gallery);
  RetrievalReport report;
  if (a.split) {
    // Sample-aligned eval sets: the standard probe/gallery/distractor split.
    if (distractors.n() > 0) fail(ErrorKind::config, "--split takes no --distractors");
    if (metric == MetricKind::rank1) {
      report = rank1_identification(make_identification_task(p, gt));
    } else {
      const MapTask t = make_map_task(p, gt);
      report = mean_average_precision(t.queries, t.gallery);
    }
  } else if (metric == MetricKind::rank1) {
    IdentificationTask task{p, gt, {}};
    task.distractors.data.resize(0, gt.dim());
    if (distractors.n() > 0) task.distractors = m.embed_gallery(distractors);
    report = rank1_identification(task);
  } else {
    EmbeddingSet all = gt;
    if (distractors.n() > 0) {
      const EmbeddingSet d = m.embed_gallery(distractors);
      all.data.conservativeResize(gt.n() + d.n(), Eigen::NoChange);
      all.data.bottomRows(d.n()) = d.data;
      all.labels.insert(all.labels.end(), d.labels.begin(), d.labels.end());
    }
    report = mean_average_precision(p, all);
  }
  const fs::path out = fs::path(g.out_dir) / "eval.json";
  const Json result = {{"metric", to_string(metric)},
                       {"value", report.value},
                       {"probes", p.n()},
                       {"gallery", gt.n()},
                       {"distractors", distractors.n()}};
  write_text(out, result.dump(2) + "\n");
  write_manifest(fs::path(g.out_dir) / "eval.manifest.json", g, "eval",
                 {{"ckpt", a.ckpt},
                  {"probe", a.probe},
                  {"gallery", a.gallery},
                  {"distractors", a.distractors},
                  {"metric", to_string(metric)},
                  {"split", a.split}},
                 {out.string()});
  std::cout << to_string(metric) << " " << report.value << "\n";
  return 0;
}

struct CompareArgs {
  std::string scenario;
  std::string methods = "mlp,rbt,unified";
  std::string seeds = "0,1,2,3,4";
  std::string plan;
  bool no_map = false;
};

int cmd_compare(const Globals& g, const CompareArgs& a) {
  const Scenario sc = load_scenario(a.scenario);
  const TrainPlan base = plan_from_json(plan_json_from(a.plan));
  std::vector<MethodEntry> methods;
  for (const auto& name : split_list(a.methods)) {
    TrainPlan p = base;
    p.method = method_from_string(name);
    methods.push_back({to_string(p.method), p});
  }
  if (methods.empty()) fail(ErrorKind::config, "--methods: empty list");
  const auto seeds = parse_seeds(a.seeds);
  ComparisonOptions opt;
  opt.threads = g.threads;
  opt.with_map = !a.no_map;
  const ComparisonMatrix m = run_comparison(sc, methods, seeds, opt);
  const fs::path stem = fs::path(g.out_dir) / "comparison";
  print_tables(m, stem);
  write_manifest(fs::path(g.out_dir) / "comparison.manifest.json", g, "compare",
                 {{"scenario", a.scenario},
                  {"plan", to_json(base)},
                  {"methods", split_list(a.methods)},
                  {"seeds", seeds}},
                 {stem.string() + ".json", stem.string() + ".csv", stem.string() + ".txt"});
  return 0;
}

struct AblateArgs {
  std::string scenario;
  std::string seeds = "0,1,2,3,4";
  std::string plan;
};

int cmd_ablate(const Globals& g, const AblateArgs& a) {
  const Scenario sc = load_scenario(a.scenario);
  const TrainPlan base = plan_from_json(plan_json_from(a.plan));
  const auto seeds = parse_seeds(a.seeds);
  const ComparisonMatrix m = run_ablation(sc, base, seeds, g.threads);
  const fs::path stem = fs::path(g.out_dir) / "ablation";
  print_tables(m, stem);
  write_manifest(fs::path(g.out_dir) / "ablation.manifest.json", g, "ablate",
                 {{"scenario", a.scenario}, {"plan", to_json(base)}, {"seeds", seeds}},
                 {stem.string() + ".json", stem.string() + ".csv", stem.string() + ".txt"});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  Globals g;
  g.argv.assign(argv, argv + argc);

  CLI::App app{"Cross-model compatible embeddings: train, transform and evaluate"};
  app.set_version_flag("--version", CMC_VERSION);
  app.require_subcommand(1);
  auto* seed_opt = app.add_option("--seed", g.seed, "Random seed")->capture_default_str();
  app.add_option("--threads", g.threads, "Worker threads for comparison cells")
      ->check(CLI::PositiveNumber)
      ->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Directory for outputs and manifests")
      ->capture_default_str();
  app.add_option("--log-level", g.log_level, "Log verbosity")
      ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "off"}))
      ->capture_default_str();

  GenerateArgs gen;
  auto* generate = app.add_subcommand("generate", "Generate a synthetic scenario");
  generate->add_option("--spec", gen.spec, "Scenario spec JSON");
  generate->add_option("--preset", gen.preset, "Preset when no spec is given")
      ->check(CLI::IsMember({"similar", "large", "mixed"}))
      ->capture_default_str();
  generate->add_option("--out", gen.out, "Output directory (default: --out-dir)");

  TrainArgs tr;
  auto* train_cmd = app.add_subcommand("train", "Train a transformation");
  train_cmd->add_option("--query", tr.query, "Query-model embeddings (EMB1)")->required();
  train_cmd->add_option("--gallery", tr.gallery, "Gallery-model embeddings (EMB1)")->required();
  train_cmd->add_option("--method", tr.method, "Method (default: the plan's)")
      ->check(CLI::IsMember({"mlp", "rbt", "unified", "mlp_baseline", "rbt_baseline"}));
  train_cmd->add_option("--plan", tr.plan, "Training plan JSON");
  train_cmd->add_option("--out", tr.out, "Checkpoint path (default: <out-dir>/model.ckpt)");

  TransformArgs tf;
  auto* transform = app.add_subcommand("transform", "Transform an embedding file once");
  transform->add_option("--ckpt", tf.ckpt, "Checkpoint")->required();
  transform->add_option("--in", tf.in, "Input embeddings (EMB1)")->required();
  transform->add_option("--side", tf.side, "Which network to apply")
      ->check(CLI::IsMember({"query", "gallery"}))
      ->capture_default_str();
  transform->add_option("--out", tf.out, "Output path");

  EvalArgs ev;
  auto* eval = app.add_subcommand("eval", "Evaluate retrieval across models");
  eval->add_option("--ckpt", ev.ckpt, "Checkpoint (default: untransformed)");
  eval->add_option("--probe", ev.probe, "Probe embeddings, query model (EMB1)")->required();
  eval->add_option("--gallery", ev.gallery, "Gallery embeddings, gallery model (EMB1)")->required();
  eval->add_option("--distractors", ev.distractors, "Distractor embeddings, gallery model");
  eval->add_option("--metric", ev.metric, "Metric")
      ->check(CLI::IsMember({"rank1", "map", "mAP"}))
      ->capture_default_str();
  eval->add_flag("--split", ev.split,
                 "Probe and gallery are sample-aligned eval sets; build the standard split");

  CompareArgs cmp;
  auto* compare = app.add_subcommand("compare", "Method x direction x seed matrix");
  compare->add_option("--scenario", cmp.scenario, "Scenario directory")->required();
  compare->add_option("--methods", cmp.methods, "Comma-separated methods")->capture_default_str();
  compare->add_option("--seeds", cmp.seeds, "Comma-separated training seeds")->capture_default_str();
  compare->add_option("--plan", cmp.plan, "Base training plan JSON");
  compare->add_flag("--no-map", cmp.no_map, "Skip mAP");

  AblateArgs abl;
  auto* ablate = app.add_subcommand("ablate", "Loss ablation of the unified method");
  ablate->add_option("--scenario", abl.scenario, "Scenario directory")->required();
  ablate->add_option("--seeds", abl.seeds, "Comma-separated training seeds")->capture_default_str();
  ablate->add_option("--plan", abl.plan, "Base training plan JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }
  g.seed_given = seed_opt->count() > 0;

  auto logger = spdlog::stderr_color_mt("cmc");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::from_str(g.log_level));

  try {
    if (*generate) return cmd_generate(g, gen);
    if (*train_cmd) return cmd_train(g, tr);
    if (*transform) return cmd_transform(g, tf);
    if (*eval) return cmd_eval(g, ev);
    if (*compare) return cmd_compare(g, cmp);
    if (*ablate) return cmd_ablate(g, abl);
  } catch (const Error& e) {
    spdlog::error("{} error: {}", to_string(e.kind()), e.what());
    return exit_code_for(e.kind());
  } catch (const fs::filesystem_error& e) {
    spdlog::error("io error: {}", e.what());
    return 1;
  } catch (const nlohmann::json::exception& e) {
    spdlog::error("config error: {}", e.what());
    return 2;
  } catch (const std::exception& e) {
    spdlog::error("error: {}", e.what());
    return 1;
  }
  return 2;
}
