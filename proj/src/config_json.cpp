#include "cmc/config_json.hpp"

#include <fstream>
#include <set>

namespace cmc {

namespace {

// Walks one JSON object, tracking its path for error messages.
class Reader {
 public:
  Reader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorKind::config, where() + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      if constexpr (std::is_same_v<T, bool>) {
        if (!it->is_boolean()) throw std::invalid_argument("expected a boolean");
      } else if constexpr (std::is_integral_v<T>) {
        if (!it->is_number_integer()) throw std::invalid_argument("expected an integer");
        if constexpr (std::is_unsigned_v<T>) {
          if (it->is_number_unsigned() == false && it->template get<long long>() < 0) {
            throw std::invalid_argument("expected a non-negative integer");
          }
        }
      } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw std::invalid_argument("expected a number");
      }
      out = it->template get<T>();
    } catch (const std::exception& e) {
      fail(ErrorKind::config, field(key) + ": " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }
  const Json& at(const char* key) {
    seen_.insert(key);
    return j_.at(key);
  }
  std::string field(const char* key) const {
    return path_.empty() ? key : path_ + "." + key;
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) {
        fail(ErrorKind::config, field(it.key().c_str()) + ": unknown field");
      }
    }
  }

 private:
  std::string where() const { return path_.empty() ? "document" : path_; }

  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

template <typename Enum, typename Parse>
void get_enum(Reader& r, const char* key, Enum& out, Parse parse) {
  std::string s;
  r.get(key, s);
  if (s.empty()) return;
  try {
    out = parse(s);
  } catch (const Error& e) {
    fail(ErrorKind::config, r.field(key) + ": " + e.what());
  }
}

void read_rbt(Reader r, RbtConfig& c) {
  r.get("in_dim", c.in_dim);
  r.get("unified_dim", c.unified_dim);
  r.get("num_blocks", c.num_blocks);
  r.get("num_paths", c.num_paths);
  r.get("bottleneck", c.bottleneck);
  r.get("stem_relu", c.stem_relu);
  r.get("path_relu", c.path_relu);
  r.get("output_relu", c.output_relu);
  r.get("zero_init_residual", c.zero_init_residual);
  r.finish();
}

void read_mlp(Reader r, MlpConfig& c) {
  r.get("in_dim", c.in_dim);
  r.get("out_dim", c.out_dim);
  r.get("hidden_layers", c.hidden_layers);
  r.get("hidden_width", c.hidden_width);
  r.finish();
}

void read_model(Reader r, ModelSpec& m) {
  r.get("projection_seed", m.projection_seed);
  get_enum(r, "nonlinearity", m.nonlinearity, nonlinearity_from_string);
  r.get("out_dim", m.out_dim);
  r.get("noise", m.noise);
  r.get("gain", m.gain);
  r.finish();
}

}  // namespace

Json to_json(const RbtConfig& c) {
  return {{"in_dim", c.in_dim},         {"unified_dim", c.unified_dim},
          {"num_blocks", c.num_blocks}, {"num_paths", c.num_paths},
          {"bottleneck", c.bottleneck}, {"stem_relu", c.stem_relu},
          {"path_relu", c.path_relu},   {"output_relu", c.output_relu},
          {"zero_init_residual", c.zero_init_residual}};
}

Json to_json(const MlpConfig& c) {
  return {{"in_dim", c.in_dim},
          {"out_dim", c.out_dim},
          {"hidden_layers", c.hidden_layers},
          {"hidden_width", c.hidden_width}};
}

Json to_json(const TransformSpec& s) {
  Json j = {{"kind", to_string(s.kind)}};
  switch (s.kind) {
    case TransformKind::rbt: j["rbt"] = to_json(s.rbt); break;
    case TransformKind::mlp: j["mlp"] = to_json(s.mlp); break;
    case TransformKind::identity: j["dim"] = s.identity_dim; break;
  }
  return j;
}

Json to_json(const HeadConfig& c) {
  return {{"kind", to_string(c.kind)}, {"num_classes", c.num_classes},
          {"feat_dim", c.feat_dim},    {"s", c.s},
          {"m", c.m},                  {"smoothing", c.smoothing}};
}

Json to_json(const LossWeights& w) {
  return {{"lambda1", w.lambda1},
          {"lambda2", w.lambda2},
          {"lambda3", w.lambda3},
          {"kl_post_margin", w.kl_post_margin}};
}

Json to_json(const TrainPlan& p) {
  return {{"method", to_string(p.method)},
          {"rbt", to_json(p.rbt)},
          {"mlp", to_json(p.mlp)},
          {"head", to_json(p.head)},
          {"weights", to_json(p.weights)},
          {"lr0", p.lr0},
          {"lr_drops", p.lr_drops},
          {"lr_drop_factor", p.lr_drop_factor},
          {"total_epochs", p.total_epochs},
          {"batch_size", p.batch_size},
          {"momentum", p.momentum},
          {"weight_decay", p.weight_decay},
          {"seed", p.seed},
          {"normalize_inputs", p.normalize_inputs}};
}

Json to_json(const ModelSpec& m) {
  return {{"projection_seed", m.projection_seed},
          {"nonlinearity", to_string(m.nonlinearity)},
          {"out_dim", m.out_dim},
          {"noise", m.noise},
          {"gain", m.gain}};
}

Json to_json(const ScenarioSpec& s) {
  return {{"name", s.name},
          {"latent_dim", s.latent_dim},
          {"nuisance_dim", s.nuisance_dim},
          {"intra_class", s.intra_class},
          {"nuisance", s.nuisance},
          {"train_classes", s.train_classes},
          {"eval_classes", s.eval_classes},
          {"samples_per_class", s.samples_per_class},
          {"shift", to_string(s.shift)},
          {"query", to_json(s.query)},
          {"gallery", to_json(s.gallery)}};
}

TransformSpec transform_spec_from_json(const Json& j) {
  Reader r(j, "");
  TransformSpec s;
  get_enum(r, "kind", s.kind, transform_kind_from_string);
  if (r.has("rbt")) read_rbt(Reader(r.at("rbt"), "rbt"), s.rbt);
  if (r.has("mlp")) read_mlp(Reader(r.at("mlp"), "mlp"), s.mlp);
  r.get("dim", s.identity_dim);
  r.finish();
  return s;
}

TrainPlan plan_from_json(const Json& j) {
  Reader r(j, "");
  TrainPlan p;
  get_enum(r, "method", p.method, method_from_string);
  if (r.has("rbt")) read_rbt(Reader(r.at("rbt"), "rbt"), p.rbt);
  if (r.has("mlp")) read_mlp(Reader(r.at("mlp"), "mlp"), p.mlp);
  if (r.has("head")) {
    Reader h(r.at("head"), "head");
    HeadKind kind = p.head.kind;
    get_enum(h, "kind", kind, head_kind_from_string);
    p.head = HeadConfig::defaults_for(kind, p.head.num_classes, p.head.feat_dim);
    h.get("num_classes", p.head.num_classes);
    h.get("feat_dim", p.head.feat_dim);
    h.get("s", p.head.s);
    h.get("m", p.head.m);
    h.get("smoothing", p.head.smoothing);
    h.finish();
    try {
      validate(p.head);
    } catch (const Error& e) {
      fail(ErrorKind::config, std::string("head: ") + e.what());
    }
  }
  if (r.has("weights")) {
    Reader w(r.at("weights"), "weights");
    w.get("lambda1", p.weights.lambda1);
    w.get("lambda2", p.weights.lambda2);
    w.get("lambda3", p.weights.lambda3);
    w.get("kl_post_margin", p.weights.kl_post_margin);
    w.finish();
    if (p.weights.lambda1 < 0) fail(ErrorKind::config, "weights.lambda1 must be >= 0");
    if (p.weights.lambda2 < 0) fail(ErrorKind::config, "weights.lambda2 must be >= 0");
    if (p.weights.lambda3 < 0) fail(ErrorKind::config, "weights.lambda3 must be >= 0");
  }
  r.get("lr0", p.lr0);
  r.get("lr_drops", p.lr_drops);
  r.get("lr_drop_factor", p.lr_drop_factor);
  r.get("total_epochs", p.total_epochs);
  r.get("batch_size", p.batch_size);
  r.get("momentum", p.momentum);
  r.get("weight_decay", p.weight_decay);
  r.get("seed", p.seed);
  r.get("normalize_inputs", p.normalize_inputs);
  r.finish();
  validate(p);
  return p;
}

ScenarioSpec scenario_spec_from_json(const Json& j) {
  Reader r(j, "");
  ScenarioSpec s = ScenarioSpec::similar();
  if (r.has("shift")) {
    ShiftLevel shift = ShiftLevel::similar;
    get_enum(r, "shift", shift, shift_level_from_string);
    s = shift == ShiftLevel::large ? ScenarioSpec::large() : ScenarioSpec::similar();
  }
  r.get("name", s.name);
  r.get("latent_dim", s.latent_dim);
  r.get("nuisance_dim", s.nuisance_dim);
  r.get("intra_class", s.intra_class);
  r.get("nuisance", s.nuisance);
  r.get("train_classes", s.train_classes);
  r.get("eval_classes", s.eval_classes);
  r.get("samples_per_class", s.samples_per_class);
  if (r.has("query")) read_model(Reader(r.at("query"), "query"), s.query);
  if (r.has("gallery")) read_model(Reader(r.at("gallery"), "gallery"), s.gallery);
  r.finish();
  validate(s);
  return s;
}

Json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  try {
    return Json::parse(in);
  } catch (const Json::parse_error& e) {
    fail(ErrorKind::config, path + ": " + e.what());
  }
}

}  // namespace cmc
