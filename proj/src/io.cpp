#include "cmc/io.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>

#include "cmc/config_json.hpp"
#include "cmc/eval.hpp"

namespace cmc {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

namespace {

constexpr char kEmbMagic[4] = {'E', 'M', 'B', '1'};
constexpr char kCkptMagic[4] = {'C', 'M', 'C', 'K'};

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const char* c = static_cast<const char*>(p);
    buf_.insert(buf_.end(), c, c + n);
  }
  template <typename T>
  void put(T v) {
    raw(&v, sizeof v);
  }
  void u32_checked(std::size_t v, const char* what) {
    if (v > std::numeric_limits<std::uint32_t>::max()) {
      fail(ErrorKind::config, std::string(what) + " exceeds u32 range");
    }
    put(static_cast<std::uint32_t>(v));
  }
  std::vector<char> take() { return std::move(buf_); }

 private:
  std::vector<char> buf_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<char>& b, std::string source)
      : b_(b), source_(std::move(source)) {}

  void raw(void* p, std::size_t n, const char* what) {
    if (remaining() < n) {
      fail(ErrorKind::truncated, source_ + ": truncated while reading " + what);
    }
    std::memcpy(p, b_.data() + pos_, n);
    pos_ += n;
  }
  template <typename T>
  T get(const char* what) {
    T v;
    raw(&v, sizeof v, what);
    return v;
  }
  std::size_t remaining() const { return b_.size() - pos_; }
  const std::string& source() const { return source_; }

 private:
  const std::vector<char>& b_;
  std::size_t pos_ = 0;
  std::string source_;
};

void check_magic(ByteReader& r, const char (&magic)[4]) {
  char got[4] = {};
  if (r.remaining() < 4) {
    fail(ErrorKind::bad_magic, r.source() + ": file too short for magic");
  }
  r.raw(got, 4, "magic");
  if (std::memcmp(got, magic, 4) != 0) {
    fail(ErrorKind::bad_magic, r.source() + ": expected magic '" +
                                   std::string(magic, 4) + "', found '" +
                                   std::string(got, 4) + "'");
  }
}

}  // namespace

// ---------------------------------------------------------------------- EMB1

std::vector<char> encode_embeddings(const EmbeddingSet& s) {
  if (static_cast<Index>(s.labels.size()) != s.n()) {
    fail(ErrorKind::label, "cannot save: label count differs from row count");
  }
  if (s.model_tag.size() > std::numeric_limits<std::uint16_t>::max()) {
    fail(ErrorKind::config, "model tag too long");
  }
  ByteWriter w;
  w.raw(kEmbMagic, 4);
  w.put(kEmbeddingFormatVersion);
  w.u32_checked(static_cast<std::size_t>(s.n()), "row count");
  w.u32_checked(static_cast<std::size_t>(s.dim()), "dim");
  w.put(static_cast<std::uint16_t>(s.model_tag.size()));
  w.raw(s.model_tag.data(), s.model_tag.size());
  w.raw(s.data.data(), sizeof(float) * static_cast<std::size_t>(s.data.size()));
  w.raw(s.labels.data(), sizeof(std::uint32_t) * s.labels.size());
  return w.take();
}

EmbeddingSet decode_embeddings(const std::vector<char>& bytes, const std::string& source) {
  ByteReader r(bytes, source);
  check_magic(r, kEmbMagic);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kEmbeddingFormatVersion) {
    fail(ErrorKind::unsupported_version,
         source + ": EMB1 version " + std::to_string(version) + " is not supported (expected " +
             std::to_string(kEmbeddingFormatVersion) + ")");
  }
  const auto n = r.get<std::uint32_t>("row count");
  const auto dim = r.get<std::uint32_t>("dim");
  const auto tag_len = r.get<std::uint16_t>("tag length");
  EmbeddingSet s;
  s.model_tag.resize(tag_len);
  r.raw(s.model_tag.data(), tag_len, "model tag");

  const std::size_t floats = static_cast<std::size_t>(n) * dim;
  if (r.remaining() < floats * sizeof(float)) {
    fail(ErrorKind::truncated, source + ": embedding payload truncated (" +
                                   std::to_string(r.remaining()) + " bytes left, need " +
                                   std::to_string(floats * sizeof(float)) + ")");
  }
  s.data.resize(n, dim);
  r.raw(s.data.data(), floats * sizeof(float), "embeddings");
  if (r.remaining() != static_cast<std::size_t>(n) * sizeof(std::uint32_t)) {
    fail(ErrorKind::payload_length,
         source + ": label payload holds " + std::to_string(r.remaining()) +
             " bytes but " + std::to_string(n) + " labels need " +
             std::to_string(static_cast<std::size_t>(n) * sizeof(std::uint32_t)));
  }
  s.labels.resize(n);
  r.raw(s.labels.data(), s.labels.size() * sizeof(std::uint32_t), "labels");
  return s;
}

std::vector<char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::io, "cannot open " + path);
  return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::io, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorKind::io, "write failed for " + path);
}

void save_embeddings(const EmbeddingSet& s, const std::string& path) {
  write_file(path, encode_embeddings(s));
}

EmbeddingSet load_embeddings(const std::string& path) {
  return decode_embeddings(read_file(path), path);
}

// ---------------------------------------------------------------------- CMCK

std::vector<char> encode_checkpoint(const CheckpointFile& ck) {
  ByteWriter w;
  w.raw(kCkptMagic, 4);
  w.put(kCheckpointFormatVersion);
  const std::string header = ck.header.dump();
  w.u32_checked(header.size(), "header");
  w.raw(header.data(), header.size());
  w.u32_checked(ck.blobs.size(), "blob count");
  for (const auto& b : ck.blobs) {
    w.u32_checked(b.name.size(), "blob name");
    w.raw(b.name.data(), b.name.size());
    w.u32_checked(static_cast<std::size_t>(b.value.rows()), "blob rows");
    w.u32_checked(static_cast<std::size_t>(b.value.cols()), "blob cols");
    w.raw(b.value.data(), sizeof(float) * static_cast<std::size_t>(b.value.size()));
  }
  return w.take();
}

CheckpointFile decode_checkpoint(const std::vector<char>& bytes, const std::string& source) {
  ByteReader r(bytes, source);
  check_magic(r, kCkptMagic);
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointFormatVersion) {
    fail(ErrorKind::unsupported_version,
         source + ": checkpoint format version " + std::to_string(version) +
             " does not match this build (" + std::to_string(kCheckpointFormatVersion) +
             "); upgrade required");
  }
  CheckpointFile ck;
  std::string header(r.get<std::uint32_t>("header length"), '\0');
  r.raw(header.data(), header.size(), "header");
  try {
    ck.header = nlohmann::json::parse(header);
  } catch (const nlohmann::json::parse_error& e) {
    fail(ErrorKind::truncated, source + ": malformed checkpoint header: " + e.what());
  }
  const auto count = r.get<std::uint32_t>("blob count");
  for (std::uint32_t i = 0; i < count; ++i) {
    Blob b;
    b.name.resize(r.get<std::uint32_t>("blob name length"));
    r.raw(b.name.data(), b.name.size(), "blob name");
    const auto rows = r.get<std::uint32_t>("blob rows");
    const auto cols = r.get<std::uint32_t>("blob cols");
    const std::size_t bytes_needed = sizeof(float) * static_cast<std::size_t>(rows) * cols;
    if (r.remaining() < bytes_needed) {
      fail(ErrorKind::truncated, source + ": blob '" + b.name + "' truncated");
    }
    b.value.resize(rows, cols);
    r.raw(b.value.data(), bytes_needed, "blob payload");
    ck.blobs.push_back(std::move(b));
  }
  if (r.remaining() != 0) {
    fail(ErrorKind::payload_length, source + ": " + std::to_string(r.remaining()) +
                                        " trailing bytes after the last blob");
  }
  return ck;
}

namespace {

void add_blobs(std::vector<Blob>& out, ParamList<float> list) {
  for (const auto& p : list.params) out.push_back({p.name, p.param->value});
  for (const auto& b : list.buffers) out.push_back({b.name, *b.value});
}

}  // namespace

CheckpointFile make_checkpoint(const TrainedModel& model) {
  CheckpointFile ck;
  ck.header = {{"plan", to_json(model.plan)},
               {"query_net", to_json(model.query_net.spec())},
               {"gallery_net", to_json(model.gallery_net.spec())},
               {"head", model.head ? to_json(model.head->config()) : nlohmann::json()}};
  auto& m = const_cast<TrainedModel&>(model);
  add_blobs(ck.blobs, m.query_net.parameters("tq"));
  add_blobs(ck.blobs, m.gallery_net.parameters("tg"));
  if (m.head) add_blobs(ck.blobs, m.head->parameters("head"));
  return ck;
}

void restore_parameters(TransformNet<float>& net, const std::vector<Blob>& blobs,
                        const std::string& prefix) {
  std::map<std::string, const Blob*> by_name;
  for (const auto& b : blobs) by_name[b.name] = &b;
  auto copy = [&](const std::string& name, Tensor2<float>& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      fail(ErrorKind::config, "checkpoint has no blob '" + name + "'");
    }
    const Tensor2<float>& src = it->second->value;
    if (src.rows() != dst.rows() || src.cols() != dst.cols()) {
      fail(ErrorKind::dimension, "blob '" + name + "' is " + std::to_string(src.rows()) +
                                     "x" + std::to_string(src.cols()) +
                                     " but the network expects " +
                                     std::to_string(dst.rows()) + "x" +
                                     std::to_string(dst.cols()));
    }
    dst = src;
  };
  ParamList<float> list = net.parameters(prefix);
  for (auto& p : list.params) copy(p.name, p.param->value);
  for (auto& b : list.buffers) copy(b.name, *b.value);
}

TrainedModel restore_checkpoint(const CheckpointFile& ck) {
  const auto& h = ck.header;
  for (const char* key : {"plan", "query_net", "gallery_net", "head"}) {
    if (!h.contains(key)) fail(ErrorKind::config, std::string("checkpoint header lacks '") + key + "'");
  }
  TrainedModel m{plan_from_json(h.at("plan")),
                 TransformNet<float>(transform_spec_from_json(h.at("query_net"))),
                 TransformNet<float>(transform_spec_from_json(h.at("gallery_net"))),
                 std::nullopt,
                 {}};
  restore_parameters(m.query_net, ck.blobs, "tq");
  restore_parameters(m.gallery_net, ck.blobs, "tg");
  m.query_net.set_mode(Mode::eval);
  m.gallery_net.set_mode(Mode::eval);
  if (!h.at("head").is_null()) {
    const Json& hj = h.at("head");
    HeadConfig cfg = HeadConfig::defaults_for(head_kind_from_string(hj.at("kind")),
                                              hj.at("num_classes"), hj.at("feat_dim"));
    cfg.s = hj.at("s");
    cfg.m = hj.at("m");
    cfg.smoothing = hj.at("smoothing");
    m.head.emplace(cfg);
    std::map<std::string, const Blob*> by_name;
    for (const auto& b : ck.blobs) by_name[b.name] = &b;
    for (auto& p : m.head->parameters("head").params) {
      auto it = by_name.find(p.name);
      if (it == by_name.end()) fail(ErrorKind::config, "checkpoint has no blob '" + p.name + "'");
      const auto& src = it->second->value;
      if (src.rows() != p.param->value.rows() || src.cols() != p.param->value.cols()) {
        fail(ErrorKind::dimension, "blob '" + p.name + "' has the wrong shape");
      }
      p.param->value = src;
    }
  }
  return m;
}

void save_checkpoint(const TrainedModel& model, const std::string& path) {
  write_file(path, encode_checkpoint(make_checkpoint(model)));
}

TrainedModel load_checkpoint(const std::string& path) {
  return restore_checkpoint(decode_checkpoint(read_file(path), path));
}

// ------------------------------------------------------------------ scenarios

void save_scenario(const Scenario& sc, const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) fail(ErrorKind::io, "cannot create directory " + dir + ": " + ec.message());
  const std::filesystem::path d(dir);
  save_embeddings(sc.train.query, (d / kScenarioFiles[0]).string());
  save_embeddings(sc.train.gallery, (d / kScenarioFiles[1]).string());
  save_embeddings(sc.eval.query, (d / kScenarioFiles[2]).string());
  save_embeddings(sc.eval.gallery, (d / kScenarioFiles[3]).string());
  const Json j = {{"spec", to_json(sc.spec)},
                  {"seed", sc.seed},
                  {"calibration_rank1_query", sc.calibration_rank1_query},
                  {"calibration_rank1_gallery", sc.calibration_rank1_gallery},
                  {"degenerate", sc.degenerate}};
  const std::string text = j.dump(2) + "\n";
  write_file((d / "scenario.json").string(), std::vector<char>(text.begin(), text.end()));
}

Scenario load_scenario(const std::string& dir) {
  const std::filesystem::path d(dir);
  Scenario sc;
  sc.train = {load_embeddings((d / kScenarioFiles[0]).string()),
              load_embeddings((d / kScenarioFiles[1]).string())};
  sc.eval = {load_embeddings((d / kScenarioFiles[2]).string()),
             load_embeddings((d / kScenarioFiles[3]).string())};
  validate(sc.train);
  validate(sc.eval);
  const auto meta = d / "scenario.json";
  if (std::filesystem::exists(meta)) {
    const Json j = read_json_file(meta.string());
    sc.spec = scenario_spec_from_json(j.at("spec"));
    sc.seed = j.value("seed", std::uint64_t{0});
  } else {
    sc.spec.name = d.filename().string();
  }
  const auto train_ids = distinct_labels(sc.train.labels());
  for (auto id : distinct_labels(sc.eval.labels())) {
    if (std::binary_search(train_ids.begin(), train_ids.end(), id)) {
      fail(ErrorKind::label, dir + ": identity " + std::to_string(id) +
                                 " appears in both the train and eval splits");
    }
  }
  auto within = [](const EmbeddingSet& s) {
    return rank1_identification(make_identification_task(s, s)).value;
  };
  sc.calibration_rank1_query = within(sc.eval.query);
  sc.calibration_rank1_gallery = within(sc.eval.gallery);
  sc.degenerate = sc.calibration_rank1_query < 0.5 || sc.calibration_rank1_gallery < 0.5;
  return sc;
}

}  // namespace cmc
