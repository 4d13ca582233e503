#pragma once

// Binary formats. All integers and floats are little-endian.
//
// EMB1 embedding file:
//   "EMB1" | u32 version=1 | u32 n | u32 dim | u16 tag_len | tag bytes
//   | n*dim f32 row-major | n u32 labels
//
// CMCK checkpoint:
//   "CMCK" | u32 version=1 | u32 header_len | header JSON (UTF-8)
//   | u32 blob_count | blob*
//   blob: u32 name_len | name (UTF-8) | u32 rows | u32 cols | rows*cols f32

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "cmc/embedding_set.hpp"
#include "cmc/scenario.hpp"
#include "cmc/trainer.hpp"

namespace cmc {

inline constexpr std::uint32_t kEmbeddingFormatVersion = 1;
inline constexpr std::uint32_t kCheckpointFormatVersion = 1;

std::vector<char> encode_embeddings(const EmbeddingSet& s);
EmbeddingSet decode_embeddings(const std::vector<char>& bytes,
                               const std::string& source = "<memory>");

void save_embeddings(const EmbeddingSet& s, const std::string& path);
EmbeddingSet load_embeddings(const std::string& path);

struct Blob {
  std::string name;
  Tensor2<float> value;
};

struct CheckpointFile {
  nlohmann::json header;
  std::vector<Blob> blobs;
};

std::vector<char> encode_checkpoint(const CheckpointFile& ck);
CheckpointFile decode_checkpoint(const std::vector<char>& bytes,
                                 const std::string& source = "<memory>");

// Header: {"plan", "query_net", "gallery_net", "head"|null}; blobs are the
// parameters and BN running statistics of both nets and the head, prefixed
// "tq.", "tg." and "head.".
CheckpointFile make_checkpoint(const TrainedModel& model);
TrainedModel restore_checkpoint(const CheckpointFile& ck);

void save_checkpoint(const TrainedModel& model, const std::string& path);
TrainedModel load_checkpoint(const std::string& path);

// Copies the blobs named "<prefix>.<param>" into the net. Throws a dimension
// error naming the blob on a shape mismatch and a config error on a missing
// blob.
void restore_parameters(TransformNet<float>& net, const std::vector<Blob>& blobs,
                        const std::string& prefix);

// Scenario directory: train_query.emb, train_gallery.emb, eval_query.emb,
// eval_gallery.emb and scenario.json (spec, seed, calibration). Loading
// accepts externally produced embedding files; scenario.json is optional and
// the calibration is recomputed when it is absent.
inline constexpr const char* kScenarioFiles[4] = {"train_query.emb", "train_gallery.emb",
                                                  "eval_query.emb", "eval_gallery.emb"};

void save_scenario(const Scenario& sc, const std::string& dir);
Scenario load_scenario(const std::string& dir);

std::vector<char> read_file(const std::string& path);
void write_file(const std::string& path, const std::vector<char>& bytes);

}  // namespace cmc
