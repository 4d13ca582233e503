#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "cmc/kernel.hpp"

namespace cmc {

// N x d embeddings from one model, with one identity label per row.
struct EmbeddingSet {
  Tensor2<float> data;
  std::vector<std::uint32_t> labels;
  std::string model_tag;

  Index n() const { return data.rows(); }
  Index dim() const { return data.cols(); }

  // Rows in the given order, labels carried along.
  EmbeddingSet select(std::span<const Index> rows) const;
};

// Throws unless n >= 1, labels.size() == n and every value is finite.
void validate(const EmbeddingSet& s);

// The same samples encoded by the query model and by the gallery model.
struct PairedDataset {
  EmbeddingSet query;
  EmbeddingSet gallery;

  Index n() const { return query.n(); }
  const std::vector<std::uint32_t>& labels() const { return query.labels; }
};

// Throws a pairing error unless both sides have equal length and identical
// label vectors.
void validate(const PairedDataset& d);

// Sorted distinct labels.
std::vector<std::uint32_t> distinct_labels(std::span<const std::uint32_t> labels);

}  // namespace cmc
