#include "cmc/embedding_set.hpp"

#include <algorithm>

namespace cmc {

EmbeddingSet EmbeddingSet::select(std::span<const Index> rows) const {
  EmbeddingSet out;
  out.model_tag = model_tag;
  out.data.resize(static_cast<Index>(rows.size()), dim());
  out.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out.data.row(static_cast<Index>(i)) = data.row(rows[i]);
    out.labels.push_back(labels[static_cast<std::size_t>(rows[i])]);
  }
  return out;
}

void validate(const EmbeddingSet& s) {
  if (s.n() < 1) fail(ErrorKind::config, "embedding set '" + s.model_tag + "' is empty");
  if (static_cast<Index>(s.labels.size()) != s.n()) {
    fail(ErrorKind::label, "embedding set '" + s.model_tag + "' has " +
                               std::to_string(s.labels.size()) +
                               " labels for " + std::to_string(s.n()) + " rows");
  }
  if (!s.data.allFinite()) {
    fail(ErrorKind::numeric, "embedding set '" + s.model_tag + "' has non-finite rows");
  }
}

void validate(const PairedDataset& d) {
  validate(d.query);
  validate(d.gallery);
  if (d.query.n() != d.gallery.n()) {
    fail(ErrorKind::pairing, "query has " + std::to_string(d.query.n()) +
                                 " rows but gallery has " +
                                 std::to_string(d.gallery.n()));
  }
  const auto mismatch =
      std::mismatch(d.query.labels.begin(), d.query.labels.end(),
                    d.gallery.labels.begin());
  if (mismatch.first != d.query.labels.end()) {
    const auto row = mismatch.first - d.query.labels.begin();
    fail(ErrorKind::pairing, "labels differ at row " + std::to_string(row) +
                                 ": query " + std::to_string(*mismatch.first) +
                                 " vs gallery " + std::to_string(*mismatch.second));
  }
}

std::vector<std::uint32_t> distinct_labels(std::span<const std::uint32_t> labels) {
  std::vector<std::uint32_t> out(labels.begin(), labels.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

}  // namespace cmc
