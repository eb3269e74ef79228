#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "dmckn/grid.hpp"
#include "dmckn/tensor.hpp"

namespace dmckn {

/// Images as per-cell feature matrices with ±1 label vectors.
struct LabeledDataset {
  GridSpec grid;
  std::size_t feature_dim = 0;
  std::vector<std::string> ids;
  std::vector<Tensor> features;  // one cells × feature_dim matrix per image
  Tensor labels;                 // images × labels, entries in {−1, +1}
  std::vector<std::string> vocabulary;

  std::size_t size() const noexcept { return features.size(); }
  std::size_t label_count() const noexcept { return vocabulary.size(); }
  LabeledDataset subset(std::span<const std::size_t> indices) const;
  /// Throws DataError on inconsistent shapes, label values or duplicate ids.
  void validate() const;
};

}  // namespace dmckn
