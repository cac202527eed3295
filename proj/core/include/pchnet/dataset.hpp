#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "pchnet/matrix.hpp"

namespace pchnet {

/// Labelled feature matrix with a train/test split over its rows.
struct Dataset {
  Matrix features;                  // instances x n_0, values in [0, 1]
  std::vector<std::size_t> labels;  // class indices
  std::size_t num_classes = 0;
  std::vector<std::size_t> train;   // row indices
  std::vector<std::size_t> test;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return features.cols(); }

  /// Throws ConfigError on label/feature/split inconsistencies or NaNs.
  void validate() const;
};

/// A gathered mini-batch.
struct Batch {
  Matrix inputs;
  std::vector<std::size_t> labels;
};

Batch gather(const Dataset& data, std::span<const std::size_t> rows);

/// Shuffles all rows with `seed` and assigns the trailing `test_fraction` of them to test.
void split_train_test(Dataset& data, double test_fraction, std::uint64_t seed);

}  // namespace pchnet
