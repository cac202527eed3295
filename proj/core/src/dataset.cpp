#include "pchnet/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pchnet/error.hpp"
#include "pchnet/rng.hpp"

namespace pchnet {

void Dataset::validate() const {
  if (features.rows() != labels.size()) {
    throw ConfigError("dataset: " + std::to_string(features.rows()) + " feature rows but " +
                      std::to_string(labels.size()) + " labels");
  }
  if (num_classes == 0) throw ConfigError("dataset: no classes");
  for (std::size_t y : labels)
    if (y >= num_classes) throw ConfigError("dataset: label " + std::to_string(y) + " out of range");
  for (double x : features.values())
    if (std::isnan(x)) throw ConfigError("dataset: NaN feature");
  for (const auto* split : {&train, &test})
    for (std::size_t r : *split)
      if (r >= labels.size()) throw ConfigError("dataset: split index out of range");
}

Batch gather(const Dataset& data, std::span<const std::size_t> rows) {
  Batch b{Matrix(rows.size(), data.dim()), {}};
  b.labels.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    auto src = data.features.row(rows[i]);
    std::copy(src.begin(), src.end(), b.inputs.row(i).begin());
    b.labels.push_back(data.labels[rows[i]]);
  }
  return b;
}

void split_train_test(Dataset& data, double test_fraction, std::uint64_t seed) {
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) {
    throw ConfigError("test fraction must lie in [0, 1)");
  }
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  const auto n_test = static_cast<std::size_t>(std::floor(test_fraction * static_cast<double>(order.size())));
  const std::size_t n_train = order.size() - n_test;
  data.train.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_train));
  data.test.assign(order.begin() + static_cast<std::ptrdiff_t>(n_train), order.end());
}

}  // namespace pchnet
