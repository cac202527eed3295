#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "pchnet/curvature.hpp"
#include "pchnet/data_io.hpp"
#include "pchnet/dataset.hpp"
#include "pchnet/fcnn.hpp"
#include "pchnet/trainer.hpp"

namespace pchnet {

struct DatasetSource {
  enum class Kind { Blobs, Idx, Csv };

  Kind kind = Kind::Blobs;
  // blobs
  std::size_t classes = 2;
  std::size_t dim = 2;
  std::size_t per_class = 100;
  double spread = 0.05;
  std::uint64_t seed = 1;
  // idx
  std::string images;
  std::string labels;
  // csv
  std::string path;
  CsvOptions csv;

  double test_fraction = 0.2;
};

struct BoundCheckSpec {
  /// 1-based layer number t (2..k); empty means every admissible layer.
  std::optional<std::size_t> layer;
  /// Defaults to the activation's constant.
  std::optional<double> lipschitz;
  std::size_t batch_size = 8;
};

/// Hidden widths of the default desk-scale network (8 layers with the output).
const std::vector<std::size_t>& default_hidden_widths();

/// One JSON document describing a run. See README for the schema.
struct ExperimentSpec {
  /// Full widths n_0..n_k; empty selects n_0 = dataset dim, the default
  /// hidden widths and n_k = class count.
  std::vector<std::size_t> architecture;
  Activation activation = Activation::Sigmoid;
  Criterion criterion;
  DatasetSource dataset;
  TrainConfig train;
  GridSpec grid;
  /// Number of optimizer steps s averaged in the curvature comparison.
  std::size_t compare_steps = 10;
  BoundCheckSpec bound_check;

  /// Resolves the architecture against the dataset; throws ConfigError when
  /// the widths disagree with the data.
  std::vector<std::size_t> widths_for(const Dataset& data) const;
};

/// Throws ConfigError on malformed JSON or invalid values.
ExperimentSpec parse_experiment_spec(std::string_view json_text);
ExperimentSpec load_experiment_spec(const std::filesystem::path& path);

/// Loads or generates the data and applies the train/test split.
Dataset load_dataset(const DatasetSource& source);

/// {"epoch":..,"loss":..,"test_acc":..,"wall_s":..} per line.
std::string metrics_jsonl(const TrainReport& report);
std::string train_summary_csv(const TrainConfig& cfg, const TrainReport& report);
std::string grid_summary_csv(const GridResult& result);

/// Averaged layer-wise errors of each approximation against the exact
/// block-diagonal Hessian.
struct CurvatureTable {
  std::vector<std::string> methods;       // column order, e.g. Fisher, GN, PCH-1, PCH-2
  std::vector<std::vector<double>> error; // [method][layer], mean over steps
  std::vector<double> total;              // [method], sqrt(sum_l error^2)
  std::size_t steps = 0;

  /// Header "layer,<methods...>", rows "Layer-1".."Layer-k", then "Total".
  std::string to_csv() const;
};

/// Trains `spec.compare_steps` steps with the configured optimizer; before
/// every step compares the exact block diagonal on that mini-batch with the
/// Fisher, Gauss-Newton (convex criteria only), PCH-1 and PCH-2 blocks.
CurvatureTable compare_curvatures(const ExperimentSpec& spec, const Dataset& data);

struct BoundCheckRow {
  std::size_t layer = 0;  // 1-based layer number t
  BoundCheck check;
};

/// Covariance bound at the initial model on the first bound_check.batch_size training rows.
std::vector<BoundCheckRow> run_bound_check(const ExperimentSpec& spec, const Dataset& data);

}  // namespace pchnet
