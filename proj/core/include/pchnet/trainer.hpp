#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "pchnet/curvature.hpp"
#include "pchnet/dataset.hpp"
#include "pchnet/fcnn.hpp"
#include "pchnet/solvers.hpp"

namespace pchnet {

/// Classical momentum: v <- momentum v - lr g, theta <- theta + v.
struct SgdMomentum {
  double momentum = 0.9;
};

enum class SolverKind { EaCg, Kfi };

std::string to_string(SolverKind s);
SolverKind parse_solver_kind(const std::string& s);

/// theta <- theta + lr d with d from a block-curvature Newton solve,
/// curvature recomputed on every mini-batch.
struct SecondOrder {
  CurvatureKind curvature = CurvatureKind::pch1();
  SolverKind solver = SolverKind::EaCg;
  SolverConfig solver_cfg;
  bool kfi_sherman_morrison_first_layer = false;
};

using Optimizer = std::variant<SgdMomentum, SecondOrder>;

struct TrainConfig {
  double learning_rate = 0.1;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  std::uint64_t seed = 0;
  Optimizer optimizer = SgdMomentum{};
  /// Off by default: every wall_s is then 0 and metrics files are
  /// reproducible byte for byte.
  bool record_wall_time = false;

  void validate() const;
  /// e.g. "sgd", "PCH-1+EA-CG", "Fisher+KFI".
  std::string optimizer_name() const;
};

struct EpochMetrics {
  std::size_t epoch = 0;  // 0 is the untrained model
  double loss = 0.0;      // mean criterion over the training rows
  double test_acc = 0.0;
  double wall_s = 0.0;    // cumulative training time
};

struct TrainReport {
  std::vector<EpochMetrics> epochs;
  FcnnModel model;
  std::size_t steps = 0;
};

/// Xavier-initialized model drawn from `seed`.
FcnnModel initial_model(const std::vector<std::size_t>& widths, Activation activation,
                        std::uint64_t seed);

double mean_loss(const FcnnModel& model, const Dataset& data, std::span<const std::size_t> rows,
                 const Criterion& criterion);
/// Fraction of rows whose arg-max output equals the label; 0 for no rows.
double accuracy(const FcnnModel& model, const Dataset& data, std::span<const std::size_t> rows);

/// Owns a model and the optimizer state; one call to step() is one update.
class Trainer {
 public:
  Trainer(FcnnModel model, Criterion criterion, TrainConfig cfg);

  /// Applies one update from `batch`. Throws NumericalError when the update
  /// produces non-finite parameters.
  void step(const Batch& batch);

  /// The update direction step() would apply (before scaling by the learning
  /// rate); for SGD this is the negative gradient.
  NewtonDirection direction(const Batch& batch) const;

  /// Shuffled mini-batches of the training rows for `epoch` (1-based).
  std::vector<std::vector<std::size_t>> epoch_batches(const Dataset& data, std::size_t epoch) const;

  const FcnnModel& model() const noexcept { return model_; }
  FcnnModel release() && { return std::move(model_); }
  const TrainConfig& config() const noexcept { return cfg_; }
  std::size_t steps_taken() const noexcept { return steps_; }

 private:
  FcnnModel model_;
  Criterion criterion_;
  TrainConfig cfg_;
  std::vector<Matrix> weight_velocity_;
  std::vector<Vector> bias_velocity_;
  std::size_t steps_ = 0;
};

/// Trains for cfg.epochs epochs and records metrics after every epoch (and
/// for the initial model as epoch 0). Divergence raises NumericalError with
/// the epoch and step.
TrainReport train(FcnnModel model, const Dataset& data, const Criterion& criterion,
                  const TrainConfig& cfg);

struct GridSpec {
  std::vector<double> learning_rate;
  std::vector<std::size_t> batch_size;
  /// The remaining axes only apply to second-order optimizers.
  std::vector<double> alpha;
  std::vector<std::size_t> max_cg;
  std::vector<double> eps_cg;
};

struct GridRun {
  TrainConfig config;
  /// Empty when the run diverged; `failure` then holds the reason.
  std::optional<TrainReport> report;
  std::string failure;
};

struct GridResult {
  std::vector<GridRun> runs;
  /// Indices into `runs`; empty when every run diverged.
  std::optional<std::size_t> best_by_loss;
  std::optional<std::size_t> best_by_accuracy;
};

/// Cartesian product over the grid, every run starting from the same seeded
/// model. Runs are ordered with learning_rate varying slowest and eps_cg
/// fastest regardless of `threads`. An empty axis is a ConfigError; a run
/// that diverges is recorded as failed and the search continues.
GridResult grid_search(const Dataset& data, const std::vector<std::size_t>& widths,
                       Activation activation, const Criterion& criterion, const TrainConfig& base,
                       const GridSpec& grid, std::size_t threads = 1);

}  // namespace pchnet
