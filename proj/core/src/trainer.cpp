#include "pchnet/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <mutex>
#include <numeric>
#include <optional>
#include <string>
#include <thread>

#include "pchnet/error.hpp"
#include "pchnet/rng.hpp"

namespace pchnet {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5348554646ULL;

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

NewtonDirection negated_gradient(const LayerGradients& g) {
  NewtonDirection d;
  d.weight = g.weight;
  d.bias = g.bias;
  for (Matrix& w : d.weight) w *= -1.0;
  for (Vector& b : d.bias)
    for (double& x : b) x = -x;
  d.weight_iterations.assign(g.weight.size(), 0);
  d.bias_iterations.assign(g.bias.size(), 0);
  return d;
}

}  // namespace

std::string to_string(SolverKind s) { return s == SolverKind::EaCg ? "ea_cg" : "kfi"; }

SolverKind parse_solver_kind(const std::string& s) {
  if (s == "ea_cg") return SolverKind::EaCg;
  if (s == "kfi") return SolverKind::Kfi;
  throw ConfigError("unknown solver '" + s + "'");
}

void TrainConfig::validate() const {
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be a finite non-negative number");
  }
  if (batch_size < 1) throw ConfigError("batch size must be at least 1");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (const auto* so = std::get_if<SecondOrder>(&optimizer)) {
    so->curvature.validate();
    if (so->curvature.type == CurvatureKind::Type::TrueBlockDiag) {
      throw ConfigError("the exact block diagonal cannot drive training; pick pch1, pch2, gn or fisher");
    }
    so->solver_cfg.validate();
  } else {
    const double m = std::get<SgdMomentum>(optimizer).momentum;
    if (!(m >= 0.0 && m < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  }
}

std::string TrainConfig::optimizer_name() const {
  if (const auto* so = std::get_if<SecondOrder>(&optimizer)) {
    return so->curvature.name() + (so->solver == SolverKind::EaCg ? "+EA-CG" : "+KFI");
  }
  return "sgd";
}

FcnnModel initial_model(const std::vector<std::size_t>& widths, Activation activation,
                        std::uint64_t seed) {
  Rng rng(seed);
  return FcnnModel::xavier(widths, activation, rng);
}

double mean_loss(const FcnnModel& model, const Dataset& data, std::span<const std::size_t> rows,
                 const Criterion& criterion) {
  if (rows.empty()) return 0.0;
  const Batch b = gather(data, rows);
  const ForwardTrace trace = forward(model, b.inputs);
  return evaluate_batch(criterion, trace, b.labels, false).mean_loss;
}

double accuracy(const FcnnModel& model, const Dataset& data, std::span<const std::size_t> rows) {
  if (rows.empty()) return 0.0;
  const Batch b = gather(data, rows);
  const ForwardTrace trace = forward(model, b.inputs);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < b.labels.size(); ++i)
    if (argmax(trace.output().row(i)) == b.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(rows.size());
}

Trainer::Trainer(FcnnModel model, Criterion criterion, TrainConfig cfg)
    : model_(std::move(model)), criterion_(criterion), cfg_(std::move(cfg)) {
  cfg_.validate();
  criterion_.validate();
  for (std::size_t l = 0; l < model_.depth(); ++l) {
    weight_velocity_.emplace_back(model_.layer(l).weight.rows(), model_.layer(l).weight.cols());
    bias_velocity_.emplace_back(model_.layer(l).bias.size(), 0.0);
  }
}

NewtonDirection Trainer::direction(const Batch& batch) const {
  const ForwardTrace trace = forward(model_, batch.inputs);
  const auto* so = std::get_if<SecondOrder>(&cfg_.optimizer);
  if (so == nullptr) {
    const BatchObjective obj = evaluate_batch(criterion_, trace, batch.labels, false);
    return negated_gradient(backprop(model_, trace, obj.grad_out));
  }
  const CurvatureInputs in = curvature_inputs(model_, trace, criterion_, batch.labels);
  const LayerGradients grads = backprop(model_, trace, in.objective.grad_out);
  const std::vector<LayerCurvature> curv = ea_curvature(model_, trace, in, so->curvature);
  if (so->solver == SolverKind::EaCg) return ea_cg_direction(curv, grads, so->solver_cfg);
  return kfi_direction(curv, grads, so->solver_cfg.alpha, so->solver_cfg.pi_policy,
                       {so->kfi_sherman_morrison_first_layer});
}

void Trainer::step(const Batch& batch) {
  const NewtonDirection d = direction(batch);
  const double lr = cfg_.learning_rate;
  if (const auto* sgd = std::get_if<SgdMomentum>(&cfg_.optimizer)) {
    const double mu = sgd->momentum;
    for (std::size_t l = 0; l < model_.depth(); ++l) {
      DenseLayer& layer = model_.layer(l);
      auto vw = weight_velocity_[l].values();
      auto dw = d.weight[l].values();
      auto w = layer.weight.values();
      for (std::size_t i = 0; i < w.size(); ++i) {
        vw[i] = mu * vw[i] + lr * dw[i];
        w[i] += vw[i];
      }
      Vector& vb = bias_velocity_[l];
      for (std::size_t i = 0; i < vb.size(); ++i) {
        vb[i] = mu * vb[i] + lr * d.bias[l][i];
        layer.bias[i] += vb[i];
      }
    }
  } else {
    for (std::size_t l = 0; l < model_.depth(); ++l) {
      DenseLayer& layer = model_.layer(l);
      axpy(lr, d.weight[l].values(), layer.weight.values());
      axpy(lr, d.bias[l], layer.bias);
    }
  }
  ++steps_;
  if (!model_.all_finite()) {
    throw NumericalError("non-finite parameters after step " + std::to_string(steps_));
  }
}

std::vector<std::vector<std::size_t>> Trainer::epoch_batches(const Dataset& data,
                                                             std::size_t epoch) const {
  std::vector<std::size_t> order = data.train;
  Rng rng = Rng::derive(cfg_.seed ^ kShuffleStream, epoch);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t start = 0; start < order.size(); start += cfg_.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg_.batch_size);
    batches.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(start),
                         order.begin() + static_cast<std::ptrdiff_t>(end));
  }
  return batches;
}

TrainReport train(FcnnModel model, const Dataset& data, const Criterion& criterion,
                  const TrainConfig& cfg) {
  data.validate();
  if (model.input_width() != data.dim() || model.output_width() != data.num_classes) {
    throw ConfigError("model widths do not match dataset features/classes");
  }
  if (data.train.empty()) throw ConfigError("dataset has no training rows");

  Trainer trainer(std::move(model), criterion, cfg);
  std::vector<EpochMetrics> epochs;
  using clock = std::chrono::steady_clock;
  double elapsed = 0.0;

  auto record = [&](std::size_t epoch) {
    const double loss = mean_loss(trainer.model(), data, data.train, criterion);
    if (!std::isfinite(loss)) {
      throw NumericalError("training diverged: loss is not finite after epoch " +
                           std::to_string(epoch) + " (step " +
                           std::to_string(trainer.steps_taken()) + ")");
    }
    epochs.push_back({epoch, loss, accuracy(trainer.model(), data, data.test),
                      cfg.record_wall_time ? elapsed : 0.0});
  };

  record(0);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = clock::now();
    for (const auto& rows : trainer.epoch_batches(data, epoch)) {
      try {
        trainer.step(gather(data, rows));
      } catch (const NumericalError& e) {
        throw NumericalError("epoch " + std::to_string(epoch) + ", step " +
                             std::to_string(trainer.steps_taken() + 1) + ": " + e.what());
      }
    }
    elapsed += std::chrono::duration<double>(clock::now() - start).count();
    record(epoch);
  }

  const std::size_t steps = trainer.steps_taken();
  return TrainReport{std::move(epochs), std::move(trainer).release(), steps};
}

GridResult grid_search(const Dataset& data, const std::vector<std::size_t>& widths,
                       Activation activation, const Criterion& criterion, const TrainConfig& base,
                       const GridSpec& grid, std::size_t threads) {
  const bool second_order = std::holds_alternative<SecondOrder>(base.optimizer);
  if (grid.learning_rate.empty() || grid.batch_size.empty() ||
      (second_order && (grid.alpha.empty() || grid.max_cg.empty() || grid.eps_cg.empty()))) {
    throw ConfigError("grid_search: every grid axis needs at least one value");
  }

  std::vector<TrainConfig> configs;
  for (double lr : grid.learning_rate) {
    for (std::size_t bs : grid.batch_size) {
      TrainConfig cfg = base;
      cfg.learning_rate = lr;
      cfg.batch_size = bs;
      if (!second_order) {
        configs.push_back(cfg);
        continue;
      }
      for (double alpha : grid.alpha)
        for (std::size_t max_cg : grid.max_cg)
          for (double eps : grid.eps_cg) {
            auto& so = std::get<SecondOrder>(cfg.optimizer);
            so.solver_cfg.alpha = alpha;
            so.solver_cfg.max_cg = max_cg;
            so.solver_cfg.eps_cg = eps;
            configs.push_back(cfg);
          }
    }
  }
  for (const auto& cfg : configs) cfg.validate();

  std::vector<std::optional<TrainReport>> reports(configs.size());
  std::vector<std::string> failures(configs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  auto worker = [&] {
    for (std::size_t i = next++; i < configs.size(); i = next++) {
      try {
        reports[i] = train(initial_model(widths, activation, configs[i].seed), data, criterion,
                           configs[i]);
      } catch (const NumericalError& e) {
        failures[i] = e.what();
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(threads, 1, configs.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);

  GridResult result;
  for (std::size_t i = 0; i < configs.size(); ++i) {
    result.runs.push_back({configs[i], std::move(reports[i]), std::move(failures[i])});
  }
  auto final_metrics = [&](std::size_t i) -> const EpochMetrics& {
    return result.runs[i].report->epochs.back();
  };
  for (std::size_t i = 0; i < result.runs.size(); ++i) {
    if (!result.runs[i].report) continue;
    const EpochMetrics& cur = final_metrics(i);
    if (!result.best_by_loss || cur.loss < final_metrics(*result.best_by_loss).loss) {
      result.best_by_loss = i;
    }
    if (!result.best_by_accuracy || cur.test_acc > final_metrics(*result.best_by_accuracy).test_acc) {
      result.best_by_accuracy = i;
    }
  }
  return result;
}

}  // namespace pchnet
