#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "oracles.hpp"
#include "pchnet/data_io.hpp"
#include "pchnet/error.hpp"
#include "pchnet/trainer.hpp"

using namespace pchnet;

namespace {

Dataset blobs(std::uint64_t seed = 3, std::size_t per_class = 40) {
  Dataset d = synth_blobs(2, 2, per_class, 0.05, seed);
  split_train_test(d, 0.25, seed);
  return d;
}

TrainConfig second_order(CurvatureKind kind, SolverKind solver, double lr, double alpha) {
  TrainConfig cfg;
  cfg.learning_rate = lr;
  cfg.batch_size = 16;
  cfg.epochs = 5;
  cfg.seed = 9;
  cfg.record_wall_time = false;
  SecondOrder so;
  so.curvature = kind;
  so.solver = solver;
  so.solver_cfg.alpha = alpha;
  cfg.optimizer = so;
  return cfg;
}

const std::vector<std::size_t> kWidths{2, 6, 4, 2};

}  // namespace

TEST_CASE("config validation") {
  TrainConfig cfg;
  CHECK_NOTHROW(cfg.validate());
  cfg.batch_size = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.epochs = 0;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = {};
  cfg.learning_rate = -0.1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = second_order(CurvatureKind::true_block_diag(), SolverKind::EaCg, 0.1, 0.1);
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(second_order(CurvatureKind::fisher(), SolverKind::Kfi, 0.1, 0.1).optimizer_name() == "Fisher+KFI");
  CHECK(TrainConfig{}.optimizer_name() == "sgd");
}

TEST_CASE("zero learning rate leaves the parameters unchanged") {
  const Dataset data = blobs();
  const FcnnModel init = initial_model(kWidths, Activation::Sigmoid, 1);
  for (TrainConfig cfg : {TrainConfig{}, second_order(CurvatureKind::pch1(), SolverKind::EaCg, 0.0, 0.1),
                          second_order(CurvatureKind::fisher(), SolverKind::Kfi, 0.0, 0.1)}) {
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    const TrainReport r = train(init, data, Criterion::cross_entropy(), cfg);
    CHECK(r.model.parameters() == init.parameters());
    CHECK(r.steps > 0);
  }
}

TEST_CASE("SGD with zero momentum is plain gradient descent") {
  const Dataset data = blobs();
  const FcnnModel init = initial_model(kWidths, Activation::Sigmoid, 2);
  TrainConfig cfg;
  cfg.optimizer = SgdMomentum{0.0};
  cfg.learning_rate = 0.3;
  Trainer trainer(init, Criterion::cross_entropy(), cfg);
  FcnnModel manual = init;
  for (const auto& rows : trainer.epoch_batches(data, 1)) {
    const Batch b = gather(data, rows);
    const ForwardTrace t = forward(manual, b.inputs);
    const BatchObjective obj = evaluate_batch(Criterion::cross_entropy(), t, b.labels, false);
    const LayerGradients g = backprop(manual, t, obj.grad_out);
    for (std::size_t l = 0; l < manual.depth(); ++l) {
      auto w = manual.layer(l).weight.values();
      for (std::size_t i = 0; i < w.size(); ++i) w[i] += 0.3 * -g.weight[l].values()[i];
      for (std::size_t i = 0; i < g.bias[l].size(); ++i) manual.layer(l).bias[i] += 0.3 * -g.bias[l][i];
    }
    trainer.step(b);
    CHECK(trainer.model().parameters() == manual.parameters());
  }
}

TEST_CASE("SGD momentum accumulates velocity") {
  const Dataset data = blobs();
  const FcnnModel init = initial_model(kWidths, Activation::Sigmoid, 2);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  Trainer trainer(init, Criterion::cross_entropy(), cfg);
  const auto batches = trainer.epoch_batches(data, 1);
  const Batch b0 = gather(data, batches[0]), b1 = gather(data, batches[1]);
  const Vector d0 = trainer.direction(b0).flatten();
  trainer.step(b0);
  const Vector theta1 = trainer.model().parameters();
  const Vector d1 = trainer.direction(b1).flatten();
  trainer.step(b1);
  const Vector theta2 = trainer.model().parameters();
  for (std::size_t i = 0; i < theta2.size(); ++i) {
    const double v1 = 0.1 * d0[i];
    const double v2 = 0.9 * v1 + 0.1 * d1[i];
    CHECK(theta2[i] == doctest::Approx(theta1[i] + v2).epsilon(1e-14));
  }
}

TEST_CASE("heavily damped second-order direction approaches the negative gradient") {
  const Dataset data = blobs();
  const FcnnModel init = initial_model(kWidths, Activation::Sigmoid, 4);
  for (SolverKind solver : {SolverKind::EaCg}) {
    const TrainConfig cfg = second_order(CurvatureKind::pch1(), solver, 0.1, 0.999);
    Trainer so(init, Criterion::cross_entropy(), cfg);
    Trainer sgd(init, Criterion::cross_entropy(), TrainConfig{});
    const Batch b = gather(data, so.epoch_batches(data, 1).front());
    const Vector d = so.direction(b).flatten();
    const Vector g = sgd.direction(b).flatten();
    Vector diff(d.size());
    for (std::size_t i = 0; i < d.size(); ++i) diff[i] = d[i] - g[i];
    CHECK(oracle::norm(diff) <= 1e-2 * oracle::norm(g));
  }
}

TEST_CASE("epoch batches partition the training rows") {
  const Dataset data = blobs(5, 33);
  TrainConfig cfg;
  cfg.batch_size = 7;
  Trainer t(initial_model(kWidths, Activation::Sigmoid, 1), Criterion::cross_entropy(), cfg);
  const auto e1 = t.epoch_batches(data, 1);
  const auto e2 = t.epoch_batches(data, 2);
  std::multiset<std::size_t> seen;
  for (const auto& b : e1) {
    CHECK(b.size() <= 7);
    seen.insert(b.begin(), b.end());
  }
  CHECK(seen == std::multiset<std::size_t>(data.train.begin(), data.train.end()));
  CHECK(e1 != e2);
  CHECK(e1 == t.epoch_batches(data, 1));
}

TEST_CASE("training is bit-identical for equal seeds") {
  const Dataset data = blobs();
  for (const TrainConfig& cfg :
       {second_order(CurvatureKind::pch1(), SolverKind::EaCg, 0.2, 0.05),
        second_order(CurvatureKind::fisher(), SolverKind::Kfi, 0.2, 0.05)}) {
    const auto a = train(initial_model(kWidths, Activation::Sigmoid, 7), data, Criterion::sigmoid_gate(), cfg);
    const auto b = train(initial_model(kWidths, Activation::Sigmoid, 7), data, Criterion::sigmoid_gate(), cfg);
    REQUIRE(a.epochs.size() == b.epochs.size());
    for (std::size_t e = 0; e < a.epochs.size(); ++e) {
      CHECK(a.epochs[e].loss == b.epochs[e].loss);
      CHECK(a.epochs[e].test_acc == b.epochs[e].test_acc);
      CHECK(a.epochs[e].wall_s == 0.0);
    }
    CHECK(a.model.parameters() == b.model.parameters());
  }
}

TEST_CASE("SGD on separable blobs") {
  const Dataset data = blobs(3, 50);
  TrainConfig cfg;
  cfg.learning_rate = 0.1;
  cfg.batch_size = 10;
  cfg.epochs = 50;
  cfg.record_wall_time = false;
  const TrainReport r = train(initial_model({2, 8, 2}, Activation::Sigmoid, 3), data, Criterion::cross_entropy(), cfg);
  REQUIRE(r.epochs.size() == 51);
  for (std::size_t e = 1; e <= 10; ++e) CHECK(r.epochs[e].loss < r.epochs[e - 1].loss);
  CHECK(accuracy(r.model, data, data.train) == 1.0);
  for (const auto& m : r.epochs) {
    CHECK(std::isfinite(m.loss));
    CHECK(m.test_acc >= 0.0);
    CHECK(m.test_acc <= 1.0);
  }
}

TEST_CASE("divergence aborts with epoch and step context") {
  const Dataset data = blobs();
  TrainConfig cfg;
  cfg.learning_rate = 1e305;
  try {
    train(initial_model(kWidths, Activation::ReLU, 1), data, Criterion::cross_entropy(), cfg);
    FAIL("expected NumericalError");
  } catch (const NumericalError& e) {
    const std::string what = e.what();
    CHECK(what.find("epoch 1") != std::string::npos);
    CHECK(what.find("step") != std::string::npos);
  }
}

TEST_CASE("grid search") {
  const Dataset data = blobs();
  const Criterion ce = Criterion::cross_entropy();
  SUBCASE("singleton grid equals train") {
    const TrainConfig base = second_order(CurvatureKind::pch1(), SolverKind::EaCg, 0.1, 0.05);
    GridSpec grid{{0.1}, {16}, {0.05}, {10}, {1e-5}};
    const GridResult g = grid_search(data, kWidths, Activation::Sigmoid, ce, base, grid);
    const TrainReport r = train(initial_model(kWidths, Activation::Sigmoid, base.seed), data, ce, base);
    REQUIRE(g.runs.size() == 1);
    CHECK(g.runs[0].report->model.parameters() == r.model.parameters());
    CHECK(*g.best_by_loss == 0);
  }
  SUBCASE("2x2 grid enumerates deterministically across thread counts") {
    TrainConfig base;
    base.epochs = 2;
    base.record_wall_time = false;
    GridSpec grid{{0.05, 0.2}, {8, 16}, {}, {}, {}};
    const GridResult one = grid_search(data, kWidths, Activation::Sigmoid, ce, base, grid, 1);
    const GridResult four = grid_search(data, kWidths, Activation::Sigmoid, ce, base, grid, 4);
    REQUIRE(one.runs.size() == 4);
    CHECK(one.runs[1].config.learning_rate == 0.05);
    CHECK(one.runs[1].config.batch_size == 16);
    CHECK(one.runs[2].config.learning_rate == 0.2);
    for (std::size_t i = 0; i < 4; ++i)
      CHECK(one.runs[i].report->model.parameters() == four.runs[i].report->model.parameters());
    CHECK(one.best_by_loss == four.best_by_loss);
  }
  SUBCASE("published grid sizes") {
    TrainConfig base = second_order(CurvatureKind::pch1(), SolverKind::EaCg, 0.1, 0.05);
    base.epochs = 1;
    GridSpec grid{{0.05, 0.1, 0.2}, {32}, {0.01, 0.02, 0.05, 0.1}, {10}, {1e-5}};
    CHECK(grid_search(data, kWidths, Activation::Sigmoid, ce, base, grid, 4).runs.size() == 12);
  }
  SUBCASE("empty axis") {
    GridSpec grid{{}, {16}, {}, {}, {}};
    CHECK_THROWS_AS(grid_search(data, kWidths, Activation::Sigmoid, ce, TrainConfig{}, grid), ConfigError);
    const TrainConfig so = second_order(CurvatureKind::pch1(), SolverKind::EaCg, 0.1, 0.05);
    GridSpec no_alpha{{0.1}, {16}, {}, {10}, {1e-5}};
    CHECK_THROWS_AS(grid_search(data, kWidths, Activation::Sigmoid, ce, so, no_alpha), ConfigError);
  }
  SUBCASE("a diverging run is recorded and the rest continue") {
    TrainConfig base;
    base.epochs = 1;
    GridSpec grid{{0.1, 1e305}, {16}, {}, {}, {}};
    const GridResult g = grid_search(data, kWidths, Activation::ReLU, ce, base, grid);
    CHECK(g.runs[0].report.has_value());
    CHECK_FALSE(g.runs[1].report.has_value());
    CHECK_FALSE(g.runs[1].failure.empty());
    CHECK(*g.best_by_loss == 0);
  }
}
