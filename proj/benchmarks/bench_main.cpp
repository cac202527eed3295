#include <benchmark/benchmark.h>

#include "pchnet/curvature.hpp"
#include "pchnet/linalg.hpp"
#include "pchnet/solvers.hpp"

using namespace pchnet;

namespace {

struct Setup {
  FcnnModel model;
  ForwardTrace trace;
  std::vector<std::size_t> labels;
};

Setup make_setup(std::vector<std::size_t> widths, std::size_t batch) {
  Rng rng(7);
  FcnnModel model = FcnnModel::xavier(std::move(widths), Activation::Sigmoid, rng);
  Matrix x(batch, model.input_width());
  for (double& v : x.values()) v = rng.uniform();
  std::vector<std::size_t> y(batch);
  for (auto& c : y) c = rng.below(model.output_width());
  ForwardTrace trace = forward(model, x);
  return {std::move(model), std::move(trace), std::move(y)};
}

LayerCurvature single_layer(std::size_t n_in, std::size_t n_out) {
  const Setup s = make_setup({n_in, n_out}, 32);
  return ea_curvature(s.model, s.trace, Criterion::cross_entropy(), s.labels, CurvatureKind::pch1())[0];
}

void weight_hvp(benchmark::State& state, HvpMode mode) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const LayerCurvature c = single_layer(n, n);
  const LinearOperator op = damped_weight_operator(c, 0.05, mode);
  Vector v(op.dim, 1.0), out(op.dim);
  for (auto _ : state) {
    op.apply(v, out);
    benchmark::DoNotOptimize(out.data());
  }
}
BENCHMARK_CAPTURE(weight_hvp, exact_kron, HvpMode::ExactKron)->RangeMultiplier(2)->Range(8, 128);
BENCHMARK_CAPTURE(weight_hvp, ea_one_rank, HvpMode::EaOneRank)->RangeMultiplier(2)->Range(8, 128);

void curvature(benchmark::State& state, CurvatureKind kind) {
  const Setup s = make_setup({64, 32, 16, 16, 8, 8, 8, 8, 10}, static_cast<std::size_t>(state.range(0)));
  const CurvatureInputs in = curvature_inputs(s.model, s.trace, Criterion::cross_entropy(), s.labels);
  for (auto _ : state) benchmark::DoNotOptimize(ea_curvature(s.model, s.trace, in, kind));
}
BENCHMARK_CAPTURE(curvature, pch1, CurvatureKind::pch1())->Arg(32)->Arg(128);
BENCHMARK_CAPTURE(curvature, gauss_newton, CurvatureKind::gauss_newton())->Arg(32)->Arg(128);
BENCHMARK_CAPTURE(curvature, fisher, CurvatureKind::fisher())->Arg(32)->Arg(128);

void true_blocks(benchmark::State& state) {
  const Setup s = make_setup({64, 32, 16, 16, 8, 8, 8, 8, 10}, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state)
    benchmark::DoNotOptimize(true_bias_hessian(s.model, s.trace, Criterion::cross_entropy(), s.labels));
}
BENCHMARK(true_blocks)->Arg(32)->Arg(128);

void jacobi(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(3);
  Matrix a(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) a(i, j) = a(j, i) = rng.uniform(-1.0, 1.0);
  for (auto _ : state) benchmark::DoNotOptimize(sym_eig(a));
}
BENCHMARK(jacobi)->RangeMultiplier(2)->Range(8, 64);

void solver(benchmark::State& state, bool kfi) {
  const Setup s = make_setup({64, 32, 16, 16, 8, 8, 8, 8, 10}, 64);
  const Criterion crit = Criterion::cross_entropy();
  const auto curv = ea_curvature(s.model, s.trace, crit, s.labels, CurvatureKind::pch1());
  const LayerGradients grads = backprop(s.model, s.trace, evaluate_batch(crit, s.trace, s.labels, false).grad_out);
  const SolverConfig cfg;
  for (auto _ : state) {
    if (kfi) benchmark::DoNotOptimize(kfi_direction(curv, grads, cfg.alpha, cfg.pi_policy));
    else benchmark::DoNotOptimize(ea_cg_direction(curv, grads, cfg));
  }
}
BENCHMARK_CAPTURE(solver, ea_cg, false);
BENCHMARK_CAPTURE(solver, kfi, true);

}  // namespace

BENCHMARK_MAIN();
