#include "pchnet/curvature.hpp"

#include <cmath>
#include <string>

#include "pchnet/error.hpp"
#include "pchnet/linalg.hpp"

namespace pchnet {

namespace {

double inverse_batch(const ForwardTrace& trace) {
  if (trace.batch_size() == 0) throw DimensionError("curvature: empty batch");
  return 1.0 / static_cast<double>(trace.batch_size());
}

void check_inputs(const FcnnModel& model, const ForwardTrace& trace, const CurvatureInputs& in) {
  const std::size_t k = model.depth();
  if (trace.depth() != k) throw DimensionError("curvature: trace depth does not match model");
  if (in.bias_grads.size() != k || in.objective.hess.size() != trace.batch_size()) {
    throw DimensionError("curvature: inputs do not match the trace (were Hessians requested?)");
  }
}

/// W^T H W for the weight of layer l.
Matrix sandwich(const Matrix& weight, const Matrix& hb) {
  Matrix m = matmul_tn(weight, matmul(hb, weight));
  symmetrize(m);
  return m;
}

/// E_i[h''_{l,i} .* (W_l^T g_{l,i})] for 1 <= l < depth.
Vector expected_diagonal_term(const FcnnModel& model, const ForwardTrace& trace,
                              const CurvatureInputs& in, std::size_t l) {
  const Matrix back = matmul(in.bias_grads[l], model.layer(l).weight);  // batch x n_l
  const Matrix& hdd = trace.hdprime[l];
  Vector d(back.cols(), 0.0);
  for (std::size_t i = 0; i < back.rows(); ++i)
    for (std::size_t j = 0; j < back.cols(); ++j) d[j] += hdd(i, j) * back(i, j);
  const double inv = inverse_batch(trace);
  for (double& x : d) x *= inv;
  return d;
}

Matrix second_moment(const Matrix& rows, double inv_batch) {
  Matrix m = matmul_tn(rows, rows);
  m *= inv_batch;
  symmetrize(m);
  return m;
}

Vector column_mean(const Matrix& rows, double inv_batch) {
  Vector m(rows.cols(), 0.0);
  for (std::size_t i = 0; i < rows.rows(); ++i) axpy(1.0, rows.row(i), m);
  for (double& x : m) x *= inv_batch;
  return m;
}

std::vector<Matrix> instance_recursion(const FcnnModel& model, const ForwardTrace& trace,
                                       const CurvatureInputs& in, std::size_t i,
                                       const RecursionTerms& terms) {
  const std::size_t k = model.depth();
  std::vector<Matrix> blocks(k);
  blocks[k - 1] = in.objective.hess[i];
  if (terms.pos_eig_gamma) blocks[k - 1] = pos_eig(blocks[k - 1], *terms.pos_eig_gamma);
  for (std::size_t l = k - 1; l > 0; --l) {
    const Matrix& w = model.layer(l).weight;
    Matrix h = sandwich(w, blocks[l]);
    auto hp = trace.hprime[l].row(i);
    for (std::size_t a = 0; a < h.rows(); ++a)
      for (std::size_t b = 0; b < h.cols(); ++b) h(a, b) = hp[a] * h(a, b) * hp[b];
    if (terms.diagonal_term) {
      Vector d = matvec_t(w, in.bias_grads[l].row(i));
      auto hdd = trace.hdprime[l].row(i);
      for (std::size_t a = 0; a < d.size(); ++a) d[a] *= hdd[a];
      if (terms.pos_eig_gamma) d = pos_eig_diagonal(d, *terms.pos_eig_gamma);
      for (std::size_t a = 0; a < d.size(); ++a) h(a, a) += d[a];
    }
    blocks[l - 1] = std::move(h);
  }
  return blocks;
}

}  // namespace

std::string CurvatureKind::name() const {
  switch (type) {
    case Type::TrueBlockDiag: return "True";
    case Type::GaussNewton: return "GN";
    case Type::Fisher: return "Fisher";
    case Type::Pch: return gamma == 0.0 ? "PCH-2" : (gamma == -1.0 ? "PCH-1" : "PCH");
  }
  return "?";
}

CurvatureKind CurvatureKind::parse(const std::string& name) {
  if (name == "pch1" || name == "PCH-1") return pch1();
  if (name == "pch2" || name == "PCH-2") return pch2();
  if (name == "gn" || name == "GN" || name == "gauss_newton") return gauss_newton();
  if (name == "fisher" || name == "Fisher") return fisher();
  if (name == "true" || name == "True") return true_block_diag();
  throw ConfigError("unknown curvature kind '" + name + "'");
}

void CurvatureKind::validate() const {
  if (type == Type::Pch && gamma != -1.0 && gamma != 0.0) {
    throw ConfigError("PCH gamma must be -1 or 0, got " + std::to_string(gamma));
  }
}

CurvatureInputs curvature_inputs(const FcnnModel& model, const ForwardTrace& trace,
                                 const Criterion& criterion, std::span<const std::size_t> labels) {
  CurvatureInputs in;
  in.objective = evaluate_batch(criterion, trace, labels, /*with_hessian=*/true);
  in.bias_grads = bias_gradients(model, trace, in.objective.grad_out);
  return in;
}

std::vector<Matrix> instance_bias_hessian(const FcnnModel& model, const ForwardTrace& trace,
                                          const CurvatureInputs& inputs, std::size_t instance) {
  check_inputs(model, trace, inputs);
  if (instance >= trace.batch_size()) throw DimensionError("instance out of range");
  return instance_recursion(model, trace, inputs, instance,
                            {Propagation::PerInstance, true, std::nullopt});
}

std::vector<Matrix> propagate_bias_hessian(const FcnnModel& model, const ForwardTrace& trace,
                                           const CurvatureInputs& inputs,
                                           const RecursionTerms& terms) {
  check_inputs(model, trace, inputs);
  const std::size_t k = model.depth();
  const std::size_t batch = trace.batch_size();
  const double inv = inverse_batch(trace);

  if (terms.propagation == Propagation::PerInstance) {
    std::vector<Matrix> mean;
    for (std::size_t i = 0; i < batch; ++i) {
      std::vector<Matrix> blocks = instance_recursion(model, trace, inputs, i, terms);
      if (i == 0) {
        mean = std::move(blocks);
      } else {
        for (std::size_t l = 0; l < k; ++l) mean[l] += blocks[l];
      }
    }
    for (Matrix& m : mean) m *= inv;
    return mean;
  }

  std::vector<Matrix> blocks(k);
  Matrix top = inputs.objective.hess[0];
  for (std::size_t i = 1; i < batch; ++i) top += inputs.objective.hess[i];
  top *= inv;
  symmetrize(top);
  blocks[k - 1] = terms.pos_eig_gamma ? pos_eig(top, *terms.pos_eig_gamma) : std::move(top);

  for (std::size_t l = k - 1; l > 0; --l) {
    Matrix h = hadamard(sandwich(model.layer(l).weight, blocks[l]),
                        second_moment(trace.hprime[l], inv));
    if (terms.diagonal_term) {
      Vector d = expected_diagonal_term(model, trace, inputs, l);
      if (terms.pos_eig_gamma) d = pos_eig_diagonal(d, *terms.pos_eig_gamma);
      for (std::size_t a = 0; a < d.size(); ++a) h(a, a) += d[a];
    }
    blocks[l - 1] = std::move(h);
  }
  return blocks;
}

std::vector<Matrix> true_bias_hessian(const FcnnModel& model, const ForwardTrace& trace,
                                      const Criterion& criterion,
                                      std::span<const std::size_t> labels) {
  const CurvatureInputs in = curvature_inputs(model, trace, criterion, labels);
  return propagate_bias_hessian(model, trace, in, {Propagation::PerInstance, true, std::nullopt});
}

std::vector<LayerCurvature> ea_curvature(const FcnnModel& model, const ForwardTrace& trace,
                                         const CurvatureInputs& inputs, CurvatureKind kind) {
  kind.validate();
  check_inputs(model, trace, inputs);
  const std::size_t k = model.depth();
  const double inv = inverse_batch(trace);

  std::vector<Matrix> hb;
  switch (kind.type) {
    case CurvatureKind::Type::TrueBlockDiag:
      throw ConfigError("ea_curvature: use true_bias_hessian for the exact block diagonal");
    case CurvatureKind::Type::Pch:
      hb = propagate_bias_hessian(model, trace, inputs,
                                  {Propagation::Expectation, true, kind.gamma});
      break;
    case CurvatureKind::Type::GaussNewton:
      hb = propagate_bias_hessian(model, trace, inputs,
                                  {Propagation::Expectation, false, std::nullopt});
      break;
    case CurvatureKind::Type::Fisher:
      hb.reserve(k);
      for (std::size_t l = 0; l < k; ++l) hb.push_back(second_moment(inputs.bias_grads[l], inv));
      break;
  }

  std::vector<LayerCurvature> out(k);
  for (std::size_t l = 0; l < k; ++l) {
    LayerCurvature& c = out[l];
    c.hb = std::move(hb[l]);
    c.ehht = second_moment(trace.h[l], inv);
    c.eh = column_mean(trace.h[l], inv);
    if (l > 0) {
      c.ehht_prime = second_moment(trace.hprime[l], inv);
      c.diag_term = expected_diagonal_term(model, trace, inputs, l);
    }
  }
  return out;
}

std::vector<LayerCurvature> ea_curvature(const FcnnModel& model, const ForwardTrace& trace,
                                         const Criterion& criterion,
                                         std::span<const std::size_t> labels, CurvatureKind kind) {
  if (kind.type == CurvatureKind::Type::TrueBlockDiag) {
    throw ConfigError("ea_curvature: use true_bias_hessian for the exact block diagonal");
  }
  return ea_curvature(model, trace, curvature_inputs(model, trace, criterion, labels), kind);
}

ErrorReport layerwise_error(std::span<const Matrix> approx, std::span<const Matrix> exact) {
  if (approx.size() != exact.size()) throw DimensionError("layerwise_error: layer count mismatch");
  ErrorReport report;
  report.per_layer.reserve(exact.size());
  double sum_sq = 0.0;
  for (std::size_t l = 0; l < exact.size(); ++l) {
    if (approx[l].rows() != exact[l].rows() || approx[l].cols() != exact[l].cols()) {
      throw DimensionError("layerwise_error: block shape mismatch at layer " + std::to_string(l));
    }
    const double e = frobenius_norm(approx[l] - abs_eig(exact[l]));
    report.per_layer.push_back(e);
    sum_sq += e * e;
  }
  report.total = std::sqrt(sum_sq);
  return report;
}

BoundCheck covariance_bound_check(const FcnnModel& model, const ForwardTrace& trace,
                                  const Criterion& criterion,
                                  std::span<const std::size_t> labels, std::size_t layer,
                                  double lipschitz) {
  const std::size_t batch = trace.batch_size();
  if (batch < 2) throw ConfigError("covariance_bound_check: batch size must be at least 2");
  if (layer == 0 || layer >= model.depth()) {
    throw ConfigError("covariance_bound_check: layer must lie in [1, " +
                      std::to_string(model.depth() - 1) + "]");
  }
  if (!(lipschitz > 0.0)) throw ConfigError("covariance_bound_check: Lipschitz constant must be positive");

  const CurvatureInputs in = curvature_inputs(model, trace, criterion, labels);
  const Matrix& w = model.layer(layer).weight;
  const double inv = 1.0 / static_cast<double>(batch);

  std::vector<Matrix> a;
  std::vector<Matrix> b;
  a.reserve(batch);
  b.reserve(batch);
  for (std::size_t i = 0; i < batch; ++i) {
    const std::vector<Matrix> blocks = instance_bias_hessian(model, trace, in, i);
    a.push_back(sandwich(w, blocks[layer]));
    b.push_back(outer(trace.hprime[layer].row(i), trace.hprime[layer].row(i)));
  }
  Matrix mean_a = a[0];
  Matrix mean_b = b[0];
  for (std::size_t i = 1; i < batch; ++i) {
    mean_a += a[i];
    mean_b += b[i];
  }
  mean_a *= inv;
  mean_b *= inv;

  const std::size_t n = mean_a.rows();
  BoundCheck out;
  double var_sum = 0.0;
  for (std::size_t mu = 0; mu < n; ++mu) {
    for (std::size_t nu = 0; nu < n; ++nu) {
      double cov = 0.0;
      double var = 0.0;
      for (std::size_t i = 0; i < batch; ++i) {
        const double da = a[i](mu, nu) - mean_a(mu, nu);
        const double db = b[i](mu, nu) - mean_b(mu, nu);
        cov += da * db;
        var += da * da;
      }
      cov *= inv;
      out.lhs += cov * cov;
      var_sum += var * inv;
    }
  }
  const double l2 = lipschitz * lipschitz;
  out.rhs = l2 * l2 * var_sum;
  return out;
}

}  // namespace pchnet
