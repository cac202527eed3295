#include "pchnet/solvers.hpp"

#include <cmath>
#include <string>

#include "pchnet/error.hpp"

namespace pchnet {

namespace {

void check_shapes(std::span<const LayerCurvature> curv, const LayerGradients& grads) {
  if (curv.size() != grads.bias.size() || curv.size() != grads.weight.size()) {
    throw DimensionError("solver: curvature and gradients have different layer counts");
  }
  for (std::size_t l = 0; l < curv.size(); ++l) {
    const LayerCurvature& c = curv[l];
    const Matrix& gw = grads.weight[l];
    if (c.hb.rows() != gw.rows() || c.ehht.rows() != gw.cols() || c.eh.size() != gw.cols() ||
        grads.bias[l].size() != gw.rows()) {
      throw DimensionError("solver: curvature of layer " + std::to_string(l) +
                           " does not match its gradient");
    }
  }
}

}  // namespace

std::string to_string(HvpMode m) { return m == HvpMode::ExactKron ? "exact_kron" : "ea_one_rank"; }

HvpMode parse_hvp_mode(const std::string& s) {
  if (s == "exact_kron") return HvpMode::ExactKron;
  if (s == "ea_one_rank") return HvpMode::EaOneRank;
  throw ConfigError("unknown hvp_mode '" + s + "'");
}

std::string to_string(PiPolicy p) { return p == PiPolicy::Unit ? "unit" : "trace_norm"; }

PiPolicy parse_pi_policy(const std::string& s) {
  if (s == "unit") return PiPolicy::Unit;
  if (s == "trace_norm") return PiPolicy::TraceNorm;
  throw ConfigError("unknown pi_policy '" + s + "'");
}

void SolverConfig::validate() const {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  if (max_cg < 1) throw ConfigError("max_cg must be at least 1");
  if (!(eps_cg > 0.0)) throw ConfigError("eps_cg must be positive");
}

Vector NewtonDirection::flatten() const {
  Vector out;
  for (std::size_t l = 0; l < weight.size(); ++l) {
    out.insert(out.end(), weight[l].values().begin(), weight[l].values().end());
    out.insert(out.end(), bias[l].begin(), bias[l].end());
  }
  return out;
}

LinearOperator damped_weight_operator(const LayerCurvature& c, double alpha, HvpMode mode) {
  const std::size_t m = c.hb.rows();
  const std::size_t n = c.eh.size();
  const double blend = 1.0 - alpha;
  if (mode == HvpMode::ExactKron) {
    return {m * n, [&c, alpha, blend](std::span<const double> x, std::span<double> y) {
              const Vector hx = kron_apply(c.hb, c.ehht, x);
              for (std::size_t i = 0; i < y.size(); ++i) y[i] = blend * hx[i] + alpha * x[i];
            }};
  }
  return {m * n, [&c, alpha, blend, m, n](std::span<const double> x, std::span<double> y) {
            // P is m x n, column-stacked: u = P E[h], w = Hb u, result = w E[h]^T.
            Vector u(m, 0.0);
            for (std::size_t col = 0; col < n; ++col) axpy(c.eh[col], x.subspan(col * m, m), u);
            const Vector w = matvec(c.hb, u);
            for (std::size_t col = 0; col < n; ++col) {
              const double e = c.eh[col];
              for (std::size_t r = 0; r < m; ++r) {
                y[col * m + r] = blend * w[r] * e + alpha * x[col * m + r];
              }
            }
          }};
}

LinearOperator damped_bias_operator(const LayerCurvature& c, double alpha) {
  const double blend = 1.0 - alpha;
  return {c.hb.rows(), [&c, alpha, blend](std::span<const double> x, std::span<double> y) {
            for (std::size_t r = 0; r < c.hb.rows(); ++r) {
              y[r] = blend * dot(c.hb.row(r), x) + alpha * x[r];
            }
          }};
}

NewtonDirection ea_cg_direction(std::span<const LayerCurvature> curv, const LayerGradients& grads,
                                const SolverConfig& cfg) {
  cfg.validate();
  check_shapes(curv, grads);
  const std::size_t k = curv.size();
  NewtonDirection d;
  d.weight.resize(k);
  d.bias.resize(k);
  d.weight_iterations.resize(k);
  d.bias_iterations.resize(k);

  for (std::size_t l = 0; l < k; ++l) {
    try {
      Vector rhs = grads.bias[l];
      for (double& x : rhs) x = -x;
      CgResult bias = cg_solve(damped_bias_operator(curv[l], cfg.alpha), rhs, cfg.max_cg, cfg.eps_cg);
      d.bias[l] = std::move(bias.x);
      d.bias_iterations[l] = bias.iterations;

      const Matrix& gw = grads.weight[l];
      Vector wrhs = vec(gw);
      for (double& x : wrhs) x = -x;
      CgResult weight = cg_solve(damped_weight_operator(curv[l], cfg.alpha, cfg.hvp_mode), wrhs,
                                 cfg.max_cg, cfg.eps_cg);
      d.weight[l] = unvec(weight.x, gw.rows(), gw.cols());
      d.weight_iterations[l] = weight.iterations;
    } catch (const NumericalError& e) {
      throw NumericalError("layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return d;
}

double kfi_pi(const LayerCurvature& c, PiPolicy policy) {
  if (policy == PiPolicy::Unit) return 1.0;
  const double act = trace(c.ehht) / static_cast<double>(c.ehht.rows());
  const double grad = trace(c.hb) / static_cast<double>(c.hb.rows());
  if (!(act > 0.0) || !(grad > 0.0)) return 1.0;
  return std::sqrt(act / grad);
}

NewtonDirection kfi_direction(std::span<const LayerCurvature> curv, const LayerGradients& grads,
                              double alpha, PiPolicy pi_policy, const KfiOptions& opts) {
  if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
  check_shapes(curv, grads);
  const std::size_t k = curv.size();
  const double root = std::sqrt(alpha);
  NewtonDirection d;
  d.weight.resize(k);
  d.bias.resize(k);
  d.weight_iterations.assign(k, 0);
  d.bias_iterations.assign(k, 0);

  for (std::size_t l = 0; l < k; ++l) {
    const LayerCurvature& c = curv[l];
    const double pi = kfi_pi(c, pi_policy);
    try {
      Matrix g_factor = c.hb;
      for (std::size_t i = 0; i < g_factor.rows(); ++i) g_factor(i, i) += root / pi;
      const Matrix g_inv = spd_inverse(g_factor);

      Matrix left = matmul(g_inv, grads.weight[l]);  // G^{-1} grad_W
      if (l == 0 && opts.sherman_morrison_first_layer) {
        // H is symmetric, so right-multiplying by H^{-1} maps each row through H^{-1}.
        for (std::size_t r = 0; r < left.rows(); ++r) {
          const Vector row = sherman_morrison_apply(c.eh, pi * root, left.row(r));
          std::copy(row.begin(), row.end(), left.row(r).begin());
        }
        d.weight[l] = std::move(left);
      } else {
        Matrix h_factor = c.ehht;
        for (std::size_t i = 0; i < h_factor.rows(); ++i) h_factor(i, i) += pi * root;
        d.weight[l] = matmul(left, spd_inverse(h_factor));
      }
      d.weight[l] *= -1.0;

      Matrix b_factor = c.hb;
      for (std::size_t i = 0; i < b_factor.rows(); ++i) b_factor(i, i) += root;
      d.bias[l] = matvec(spd_inverse(b_factor), grads.bias[l]);
      for (double& x : d.bias[l]) x = -x;
    } catch (const NumericalError& e) {
      throw NumericalError("layer " + std::to_string(l) + ": " + e.what());
    }
  }
  return d;
}

Vector sherman_morrison_apply(std::span<const double> eh, double damp, std::span<const double> v) {
  if (!(damp > 0.0)) throw ConfigError("sherman_morrison_apply: damping must be positive");
  if (eh.size() != v.size()) throw DimensionError("sherman_morrison_apply: length mismatch");
  // (D + u u^T)^{-1} v = v / damp - u (u^T v) / (damp (damp + u^T u))
  const double uv = dot(eh, v);
  const double uu = dot(eh, eh);
  const double coef = uv / (damp * (damp + uu));
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = v[i] / damp - coef * eh[i];
  return out;
}

}  // namespace pchnet
