#include "pchnet/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "pchnet/error.hpp"

namespace pchnet {

namespace {

double off_diagonal_norm(const Matrix& a) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      if (i != j) s += a(i, j) * a(i, j);
  return std::sqrt(s);
}

double default_tolerance(std::span<const double> values) {
  double m = 0.0;
  for (double v : values) m = std::max(m, std::abs(v));
  return 1e-12 * m;
}

double replace_negative(double lambda, double gamma, double tol) {
  if (lambda >= 0.0) return lambda;
  if (lambda >= -tol) return 0.0;
  return gamma * lambda;
}

}  // namespace

Matrix EigenDecomposition::reassemble(std::span<const double> values) const {
  const std::size_t n = eigenvectors.rows();
  if (values.size() != n) throw DimensionError("reassemble: spectrum length mismatch");
  Matrix out(n, n);
  for (std::size_t k = 0; k < n; ++k) {
    const double lambda = values[k];
    if (lambda == 0.0) continue;
    for (std::size_t i = 0; i < n; ++i) {
      const double vik = lambda * eigenvectors(i, k);
      for (std::size_t j = 0; j < n; ++j) out(i, j) += vik * eigenvectors(j, k);
    }
  }
  symmetrize(out);
  return out;
}

EigenDecomposition sym_eig(const Matrix& a, const JacobiOptions& opts) {
  if (!a.is_square()) {
    throw DimensionError("sym_eig: matrix is " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()));
  }
  if (!is_symmetric(a)) throw SymmetryError("sym_eig: matrix is not symmetric");

  const std::size_t n = a.rows();
  Matrix work = a;
  symmetrize(work);
  Matrix v = Matrix::identity(n);
  const double threshold = opts.tol * frobenius_norm(work);

  for (int sweep = 0; sweep < opts.max_sweeps; ++sweep) {
    if (off_diagonal_norm(work) <= threshold) break;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = work(p, q);
        if (apq == 0.0) continue;
        // Rotation that annihilates work(p, q).
        const double theta = (work(q, q) - work(p, p)) / (2.0 * apq);
        const double t = std::copysign(1.0, theta) / (std::abs(theta) + std::hypot(1.0, theta));
        const double c = 1.0 / std::hypot(1.0, t);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = work(k, p);
          const double akq = work(k, q);
          work(k, p) = c * akp - s * akq;
          work(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = work(p, k);
          const double aqk = work(q, k);
          work(p, k) = c * apk - s * aqk;
          work(q, k) = s * apk + c * aqk;
        }
        work(p, q) = 0.0;
        work(q, p) = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v(k, p);
          const double vkq = v(k, q);
          v(k, p) = c * vkp - s * vkq;
          v(k, q) = s * vkp + c * vkq;
        }
      }
    }
  }

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t i, std::size_t j) { return work(i, i) < work(j, j); });

  EigenDecomposition out{Vector(n), Matrix(n, n)};
  for (std::size_t k = 0; k < n; ++k) {
    out.eigenvalues[k] = work(order[k], order[k]);
    for (std::size_t i = 0; i < n; ++i) out.eigenvectors(i, k) = v(i, order[k]);
  }
  return out;
}

Matrix pos_eig(const Matrix& a, double gamma, std::optional<double> tol_eig) {
  if (gamma > 0.0) throw ConfigError("pos_eig: gamma must be <= 0, got " + std::to_string(gamma));
  const EigenDecomposition eig = sym_eig(a);
  if (eig.eigenvalues.empty() || eig.eigenvalues.front() >= 0.0) {
    Matrix out = a;
    symmetrize(out);
    return out;
  }
  const double tol = tol_eig.value_or(default_tolerance(eig.eigenvalues));
  Vector values = eig.eigenvalues;
  for (double& l : values) l = replace_negative(l, gamma, tol);
  return eig.reassemble(values);
}

Vector pos_eig_diagonal(std::span<const double> diag, double gamma,
                        std::optional<double> tol_eig) {
  if (gamma > 0.0) {
    throw ConfigError("pos_eig_diagonal: gamma must be <= 0, got " + std::to_string(gamma));
  }
  const double tol = tol_eig.value_or(default_tolerance(diag));
  Vector out(diag.begin(), diag.end());
  for (double& x : out) x = replace_negative(x, gamma, tol);
  return out;
}

Matrix abs_eig(const Matrix& a) {
  const EigenDecomposition eig = sym_eig(a);
  Vector values = eig.eigenvalues;
  for (double& l : values) l = std::abs(l);
  return eig.reassemble(values);
}

Matrix spd_inverse(const Matrix& a) {
  const EigenDecomposition eig = sym_eig(a);
  Vector inv = eig.eigenvalues;
  for (double& l : inv) {
    if (!(l > 0.0)) {
      throw NumericalError("spd_inverse: non-positive eigenvalue " + std::to_string(l));
    }
    l = 1.0 / l;
  }
  return eig.reassemble(inv);
}

Vector kron_apply(const Matrix& a, const Matrix& c, std::span<const double> vec_b) {
  if (!a.is_square() || !c.is_square()) throw DimensionError("kron_apply: factors must be square");
  const std::size_t m = a.rows();
  const std::size_t n = c.rows();
  if (vec_b.size() != m * n) {
    throw DimensionError("kron_apply: expected Vec(B) of length " + std::to_string(m * n) +
                         ", got " + std::to_string(vec_b.size()));
  }
  // B is m x n stored column-wise: B(r, j) = vec_b[j * m + r].
  // AB first (m x n, column-wise), then (AB) C.
  Vector ab(m * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    const double* bcol = vec_b.data() + j * m;
    double* out = ab.data() + j * m;
    for (std::size_t r = 0; r < m; ++r) out[r] = dot(a.row(r), {bcol, m});
  }
  Vector result(m * n, 0.0);
  for (std::size_t j = 0; j < n; ++j) {
    double* out = result.data() + j * m;
    for (std::size_t p = 0; p < n; ++p) {
      const double cpj = c(p, j);
      if (cpj == 0.0) continue;
      const double* col = ab.data() + p * m;
      for (std::size_t r = 0; r < m; ++r) out[r] += col[r] * cpj;
    }
  }
  return result;
}

Vector LinearOperator::operator()(std::span<const double> x) const {
  Vector y(dim, 0.0);
  apply(x, y);
  return y;
}

LinearOperator as_operator(const Matrix& a) {
  if (!a.is_square()) throw DimensionError("as_operator: matrix must be square");
  return {a.rows(), [a](std::span<const double> x, std::span<double> y) {
            for (std::size_t r = 0; r < a.rows(); ++r) y[r] = dot(a.row(r), x);
          }};
}

CgResult cg_solve(const LinearOperator& op, std::span<const double> b, std::size_t max_iter,
                  double eps_cg) {
  const std::size_t n = op.dim;
  if (b.size() != n) throw DimensionError("cg_solve: right-hand side length mismatch");
  if (!(eps_cg > 0.0)) throw ConfigError("cg_solve: eps_cg must be positive");
  for (double v : b)
    if (!std::isfinite(v)) throw NumericalError("cg_solve: non-finite right-hand side");

  constexpr std::size_t kResidualRefresh = 50;
  const double scale = std::max(1.0, norm2(b));

  CgResult best{Vector(n, 0.0), 0, norm2(b) / scale};
  if (best.residual <= eps_cg) return best;

  Vector x(n, 0.0);
  Vector r(b.begin(), b.end());
  Vector p = r;
  Vector ap(n, 0.0);
  double rs = dot(r, r);

  for (std::size_t k = 1; k <= max_iter; ++k) {
    std::fill(ap.begin(), ap.end(), 0.0);
    op.apply(p, ap);
    const double pap = dot(p, ap);
    if (!std::isfinite(pap) || pap <= 0.0) {
      throw NumericalError("cg_solve: breakdown at iteration " + std::to_string(k) +
                           " (p^T A p = " + std::to_string(pap) + ")");
    }
    const double step = rs / pap;
    axpy(step, p, x);
    if (k % kResidualRefresh == 0) {
      Vector ax = op(x);
      for (std::size_t i = 0; i < n; ++i) r[i] = b[i] - ax[i];
    } else {
      axpy(-step, ap, r);
    }
    const double rs_next = dot(r, r);
    const double rel = std::sqrt(rs_next) / scale;
    if (!std::isfinite(rel)) {
      throw NumericalError("cg_solve: non-finite residual at iteration " + std::to_string(k));
    }
    if (rel < best.residual) {
      best.x = x;
      best.residual = rel;
    }
    best.iterations = k;
    if (rel <= eps_cg) break;
    const double beta = rs_next / rs;
    rs = rs_next;
    for (std::size_t i = 0; i < n; ++i) p[i] = r[i] + beta * p[i];
  }

  // Report the true residual of the returned iterate rather than the recurrence.
  Vector ax = op(best.x);
  for (std::size_t i = 0; i < n; ++i) ax[i] -= b[i];
  best.residual = norm2(ax) / scale;
  return best;
}

}  // namespace pchnet
