#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <span>

#include "pchnet/matrix.hpp"

namespace pchnet {

/// Spectral decomposition A = V diag(eigenvalues) V^T of a symmetric matrix.
/// Eigenvalues are ascending; column j of `eigenvectors` pairs with eigenvalues[j].
struct EigenDecomposition {
  Vector eigenvalues;
  Matrix eigenvectors;

  /// V diag(values) V^T for an arbitrary replacement spectrum.
  Matrix reassemble(std::span<const double> values) const;
};

struct JacobiOptions {
  /// Stop once the off-diagonal Frobenius norm falls below tol * ||A||_F.
  double tol = 1e-12;
  int max_sweeps = 100;
};

/// Cyclic Jacobi eigensolver. Throws DimensionError for non-square input and
/// SymmetryError when A is not symmetric within 1e-12 * max(1, ||A||_F).
EigenDecomposition sym_eig(const Matrix& a, const JacobiOptions& opts = {});

/// Replaces negative eigenvalues: lambda < -tol_eig becomes gamma * lambda,
/// lambda in [-tol_eig, 0) becomes 0, the rest are kept. gamma must be <= 0
/// (ConfigError otherwise). Default tol_eig is 1e-12 * max|lambda|.
Matrix pos_eig(const Matrix& a, double gamma, std::optional<double> tol_eig = std::nullopt);

/// Same rule as pos_eig applied to the entries of a diagonal matrix, which
/// are its eigenvalues.
Vector pos_eig_diagonal(std::span<const double> diag, double gamma,
                        std::optional<double> tol_eig = std::nullopt);

/// Replaces every eigenvalue by its absolute value.
Matrix abs_eig(const Matrix& a);

/// Inverse of a symmetric positive definite matrix through its eigenpairs.
/// Throws NumericalError when the smallest eigenvalue is not positive.
Matrix spd_inverse(const Matrix& a);

/// Returns Vec(A B C) = (C^T kron A) Vec(B) for an m x m `a`, n x n `c` and a
/// column-stacked m x n B, without forming the Kronecker product.
Vector kron_apply(const Matrix& a, const Matrix& c, std::span<const double> vec_b);

/// Matrix-free linear map on R^dim.
struct LinearOperator {
  std::size_t dim = 0;
  std::function<void(std::span<const double> x, std::span<double> y)> apply;

  Vector operator()(std::span<const double> x) const;
};

LinearOperator as_operator(const Matrix& a);

struct CgResult {
  Vector x;
  std::size_t iterations = 0;
  /// ||op(x) - b|| / max(1, ||b||) for the returned x.
  double residual = 0.0;
};

/// Plain conjugate gradient from a zero start. Stops when the relative
/// residual reaches eps_cg or after max_iter iterations, returning the
/// iterate with the smallest residual seen. Throws NumericalError naming the
/// iteration if the curvature p^T A p is non-positive or not finite.
CgResult cg_solve(const LinearOperator& op, std::span<const double> b, std::size_t max_iter,
                  double eps_cg);

}  // namespace pchnet
