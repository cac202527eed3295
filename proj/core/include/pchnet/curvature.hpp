#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "pchnet/fcnn.hpp"
#include "pchnet/matrix.hpp"

namespace pchnet {

/// Curvature of one layer l, stored as the bias block plus the factors that
/// define the weight block hb kron ehht implicitly. The weight block itself is
/// never formed.
struct LayerCurvature {
  Matrix hb;           // n_{l+1} x n_{l+1}, expected bias Hessian (or its modification)
  Matrix ehht;         // E[h_l h_l^T], n_l x n_l
  Vector eh;           // E[h_l]
  Matrix ehht_prime;   // E[h'_l h'_l^T]; empty for l = 0
  Vector diag_term;    // E[h''_l .* (W_l^T g_{l})]; empty for l = 0
};

struct CurvatureKind {
  enum class Type { TrueBlockDiag, Pch, GaussNewton, Fisher };

  Type type = Type::Pch;
  /// Pos-Eig scale for PCH: -1 flips negative eigenvalues, 0 zeroes them.
  double gamma = -1.0;

  static CurvatureKind true_block_diag() { return {Type::TrueBlockDiag, 0.0}; }
  static CurvatureKind pch1() { return {Type::Pch, -1.0}; }
  static CurvatureKind pch2() { return {Type::Pch, 0.0}; }
  static CurvatureKind gauss_newton() { return {Type::GaussNewton, 0.0}; }
  static CurvatureKind fisher() { return {Type::Fisher, 0.0}; }

  /// "PCH-1", "PCH-2", "GN", "Fisher", "True".
  std::string name() const;
  static CurvatureKind parse(const std::string& name);
  void validate() const;
};

/// How the bias-Hessian recursion is evaluated.
enum class Propagation {
  /// Recurse on every instance, average at the end.
  PerInstance,
  /// Recurse on batch-averaged blocks; E[h' h'^T] enters through a Hadamard product.
  Expectation,
};

struct RecursionTerms {
  Propagation propagation = Propagation::Expectation;
  /// Keep diag(h'' .* W^T g). Dropping it gives the Gauss-Newton recursion.
  bool diagonal_term = true;
  /// When set, Pos-Eig with this gamma is applied to the top block and to
  /// the diagonal term of every lower layer.
  std::optional<double> pos_eig_gamma;
};

/// Inputs shared by every recursion variant, computed once per batch.
struct CurvatureInputs {
  BatchObjective objective;            // with per-instance output Hessians
  std::vector<Matrix> bias_grads;      // per layer, batch x n_{l+1}
};

CurvatureInputs curvature_inputs(const FcnnModel& model, const ForwardTrace& trace,
                                 const Criterion& criterion, std::span<const std::size_t> labels);

/// Bias-Hessian blocks for all layers under the chosen recursion.
std::vector<Matrix> propagate_bias_hessian(const FcnnModel& model, const ForwardTrace& trace,
                                           const CurvatureInputs& inputs,
                                           const RecursionTerms& terms);

/// Exact bias-Hessian blocks of a single instance.
std::vector<Matrix> instance_bias_hessian(const FcnnModel& model, const ForwardTrace& trace,
                                          const CurvatureInputs& inputs, std::size_t instance);

/// Batch mean of the exact per-instance bias-Hessian blocks.
std::vector<Matrix> true_bias_hessian(const FcnnModel& model, const ForwardTrace& trace,
                                      const Criterion& criterion,
                                      std::span<const std::size_t> labels);

/// Approximate curvature for PCH, Gauss-Newton or Fisher. Throws ConfigError
/// for TrueBlockDiag (use true_bias_hessian).
std::vector<LayerCurvature> ea_curvature(const FcnnModel& model, const ForwardTrace& trace,
                                         const CurvatureInputs& inputs, CurvatureKind kind);
std::vector<LayerCurvature> ea_curvature(const FcnnModel& model, const ForwardTrace& trace,
                                         const Criterion& criterion,
                                         std::span<const std::size_t> labels, CurvatureKind kind);

struct ErrorReport {
  Vector per_layer;
  double total = 0.0;
};

/// Per layer ||approx_l - |exact_l| ||_F where |.| takes absolute eigenvalues;
/// total is the Frobenius norm of the whole block-diagonal difference.
ErrorReport layerwise_error(std::span<const Matrix> approx, std::span<const Matrix> exact);

struct BoundCheck {
  double lhs = 0.0;
  double rhs = 0.0;
  bool holds() const noexcept { return lhs <= rhs; }
};

/// Element-wise covariance bound of the expectation approximation at layer l
/// (1 <= l < depth), with A_i = W_l^T H_i W_l the sandwiched exact bias
/// Hessian of layer l and B_i = h'_{l,i} h'_{l,i}^T:
///   lhs = ||Cov_i(A_i, B_i)||_F^2,  rhs = L^4 sum_{mu,nu} Var_i(A_i[mu][nu]).
/// Moments use the batch (population) normalization. Batch size 1 is a ConfigError.
BoundCheck covariance_bound_check(const FcnnModel& model, const ForwardTrace& trace,
                                  const Criterion& criterion,
                                  std::span<const std::size_t> labels, std::size_t layer,
                                  double lipschitz);

}  // namespace pchnet
