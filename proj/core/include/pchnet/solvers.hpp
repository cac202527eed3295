#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pchnet/curvature.hpp"
#include "pchnet/fcnn.hpp"
#include "pchnet/linalg.hpp"

namespace pchnet {

/// Weight-block Hessian-vector product used inside CG.
enum class HvpMode {
  /// Vec(Hb P E[h h^T]).
  ExactKron,
  /// Vec(Hb P E[h] E[h]^T); the rank-one right factor is never formed.
  EaOneRank,
};

/// Scale pi_t splitting the damping between the two KFI factors.
enum class PiPolicy {
  Unit,
  /// sqrt((tr(E[h h^T]) / n_in) / (tr(Hb) / n_out)); 1 when either trace is zero.
  TraceNorm,
};

std::string to_string(HvpMode m);
HvpMode parse_hvp_mode(const std::string& s);
std::string to_string(PiPolicy p);
PiPolicy parse_pi_policy(const std::string& s);

struct SolverConfig {
  double alpha = 0.05;  // blend (1 - alpha) H + alpha I, 0 < alpha < 1
  std::size_t max_cg = 10;
  double eps_cg = 1e-5;
  HvpMode hvp_mode = HvpMode::EaOneRank;
  PiPolicy pi_policy = PiPolicy::Unit;

  void validate() const;
};

/// Descent direction per layer (already negated).
struct NewtonDirection {
  std::vector<Matrix> weight;
  std::vector<Vector> bias;
  /// CG iterations spent on (weight, bias) per layer; zero for closed-form solvers.
  std::vector<std::size_t> weight_iterations;
  std::vector<std::size_t> bias_iterations;

  /// Flattened in FcnnModel::parameters() order.
  Vector flatten() const;
};

/// v -> (1 - alpha) Hb_w v + alpha v on column-stacked weight matrices of layer
/// curvature `c`. `c` must outlive the operator.
LinearOperator damped_weight_operator(const LayerCurvature& c, double alpha, HvpMode mode);

/// v -> (1 - alpha) Hb v + alpha v. `c` must outlive the operator.
LinearOperator damped_bias_operator(const LayerCurvature& c, double alpha);

/// Solves the damped per-layer Newton systems with CG. A CG breakdown is
/// rethrown as NumericalError naming the layer.
NewtonDirection ea_cg_direction(std::span<const LayerCurvature> curv, const LayerGradients& grads,
                                const SolverConfig& cfg);

double kfi_pi(const LayerCurvature& c, PiPolicy policy);

struct KfiOptions {
  /// Replace the first layer's input factor by E[h] E[h]^T + pi sqrt(alpha) I
  /// and invert it with Sherman-Morrison.
  bool sherman_morrison_first_layer = false;
};

/// Kronecker-factored inverse:
///   d_W = -(Hb + sqrt(alpha)/pi I)^{-1} E[grad_W] (E[h h^T] + pi sqrt(alpha) I)^{-1}
///   d_b = -(Hb + sqrt(alpha) I)^{-1} E[grad_b]
NewtonDirection kfi_direction(std::span<const LayerCurvature> curv, const LayerGradients& grads,
                              double alpha, PiPolicy pi_policy, const KfiOptions& opts = {});

/// (eh eh^T + damp I)^{-1} v in O(n). damp <= 0 is a ConfigError.
Vector sherman_morrison_apply(std::span<const double> eh, double damp, std::span<const double> v);

}  // namespace pchnet
