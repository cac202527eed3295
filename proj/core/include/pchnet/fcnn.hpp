#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "pchnet/matrix.hpp"
#include "pchnet/rng.hpp"

namespace pchnet {

enum class Activation { Sigmoid, ReLU };

std::string to_string(Activation a);
Activation parse_activation(const std::string& name);

/// Lipschitz constant of the activation's first derivative range as used by
/// the covariance bound: 0.25 for sigmoid, 1 for ReLU.
double lipschitz_constant(Activation a);

struct DenseLayer {
  Matrix weight;  // n_out x n_in
  Vector bias;    // n_out
};

/// Fully-connected network with k layers. Layers are indexed 0..k-1; layer l
/// maps activations of width widths[l] to width widths[l + 1]. Hidden layers
/// apply the activation, the last layer is affine.
class FcnnModel {
 public:
  FcnnModel(std::vector<std::size_t> widths, Activation activation);

  /// Weights uniform on +-sqrt(6 / (n_in + n_out)), biases zero.
  static FcnnModel xavier(std::vector<std::size_t> widths, Activation activation, Rng& rng);

  const std::vector<std::size_t>& widths() const noexcept { return widths_; }
  std::size_t depth() const noexcept { return layers_.size(); }
  std::size_t input_width() const noexcept { return widths_.front(); }
  std::size_t output_width() const noexcept { return widths_.back(); }
  Activation activation() const noexcept { return activation_; }

  DenseLayer& layer(std::size_t l) { return layers_.at(l); }
  const DenseLayer& layer(std::size_t l) const { return layers_.at(l); }

  std::size_t parameter_count() const;
  /// Flattened as (W_0 row-major, b_0, W_1, b_1, ...).
  Vector parameters() const;
  void set_parameters(std::span<const double> theta);
  bool all_finite() const;

 private:
  std::vector<std::size_t> widths_;
  Activation activation_;
  std::vector<DenseLayer> layers_;
};

/// Activations of a batch (one row per instance). h[0] is the input and h[l]
/// the output of layer l-1. hprime[l] and hdprime[l] hold the first and second
/// activation derivatives for hidden levels l = 1..k-1; entries 0 and k are empty.
struct ForwardTrace {
  std::vector<Matrix> h;
  std::vector<Matrix> hprime;
  std::vector<Matrix> hdprime;

  std::size_t batch_size() const { return h.empty() ? 0 : h.front().rows(); }
  std::size_t depth() const { return h.empty() ? 0 : h.size() - 1; }
  const Matrix& output() const { return h.back(); }
};

ForwardTrace forward(const FcnnModel& model, const Matrix& inputs);

/// Loss on the softmax of the network output. SigmoidGate is
/// 1 / (1 + exp(delta * (y^T softmax(h) - epsilon))).
struct Criterion {
  enum class Kind { CrossEntropySoftmax, SigmoidGate };

  Kind kind = Kind::CrossEntropySoftmax;
  double delta = 5.0;
  double epsilon = 0.2;

  static Criterion cross_entropy() { return {}; }
  static Criterion sigmoid_gate(double delta = 5.0, double epsilon = 0.2);

  bool is_convex() const noexcept { return kind == Kind::CrossEntropySoftmax; }
  std::string name() const;
  void validate() const;
};

struct CriterionValue {
  double loss = 0.0;
  Vector grad;  // d loss / d h^k
  Matrix hess;  // d^2 loss / d (h^k)^2, empty unless requested
};

Vector softmax(std::span<const double> z);

/// `y` must be one-hot (ConfigError otherwise).
CriterionValue criterion_eval(const Criterion& criterion, std::span<const double> output,
                              std::span<const double> y);
CriterionValue criterion_eval(const Criterion& criterion, std::span<const double> output,
                              std::size_t label, bool with_hessian = true);
double criterion_loss(const Criterion& criterion, std::span<const double> output,
                      std::size_t label);

/// Criterion evaluated on every instance of a trace.
struct BatchObjective {
  double mean_loss = 0.0;
  Matrix grad_out;            // batch x n_k
  std::vector<Matrix> hess;   // per instance; empty unless requested
};

BatchObjective evaluate_batch(const Criterion& criterion, const ForwardTrace& trace,
                              std::span<const std::size_t> labels, bool with_hessian);

/// Per-layer gradients. `batch_mean` tells whether these are averages over
/// the batch or belong to a single instance.
struct LayerGradients {
  std::vector<Vector> bias;
  std::vector<Matrix> weight;
  bool batch_mean = true;
};

/// Per-instance bias gradients for every layer: entry l is batch x n_{l+1}.
std::vector<Matrix> bias_gradients(const FcnnModel& model, const ForwardTrace& trace,
                                   const Matrix& grad_out);

/// Batch-mean gradients of all weights and biases.
LayerGradients backprop(const FcnnModel& model, const ForwardTrace& trace, const Matrix& grad_out);

/// Gradients of a single instance of the trace.
LayerGradients backprop_instance(const FcnnModel& model, const ForwardTrace& trace,
                                 const Matrix& grad_out, std::size_t instance);

}  // namespace pchnet
