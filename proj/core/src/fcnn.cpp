#include "pchnet/fcnn.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "pchnet/error.hpp"

namespace pchnet {

namespace {

struct ActivationValue {
  double value;
  double first;
  double second;
};

ActivationValue activate(Activation a, double z) {
  switch (a) {
    case Activation::Sigmoid: {
      const double s = z >= 0.0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
      const double d1 = s * (1.0 - s);
      return {s, d1, d1 * (1.0 - 2.0 * s)};
    }
    case Activation::ReLU:
      // The second derivative is taken as zero everywhere, including the kink.
      return z > 0.0 ? ActivationValue{z, 1.0, 0.0} : ActivationValue{0.0, 0.0, 0.0};
  }
  return {0.0, 0.0, 0.0};
}

void check_trace(const FcnnModel& model, const ForwardTrace& trace) {
  const std::size_t k = model.depth();
  if (trace.h.size() != k + 1 || trace.hprime.size() != k + 1 || trace.hdprime.size() != k + 1) {
    throw DimensionError("trace depth does not match model depth " + std::to_string(k));
  }
  const std::size_t batch = trace.batch_size();
  for (std::size_t l = 0; l <= k; ++l) {
    if (trace.h[l].rows() != batch || trace.h[l].cols() != model.widths()[l]) {
      throw DimensionError("trace activations at level " + std::to_string(l) +
                           " do not match the model");
    }
  }
}

void check_grad_out(const FcnnModel& model, const ForwardTrace& trace, const Matrix& grad_out) {
  check_trace(model, trace);
  if (grad_out.rows() != trace.batch_size() || grad_out.cols() != model.output_width()) {
    throw DimensionError("output gradient must be batch x " +
                         std::to_string(model.output_width()));
  }
}

std::size_t one_hot_index(std::span<const double> y) {
  std::size_t index = y.size();
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] == 1.0 && index == y.size()) {
      index = i;
    } else if (y[i] != 0.0) {
      throw ConfigError("label vector is not one-hot");
    }
  }
  if (index == y.size()) throw ConfigError("label vector is not one-hot");
  return index;
}

}  // namespace

std::string to_string(Activation a) { return a == Activation::Sigmoid ? "sigmoid" : "relu"; }

Activation parse_activation(const std::string& name) {
  if (name == "sigmoid") return Activation::Sigmoid;
  if (name == "relu") return Activation::ReLU;
  throw ConfigError("unknown activation '" + name + "'");
}

double lipschitz_constant(Activation a) { return a == Activation::Sigmoid ? 0.25 : 1.0; }

FcnnModel::FcnnModel(std::vector<std::size_t> widths, Activation activation)
    : widths_(std::move(widths)), activation_(activation) {
  if (widths_.size() < 2) throw ConfigError("a network needs at least an input and an output width");
  for (std::size_t w : widths_)
    if (w == 0) throw ConfigError("layer widths must be positive");
  layers_.reserve(widths_.size() - 1);
  for (std::size_t l = 0; l + 1 < widths_.size(); ++l) {
    layers_.push_back({Matrix(widths_[l + 1], widths_[l]), Vector(widths_[l + 1], 0.0)});
  }
}

FcnnModel FcnnModel::xavier(std::vector<std::size_t> widths, Activation activation, Rng& rng) {
  FcnnModel model(std::move(widths), activation);
  for (std::size_t l = 0; l < model.depth(); ++l) {
    Matrix& w = model.layers_[l].weight;
    const double bound = std::sqrt(6.0 / static_cast<double>(w.rows() + w.cols()));
    for (double& x : w.values()) x = rng.uniform(-bound, bound);
  }
  return model;
}

std::size_t FcnnModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& layer : layers_) n += layer.weight.size() + layer.bias.size();
  return n;
}

Vector FcnnModel::parameters() const {
  Vector theta;
  theta.reserve(parameter_count());
  for (const auto& layer : layers_) {
    theta.insert(theta.end(), layer.weight.values().begin(), layer.weight.values().end());
    theta.insert(theta.end(), layer.bias.begin(), layer.bias.end());
  }
  return theta;
}

void FcnnModel::set_parameters(std::span<const double> theta) {
  if (theta.size() != parameter_count()) throw DimensionError("set_parameters: length mismatch");
  std::size_t k = 0;
  for (auto& layer : layers_) {
    for (double& x : layer.weight.values()) x = theta[k++];
    for (double& x : layer.bias) x = theta[k++];
  }
}

bool FcnnModel::all_finite() const {
  for (const auto& layer : layers_) {
    if (!layer.weight.all_finite()) return false;
    for (double b : layer.bias)
      if (!std::isfinite(b)) return false;
  }
  return true;
}

ForwardTrace forward(const FcnnModel& model, const Matrix& inputs) {
  if (inputs.cols() != model.input_width()) {
    throw DimensionError("forward: input width " + std::to_string(inputs.cols()) +
                         " does not match model input width " +
                         std::to_string(model.input_width()));
  }
  const std::size_t k = model.depth();
  const std::size_t batch = inputs.rows();
  ForwardTrace trace;
  trace.h.reserve(k + 1);
  trace.hprime.resize(k + 1);
  trace.hdprime.resize(k + 1);
  trace.h.push_back(inputs);

  for (std::size_t l = 0; l < k; ++l) {
    const DenseLayer& layer = model.layer(l);
    const Matrix& prev = trace.h[l];
    Matrix z(batch, layer.weight.rows());
    for (std::size_t i = 0; i < batch; ++i) {
      auto zi = z.row(i);
      for (std::size_t r = 0; r < layer.weight.rows(); ++r) {
        zi[r] = dot(layer.weight.row(r), prev.row(i)) + layer.bias[r];
      }
    }
    if (l + 1 == k) {
      trace.h.push_back(std::move(z));
      break;
    }
    Matrix d1(batch, z.cols());
    Matrix d2(batch, z.cols());
    for (std::size_t i = 0; i < batch; ++i) {
      for (std::size_t r = 0; r < z.cols(); ++r) {
        const ActivationValue a = activate(model.activation(), z(i, r));
        z(i, r) = a.value;
        d1(i, r) = a.first;
        d2(i, r) = a.second;
      }
    }
    trace.h.push_back(std::move(z));
    trace.hprime[l + 1] = std::move(d1);
    trace.hdprime[l + 1] = std::move(d2);
  }
  return trace;
}

Criterion Criterion::sigmoid_gate(double delta, double epsilon) {
  Criterion c{Kind::SigmoidGate, delta, epsilon};
  c.validate();
  return c;
}

std::string Criterion::name() const {
  return kind == Kind::CrossEntropySoftmax ? "cross_entropy" : "sigmoid_gate";
}

void Criterion::validate() const {
  if (kind == Kind::SigmoidGate) {
    if (!(delta > 0.0)) throw ConfigError("sigmoid gate delta must be positive");
    if (!(epsilon >= 0.0 && epsilon <= 1.0)) throw ConfigError("sigmoid gate epsilon must lie in [0, 1]");
  }
}

Vector softmax(std::span<const double> z) {
  const double zmax = *std::max_element(z.begin(), z.end());
  Vector p(z.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    p[i] = std::exp(z[i] - zmax);
    sum += p[i];
  }
  for (double& x : p) x /= sum;
  return p;
}

CriterionValue criterion_eval(const Criterion& criterion, std::span<const double> output,
                              std::span<const double> y) {
  if (y.size() != output.size()) throw DimensionError("criterion_eval: label length mismatch");
  return criterion_eval(criterion, output, one_hot_index(y), true);
}

CriterionValue criterion_eval(const Criterion& criterion, std::span<const double> output,
                              std::size_t label, bool with_hessian) {
  const std::size_t n = output.size();
  if (label >= n) {
    throw ConfigError("label " + std::to_string(label) + " out of range for " +
                      std::to_string(n) + " outputs");
  }
  const Vector p = softmax(output);
  CriterionValue out;
  out.grad.assign(n, 0.0);

  if (criterion.kind == Criterion::Kind::CrossEntropySoftmax) {
    const double zmax = *std::max_element(output.begin(), output.end());
    double sum = 0.0;
    for (double z : output) sum += std::exp(z - zmax);
    out.loss = zmax + std::log(sum) - output[label];
    for (std::size_t i = 0; i < n; ++i) out.grad[i] = p[i] - (i == label ? 1.0 : 0.0);
    if (with_hessian) {
      out.hess = Matrix(n, n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          out.hess(i, j) = (i == j ? p[i] : 0.0) - p[i] * p[j];
    }
    return out;
  }

  // Gate on s = p[label]; chain rule through the softmax.
  const double s = p[label];
  const double gate = 1.0 / (1.0 + std::exp(criterion.delta * (s - criterion.epsilon)));
  const double d1 = -criterion.delta * gate * (1.0 - gate);
  const double d2 = criterion.delta * criterion.delta * gate * (1.0 - gate) * (1.0 - 2.0 * gate);
  out.loss = gate;

  Vector centered(n);  // e_label - p
  for (std::size_t i = 0; i < n; ++i) centered[i] = (i == label ? 1.0 : 0.0) - p[i];
  for (std::size_t i = 0; i < n; ++i) out.grad[i] = d1 * s * centered[i];

  if (with_hessian) {
    out.hess = Matrix(n, n);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < n; ++j) {
        const double ds_i = s * centered[i];
        const double ds_j = s * centered[j];
        const double d2s = s * (centered[i] * centered[j] - (i == j ? p[i] : 0.0) + p[i] * p[j]);
        out.hess(i, j) = d2 * ds_i * ds_j + d1 * d2s;
      }
    }
  }
  return out;
}

double criterion_loss(const Criterion& criterion, std::span<const double> output,
                      std::size_t label) {
  return criterion_eval(criterion, output, label, false).loss;
}

BatchObjective evaluate_batch(const Criterion& criterion, const ForwardTrace& trace,
                              std::span<const std::size_t> labels, bool with_hessian) {
  const Matrix& out = trace.output();
  if (labels.size() != out.rows()) throw DimensionError("evaluate_batch: label count mismatch");
  BatchObjective obj;
  obj.grad_out = Matrix(out.rows(), out.cols());
  if (with_hessian) obj.hess.reserve(out.rows());
  double total = 0.0;
  for (std::size_t i = 0; i < out.rows(); ++i) {
    CriterionValue v = criterion_eval(criterion, out.row(i), labels[i], with_hessian);
    total += v.loss;
    std::copy(v.grad.begin(), v.grad.end(), obj.grad_out.row(i).begin());
    if (with_hessian) obj.hess.push_back(std::move(v.hess));
  }
  obj.mean_loss = out.rows() == 0 ? 0.0 : total / static_cast<double>(out.rows());
  return obj;
}

std::vector<Matrix> bias_gradients(const FcnnModel& model, const ForwardTrace& trace,
                                   const Matrix& grad_out) {
  check_grad_out(model, trace, grad_out);
  const std::size_t k = model.depth();
  std::vector<Matrix> grads(k);
  grads[k - 1] = grad_out;
  for (std::size_t l = k - 1; l > 0; --l) {
    // g_{l-1} = h'_l .* (W_l^T g_l), row by row.
    Matrix g = matmul(grads[l], model.layer(l).weight);
    auto gv = g.values();
    auto hp = trace.hprime[l].values();
    for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= hp[i];
    grads[l - 1] = std::move(g);
  }
  return grads;
}

LayerGradients backprop(const FcnnModel& model, const ForwardTrace& trace, const Matrix& grad_out) {
  const std::vector<Matrix> per_instance = bias_gradients(model, trace, grad_out);
  const std::size_t k = model.depth();
  const double inv_batch = 1.0 / static_cast<double>(trace.batch_size());
  LayerGradients out;
  out.batch_mean = true;
  out.bias.resize(k);
  out.weight.resize(k);
  for (std::size_t l = 0; l < k; ++l) {
    const Matrix& g = per_instance[l];
    out.bias[l].assign(g.cols(), 0.0);
    for (std::size_t i = 0; i < g.rows(); ++i) axpy(1.0, g.row(i), out.bias[l]);
    for (double& x : out.bias[l]) x *= inv_batch;
    out.weight[l] = matmul_tn(g, trace.h[l]);
    out.weight[l] *= inv_batch;
  }
  return out;
}

LayerGradients backprop_instance(const FcnnModel& model, const ForwardTrace& trace,
                                 const Matrix& grad_out, std::size_t instance) {
  if (instance >= trace.batch_size()) throw DimensionError("backprop_instance: instance out of range");
  const std::vector<Matrix> per_instance = bias_gradients(model, trace, grad_out);
  const std::size_t k = model.depth();
  LayerGradients out;
  out.batch_mean = false;
  out.bias.resize(k);
  out.weight.resize(k);
  for (std::size_t l = 0; l < k; ++l) {
    auto g = per_instance[l].row(instance);
    out.bias[l].assign(g.begin(), g.end());
    out.weight[l] = outer(g, trace.h[l].row(instance));
  }
  return out;
}

}  // namespace pchnet
