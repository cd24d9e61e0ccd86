#pragma once

#include "geolevels/error.hpp"
#include "geolevels/types.hpp"

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

namespace geolevels {

enum class Activation { relu, tanh };

const char* to_string(Activation act);
Activation activation_from_string(const std::string& name);

template <typename Scalar>
struct DenseLayer {
  MatrixX<Scalar> weight;  // out x in
  VectorX<Scalar> bias;    // out
};

/// Fully connected network. Samples are stored column-wise: a batch is an (input x n) matrix.
///
/// Hidden layers apply the activation; the final layer is linear unless `activate_output`
/// is set, which is how encoder bodies (a score network without its head) are represented.
template <typename Scalar = double>
class Mlp {
 public:
  using Matrix = MatrixX<Scalar>;
  using Vector = VectorX<Scalar>;

  /// Per-layer activations of a batched forward pass, kept for backpropagation.
  struct Tape {
    std::vector<Matrix> inputs;  // input to layer l
    std::vector<Matrix> pre;     // W a + b for layer l
  };

  Mlp() = default;

  Mlp(std::vector<int> layer_sizes, Activation act, bool activate_output = false)
      : sizes_(std::move(layer_sizes)), activation_(act), activate_output_(activate_output) {
    if (sizes_.size() < 2) throw ShapeError("an MLP needs at least input and output sizes");
    for (int s : sizes_)
      if (s <= 0) throw ShapeError("layer sizes must be positive");
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l)
      layers_.push_back({Matrix::Zero(sizes_[l + 1], sizes_[l]), Vector::Zero(sizes_[l + 1])});
  }

  /// Glorot-uniform weights in +-sqrt(6/(fan_in+fan_out)), zero biases.
  static Mlp glorot(std::vector<int> layer_sizes, Activation act, std::uint64_t seed,
                    bool activate_output = false) {
    Mlp net(std::move(layer_sizes), act, activate_output);
    std::mt19937_64 rng(seed);
    for (auto& layer : net.layers_) {
      const double limit = std::sqrt(6.0 / double(layer.weight.rows() + layer.weight.cols()));
      std::uniform_real_distribution<double> uni(-limit, limit);
      for (Index j = 0; j < layer.weight.cols(); ++j)
        for (Index i = 0; i < layer.weight.rows(); ++i) layer.weight(i, j) = Scalar(uni(rng));
    }
    return net;
  }

  const std::vector<int>& layer_sizes() const { return sizes_; }
  Activation activation() const { return activation_; }
  bool activate_output() const { return activate_output_; }
  int input_size() const { return sizes_.front(); }
  int output_size() const { return sizes_.back(); }
  std::size_t layer_count() const { return layers_.size(); }

  const DenseLayer<Scalar>& layer(std::size_t l) const { return layers_[l]; }
  DenseLayer<Scalar>& layer(std::size_t l) { return layers_[l]; }

  Vector forward(const Eigen::Ref<const Vector>& input) const {
    Matrix out = forward_batch(input);
    return out.col(0);
  }

  Matrix forward_batch(const Eigen::Ref<const Matrix>& inputs) const {
    check_input(inputs.rows());
    Matrix a = inputs;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Matrix z = layers_[l].weight * a;
      z.colwise() += layers_[l].bias;
      if (activated(l)) apply_activation(z);
      a = std::move(z);
    }
    return a;
  }

  Matrix forward_batch(const Eigen::Ref<const Matrix>& inputs, Tape& tape) const {
    check_input(inputs.rows());
    tape.inputs.assign(layers_.size(), Matrix());
    tape.pre.assign(layers_.size(), Matrix());
    Matrix a = inputs;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      Matrix z = layers_[l].weight * a;
      z.colwise() += layers_[l].bias;
      tape.inputs[l] = std::move(a);
      tape.pre[l] = z;
      if (activated(l)) apply_activation(z);
      a = std::move(z);
    }
    return a;
  }

  /// Backpropagates dL/d(output) through a recorded pass. Parameter gradients are
  /// accumulated into `grad` (layout of `flatten()`); returns dL/d(input).
  Matrix backward(const Tape& tape, const Eigen::Ref<const Matrix>& d_output, Eigen::Ref<Vector> grad) const {
    if (grad.size() != parameter_count()) throw ShapeError("gradient buffer has wrong length");
    Matrix delta = d_output;
    Index offset = parameter_count();
    for (std::size_t l = layers_.size(); l-- > 0;) {
      const auto& layer = layers_[l];
      if (activated(l)) delta.array() *= activation_derivative(tape.pre[l]).array();
      const Index nw = layer.weight.size();
      const Index nb = layer.bias.size();
      offset -= nw + nb;
      Eigen::Map<Matrix> gw(grad.data() + offset, layer.weight.rows(), layer.weight.cols());
      gw.noalias() += delta * tape.inputs[l].transpose();
      grad.segment(offset + nw, nb) += delta.rowwise().sum();
      Matrix next = layer.weight.transpose() * delta;
      delta = std::move(next);
    }
    return delta;
  }

  Index parameter_count() const {
    Index n = 0;
    for (const auto& layer : layers_) n += layer.weight.size() + layer.bias.size();
    return n;
  }

  Vector flatten() const {
    Vector flat(parameter_count());
    Index offset = 0;
    for (const auto& layer : layers_) {
      flat.segment(offset, layer.weight.size()) = Eigen::Map<const Vector>(layer.weight.data(), layer.weight.size());
      offset += layer.weight.size();
      flat.segment(offset, layer.bias.size()) = layer.bias;
      offset += layer.bias.size();
    }
    return flat;
  }

  void assign(const Eigen::Ref<const Vector>& flat) {
    if (flat.size() != parameter_count()) throw ShapeError("parameter vector has wrong length");
    Index offset = 0;
    for (auto& layer : layers_) {
      layer.weight = Eigen::Map<const Matrix>(flat.data() + offset, layer.weight.rows(), layer.weight.cols());
      offset += layer.weight.size();
      layer.bias = flat.segment(offset, layer.bias.size());
      offset += layer.bias.size();
    }
  }

  /// Every layer except the last, with the last retained layer activated.
  Mlp body() const {
    if (layers_.size() < 2) throw ShapeError("body() needs at least one hidden layer");
    Mlp out(std::vector<int>(sizes_.begin(), sizes_.end() - 1), activation_, true);
    for (std::size_t l = 0; l + 1 < layers_.size(); ++l) out.layers_[l] = layers_[l];
    return out;
  }

  bool all_finite() const {
    for (const auto& layer : layers_)
      if (!layer.weight.allFinite() || !layer.bias.allFinite()) return false;
    return true;
  }

  friend bool operator==(const Mlp& a, const Mlp& b) {
    if (a.sizes_ != b.sizes_ || a.activation_ != b.activation_ || a.activate_output_ != b.activate_output_)
      return false;
    for (std::size_t l = 0; l < a.layers_.size(); ++l)
      if (a.layers_[l].weight != b.layers_[l].weight || a.layers_[l].bias != b.layers_[l].bias) return false;
    return true;
  }

 private:
  bool activated(std::size_t l) const { return l + 1 < layers_.size() || activate_output_; }

  void check_input(Index rows) const {
    if (layers_.empty()) throw ShapeError("network has no layers");
    if (rows != sizes_.front())
      throw ShapeError("input length " + std::to_string(rows) + " != " + std::to_string(sizes_.front()));
  }

  void apply_activation(Matrix& z) const {
    if (activation_ == Activation::relu)
      z = z.cwiseMax(Scalar(0));
    else
      z = z.array().tanh().matrix();
  }

  Matrix activation_derivative(const Matrix& pre) const {
    if (activation_ == Activation::relu) return (pre.array() > Scalar(0)).template cast<Scalar>().matrix();
    return (Scalar(1) - pre.array().tanh().square()).matrix();
  }

  std::vector<int> sizes_;
  Activation activation_ = Activation::tanh;
  bool activate_output_ = false;
  std::vector<DenseLayer<Scalar>> layers_;
};

using MlpParams = Mlp<double>;

struct AdamOptions {
  double learning_rate = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Adam moment accumulators for one flat parameter vector.
struct OptimizerState {
  OptimizerState() = default;
  OptimizerState(Index parameter_count, AdamOptions opts)
      : options(opts), first_moment(VectorXd::Zero(parameter_count)), second_moment(VectorXd::Zero(parameter_count)) {}

  AdamOptions options;
  long step = 0;
  VectorXd first_moment;
  VectorXd second_moment;
};

/// Objective over a flat parameter vector. Writes the gradient into `grad` (pre-sized,
/// zeroed by the caller) and returns the loss. `rng` is seeded by the optimizer's seed
/// so the objective can draw reproducible minibatches.
using Objective = std::function<double(const VectorXd& params, VectorXd& grad, std::mt19937_64& rng)>;

/// One Adam update. Throws DivergenceError if the loss or gradient is non-finite.
void adam_step(VectorXd& params, const VectorXd& grad, double loss, OptimizerState& state);

/// Runs `steps` Adam updates of `objective` starting from `params`.
VectorXd optimize(VectorXd params, const Objective& objective, int steps, OptimizerState& state, std::uint64_t seed);

MlpParams optimize(const MlpParams& params, const Objective& objective, int steps, OptimizerState& state,
                   std::uint64_t seed);

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
double grad_check(const std::function<double(const VectorXd&, VectorXd&)>& loss_fn, const VectorXd& params,
                  double perturbation = 1e-5);

}  // namespace geolevels
