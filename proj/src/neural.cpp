#include "geolevels/neural.hpp"

#include <algorithm>

namespace geolevels {

const char* to_string(Activation act) { return act == Activation::relu ? "relu" : "tanh"; }

Activation activation_from_string(const std::string& name) {
  if (name == "relu") return Activation::relu;
  if (name == "tanh") return Activation::tanh;
  throw ConfigError("unknown activation '" + name + "'");
}

void adam_step(VectorXd& params, const VectorXd& grad, double loss, OptimizerState& state) {
  const long step_index = state.step;
  if (!std::isfinite(loss)) throw DivergenceError(step_index, "non-finite loss");
  if (!grad.allFinite()) throw DivergenceError(step_index, "non-finite gradient");
  if (grad.size() != params.size() || state.first_moment.size() != params.size())
    throw ShapeError("optimizer state does not match parameter count");

  const AdamOptions& o = state.options;
  state.step += 1;
  state.first_moment = o.beta1 * state.first_moment + (1.0 - o.beta1) * grad;
  state.second_moment = o.beta2 * state.second_moment + (1.0 - o.beta2) * grad.cwiseAbs2();
  const double c1 = 1.0 - std::pow(o.beta1, double(state.step));
  const double c2 = 1.0 - std::pow(o.beta2, double(state.step));
  params.array() -= o.learning_rate * (state.first_moment.array() / c1) /
                    ((state.second_moment.array() / c2).sqrt() + o.epsilon);
  if (!params.allFinite()) throw DivergenceError(step_index, "non-finite parameters after update");
}

VectorXd optimize(VectorXd params, const Objective& objective, int steps, OptimizerState& state, std::uint64_t seed) {
  if (steps <= 0) throw ConfigError("optimize: steps must be positive");
  if (state.first_moment.size() != params.size()) state = OptimizerState(params.size(), state.options);
  std::mt19937_64 rng(seed);
  VectorXd grad(params.size());
  for (int s = 0; s < steps; ++s) {
    grad.setZero();
    const double loss = objective(params, grad, rng);
    adam_step(params, grad, loss, state);
  }
  return params;
}

MlpParams optimize(const MlpParams& params, const Objective& objective, int steps, OptimizerState& state,
                   std::uint64_t seed) {
  MlpParams out = params;
  out.assign(optimize(params.flatten(), objective, steps, state, seed));
  return out;
}

double grad_check(const std::function<double(const VectorXd&, VectorXd&)>& loss_fn, const VectorXd& params,
                  double perturbation) {
  if (!(perturbation > 0.0)) throw ConfigError("grad_check: perturbation must be positive");
  VectorXd analytic = VectorXd::Zero(params.size());
  const double base = loss_fn(params, analytic);
  if (!std::isfinite(base) || !analytic.allFinite()) throw DataError("grad_check: non-finite loss at base point");

  VectorXd probe = params;
  VectorXd scratch(params.size());
  double worst = 0.0;
  for (Index i = 0; i < params.size(); ++i) {
    probe[i] = params[i] + perturbation;
    scratch.setZero();
    const double up = loss_fn(probe, scratch);
    probe[i] = params[i] - perturbation;
    scratch.setZero();
    const double down = loss_fn(probe, scratch);
    probe[i] = params[i];
    if (!std::isfinite(up) || !std::isfinite(down))
      throw DataError("grad_check: non-finite loss under perturbation of coordinate " + std::to_string(i));
    const double numeric = (up - down) / (2.0 * perturbation);
    worst = std::max(worst, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

}  // namespace geolevels
