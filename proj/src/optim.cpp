#include "glfusion/optim.hpp"

#include <cmath>
#include <string>

namespace glf {

OptimizerState make_optimizer_state(const std::vector<Parameter*>& params, AdamWSettings settings) {
  OptimizerState state;
  state.settings = settings;
  for (const Parameter* p : params) {
    state.first_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
    state.second_moment.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
  }
  return state;
}

void adamw_step(OptimizerState& state, const std::vector<Parameter*>& params, double learning_rate_scale) {
  if (state.first_moment.size() != params.size() || state.second_moment.size() != params.size()) {
    throw AutodiffError("adamw_step: optimizer moments not initialized for " + std::to_string(params.size()) +
                        " parameters");
  }
  const AdamWSettings& s = state.settings;
  ++state.step;
  const double lr = s.learning_rate * learning_rate_scale;
  const double bc1 = 1.0 - std::pow(s.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(s.beta2, static_cast<double>(state.step));
  for (size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    Matrix& m = state.first_moment[i];
    Matrix& v = state.second_moment[i];
    if (m.rows() != p.value.rows() || m.cols() != p.value.cols()) {
      throw AutodiffError("adamw_step: moment shape mismatch for " + p.name);
    }
    if (p.trainable) {
      m = s.beta1 * m + (1.0 - s.beta1) * p.grad;
      v = s.beta2 * v + (1.0 - s.beta2) * p.grad.cwiseProduct(p.grad);
      if (p.decay && s.weight_decay != 0.0) p.value *= (1.0 - lr * s.weight_decay);
      p.value.array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + s.epsilon);
    }
    p.zero_grad();
  }
}

double clip_gradient_norm(const std::vector<Parameter*>& params, double max_norm) {
  double sq = 0.0;
  for (const Parameter* p : params) sq += p->grad.squaredNorm();
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double f = max_norm / norm;
    for (Parameter* p : params) p->grad *= f;
  }
  return norm;
}

}  // namespace glf
