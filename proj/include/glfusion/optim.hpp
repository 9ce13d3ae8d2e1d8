#pragma once

#include "glfusion/autodiff.hpp"

#include <cstdint>
#include <vector>

namespace glf {

struct AdamWSettings {
  double learning_rate = 1e-3;
  double weight_decay = 0.01;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// The values used for the 8B-parameter backbone; kept selectable by config.
inline AdamWSettings backbone_adamw_settings() {
  AdamWSettings s;
  s.learning_rate = 3e-5;
  s.weight_decay = 0.1;
  return s;
}

struct OptimizerState {
  AdamWSettings settings;
  std::int64_t step = 0;
  std::vector<Matrix> first_moment;
  std::vector<Matrix> second_moment;
};

OptimizerState make_optimizer_state(const std::vector<Parameter*>& params, AdamWSettings settings = {});

/// Decoupled weight decay Adam step. Increments the step counter and zeroes
/// every gradient afterwards. `learning_rate_scale` multiplies the configured
/// rate (schedules). Throws AutodiffError when moments do not match params.
void adamw_step(OptimizerState& state, const std::vector<Parameter*>& params, double learning_rate_scale = 1.0);

/// Rescales all gradients so their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_gradient_norm(const std::vector<Parameter*>& params, double max_norm);

}  // namespace glf
