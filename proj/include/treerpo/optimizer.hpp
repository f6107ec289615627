// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>

#include "treerpo/model.hpp"
#include "treerpo/types.hpp"

namespace treerpo {

struct OptimizerConfig {
  double step_size = 3e-4;
  double beta1 = 0.9;   // first-moment decay
  double beta2 = 0.999; // second-moment decay
  double eps = 1e-8;    // stability epsilon

  void validate() const {
    if (step_size <= 0.0) throw ConfigError("optimizer step size must be positive");
    if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0)
      throw ConfigError("moment decays must lie in [0,1)");
    if (eps <= 0.0) throw ConfigError("optimizer epsilon must be positive");
  }
};

// Adam with bias-corrected moment estimates.
struct AdamState {
  std::map<std::string, Matrix> m, v;
  long t = 0;
};

void adam_step(PolicyModel& model, const GradientSet& grads, AdamState& state,
               const OptimizerConfig& cfg);

}  // namespace treerpo
