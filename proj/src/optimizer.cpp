// SPDX-License-Identifier: Apache-2.0
#include "treerpo/optimizer.hpp"

#include <cmath>

namespace treerpo {

void adam_step(PolicyModel& model, const GradientSet& grads, AdamState& state,
               const OptimizerConfig& cfg) {
  cfg.validate();
  ++state.t;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.t));
  for (auto& [name, param] : model.params) {
    auto git = grads.find(name);
    if (git == grads.end()) throw InvalidCallError("gradient missing for parameter " + name);
    const Matrix& g = git->second;
    if (g.rows() != param.rows() || g.cols() != param.cols())
      throw InvalidCallError("gradient shape mismatch for parameter " + name);
    Matrix& m = state.m.try_emplace(name, Matrix::Zero(g.rows(), g.cols())).first->second;
    Matrix& v = state.v.try_emplace(name, Matrix::Zero(g.rows(), g.cols())).first->second;
    m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
    v = cfg.beta2 * v + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    Matrix mh = m / bc1;
    Matrix vh = v / bc2;
    param -= cfg.step_size * mh.cwiseQuotient((vh.cwiseSqrt().array() + cfg.eps).matrix());
    if (!param.allFinite()) throw NumericError("non-finite parameter after update: " + name);
  }
}

}  // namespace treerpo
