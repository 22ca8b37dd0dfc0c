// SPDX-License-Identifier: Apache-2.0
#include "comodal/optimizer.hpp"

#include <cmath>

#include "comodal/error.hpp"

namespace comodal {

Adam::Adam(OptimizerConfig config) : config_(config) {
  if (!(config.lr > 0) || !(config.beta1 >= 0 && config.beta1 < 1) ||
      !(config.beta2 >= 0 && config.beta2 < 1) || !(config.eps > 0)) {
    throw ParameterError("invalid Adam hyperparameters");
  }
}

void Adam::step(std::vector<ParamRef>& params) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) continue;
    auto& s = state_[p.name];
    const auto g = p.tensor.grad();
    auto w = p.tensor.mutable_data();
    if (s.m.empty()) {
      s.m.assign(w.size(), 0.0);
      s.v.assign(w.size(), 0.0);
    }
    ++s.steps;
    const double c1 = 1.0 - std::pow(config_.beta1, static_cast<double>(s.steps));
    const double c2 = 1.0 - std::pow(config_.beta2, static_cast<double>(s.steps));
    for (std::size_t i = 0; i < w.size(); ++i) {
      s.m[i] = config_.beta1 * s.m[i] + (1.0 - config_.beta1) * g[i];
      s.v[i] = config_.beta2 * s.v[i] + (1.0 - config_.beta2) * g[i] * g[i];
      const double m_hat = s.m[i] / c1;
      const double v_hat = s.v[i] / c2;
      w[i] -= config_.lr * m_hat / (std::sqrt(v_hat) + config_.eps);
    }
  }
}

}  // namespace comodal
