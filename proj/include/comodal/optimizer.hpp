// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "comodal/layers.hpp"

namespace comodal {

struct OptimizerConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with per-parameter step counts. Parameters without a gradient buffer
/// are skipped entirely: neither their values nor their moments change.
class Adam {
 public:
  explicit Adam(OptimizerConfig config);

  void step(std::vector<ParamRef>& params);
  const OptimizerConfig& config() const { return config_; }

 private:
  struct Moments {
    std::vector<double> m, v;
    std::size_t steps = 0;
  };
  OptimizerConfig config_;
  std::map<std::string, Moments> state_;
};

}  // namespace comodal
