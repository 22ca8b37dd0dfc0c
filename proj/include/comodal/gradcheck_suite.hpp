// SPDX-License-Identifier: Apache-2.0
//
// Finite-difference checks of every differentiable op, layer and loss.
#pragma once

#include <string>
#include <vector>

namespace comodal {

struct GradCheckCase {
  std::string group;  // "ops", "layers" or "losses"
  std::string name;
  double error = 0.0;  // max relative error
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;
};

std::vector<std::string> gradcheck_case_names();

/// Runs the cases selected by `filter`: "all", a group name, or a
/// comma-separated list of case names. Throws LookupError for unknown names.
std::vector<GradCheckCase> run_gradcheck_suite(const std::string& filter = "all");

}  // namespace comodal
