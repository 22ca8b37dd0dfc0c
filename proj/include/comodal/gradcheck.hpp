// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <span>

#include "comodal/tensor.hpp"

namespace comodal {

/// Per element, the numeric derivative is the fourth-order central difference
/// at steps h and h/2. Elements whose two estimates disagree sit next to a
/// kink of the forward function and are counted as nonsmooth instead of
/// compared. The error is |analytic - numeric| / max(|analytic|, |numeric|,
/// floor), so magnitudes below the floor are compared absolutely.
struct GradCheckReport {
  double max_error = 0.0;
  std::size_t checked = 0;
  std::size_t nonsmooth = 0;
};

struct GradCheckOptions {
  double h = 1e-3;
  double floor = 1e-4;
  double smooth_tolerance = 1e-7;
};

/// Gradient of scalar `f` at `x`.
GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, const GradCheckOptions& options = {});

/// Gradient of `loss` against every element of `params`, perturbed in place.
/// `loss` must rebuild its graph from the current parameter values.
GradCheckReport finite_diff_check_params(const std::function<Tensor()>& loss,
                                         std::span<Tensor> params,
                                         const GradCheckOptions& options = {});

/// Analytic gradient of `analytic` against central differences of `numeric`,
/// for losses whose gradient is defined through a stop-gradient surrogate.
GradCheckReport finite_diff_check_params(const std::function<Tensor()>& analytic,
                                         const std::function<Tensor()>& numeric,
                                         std::span<Tensor> params,
                                         const GradCheckOptions& options = {});

}  // namespace comodal
