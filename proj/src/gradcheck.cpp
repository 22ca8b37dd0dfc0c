// SPDX-License-Identifier: Apache-2.0
#include "comodal/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "comodal/error.hpp"

namespace comodal {

namespace {

template <typename F>
double central_difference(F&& at, double x, double h) {
  return (-at(x + 2 * h) + 8 * at(x + h) - 8 * at(x - h) + at(x - 2 * h)) / (12 * h);
}

void validate(const GradCheckOptions& o) {
  if (!(o.h > 0) || !(o.floor > 0) || !(o.smooth_tolerance > 0)) {
    throw ParameterError("finite difference step, floor and tolerance must be positive");
  }
}

template <typename F>
void compare(GradCheckReport& report, double analytic, F&& at, double x,
             const GradCheckOptions& o) {
  const double coarse = central_difference(at, x, o.h);
  const double fine = central_difference(at, x, o.h / 2);
  const double scale = std::max({std::fabs(coarse), std::fabs(fine), o.floor});
  if (std::fabs(coarse - fine) / scale > o.smooth_tolerance) {
    ++report.nonsmooth;
    return;
  }
  const double denom = std::max({std::fabs(analytic), std::fabs(fine), o.floor});
  report.max_error = std::max(report.max_error, std::fabs(analytic - fine) / denom);
  ++report.checked;
}

}  // namespace

GradCheckReport finite_diff_check(const std::function<Tensor(const Tensor&)>& f,
                                  const Tensor& x, const GradCheckOptions& options) {
  validate(options);
  std::vector<double> base(x.data().begin(), x.data().end());
  Tensor probe = Tensor::from(x.shape(), base, /*requires_grad=*/true);
  Tensor y = f(probe);
  if (y.numel() != 1) throw ContractError("finite_diff_check needs scalar f");
  std::vector<double> analytic(base.size(), 0.0);
  if (y.requires_grad()) {
    backward(y);
    if (probe.has_grad()) {
      std::copy(probe.grad().begin(), probe.grad().end(), analytic.begin());
    }
  }
  NoGradGuard no_grad;
  GradCheckReport report;
  for (std::size_t i = 0; i < base.size(); ++i) {
    auto shifted = base;
    auto at = [&](double v) {
      shifted[i] = v;
      return f(Tensor::from(x.shape(), shifted)).item();
    };
    compare(report, analytic[i], at, base[i], options);
  }
  return report;
}

GradCheckReport finite_diff_check_params(const std::function<Tensor()>& loss,
                                         std::span<Tensor> params,
                                         const GradCheckOptions& options) {
  return finite_diff_check_params(loss, loss, params, options);
}

GradCheckReport finite_diff_check_params(const std::function<Tensor()>& analytic_loss,
                                         const std::function<Tensor()>& loss,
                                         std::span<Tensor> params,
                                         const GradCheckOptions& options) {
  validate(options);
  for (auto& p : params) p.zero_grad();
  Tensor y = analytic_loss();
  if (y.numel() != 1) throw ContractError("finite_diff_check needs scalar loss");
  if (y.requires_grad()) backward(y);
  GradCheckReport report;
  NoGradGuard no_grad;
  for (auto& p : params) {
    std::vector<double> analytic(p.numel(), 0.0);
    if (p.has_grad()) std::copy(p.grad().begin(), p.grad().end(), analytic.begin());
    auto values = p.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double saved = values[i];
      auto at = [&](double v) {
        values[i] = v;
        return loss().item();
      };
      compare(report, analytic[i], at, saved, options);
      values[i] = saved;
    }
    p.zero_grad();
  }
  return report;
}

}  // namespace comodal
