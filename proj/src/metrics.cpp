// SPDX-License-Identifier: Apache-2.0
#include "comodal/metrics.hpp"

#include <algorithm>
#include <cmath>

#include "comodal/error.hpp"

namespace comodal {

namespace {

void check_sizes(std::size_t a, std::size_t b) {
  if (a == 0) throw ContractError("metric over an empty split");
  if (a != b) throw ShapeError("metric inputs differ in length");
}

double bucket(double v) { return std::clamp(std::round(v), -3.0, 3.0); }

}  // namespace

double accuracy(std::span<const double> logits, std::size_t classes,
                std::span<const int> labels) {
  if (classes == 0) throw ShapeError("accuracy needs at least one class");
  check_sizes(labels.size(), logits.size() / classes);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto row = logits.subspan(i * classes, classes);
    const auto best = std::max_element(row.begin(), row.end()) - row.begin();
    if (best == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(labels.size());
}

double mean_absolute_error(std::span<const double> pred, std::span<const double> target) {
  check_sizes(pred.size(), target.size());
  double total = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) total += std::fabs(pred[i] - target[i]);
  return total / static_cast<double>(pred.size());
}

double pearson_correlation(std::span<const double> pred, std::span<const double> target) {
  check_sizes(pred.size(), target.size());
  const double n = static_cast<double>(pred.size());
  double mp = 0, mt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    mp += pred[i];
    mt += target[i];
  }
  mp /= n;
  mt /= n;
  double cov = 0, vp = 0, vt = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double a = pred[i] - mp, b = target[i] - mt;
    cov += a * b;
    vp += a * a;
    vt += b * b;
  }
  if (vp == 0 || vt == 0) return 0.0;
  return cov / std::sqrt(vp * vt);
}

double seven_class_accuracy(std::span<const double> pred, std::span<const double> target) {
  check_sizes(pred.size(), target.size());
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (bucket(pred[i]) == bucket(target[i])) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

}  // namespace comodal
