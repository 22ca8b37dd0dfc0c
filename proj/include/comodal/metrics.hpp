// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <span>

namespace comodal {

/// Fraction of rows of logits[n x classes] whose argmax equals the label.
/// Ties resolve to the lowest class index.
double accuracy(std::span<const double> logits, std::size_t classes,
                std::span<const int> labels);
double mean_absolute_error(std::span<const double> pred, std::span<const double> target);
/// Pearson correlation; 0 when either side has zero variance.
double pearson_correlation(std::span<const double> pred, std::span<const double> target);
/// Exact-match rate after rounding both sides to the nearest integer
/// (halves away from zero) and clipping to [-3, 3].
double seven_class_accuracy(std::span<const double> pred, std::span<const double> target);

}  // namespace comodal
