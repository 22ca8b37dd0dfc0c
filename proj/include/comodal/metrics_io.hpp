// SPDX-License-Identifier: Apache-2.0
//
// JSON Lines metrics streams and CSV ablation tables.
#pragma once

#include <iosfwd>
#include <string>
#include <vector>

#include "comodal/trainer.hpp"

namespace comodal {

/// 17 significant digits; NaN and infinities become null.
std::string format_double(double value);

/// One line per (record, branch, metric). Train records emit a single line
/// with branch "all" and metric "loss" holding the total. Every line carries
/// run_id, epoch, split, branch, metric, value and the loss breakdown.
std::vector<std::string> metrics_lines(const std::string& run_id,
                                       const MetricsRecord& record,
                                       const TaskSpec& task);
void write_metrics(std::ostream& out, const std::string& run_id,
                   const std::vector<MetricsRecord>& records, const TaskSpec& task);

/// Header: variant column, seed, then <branch>.<metric> per branch.
void write_ablation_csv(std::ostream& out, const AblationTable& table);

/// Metric names reported for a task.
std::vector<std::string> metric_names(const TaskSpec& task);
double metric_value(const BranchMetrics& metrics, const std::string& name);

}  // namespace comodal
