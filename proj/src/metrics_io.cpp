// SPDX-License-Identifier: Apache-2.0
#include "comodal/metrics_io.hpp"

#include <cmath>
#include <cstdio>
#include <ostream>

#include "comodal/error.hpp"

namespace comodal {

namespace {

std::string quote(const std::string& s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"' || c == '\\') out.push_back('\\');
    out.push_back(c);
  }
  return out + "\"";
}

std::string loss_object(const std::map<std::string, double>& loss) {
  std::string out = "{";
  bool first = true;
  for (const auto& [term, value] : loss) {
    if (!first) out += ",";
    out += quote(term) + ":" + format_double(value);
    first = false;
  }
  return out + "}";
}

std::string line(const std::string& run_id, const MetricsRecord& record,
                 const std::string& branch, const std::string& metric, double value) {
  return "{\"run_id\":" + quote(run_id) + ",\"epoch\":" + std::to_string(record.epoch) +
         ",\"split\":" + quote(record.split) + ",\"branch\":" + quote(branch) +
         ",\"metric\":" + quote(metric) + ",\"value\":" + format_double(value) +
         ",\"loss\":" + loss_object(record.loss) + "}";
}

}  // namespace

std::string format_double(double value) {
  if (!std::isfinite(value)) return "null";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", value);
  return buf;
}

std::vector<std::string> metric_names(const TaskSpec& task) {
  if (task.kind == TaskKind::classification) return {"accuracy"};
  return {"mae", "correlation", "acc_7"};
}

double metric_value(const BranchMetrics& m, const std::string& name) {
  if (name == "accuracy") return m.accuracy;
  if (name == "mae") return m.mae;
  if (name == "correlation") return m.correlation;
  if (name == "acc_7") return m.acc_7;
  throw LookupError("unknown metric '" + name + "'");
}

std::vector<std::string> metrics_lines(const std::string& run_id, const MetricsRecord& record,
                                       const TaskSpec& task) {
  std::vector<std::string> out;
  if (auto it = record.loss.find("total"); it != record.loss.end()) {
    out.push_back(line(run_id, record, "all", "loss", it->second));
  }
  for (const auto& [branch, metrics] : record.branches) {
    for (const auto& name : metric_names(task)) {
      out.push_back(line(run_id, record, branch, name, metric_value(metrics, name)));
    }
  }
  return out;
}

void write_metrics(std::ostream& out, const std::string& run_id,
                   const std::vector<MetricsRecord>& records, const TaskSpec& task) {
  for (const auto& r : records) {
    for (const auto& l : metrics_lines(run_id, r, task)) out << l << '\n';
  }
}

void write_ablation_csv(std::ostream& out, const AblationTable& table) {
  const std::string key = table.variant == AblationVariant::alpha_sweep ? "alpha" : "variant";
  const auto names = metric_names(table.task);
  out << key << ",seed";
  for (const auto& b : table.branches) {
    for (const auto& n : names) out << ',' << b << '.' << n;
  }
  out << '\n';
  for (const auto& row : table.rows) {
    out << row.value << ',' << row.seed;
    for (const auto& b : table.branches) {
      auto it = row.metrics.find(b);
      for (const auto& n : names) {
        out << ',';
        if (it != row.metrics.end()) {
          const double v = metric_value(it->second, n);
          if (std::isfinite(v)) out << format_double(v);
        }
      }
    }
    out << '\n';
  }
}

}  // namespace comodal
