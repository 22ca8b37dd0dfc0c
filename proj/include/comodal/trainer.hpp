// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "comodal/data.hpp"
#include "comodal/model.hpp"
#include "comodal/objectives.hpp"
#include "comodal/optimizer.hpp"

namespace comodal {

enum class TrainMode { cotrain, no_mm, frozen_shared_mm, no_kt };

const char* to_string(TrainMode mode);
TrainMode train_mode_from_string(const std::string& name);

struct ViewParams {
  double noise = 0.5;
  std::size_t rank = 0;
};

struct DataConfig {
  std::size_t latent_dim = 8;
  std::size_t train = 400;
  std::size_t val = 200;
  std::size_t test = 1000;
  double regression_scale = 1.5;
  // Pins the dataset independently of the run seed when set.
  std::optional<std::uint64_t> seed;
  std::map<std::string, ViewParams> views;  // keyed by modality name
};

struct ExperimentConfig {
  ModelConfig model;
  DataConfig data;
  LossWeights weights;
  KtMode kt = KtMode::decision;
  // When false, transfer gradients stop at the stem/tail boundary.
  bool kt_through_stem = true;
  OptimizerConfig optimizer;
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 1;
  TrainMode mode = TrainMode::cotrain;

  /// Throws ConfigError on inconsistent settings.
  void validate() const;
  /// Architecture actually built for this experiment (adds transfer
  /// projectors for feature-level transfer).
  ModelConfig model_config() const;
  SyntheticDatasetSpec dataset_spec() const;
  std::uint64_t data_seed() const { return data.seed.value_or(seed); }
  /// Forward mode, effective loss weights and transfer mode after applying
  /// the training mode.
  ForwardMode forward_mode() const;
  LossWeights effective_weights() const;
  KtMode effective_kt() const;
};

/// Metrics of one branch. Classification fills accuracy; regression fills
/// mae, correlation and acc_7. Unused fields are NaN.
struct BranchMetrics {
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double mae = std::numeric_limits<double>::quiet_NaN();
  double correlation = std::numeric_limits<double>::quiet_NaN();
  double acc_7 = std::numeric_limits<double>::quiet_NaN();
};

struct MetricsRecord {
  std::size_t epoch = 0;
  std::string split;
  std::map<std::string, BranchMetrics> branches;  // modality names and "mm"
  std::map<std::string, double> loss;             // mean train loss terms
};

/// Metrics of every branch present on `split`. Evaluation runs without
/// recording a tape.
MetricsRecord evaluate(const CoTrainModel& model, const Split& split, ForwardMode mode,
                       std::size_t batch_size = 256);
BranchMetrics evaluate(const UnimodalModel& model, const Split& split,
                       std::size_t batch_size = 256);
BranchMetrics branch_metrics(std::span<const double> predictions, const TaskSpec& task,
                             const Split& split);

struct Selection {
  std::size_t epoch = 0;
  std::string tag;
};

/// Epoch with the best validation metric of one branch (accuracy, or MAE for
/// regression); ties go to the earlier epoch.
Selection select_best(const std::vector<MetricsRecord>& records, const std::string& branch,
                      const TaskSpec& task);

/// Parameter values of a whole model, in registry order.
using Snapshot = std::vector<std::vector<double>>;
Snapshot snapshot(const CoTrainModel& model);
void restore(const CoTrainModel& model, const Snapshot& values);

struct BranchResult {
  Selection selection;
  Snapshot parameters;  // whole model at the selected epoch
  BranchMetrics test;   // test metrics at the selected epoch
};

struct TrainResult {
  CoTrainModel model;
  std::vector<MetricsRecord> records;  // "train" and "val" per epoch
  std::map<std::string, BranchResult> best;
};

/// Adam on the total loss for the configured epochs, validating after every
/// epoch and keeping the best epoch of each branch independently. Throws
/// DivergenceError naming the first non-finite loss term.
TrainResult train(const ExperimentConfig& config, const Dataset& data);
TrainResult train(const ExperimentConfig& config);

enum class AblationVariant { no_kt, frozen_shared, alpha_sweep };

const char* to_string(AblationVariant variant);
AblationVariant ablation_variant_from_string(const std::string& name);

struct AblationRow {
  std::string value;  // variant value, e.g. "no_kt" or "5"
  std::string seed;   // seed, or "mean"
  std::map<std::string, BranchMetrics> metrics;
};

struct AblationTable {
  AblationVariant variant;
  TaskSpec task;
  std::vector<std::string> branches;
  std::vector<AblationRow> rows;
};

/// Matched runs differing only in the named variant, for every seed, plus a
/// mean row per variant value. Runs execute on up to `threads` workers.
AblationTable run_ablation(const ExperimentConfig& base, AblationVariant variant,
                           const std::vector<std::uint64_t>& seeds,
                           std::size_t threads = 1);

/// Worker cap from COMODAL_THREADS, defaulting to 1.
std::size_t thread_cap_from_env();

}  // namespace comodal
