// SPDX-License-Identifier: Apache-2.0
#include "comodal/trainer.hpp"

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <numeric>
#include <thread>

#include "comodal/error.hpp"
#include "comodal/metrics.hpp"
#include "comodal/random.hpp"

namespace comodal {

const char* to_string(TrainMode mode) {
  switch (mode) {
    case TrainMode::cotrain: return "cotrain";
    case TrainMode::no_mm: return "no_mm";
    case TrainMode::frozen_shared_mm: return "frozen_shared_mm";
    case TrainMode::no_kt: return "no_kt";
  }
  return "?";
}

TrainMode train_mode_from_string(const std::string& name) {
  for (auto m : {TrainMode::cotrain, TrainMode::no_mm, TrainMode::frozen_shared_mm,
                 TrainMode::no_kt}) {
    if (name == to_string(m)) return m;
  }
  throw ConfigError("unknown training mode '" + name + "'");
}

const char* to_string(AblationVariant variant) {
  switch (variant) {
    case AblationVariant::no_kt: return "no_kt";
    case AblationVariant::frozen_shared: return "frozen_shared";
    case AblationVariant::alpha_sweep: return "alpha_sweep";
  }
  return "?";
}

AblationVariant ablation_variant_from_string(const std::string& name) {
  for (auto v : {AblationVariant::no_kt, AblationVariant::frozen_shared,
                 AblationVariant::alpha_sweep}) {
    if (name == to_string(v)) return v;
  }
  throw ConfigError("unknown ablation variant '" + name + "'");
}

// ---- ExperimentConfig -----------------------------------------------------

void ExperimentConfig::validate() const {
  try {
    weights.validate();
  } catch (const ParameterError& e) {
    throw ConfigError(e.what());
  }
  if (epochs == 0) throw ConfigError("training.epochs must be positive");
  if (batch_size == 0) throw ConfigError("training.batch_size must be positive");
  if (model.modalities.size() < 2) {
    throw ConfigError("co-training needs at least 2 modalities");
  }
  for (const auto& [name, view] : data.views) {
    bool known = false;
    for (const auto& m : model.modalities) known = known || m.name == name;
    if (!known) throw ConfigError("data view '" + name + "' names no modality");
  }
  if (kt == KtMode::decision && model.task.kind != TaskKind::classification) {
    throw ConfigError("decision-level transfer needs a classification task");
  }
  const bool uses_transfer = mode == TrainMode::cotrain || mode == TrainMode::frozen_shared_mm;
  if (kt == KtMode::attention && uses_transfer && weights.alpha != 0.0) {
    if (model.stack.self_depth == 0) {
      throw ConfigError("attention-level transfer needs multimodal self blocks");
    }
    for (const auto& m : model.modalities) {
      bool has_attention = false;
      for (std::size_t i = m.attach_after; i < m.stages.size(); ++i) {
        has_attention = has_attention || m.stages[i].kind == StageKind::self_attention;
      }
      if (!has_attention) {
        throw ConfigError("attention-level transfer needs a self_attention tail stage in '" +
                          m.name + "'");
      }
    }
  }
}

ModelConfig ExperimentConfig::model_config() const {
  ModelConfig out = model;
  out.kt_projector = kt == KtMode::feature;
  return out;
}

SyntheticDatasetSpec ExperimentConfig::dataset_spec() const {
  SyntheticDatasetSpec spec;
  spec.latent_dim = data.latent_dim;
  spec.task = model.task;
  spec.train = data.train;
  spec.val = data.val;
  spec.test = data.test;
  spec.regression_scale = data.regression_scale;
  for (const auto& m : model.modalities) {
    ViewSpec view;
    view.name = m.name;
    view.input = m.input;
    if (auto it = data.views.find(m.name); it != data.views.end()) {
      view.noise = it->second.noise;
      view.rank = it->second.rank;
    }
    spec.views.push_back(view);
  }
  return spec;
}

ForwardMode ExperimentConfig::forward_mode() const {
  switch (mode) {
    case TrainMode::no_mm: return ForwardMode::no_mm;
    case TrainMode::frozen_shared_mm: return ForwardMode::frozen_shared_mm;
    default: return ForwardMode::cotrain;
  }
}

LossWeights ExperimentConfig::effective_weights() const {
  LossWeights w = weights;
  if (mode == TrainMode::no_kt) w.alpha = 0.0;
  return w;
}

KtMode ExperimentConfig::effective_kt() const {
  return mode == TrainMode::no_mm ? KtMode::none : kt;
}

// ---- evaluation -----------------------------------------------------------

BranchMetrics branch_metrics(std::span<const double> predictions, const TaskSpec& task,
                             const Split& split) {
  BranchMetrics m;
  if (task.kind == TaskKind::classification) {
    m.accuracy = accuracy(predictions, task.classes, split.labels());
  } else {
    m.mae = mean_absolute_error(predictions, split.targets());
    m.correlation = pearson_correlation(predictions, split.targets());
    m.acc_7 = seven_class_accuracy(predictions, split.targets());
  }
  return m;
}

MetricsRecord evaluate(const CoTrainModel& model, const Split& split, ForwardMode mode,
                       std::size_t batch_size) {
  if (split.size() == 0) throw ContractError("evaluation on an empty split");
  NoGradGuard no_grad;
  std::map<std::string, std::vector<double>> preds;
  for (std::size_t begin = 0; begin < split.size(); begin += batch_size) {
    const std::size_t end = std::min(split.size(), begin + batch_size);
    const BranchOutputs out = model.forward_all(split.batch(begin, end), mode);
    for (const auto& [name, uni] : out.uni) {
      auto& p = preds[name];
      p.insert(p.end(), uni.pred.data().begin(), uni.pred.data().end());
    }
    if (out.has_mm()) {
      auto& p = preds["mm"];
      p.insert(p.end(), out.mm_pred.data().begin(), out.mm_pred.data().end());
    }
  }
  MetricsRecord record;
  for (const auto& [name, p] : preds) {
    record.branches[name] = branch_metrics(p, model.config().task, split);
  }
  return record;
}

BranchMetrics evaluate(const UnimodalModel& model, const Split& split,
                       std::size_t batch_size) {
  if (split.size() == 0) throw ContractError("evaluation on an empty split");
  NoGradGuard no_grad;
  std::vector<double> preds;
  for (std::size_t begin = 0; begin < split.size(); begin += batch_size) {
    const std::size_t end = std::min(split.size(), begin + batch_size);
    const Tensor p = model.forward(split.batch(begin, end).inputs.at(model.modality()));
    preds.insert(preds.end(), p.data().begin(), p.data().end());
  }
  return branch_metrics(preds, model.task(), split);
}

namespace {

double selection_score(const BranchMetrics& m, const TaskSpec& task) {
  return task.kind == TaskKind::classification ? m.accuracy : -m.mae;
}

}  // namespace

Selection select_best(const std::vector<MetricsRecord>& records, const std::string& branch,
                      const TaskSpec& task) {
  std::optional<Selection> best;
  double best_score = -std::numeric_limits<double>::infinity();
  for (const auto& r : records) {
    if (r.split != "val") continue;
    auto it = r.branches.find(branch);
    if (it == r.branches.end()) continue;
    const double score = selection_score(it->second, task);
    if (!best || score > best_score) {
      best = Selection{r.epoch, "best_" + branch + "_epoch" + std::to_string(r.epoch)};
      best_score = score;
    }
  }
  if (!best) throw ContractError("no validation record for branch '" + branch + "'");
  return *best;
}

Snapshot snapshot(const CoTrainModel& model) {
  Snapshot out;
  for (const auto& e : model.parameters()) {
    out.emplace_back(e.ref.tensor.data().begin(), e.ref.tensor.data().end());
  }
  return out;
}

void restore(const CoTrainModel& model, const Snapshot& values) {
  const auto& params = model.parameters();
  if (values.size() != params.size()) throw ContractError("snapshot does not fit model");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor t = params[i].ref.tensor;
    if (values[i].size() != t.numel()) throw ContractError("snapshot does not fit model");
    std::copy(values[i].begin(), values[i].end(), t.mutable_data().begin());
  }
}

// ---- training -------------------------------------------------------------

TrainResult train(const ExperimentConfig& config) {
  config.validate();
  return train(config, generate_synthetic(config.dataset_spec(), config.data_seed()));
}

TrainResult train(const ExperimentConfig& config, const Dataset& data) {
  config.validate();
  TrainResult result{CoTrainModel(config.model_config()), {}, {}};
  CoTrainModel& model = result.model;
  model.initialize(config.seed);
  const TaskSpec& task = model.config().task;
  const ForwardMode forward_mode = config.forward_mode();
  const LossWeights weights = config.effective_weights();
  const KtMode kt = config.effective_kt();

  ParamList refs;
  for (const auto& e : model.parameters()) refs.push_back(e.ref);
  Adam adam(config.optimizer);
  Rng shuffle_rng(derive_seed(config.seed, "shuffle"));

  std::vector<std::string> branches = model.modalities();
  if (forward_mode != ForwardMode::no_mm) branches.push_back("mm");
  std::map<std::string, double> best_score;

  std::vector<std::size_t> order(data.train.size());
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    MetricsRecord train_record;
    train_record.epoch = epoch;
    train_record.split = "train";
    std::size_t batch_index = 0;
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size, ++batch_index) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      const MultimodalBatch batch =
          data.train.batch(std::span<const std::size_t>(order).subspan(begin, end - begin));
      const BranchOutputs outputs =
          model.forward_all(batch, forward_mode, config.kt_through_stem);
      const TotalLoss loss = total_loss(model, outputs, batch, weights, kt);
      for (const auto& [term, value] : loss.breakdown) {
        if (!std::isfinite(value)) {
          throw DivergenceError("non-finite loss term '" + term + "' (" +
                                std::to_string(value) + ") at epoch " +
                                std::to_string(epoch) + ", batch " +
                                std::to_string(batch_index));
        }
        train_record.loss[term] += value * static_cast<double>(end - begin);
      }
      if (loss.value.requires_grad()) {
        backward(loss.value);
        adam.step(refs);
        model.zero_grad();
      }
    }
    for (auto& [term, value] : train_record.loss) value /= static_cast<double>(order.size());
    result.records.push_back(std::move(train_record));

    MetricsRecord val = evaluate(model, data.val, forward_mode);
    val.epoch = epoch;
    val.split = "val";
    for (const auto& branch : branches) {
      const double score = selection_score(val.branches.at(branch), task);
      auto it = best_score.find(branch);
      if (it == best_score.end() || score > it->second) {
        best_score[branch] = score;
        result.best[branch].parameters = snapshot(model);
      }
    }
    result.records.push_back(std::move(val));
  }

  const Snapshot final_values = snapshot(model);
  for (const auto& branch : branches) {
    BranchResult& best = result.best[branch];
    best.selection = select_best(result.records, branch, task);
    restore(model, best.parameters);
    best.test = evaluate(model, data.test, forward_mode).branches.at(branch);
  }
  restore(model, final_values);
  return result;
}

// ---- ablation -------------------------------------------------------------

std::size_t thread_cap_from_env() {
  const char* raw = std::getenv("COMODAL_THREADS");
  if (!raw) return 1;
  char* end = nullptr;
  const long value = std::strtol(raw, &end, 10);
  if (end == raw || *end != '\0' || value < 1) return 1;
  return static_cast<std::size_t>(value);
}

AblationTable run_ablation(const ExperimentConfig& base, AblationVariant variant,
                           const std::vector<std::uint64_t>& seeds, std::size_t threads) {
  if (seeds.empty()) throw ContractError("ablation needs at least one seed");
  base.validate();

  std::vector<std::pair<std::string, ExperimentConfig>> values;
  switch (variant) {
    case AblationVariant::no_kt: {
      ExperimentConfig a = base, b = base;
      a.mode = TrainMode::cotrain;
      b.mode = TrainMode::no_kt;
      values = {{"cotrain", a}, {"no_kt", b}};
      break;
    }
    case AblationVariant::frozen_shared: {
      ExperimentConfig a = base, b = base;
      a.mode = TrainMode::cotrain;
      b.mode = TrainMode::frozen_shared_mm;
      values = {{"cotrain", a}, {"frozen_shared_mm", b}};
      break;
    }
    case AblationVariant::alpha_sweep:
      for (double alpha : {1.0, 5.0, 10.0, 20.0}) {
        ExperimentConfig c = base;
        c.mode = TrainMode::cotrain;
        c.weights.alpha = alpha;
        c.weights.beta = 1.0;
        c.weights.gamma = 1.0;
        values.emplace_back(std::to_string(static_cast<int>(alpha)), c);
      }
      break;
  }

  struct Job {
    std::size_t value;
    std::uint64_t seed;
    std::map<std::string, BranchMetrics> metrics;
    std::exception_ptr error;
  };
  std::vector<Job> jobs;
  for (std::size_t v = 0; v < values.size(); ++v) {
    for (auto seed : seeds) jobs.push_back({v, seed, {}, nullptr});
  }
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs.size(); i = next++) {
      try {
        ExperimentConfig c = values[jobs[i].value].second;
        c.seed = jobs[i].seed;
        const TrainResult r = train(c);
        for (const auto& [branch, best] : r.best) jobs[i].metrics[branch] = best.test;
      } catch (...) {
        jobs[i].error = std::current_exception();
      }
    }
  };
  const std::size_t workers = std::max<std::size_t>(1, std::min(threads, jobs.size()));
  if (workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (const auto& job : jobs) {
    if (job.error) std::rethrow_exception(job.error);
  }

  AblationTable table{variant, base.model.task, {}, {}};
  for (const auto& m : base.model.modalities) table.branches.push_back(m.name);
  table.branches.push_back("mm");
  for (std::size_t v = 0; v < values.size(); ++v) {
    std::map<std::string, BranchMetrics> totals;
    std::size_t count = 0;
    for (const auto& job : jobs) {
      if (job.value != v) continue;
      table.rows.push_back({values[v].first, std::to_string(job.seed), job.metrics});
      for (const auto& [branch, m] : job.metrics) {
        auto& t = totals[branch];
        auto add = [](double& acc, double x) { acc = std::isnan(acc) ? x : acc + x; };
        add(t.accuracy, m.accuracy);
        add(t.mae, m.mae);
        add(t.correlation, m.correlation);
        add(t.acc_7, m.acc_7);
      }
      ++count;
    }
    for (auto& [branch, t] : totals) {
      const double n = static_cast<double>(count);
      t.accuracy /= n;
      t.mae /= n;
      t.correlation /= n;
      t.acc_7 /= n;
    }
    table.rows.push_back({values[v].first, "mean", totals});
  }
  return table;
}

}  // namespace comodal
