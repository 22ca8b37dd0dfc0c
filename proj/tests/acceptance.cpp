// SPDX-License-Identifier: Apache-2.0
//
// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
// failure.
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "comodal/checkpoint.hpp"
#include "comodal/config.hpp"
#include "comodal/gradcheck_suite.hpp"
#include "comodal/metrics.hpp"
#include "comodal/metrics_io.hpp"
#include "comodal/objectives.hpp"
#include "comodal/random.hpp"
#include "comodal/trainer.hpp"

namespace fs = std::filesystem;
using namespace comodal;

namespace {

const fs::path kDefaultConfig = fs::path(COMODAL_SOURCE_DIR) / "configs" / "default.json";

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

std::string fmt(const char* format, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, format, args...);
  return buf;
}

std::vector<double> values(const Tensor& t) { return {t.data().begin(), t.data().end()}; }

ExperimentConfig default_config() { return parse_config(kDefaultConfig); }

MultimodalBatch random_inputs(const CoTrainModel& model, std::size_t n, std::uint64_t seed) {
  MultimodalBatch batch;
  Rng rng(seed);
  for (const auto& spec : model.config().modalities) {
    Shape shape = spec.input.shape();
    shape.insert(shape.begin(), n);
    std::vector<double> v(numel(shape));
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    batch.inputs.emplace(spec.name, Tensor::from(shape, std::move(v)));
  }
  for (std::size_t i = 0; i < n; ++i) {
    batch.labels.push_back(static_cast<int>(rng.below(model.config().task.classes)));
  }
  return batch;
}

// ---- 1 --------------------------------------------------------------------

Outcome gradient_suite() {
  const auto start = Clock::now();
  const auto cases = run_gradcheck_suite("all");
  const double elapsed = seconds_since(start);
  double worst = 0;
  std::string worst_name;
  bool ok = !cases.empty();
  for (const auto& c : cases) {
    if (c.checked == 0 || !(c.error < 1e-5)) ok = false;
    if (c.error >= worst) {
      worst = c.error;
      worst_name = c.group + "." + c.name;
    }
  }
  for (const char* loss : {"kt_decision", "kt_feature", "kt_attention", "task_classification",
                           "task_regression", "total_loss_decision"}) {
    ok = ok && std::any_of(cases.begin(), cases.end(),
                           [&](const GradCheckCase& c) { return c.name == loss; });
  }
  return {ok && elapsed < 60.0, fmt("%zu cases, max rel err %.2e (%s), %.1f s", cases.size(),
                                    worst, worst_name.c_str(), elapsed)};
}

// ---- 2 --------------------------------------------------------------------

Outcome teacher_detach() {
  ExperimentConfig base = default_config();
  StageSpec attention;
  attention.kind = StageKind::self_attention;
  attention.heads = 2;
  for (auto& m : base.model.modalities) m.stages.push_back(attention);
  std::size_t models = 0, checked = 0, nonzero = 0, student_moved = 0;
  for (auto kt : {KtMode::decision, KtMode::feature, KtMode::attention}) {
    for (std::uint64_t seed = 1; seed <= 3; ++seed) {
      ExperimentConfig c = base;
      c.kt = kt;
      CoTrainModel model(c.model_config());
      model.initialize(derive_seed(seed, to_string(kt)));
      const MultimodalBatch batch = random_inputs(model, 8, seed);
      const BranchOutputs out = model.forward_all(batch, ForwardMode::cotrain);
      const TotalLoss loss =
          total_loss(model, out, batch, LossWeights{1, 0, 0, c.weights.temperature}, kt);
      backward(loss.value);
      for (const auto& e : model.partition(Partition::mm_exclusive)) {
        checked += e.ref.tensor.numel();
        if (!e.ref.tensor.has_grad()) continue;
        for (double g : e.ref.tensor.grad()) nonzero += g != 0.0;
      }
      bool moved = false;
      for (const auto& e : model.partition(Partition::tail)) {
        if (!e.ref.tensor.has_grad()) continue;
        for (double g : e.ref.tensor.grad()) moved = moved || g != 0.0;
      }
      student_moved += moved;
      ++models;
    }
  }
  return {nonzero == 0 && models == 9 && student_moved == models,
          fmt("%zu models x 3 modes, %zu nonzero of %zu teacher gradient entries, "
              "student gradient nonzero in %zu of %zu",
              models / 3, nonzero, checked, student_moved, models)};
}

// ---- 3 --------------------------------------------------------------------

bool same_records(const std::vector<MetricsRecord>& a, const std::vector<MetricsRecord>& b,
                  const TaskSpec& task) {
  std::ostringstream x, y;
  write_metrics(x, "run", a, task);
  write_metrics(y, "run", b, task);
  return x.str() == y.str();
}

Outcome alpha_zero_reduction() {
  ExperimentConfig zero = default_config();
  zero.weights.alpha = 0.0;
  ExperimentConfig no_kt = default_config();
  no_kt.mode = TrainMode::no_kt;
  const TrainResult a = train(zero);
  const TrainResult b = train(no_kt);
  const bool params = snapshot(a.model) == snapshot(b.model);
  const bool metrics = same_records(a.records, b.records, a.model.config().task);
  bool best = true;
  for (const auto& [branch, r] : a.best) {
    best = best && r.selection.epoch == b.best.at(branch).selection.epoch &&
           r.test.accuracy == b.best.at(branch).test.accuracy;
  }
  return {params && metrics && best,
          fmt("final parameters %s, metrics stream %s, selected test metrics %s",
              params ? "identical" : "differ", metrics ? "identical" : "differ",
              best ? "identical" : "differ")};
}

// ---- 4 --------------------------------------------------------------------

Outcome extraction_equivalence() {
  const ExperimentConfig c = default_config();
  std::size_t mismatches = 0, compared = 0;
  for (std::uint64_t seed = 1; seed <= 2; ++seed) {
    CoTrainModel model(c.model_config());
    model.initialize(seed);
    const MultimodalBatch batch = random_inputs(model, 100, seed + 100);
    const BranchOutputs out = model.forward_all(batch, ForwardMode::cotrain);
    for (const auto& name : model.modalities()) {
      const UnimodalModel alone = model.extract_unimodal(name);
      const auto full = values(out.uni.at(name).pred);
      // Each example on its own, so batch composition cannot mask a difference.
      for (std::size_t i = 0; i < 100; ++i) {
        const Tensor x = batch.inputs.at(name);
        Shape one = x.shape();
        one[0] = 1;
        const std::size_t per = x.numel() / 100;
        std::vector<double> v(x.data().begin() + i * per, x.data().begin() + (i + 1) * per);
        const auto pred = values(alone.forward(Tensor::from(one, std::move(v))));
        const std::size_t k = pred.size();
        ++compared;
        mismatches += !std::equal(pred.begin(), pred.end(), full.begin() + i * k);
      }
    }
  }
  return {mismatches == 0, fmt("%zu inputs across 2 models, %zu mismatches at 0 tolerance",
                               compared, mismatches)};
}

// ---- 5 --------------------------------------------------------------------

Outcome frozen_stem() {
  ExperimentConfig c = default_config();
  c.mode = TrainMode::frozen_shared_mm;
  c.weights.alpha = 0.0;
  c.weights.beta = 0.0;
  c.weights.gamma = 1.0;
  c.epochs = 5;
  CoTrainModel initial(c.model_config());
  initial.initialize(c.seed);
  const TrainResult trained = train(c);
  std::size_t stem = 0, changed = 0;
  for (const auto& e : initial.partition(Partition::stem)) {
    const auto before = values(e.ref.tensor);
    const auto after = values(trained.model.parameter(e.ref.name));
    stem += before.size();
    for (std::size_t i = 0; i < before.size(); ++i) changed += before[i] != after[i];
  }
  std::size_t mm_changed = 0;
  for (const auto& e : initial.partition(Partition::mm_exclusive)) {
    mm_changed += values(e.ref.tensor) != values(trained.model.parameter(e.ref.name));
  }
  return {changed == 0 && stem > 0 && mm_changed > 0,
          fmt("%zu of %zu stem values changed over %zu epochs; %zu teacher tensors moved",
              changed, stem, c.epochs, mm_changed)};
}

// ---- 6 --------------------------------------------------------------------

Outcome cross_attention_oracle() {
  AttentionBlock block(2, 1, true);
  for (Tensor* w : {&block.wq, &block.wk, &block.wv, &block.wo}) {
    auto v = w->mutable_data();
    v[0] = 1, v[1] = 0, v[2] = 0, v[3] = 1;
  }
  const double a[2][2] = {{0.6, -0.4}, {1.5, 0.2}};
  const double b[2][2] = {{-0.3, 0.9}, {0.7, 1.1}};
  const Tensor out = cross_attention(Tensor::from({2, 2}, {a[0][0], a[0][1], a[1][0], a[1][1]}),
                                     Tensor::from({2, 2}, {b[0][0], b[0][1], b[1][0], b[1][1]}),
                                     block);
  double worst = 0;
  for (int i = 0; i < 2; ++i) {
    const double s0 = (a[i][0] * b[0][0] + a[i][1] * b[0][1]) / std::sqrt(2.0);
    const double s1 = (a[i][0] * b[1][0] + a[i][1] * b[1][1]) / std::sqrt(2.0);
    const double w0 = 1.0 / (1.0 + std::exp(s1 - s0));
    const double w1 = 1.0 - w0;
    for (int c = 0; c < 2; ++c) {
      worst = std::max(worst, std::fabs(out.at({std::size_t(i), std::size_t(c)}) -
                                        (w0 * b[0][c] + w1 * b[1][c])));
    }
  }
  const Tensor single = cross_attention(Tensor::from({3, 2}, {0.1, 0.2, -1, 3, 0.5, 0.5}),
                                        Tensor::from({1, 2}, {0.25, -0.75}), block);
  bool exact = true;
  for (std::size_t r = 0; r < 3; ++r) {
    exact = exact && single.at({r, 0}) == 0.25 && single.at({r, 1}) == -0.75;
  }
  return {worst <= 1e-12 && exact,
          fmt("max abs deviation %.1e, single-key rows %s", worst, exact ? "exact" : "differ")};
}

// ---- 7 --------------------------------------------------------------------

template <typename Job>
void run_parallel(std::size_t jobs, std::size_t threads, Job job) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex lock;
  auto worker = [&] {
    for (std::size_t i = next++; i < jobs; i = next++) {
      try {
        job(i);
      } catch (...) {
        std::lock_guard<std::mutex> guard(lock);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < std::min(threads, jobs); ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

Outcome cotraining_benefit() {
  const auto start = Clock::now();
  const ExperimentConfig base = default_config();
  const std::size_t seeds = 5;
  enum Arm { cotrain, baseline, independent, arms };
  std::vector<std::map<std::string, double>> acc(arms * seeds);
  run_parallel(arms * seeds, thread_cap_from_env(), [&](std::size_t job) {
    ExperimentConfig c = base;
    c.seed = base.seed + job % seeds;
    const auto arm = static_cast<Arm>(job / seeds);
    if (arm == baseline) c.mode = TrainMode::no_mm;
    if (arm == independent) c.weights = LossWeights{0, 0, 1, c.weights.temperature};
    const TrainResult r = train(c);
    for (const auto& [branch, best] : r.best) acc[job][branch] = best.test.accuracy;
  });
  auto mean = [&](Arm arm, const std::string& branch) {
    double total = 0;
    for (std::size_t s = 0; s < seeds; ++s) total += acc[arm * seeds + s].at(branch);
    return total / seeds;
  };
  bool ok = true;
  std::string detail;
  for (const auto& m : base.model.modalities) {
    const double gain = 100 * (mean(cotrain, m.name) - mean(baseline, m.name));
    ok = ok && gain >= 1.0;
    detail += fmt("%s %.2f%% vs no_mm %.2f%% (%+.2f pt); ", m.name.c_str(),
                  100 * mean(cotrain, m.name), 100 * mean(baseline, m.name), gain);
  }
  const double mm = mean(cotrain, "mm"), alone = mean(independent, "mm");
  ok = ok && mm >= alone;
  const double elapsed = seconds_since(start);
  ok = ok && elapsed < 600.0;
  detail += fmt("mm %.2f%% vs independent %.2f%%; %zu seeds, %.0f s", 100 * mm, 100 * alone,
                seeds, elapsed);
  return {ok, detail};
}

// ---- 8 --------------------------------------------------------------------

Outcome ablation_protocol() {
  ExperimentConfig c = default_config();
  c.epochs = 2;
  c.data.train = 64;
  c.data.val = 32;
  c.data.test = 32;
  const std::vector<std::uint64_t> seeds = {c.seed, c.seed + 1};
  const AblationTable table =
      run_ablation(c, AblationVariant::alpha_sweep, seeds, thread_cap_from_env());
  std::ostringstream csv;
  write_ablation_csv(csv, table);
  std::istringstream in(csv.str());
  std::string line;
  std::getline(in, line);
  bool ok = line.rfind("alpha,seed,", 0) == 0;
  std::vector<std::string> expected;
  for (const char* alpha : {"1", "5", "10", "20"}) {
    for (auto s : seeds) expected.push_back(std::string(alpha) + "," + std::to_string(s));
    expected.push_back(std::string(alpha) + ",mean");
  }
  std::vector<std::string> got;
  while (std::getline(in, line)) {
    const auto second = line.find(',', line.find(',') + 1);
    got.push_back(line.substr(0, second));
  }
  ok = ok && got == expected;
  return {ok, fmt("%zu data rows for alphas 1,5,10,20 x %zu seeds + means, header '%s'",
                  got.size(), seeds.size(), csv.str().substr(0, csv.str().find('\n')).c_str())};
}

// ---- 9 --------------------------------------------------------------------

Outcome metric_oracles() {
  Rng rng(2024);
  const std::size_t n = 1000, classes = 5;
  std::vector<double> pred(n), target(n), logits(n * classes);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < n; ++i) {
    pred[i] = rng.uniform(-4.0, 4.0);
    target[i] = i % 10 == 0 ? std::round(rng.uniform(-4.0, 4.0)) + 0.5 : rng.uniform(-3.0, 3.0);
    labels[i] = static_cast<int>(rng.below(classes));
    for (std::size_t c = 0; c < classes; ++c) logits[i * classes + c] = std::round(rng.uniform(0, 6));
  }
  // Brute-force re-implementations.
  long double abs_sum = 0;
  for (std::size_t i = 0; i < n; ++i) abs_sum += std::fabs((long double)pred[i] - target[i]);
  const double mae = static_cast<double>(abs_sum / n);

  long double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sx += pred[i], sy += target[i];
    sxx += (long double)pred[i] * pred[i], syy += (long double)target[i] * target[i];
    sxy += (long double)pred[i] * target[i];
  }
  const long double cov = sxy - sx * sy / n;
  const double corr =
      static_cast<double>(cov / std::sqrt((sxx - sx * sx / n) * (syy - sy * sy / n)));

  auto seven = [](double v) {
    int k = 0;
    for (int c = -3; c <= 3; ++c) {
      if (std::fabs(v - c) < std::fabs(v - k) || (std::fabs(v - c) == std::fabs(v - k) && std::fabs(c) > std::fabs(k))) k = c;
    }
    return k;
  };
  std::size_t same = 0;
  for (std::size_t i = 0; i < n; ++i) same += seven(pred[i]) == seven(target[i]);
  const double acc7 = static_cast<double>(same) / n;

  std::size_t hits = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < classes; ++c) {
      if (logits[i * classes + c] > logits[i * classes + best]) best = c;
    }
    hits += static_cast<int>(best) == labels[i];
  }
  const double acc = static_cast<double>(hits) / n;

  const double d_mae = std::fabs(mae - mean_absolute_error(pred, target));
  const double d_corr = std::fabs(corr - pearson_correlation(pred, target));
  const double d_acc7 = std::fabs(acc7 - seven_class_accuracy(pred, target));
  const double d_acc = std::fabs(acc - accuracy(logits, classes, labels));
  const double worst = std::max({d_mae, d_corr, d_acc7, d_acc});
  return {worst <= 1e-12, fmt("n=%zu: |dMAE| %.1e, |dcorr| %.1e, |dacc7| %.1e, |dacc| %.1e", n,
                              d_mae, d_corr, d_acc7, d_acc)};
}

// ---- 10 -------------------------------------------------------------------

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(COMODAL_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome determinism_and_roundtrip() {
  const fs::path dir = fs::temp_directory_path() / "comodal_acceptance";
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string cfg = kDefaultConfig.string();
  const int s1 = run_cli("train --config " + cfg + " --out " + (dir / "a").string(), dir / "a.log");
  const int s2 = run_cli("train --config " + cfg + " --out " + (dir / "b").string(), dir / "b.log");
  if (s1 != 0 || s2 != 0) return {false, "train exited with " + std::to_string(s1) + "/" + std::to_string(s2)};
  const std::string ma = read_text_file(dir / "a" / "metrics.jsonl");
  const std::string mb = read_text_file(dir / "b" / "metrics.jsonl");
  const bool metrics = !ma.empty() && ma == mb;

  const ExperimentConfig c = default_config();
  CoTrainModel trained(c.model_config());
  apply_checkpoint(load_checkpoint(dir / "a" / "final.ckpt"), trained);
  save_checkpoint(dir / "again.ckpt", to_checkpoint(trained));
  CoTrainModel reloaded(c.model_config());
  apply_checkpoint(load_checkpoint(dir / "again.ckpt"), reloaded);
  const MultimodalBatch batch = random_inputs(trained, 64, 7);
  const BranchOutputs x = trained.forward_all(batch, ForwardMode::cotrain);
  const BranchOutputs y = reloaded.forward_all(batch, ForwardMode::cotrain);
  bool forwards = values(x.mm_pred) == values(y.mm_pred);
  for (const auto& m : trained.modalities()) {
    forwards = forwards && values(x.uni.at(m).pred) == values(y.uni.at(m).pred);
  }
  const bool bytes = read_text_file(dir / "a" / "final.ckpt") == read_text_file(dir / "again.ckpt");
  return {metrics && forwards && bytes,
          fmt("metrics.jsonl %s (%zu bytes), checkpoint re-save %s, forwards %s",
              metrics ? "identical" : "differ", ma.size(), bytes ? "identical" : "differs",
              forwards ? "bit-identical" : "differ")};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "gradient suite", gradient_suite},
      {2, "teacher detach", teacher_detach},
      {3, "alpha=0 reduction", alpha_zero_reduction},
      {4, "extraction equivalence", extraction_equivalence},
      {5, "frozen shared stem", frozen_stem},
      {6, "cross-attention oracle", cross_attention_oracle},
      {7, "co-training benefit", cotraining_benefit},
      {8, "ablation protocol", ablation_protocol},
      {9, "metric oracles", metric_oracles},
      {10, "determinism and round-trip", determinism_and_roundtrip},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failures += !o.pass;
    std::printf("%s %2d %s: %s\n", o.pass ? "PASS" : "FAIL", c.id, c.name, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d of %zu criteria passed\n", static_cast<int>(criteria.size()) - failures,
              criteria.size());
  return failures == 0 ? 0 : 1;
}
