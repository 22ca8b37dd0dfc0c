// SPDX-License-Identifier: Apache-2.0
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "comodal/checkpoint.hpp"
#include "comodal/config.hpp"
#include "comodal/error.hpp"
#include "comodal/gradcheck_suite.hpp"
#include "comodal/metrics_io.hpp"
#include "comodal/trainer.hpp"

namespace fs = std::filesystem;
using namespace comodal;

namespace {

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory '" + dir.string() + "': " + ec.message());
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open '" + path.string() + "' for writing");
  return out;
}

void print_metrics(const std::string& split, const std::string& branch,
                   const BranchMetrics& m, const TaskSpec& task) {
  for (const auto& name : metric_names(task)) {
    std::cout << split << '\t' << branch << '\t' << name << '\t'
              << format_double(metric_value(m, name)) << '\n';
  }
}

int cmd_train(const std::string& config_path, const fs::path& out_dir,
              std::optional<std::uint64_t> seed) {
  const std::string bytes = read_text_file(config_path);
  ExperimentConfig config = parse_config_text(bytes);
  if (seed) config.seed = *seed;
  const std::string run_id = make_run_id(bytes, config.seed);
  const TrainResult result = train(config);

  ensure_dir(out_dir);
  {
    auto out = open_out(out_dir / "metrics.jsonl");
    write_metrics(out, run_id, result.records, config.model.task);
  }
  {
    auto out = open_out(out_dir / "config.json");
    out << config_to_json(config);
  }
  save_checkpoint(out_dir / "final.ckpt", to_checkpoint(result.model));
  for (const auto& [branch, best] : result.best) {
    const fs::path path = out_dir / ("best_" + branch + ".ckpt");
    restore(result.model, best.parameters);
    save_checkpoint(path, to_checkpoint(result.model));
    std::cout << "best " << branch << " epoch " << best.selection.epoch << " -> "
              << path.string() << '\n';
    print_metrics("test", branch, best.test, config.model.task);
  }
  std::cout << "run_id " << run_id << '\n';
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& config_path,
             const std::string& split_name) {
  const ExperimentConfig config = parse_config(config_path);
  const Checkpoint checkpoint = load_checkpoint(checkpoint_path);
  const Dataset data = generate_synthetic(config.dataset_spec(), config.data_seed());
  const Split& split = data.split(split_name);
  if (has_multimodal_entries(checkpoint)) {
    const CoTrainModel model(config.model_config());
    apply_checkpoint(checkpoint, model);
    const MetricsRecord record = evaluate(model, split, config.forward_mode());
    for (const auto& [branch, m] : record.branches) {
      print_metrics(split_name, branch, m, config.model.task);
    }
    return 0;
  }
  const std::string modality = unimodal_checkpoint_modality(checkpoint);
  for (const auto& spec : config.model.modalities) {
    if (spec.name != modality) continue;
    const UnimodalModel model(spec, config.model.task);
    apply_checkpoint(checkpoint, model);
    print_metrics(split_name, modality, evaluate(model, split), config.model.task);
    return 0;
  }
  throw LookupError("config has no modality '" + modality + "'");
}

int cmd_extract(const std::string& checkpoint_path, const std::string& modality,
                const fs::path& out_path) {
  const Checkpoint extracted =
      extract_unimodal_checkpoint(load_checkpoint(checkpoint_path), modality);
  if (out_path.has_parent_path()) ensure_dir(out_path.parent_path());
  save_checkpoint(out_path, extracted);
  std::cout << extracted.size() << " entries -> " << out_path.string() << '\n';
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::string& variant_name,
               std::size_t seed_count, const fs::path& out_dir) {
  const ExperimentConfig config = parse_config(config_path);
  const AblationVariant variant = ablation_variant_from_string(variant_name);
  if (seed_count == 0) throw ContractError("--seeds must be at least 1");
  std::vector<std::uint64_t> seeds;
  for (std::size_t i = 0; i < seed_count; ++i) seeds.push_back(config.seed + i);
  const AblationTable table = run_ablation(config, variant, seeds, thread_cap_from_env());
  ensure_dir(out_dir);
  const fs::path path = out_dir / ("ablation_" + variant_name + ".csv");
  {
    auto out = open_out(path);
    write_ablation_csv(out, table);
  }
  write_ablation_csv(std::cout, table);
  std::cerr << "wrote " << path.string() << '\n';
  return 0;
}

int cmd_gradcheck(const std::string& ops, double tolerance) {
  int failures = 0;
  for (const auto& c : run_gradcheck_suite(ops)) {
    const bool ok = c.error < tolerance && c.checked > 0;
    failures += ok ? 0 : 1;
    std::printf("%s %s.%s max_rel_err=%.3e checked=%zu nonsmooth=%zu\n", ok ? "PASS" : "FAIL",
                c.group.c_str(), c.name.c_str(), c.error, c.checked, c.nonsmooth);
  }
  std::printf("%s\n", failures == 0 ? "gradcheck: all passed" : "gradcheck: failures");
  return failures == 0 ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Co-training of unimodal and multimodal branches with knowledge transfer"};
  app.require_subcommand(1);

  std::string config_path, checkpoint_path, out, modality, split = "test", variant;
  std::string ops = "all";
  std::optional<std::uint64_t> seed;
  std::size_t seeds = 5;
  double tolerance = 1e-5;

  auto* train_cmd = app.add_subcommand("train", "Train a co-training model");
  train_cmd->add_option("--config", config_path, "Experiment config (JSON)")->required();
  train_cmd->add_option("--out", out, "Output directory")->required();
  train_cmd->add_option("--seed", seed, "Override the config seed");

  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", checkpoint_path, "Co-training or unimodal checkpoint")
      ->required();
  eval_cmd->add_option("--config", config_path, "Experiment config (JSON)")->required();
  eval_cmd->add_option("--split", split, "Split to evaluate (default test)")
      ->check(CLI::IsMember({"train", "val", "test"}));

  auto* extract_cmd = app.add_subcommand("extract", "Write a standalone unimodal checkpoint");
  extract_cmd->add_option("--checkpoint", checkpoint_path, "Co-training checkpoint")->required();
  extract_cmd->add_option("--modality", modality, "Modality to extract")->required();
  extract_cmd->add_option("--out", out, "Output checkpoint path")->required();

  auto* ablate_cmd = app.add_subcommand("ablate", "Run a matched ablation");
  ablate_cmd->add_option("--config", config_path, "Experiment config (JSON)")->required();
  ablate_cmd->add_option("--variant", variant, "Ablation to run")
      ->required()
      ->check(CLI::IsMember({"no_kt", "frozen_shared", "alpha_sweep"}));
  ablate_cmd->add_option("--seeds", seeds, "Number of seeds, starting at the config seed");
  ablate_cmd->add_option("--out", out, "Output directory")->required();

  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
  grad_cmd->add_option("--ops", ops, "all, a group (ops, layers, losses) or case names");
  grad_cmd->add_option("--tolerance", tolerance, "Maximum relative error");

  auto* defaults_cmd = app.add_subcommand("defaults", "Print the config key reference");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "error: usage: " << e.what() << '\n';
    return 2;
  }

  try {
    if (*train_cmd) return cmd_train(config_path, out, seed);
    if (*eval_cmd) return cmd_eval(checkpoint_path, config_path, split);
    if (*extract_cmd) return cmd_extract(checkpoint_path, modality, out);
    if (*ablate_cmd) return cmd_ablate(config_path, variant, seeds, out);
    if (*grad_cmd) return cmd_gradcheck(ops, tolerance);
    if (*defaults_cmd) {
      std::cout << defaults_reference();
      return 0;
    }
  } catch (const Error& e) {
    std::cerr << "error: " << e.category() << ": " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: internal: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
