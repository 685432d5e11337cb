#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "funmatch/config.hpp"
#include "funmatch/runner.hpp"

namespace {

struct CommonArgs {
  std::string config_path;
  std::optional<int64_t> seed;
  std::optional<std::string> out_dir;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
  cmd->add_option("--config", args.config_path, "experiment config file")->required();
  cmd->add_option("--seed", args.seed, "override run_seed from the config");
  cmd->add_option("--out", args.out_dir, "override out_dir from the config");
}

funmatch::ExperimentConfig load(const CommonArgs& args, std::optional<funmatch::Task> task) {
  funmatch::ExperimentConfig cfg = funmatch::parse_config(funmatch::io::read_file(args.config_path));
  if (task) cfg.task = *task;
  if (args.seed) cfg.run_seed = uint64_t(*args.seed);
  if (args.out_dir) cfg.out_dir = *args.out_dir;
  funmatch::validate_config(cfg);
  return cfg;
}

int run_training(const CommonArgs& args, funmatch::Task task) {
  const funmatch::ExperimentConfig cfg = load(args, task);
  const funmatch::RunResult result = funmatch::run_experiment(cfg);
  std::printf("steps: %lld\n", static_cast<long long>(result.steps));
  std::printf("final validation top1: %.4f\n", result.final_val_top1);
  std::printf("checkpoint: %s\n", result.checkpoint_path.c_str());
  std::printf("metrics: %s\n", result.metrics_path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"function-matching distillation trainer"};
  app.require_subcommand(0, 1);
  bool show_reference = false;
  app.add_flag("--config-reference", show_reference, "print all config keys with defaults and exit");

  CommonArgs train_teacher_args, distill_args, baseline_args, precompute_args, eval_args, sweep_args;
  CLI::App* cmd_train_teacher = app.add_subcommand("train-teacher", "train a model from labels");
  add_common(cmd_train_teacher, train_teacher_args);
  CLI::App* cmd_distill = app.add_subcommand("distill", "distill a teacher into a student");
  add_common(cmd_distill, distill_args);
  CLI::App* cmd_baseline = app.add_subcommand("baseline", "supervised baseline (optionally with mixup)");
  add_common(cmd_baseline, baseline_args);
  CLI::App* cmd_precompute = app.add_subcommand("precompute", "precompute fixed-teacher targets");
  add_common(cmd_precompute, precompute_args);
  CLI::App* cmd_eval = app.add_subcommand("eval", "evaluate a checkpoint on a split");
  add_common(cmd_eval, eval_args);
  CLI::App* cmd_sweep = app.add_subcommand("sweep", "grid sweep with validation-based selection");
  add_common(cmd_sweep, sweep_args);

  CLI11_PARSE(app, argc, argv);

  if (show_reference) {
    std::fputs(funmatch::render_config_reference().c_str(), stdout);
    return 0;
  }

  try {
    if (cmd_train_teacher->parsed()) return run_training(train_teacher_args, funmatch::Task::train_teacher);
    if (cmd_distill->parsed()) return run_training(distill_args, funmatch::Task::distill);
    if (cmd_baseline->parsed()) return run_training(baseline_args, funmatch::Task::supervised_baseline);
    if (cmd_precompute->parsed()) {
      const funmatch::ExperimentConfig cfg = load(precompute_args, funmatch::Task::precompute);
      const funmatch::RunResult result = funmatch::run_experiment(cfg);
      std::printf("target store: %s\n", result.checkpoint_path.c_str());
      return 0;
    }
    if (cmd_eval->parsed()) {
      const funmatch::ExperimentConfig cfg = load(eval_args, funmatch::Task::eval_only);
      const funmatch::RunResult result = funmatch::run_experiment(cfg);
      std::printf("top1: %.4f\n", result.final_val_top1);
      return 0;
    }
    if (cmd_sweep->parsed()) {
      // the swept task comes from the config's own task key
      funmatch::ExperimentConfig cfg = load(sweep_args, std::nullopt);
      funmatch::HyperGrid grid;
      for (double v : cfg.sweep_learning_rates) grid.learning_rates.push_back(float(v));
      for (double v : cfg.sweep_weight_decays) grid.weight_decays.push_back(float(v));
      for (double v : cfg.sweep_temperatures) grid.temperatures.push_back(float(v));
      const funmatch::SweepResult result = funmatch::sweep(cfg, grid);
      const funmatch::SweepRow& best = result.rows[result.best_index];
      std::printf("runs: %zu\n", result.rows.size());
      std::printf("selected: lr=%g wd=%g T=%g val_top1=%.4f\n", best.lr, best.wd, best.temperature,
                  best.val_top1);
      std::printf("test top1 of selected: %.4f\n", result.test_top1);
      std::printf("table: %s\n", result.table_path.c_str());
      return 0;
    }
  } catch (const funmatch::Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  std::fputs(app.help().c_str(), stdout);
  return 0;
}
