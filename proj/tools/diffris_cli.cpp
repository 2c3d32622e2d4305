// diffris: data generation, training, evaluation and gradient checks.

#include <cstdlib>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "commands.hpp"

namespace {

void configure_logging() {
  const char* env = std::getenv("DIFFRIS_LOG");
  const std::string level = env ? env : "warn";
  if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else if (level == "info") {
    spdlog::set_level(spdlog::level::info);
  } else {
    if (level != "warn") std::cerr << "DIFFRIS_LOG: unknown level '" << level << "', using warn\n";
    spdlog::set_level(spdlog::level::warn);
  }
}

}  // namespace

int main(int argc, char** argv) {
  using namespace diffris::cli;
  configure_logging();

  CLI::App app{"DiffRIS reference implementation"};
  app.require_subcommand(1);

  GenDataArgs gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen_cmd->add_option("--out", gen.out, "Output directory")->required();
  gen_cmd->add_option("--n", gen.n, "Number of samples")->required();
  gen_cmd->add_option("--seed", gen.seed, "Dataset seed");
  gen_cmd->add_option("--config", gen.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  gen_cmd->add_option("--set", gen.overrides, "Override a config key: section.key=value");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Train adapter and decoder");
  train_cmd->add_option("--config", train.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  train_cmd->add_option("--data", train.data, "Dataset directory")->required();
  train_cmd->add_option("--out", train.out, "Run directory")->required();
  train_cmd->add_option("--resume", train.resume, "Checkpoint to resume from")->check(CLI::ExistingFile);
  train_cmd->add_option("--set", train.overrides, "Override a config key: section.key=value");
  train_cmd->add_flag("--debug-inject-freeze-violation", train.inject_freeze_violation,
                      "Perturb a frozen backbone tensor after the first step");

  EvalArgs eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--data", eval.data, "Dataset directory")->required();
  eval_cmd->add_option("--split", eval.split, "val or test");
  eval_cmd->add_option("--report", eval.report, "Markdown report path; a .json summary is written beside it")
      ->required();
  eval_cmd->add_option("--config", eval.config, "Run configuration (default: config.json beside the checkpoint)");
  eval_cmd->add_option("--overlay", eval.overlay_dir, "Write per-sample PNGs with the predicted contour here");
  eval_cmd->add_option("--set", eval.overrides, "Override a config key: section.key=value");

  GradcheckArgs grad;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference and straight-through checks");
  grad_cmd->add_option("--config", grad.config, "Run configuration (JSON)")->check(CLI::ExistingFile);
  grad_cmd->add_option("--seed", grad.seed, "Seed for inputs and parameters");
  grad_cmd->add_option("--set", grad.overrides, "Override a config key: section.key=value");
  grad_cmd->add_option("--inject-fault", grad.inject_fault, "Corrupt the backward pass of one op");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsageError;
  }

  if (*gen_cmd) return cmd_gen_data(gen);
  if (*train_cmd) return cmd_train(train);
  if (*eval_cmd) return cmd_eval(eval);
  return cmd_gradcheck(grad);
}
