#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "fbalign/config.hpp"
#include "fbalign/experiment.hpp"

namespace {

using namespace fbalign;

int report(const std::exception& e, int code) {
  std::cerr << "error: " << e.what() << "\n";
  return code;
}

void emit(const std::string& text, const std::string& out_path) {
  if (out_path.empty()) {
    std::cout << text;
    return;
  }
  std::ofstream out(out_path);
  if (!out) throw Error("cannot write " + out_path);
  out << text;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Convolutional network training with pluggable error-propagation strategies"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  // train
  auto* train = app.add_subcommand("train", "Train a network from a config file");
  std::string train_config;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  bool dry_run = false;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> stop_after;
  train->add_option("config", train_config, "Experiment config (.cfg)")->required()->check(CLI::ExistingFile);
  train->add_option("--seed", seed, "Override the run seed");
  train->add_option("--out", out_dir, "Override the output directory");
  train->add_flag("--dry-run", dry_run, "Validate, print layer shapes and exit");
  train->add_option("--epochs", epochs, "Override the epoch count");
  train->add_option("--stop-after-epoch", stop_after, "Checkpoint and stop after this epoch");

  // diag
  auto* diag = app.add_subcommand("diag", "Gradient-ratio, angle and sign-flip diagnostics");
  diag->require_subcommand(1);
  std::string diag_config, diag_out;
  std::size_t seeds = 10;
  auto* ratio = diag->add_subcommand("ratio-profile", "FA/BP gradient-norm ratios at initialization");
  ratio->add_option("config", diag_config, "Experiment config")->required()->check(CLI::ExistingFile);
  ratio->add_option("--seeds", seeds, "Seeds to average over (geometric mean)")->check(CLI::PositiveNumber);
  ratio->add_option("--output", diag_out, "Write CSV here instead of stdout");
  auto* sweep = diag->add_subcommand("angle-sweep", "Train and report per-epoch alignment angles");
  sweep->add_option("config", diag_config, "Experiment config")->required()->check(CLI::ExistingFile);
  sweep->add_option("--output", diag_out, "Write CSV here instead of stdout");
  sweep->add_option("--out", out_dir, "Override the run output directory");
  auto* flips = diag->add_subcommand("sign-flips", "Train and report cumulative sign-flip fractions");
  flips->add_option("config", diag_config, "Experiment config")->required()->check(CLI::ExistingFile);
  flips->add_option("--output", diag_out, "Write CSV here instead of stdout");
  flips->add_option("--out", out_dir, "Override the run output directory");

  // resume
  auto* resume = app.add_subcommand("resume", "Continue training from a checkpoint");
  std::string ckpt, resume_config;
  resume->add_option("checkpoint", ckpt, "Checkpoint file (.fbck)")->required()->check(CLI::ExistingFile);
  resume->add_option("--config", resume_config, "Config to resume under (run identity must match)");
  resume->add_option("--epochs", epochs, "Train until this many epochs in total");
  resume->add_option("--out", out_dir, "Override the output directory");

  CLI11_PARSE(app, argc, argv);

  try {
    RunOptions options;
    options.log = &std::cerr;
    if (!out_dir.empty()) options.output_dir = out_dir;
    options.epochs = epochs;

    if (*train) {
      const ExperimentConfig config = load_config(train_config);
      options.seed = seed;
      options.stop_after_epoch = stop_after;
      if (dry_run) {
        std::cout << describe_run(apply_overrides(config, options)) << "config ok\n";
        return 0;
      }
      const RunSummary summary = run_training(config, options);
      if (summary.final_test_err) std::cout << "final test error " << *summary.final_test_err << "%\n";
      return 0;
    }
    if (*diag) {
      const ExperimentConfig config = load_config(diag_config);
      if (*ratio) {
        emit(ratio_profile_csv(ratio_profile(config, seeds)), diag_out);
        return 0;
      }
      ExperimentConfig run = config;
      run.metrics.angles = run.metrics.angles || *sweep;
      const RunSummary summary = run_training(run, options);
      emit(*sweep ? angle_sweep_csv(summary) : sign_flips_csv(summary), diag_out);
      return 0;
    }
    if (*resume) {
      std::optional<ExperimentConfig> override_cfg;
      if (!resume_config.empty()) override_cfg = load_config(resume_config);
      const RunSummary summary = resume_training(ckpt, override_cfg, options);
      if (summary.final_test_err) std::cout << "final test error " << *summary.final_test_err << "%\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    return report(e, 2);
  } catch (const DataUnavailable& e) {
    return report(e, 3);
  } catch (const NumericError& e) {
    return report(e, 4);
  } catch (const std::exception& e) {
    return report(e, 1);
  }
  return 1;
}
