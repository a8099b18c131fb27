#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "fbalign/config.hpp"
#include "fbalign/data.hpp"
#include "fbalign/training.hpp"

namespace fbalign {

/// Raised when a dataset directory is absent or incomplete.
class DataUnavailable : public Error {
 public:
  using Error::Error;
};

DatasetPair load_datasets(const ExperimentConfig& config);

/// Independent RNG streams derived from the run seed.
enum class RngStream : std::uint64_t {
  network = 1,
  feedback = 2,
  data = 3,
  dropout = 4,
  noise = 5,
  penalty = 6,
  probe = 7,
};

/// Fresh session: parameters, feedback, optimizer, constraints, trackers.
/// `steps_per_epoch` sizes the E/I freeze step.
TrainingSession make_session(const ExperimentConfig& config, std::size_t steps_per_epoch);

/// First `probe_size` test examples (center-cropped when the config crops).
Batch make_probe_batch(const ExperimentConfig& config, const Dataset& test);

struct RunOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output_dir;
  std::optional<std::size_t> epochs;
  std::optional<std::size_t> stop_after_epoch;  // simulate an interrupted run
  bool dry_run = false;
  bool write_files = true;
  std::ostream* log = nullptr;
};

struct RunSummary {
  std::string name;
  std::string strategy;
  std::uint64_t steps = 0;
  std::uint64_t epochs = 0;
  std::optional<double> final_test_err;
  std::optional<double> final_train_err;
  std::vector<double> test_err_by_epoch;  // index 0 is the untrained baseline
  std::map<std::string, std::vector<std::optional<double>>> angles_by_layer;  // per epoch, from 0
  std::vector<double> signflip_by_epoch;
  std::vector<MetricsRow> rows;
  std::filesystem::path output_dir;
};

nlohmann::json summary_to_json(const RunSummary& summary);

/// Applies RunOptions overrides to a loaded config.
ExperimentConfig apply_overrides(ExperimentConfig config, const RunOptions& options);

/// Full training run. Writes metrics.csv, config.json, checkpoints and
/// summary.json under the output directory unless write_files is false.
RunSummary run_training(const ExperimentConfig& config, const RunOptions& options = {});

/// Continues a checkpointed run to the config's epoch count (or
/// `options.epochs`). With `config_override` the run identity must match.
RunSummary resume_training(const std::filesystem::path& checkpoint,
                           const std::optional<ExperimentConfig>& config_override = std::nullopt,
                           const RunOptions& options = {});

/// Layer shapes, parameter counts and strategy notes for --dry-run.
std::string describe_run(const ExperimentConfig& config);

// ---- diagnostics front-ends ----

struct RatioProfileRow {
  std::size_t layer = 0;
  std::string name;
  double measured_ratio = 0.0;      // geometric mean over seeds
  double cumulative_product = 0.0;  // geometric mean over seeds
  double norm_ratio = 0.0;          // geometric mean over seeds
};

/// Fresh-initialization FA/BP gradient-ratio profile averaged over `seeds`
/// consecutive seeds starting at the config seed.
std::vector<RatioProfileRow> ratio_profile(const ExperimentConfig& config, std::size_t seeds);
std::string ratio_profile_csv(const std::vector<RatioProfileRow>& rows);

std::string angle_sweep_csv(const RunSummary& summary);
std::string sign_flips_csv(const RunSummary& summary);

}  // namespace fbalign
