#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "fbalign/feedback.hpp"
#include "fbalign/network.hpp"
#include "fbalign/training.hpp"

namespace fbalign {

/// Invalid config; the message starts with the offending field path.
class ConfigError : public Error {
 public:
  using Error::Error;
};

enum class DatasetKind { mnist, cifar10, synthetic };
std::string_view to_string(DatasetKind kind);

struct DatasetConfig {
  DatasetKind kind = DatasetKind::synthetic;
  std::optional<std::string> path;  // defaults: $FBALIGN_MNIST_DIR / $FBALIGN_CIFAR_DIR, then data/mnist, data/cifar10
  std::optional<std::size_t> crop;  // random crop at train time, center crop at eval
  SyntheticSpec synthetic;
  bool operator==(const DatasetConfig& o) const;
};

struct ConstraintConfig {
  std::optional<double> ei_freeze_fraction;  // 0.05 in the bundled presets
  double ei_clip = 1e-8;
  bool norm_constraint = false;
  std::optional<double> alignment_penalty;  // lambda
  std::optional<double> grad_noise;         // scale
  bool batch_manhattan = false;
  std::optional<double> weight_decay;
  bool operator==(const ConstraintConfig&) const = default;
};

struct MetricsConfig {
  std::size_t loss_every = 100;
  bool angles = true;
  std::size_t probe_size = 500;
  bool wall_time = true;
  bool operator==(const MetricsConfig&) const = default;
};

struct ExperimentConfig {
  std::string name = "run";
  std::optional<std::string> architecture;  // named architecture, or
  std::optional<NetworkSpec> network;       // inline spec
  DatasetConfig dataset;
  Strategy strategy = Strategy::bp;
  InitScheme init = InitScheme::fa_decoupled;
  AdamConfig adam;
  Schedule schedule = Schedule::constant(1e-3);
  ConstraintConfig constraints;
  std::size_t epochs = 1;
  std::size_t batch_size = 50;
  std::size_t eval_batch_size = 500;
  std::uint64_t seed = 0;
  std::string output_dir = "runs/run";
  MetricsConfig metrics;
  std::size_t checkpoint_every = 1;  // epochs; 0 keeps only the final checkpoint
  std::size_t projection_memory_cap_mib = 2048;

  /// Architecture resolved from `architecture` or `network`.
  NetworkSpec resolved_network() const;
  std::filesystem::path dataset_path() const;
};

/// Parses and fully validates; unknown keys are rejected.
ExperimentConfig parse_config(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);
nlohmann::json to_json(const ExperimentConfig& config);

nlohmann::json network_to_json(const NetworkSpec& spec);
NetworkSpec network_from_json(const nlohmann::json& j, const std::string& where = "network");

/// Fields that define a run; a checkpoint refuses to resume under a config
/// that differs in any of them. Returns the first differing field, if any.
std::optional<std::string> identity_mismatch(const ExperimentConfig& a, const ExperimentConfig& b);

}  // namespace fbalign
