#pragma once

// Checkpoint container:
//   "FBCK" | u32 version | u64 manifest bytes | manifest JSON | f32 payload
// The manifest lists every tensor (name, shape, offset into the payload in
// floats) together with counters, RNG states and the config echo. All
// integers and floats are little-endian.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

#include <json.hpp>

#include "fbalign/config.hpp"
#include "fbalign/training.hpp"

namespace fbalign {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointData {
  nlohmann::json manifest;
  std::map<std::string, Tensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Captures every piece of mutable training state plus the config echo.
CheckpointData capture_session(const ExperimentConfig& config, const TrainingSession& session, double wall_s);

/// Config stored in a checkpoint.
ExperimentConfig checkpoint_config(const CheckpointData& data);
double checkpoint_wall_seconds(const CheckpointData& data);

/// Overwrites a freshly built session with checkpointed state. Throws
/// FormatError when anything the strategy needs is missing (for example
/// feedback tensors of an fa-family run).
void restore_session(TrainingSession& session, const CheckpointData& data);

}  // namespace fbalign
