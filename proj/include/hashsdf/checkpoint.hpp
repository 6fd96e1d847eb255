#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "hashsdf/config.hpp"
#include "hashsdf/training.hpp"

namespace hashsdf {

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Everything needed to continue a run bit-exactly: the config, the
/// schedule position, every parameter segment and the optimizer moments.
struct Checkpoint {
  std::string config_text;  // canonical serialization
  std::uint64_t config_hash = 0;
  ScheduleState schedule;   // state at `schedule.iteration`, the next step to run
  EncodingConfig encoding;
  int image_count = 0;      // appearance embeddings
  std::vector<ParamSegment> segments;
  std::vector<float> parameters;
  AdamState adam;

  RunConfig config() const;  // parsed config_text
};

Checkpoint make_checkpoint(const RunConfig& config, const Trainer& trainer);

/// Writes to a temporary sibling and renames it into place.
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
/// Throws Checkpoint on a bad magic, version, section checksum, size
/// mismatch or truncation; Io when the file cannot be opened.
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Field described by the checkpoint with its parameters loaded.
NeuralField<float> restore_field(const Checkpoint& checkpoint);
/// Copies parameters, optimizer state and iteration into a trainer built
/// from the same config. Throws Checkpoint on a layout mismatch.
void restore_trainer(Trainer& trainer, const Checkpoint& checkpoint);

}  // namespace hashsdf
