#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "hashsdf/mesh.hpp"
#include "hashsdf/synthetic.hpp"
#include "hashsdf/training.hpp"

namespace hashsdf {

/// Every tunable of a run. Defaults are the desk-scale values; the key
/// table records the full-scale value next to each key where one exists.
struct RunConfig {
  RunConfig();

  std::uint64_t seed = 0;

  // Dataset generation.
  std::string scene = "SPHERE";
  DatasetConfig dataset;  // its seed follows `seed`
  std::string dataset_dir = "dataset";

  // Training.
  TrainingConfig training;  // its seed follows `seed`
  std::string run_dir = "run";
  int checkpoint_every = 500;  // 0 keeps only the final checkpoint
  int log_every = 10;

  // Extraction and evaluation.
  MarchingCubesConfig mesh;
  MeshFormat mesh_format = MeshFormat::Ply;
  std::size_t eval_points = 100000;
  double f1_threshold = 0.01;
  std::vector<GradientMode> ablate_modes;

  /// Throws Config naming the first invalid setting.
  void validate() const;
  /// Training config with the run seed applied.
  TrainingConfig training_config() const;
  DatasetConfig dataset_config() const;
};

struct ConfigKey {
  std::string name;
  std::string full_scale;  // empty when there is no published full-scale value
  std::string description;
};

/// Documented keys in serialization order.
const std::vector<ConfigKey>& config_keys();

/// Environment variable of a key: "HASHSDF_" + upper case, '.' -> '_'.
std::string environment_name(std::string_view key);

std::string get_config_value(const RunConfig& config, std::string_view key);
/// Throws Config on an unknown key or a malformed value.
void set_config_value(RunConfig& config, std::string_view key, std::string_view value);

/// Parses `key = value` lines on top of the defaults. '#' starts a comment.
/// Throws Config on unknown or repeated keys and malformed values. The
/// result is validated.
RunConfig parse_config(std::string_view text);
/// Canonical text: every key in table order. `annotate` appends the full-scale
/// value as a comment; annotations never change the parsed result.
std::string serialize_config(const RunConfig& config, bool annotate = false);
/// FNV-1a (64 bit) of the canonical text without the path keys
/// (dataset, run).
std::uint64_t config_hash(const RunConfig& config);
std::string format_hash(std::uint64_t hash);  // 16 lower-case hex digits

/// Overrides keys from HASHSDF_* variables of `environment` (entries
/// "NAME=value"); unknown HASHSDF_* names are rejected. Re-validates.
void apply_environment(RunConfig& config, const std::vector<std::string>& environment);
std::vector<std::string> process_environment();

/// Reads a config file (defaults when `path` is empty), then applies the
/// process environment.
RunConfig load_config(const std::filesystem::path& path);

}  // namespace hashsdf
