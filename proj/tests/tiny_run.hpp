#pragma once

#include <filesystem>
#include <string>

#include "hashsdf/config.hpp"

namespace hashsdf::testing {

// A run small enough for unit tests: a few coarse views and a small field.
inline RunConfig tiny_run(const std::filesystem::path& root) {
  RunConfig c;
  const char* text[][2] = {
      {"views", "4"},          {"test_views", "2"},        {"image_size", "16"},
      {"gt_points", "4000"},   {"encoding.levels", "4"},   {"encoding.min_resolution", "8"},
      {"encoding.max_resolution", "32"}, {"encoding.channels", "2"}, {"encoding.table_size", "4096"},
      {"sdf.hidden", "16"},    {"color.hidden", "16"},     {"sampler.uniform", "16"},
      {"sampler.importance", "8"}, {"sampler.rounds", "1"}, {"iterations", "24"},
      {"activation_interval", "6"}, {"initial_levels", "2"}, {"warmup", "4"},
      {"milestone_1", "16"},   {"milestone_2", "20"},      {"rays_per_step", "32"},
      {"checkpoint_every", "8"}, {"log_every", "1"},       {"mesh.resolution", "32"},
      {"eval.points", "4000"}, {"eval.f1_threshold", "0.05"},
  };
  for (const auto& kv : text) set_config_value(c, kv[0], kv[1]);
  c.dataset_dir = (root / "dataset").string();
  c.run_dir = (root / "run").string();
  c.validate();
  return c;
}

// Fresh directory under the system temp dir, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& name) : path(std::filesystem::temp_directory_path() / ("hashsdf_" + name)) {
    std::filesystem::remove_all(path);
    std::filesystem::create_directories(path);
  }
  ~TempDir() { std::filesystem::remove_all(path); }
};

}  // namespace hashsdf::testing
