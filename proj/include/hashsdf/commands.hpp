#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "hashsdf/checkpoint.hpp"
#include "hashsdf/config.hpp"
#include "hashsdf/error.hpp"
#include "hashsdf/eval.hpp"
#include "hashsdf/mesh.hpp"
#include "hashsdf/pipeline.hpp"

namespace hashsdf {

/// Process exit status of an error code; 0 is success.
int exit_status(ErrorCode code);

/// Exclusive marker file of a run directory, removed on destruction.
/// Throws Locked when the marker already exists.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  std::filesystem::path path_;
};

// ---------------------------------------------------------------- metrics

inline constexpr int kMetricsVersion = 1;

/// One JSON object per line.
std::string metrics_record(const StepMetrics& m);
/// Keeps records with iteration < `iteration`, dropping the rest.
void truncate_metrics(const std::filesystem::path& log, int iteration);

// --------------------------------------------------------------- commands

/// Writes the dataset described by the config into `out`.
void cmd_generate(const RunConfig& config, const std::filesystem::path& out);

struct TrainOptions {
  std::filesystem::path run_dir;
  std::optional<std::filesystem::path> resume;  // checkpoint file or run directory
  int stop_at = -1;                             // stop early after this iteration count
  std::ostream* progress = nullptr;
};

struct TrainResult {
  int iteration = 0;  // iterations completed
  std::filesystem::path checkpoint;
  std::optional<StepMetrics> last;
};

/// Run directory layout: config.txt, metrics.jsonl, checkpoint.bin (latest),
/// checkpoints/NNNNNN.bin, run.lock while training.
TrainResult cmd_train(const RunConfig& config, const TrainOptions& options);

/// Latest checkpoint of a run directory, or the path itself for a file.
std::filesystem::path resolve_checkpoint(const std::filesystem::path& path);

/// Field view at the checkpoint's schedule position.
struct LoadedField {
  Checkpoint checkpoint;
  RunConfig config;
  NeuralField<float> field;
  FieldView view() const;
};
LoadedField load_field(const std::filesystem::path& checkpoint);

TriangleMesh cmd_extract(const std::filesystem::path& checkpoint, int resolution, const std::filesystem::path& out,
                         MeshFormat format);

/// Flat float map: "HSDFMAP1", u32 width, u32 height, u32 channels, then
/// width * height * channels little-endian float32 values, row-major.
void write_float_map(const std::filesystem::path& path, int width, int height, int channels,
                     std::span<const float> values);
struct FloatMap {
  int width = 0, height = 0, channels = 0;
  std::vector<float> values;
};
FloatMap read_float_map(const std::filesystem::path& path);

struct RenderOptions {
  bool test_only = true;
  bool depth = false;
  bool normals = false;
};
/// Renders dataset views into `out` as NNN.png (+ NNN_depth.map, NNN_normal.map).
/// Returns the written image paths.
std::vector<std::filesystem::path> cmd_render(const std::filesystem::path& checkpoint,
                                              const std::filesystem::path& dataset, const std::filesystem::path& out,
                                              const RenderOptions& options);

struct EvalReport {
  std::string config_hash;
  int iteration = 0;
  std::size_t triangles = 0;
  bool watertight = false;
  double chamfer = 0.0;  // +inf for an empty mesh
  F1Score f1;
  double f1_threshold = 0.0;
  double psnr_masked = 0.0;  // mean over held-out views
  double psnr_full = 0.0;
  int views = 0;
  std::string format() const;  // versioned text report
};
EvalReport cmd_eval(const std::filesystem::path& checkpoint, const std::filesystem::path& dataset);

struct AblationRow {
  GradientMode mode{};
  bool ok = false;
  std::string failure;  // error message when !ok
  ErrorCode failure_code = ErrorCode::InvalidInput;
  EvalReport report;
  double final_rgb = 0.0;
};
struct AblationReport {
  std::string config_hash;
  std::vector<AblationRow> rows;  // listing order
  /// Indices of successful rows by ascending Chamfer (ties keep listing order).
  std::vector<std::size_t> ranking() const;
  bool complete() const;
  std::string format() const;
};
/// Trains and evaluates every mode with the same seed and budget under
/// `out`/NN_MODE/. A failing mode is recorded and the others still run.
AblationReport cmd_ablate(const RunConfig& config, const std::vector<GradientMode>& modes,
                          const std::filesystem::path& out, std::ostream* progress = nullptr);

}  // namespace hashsdf
