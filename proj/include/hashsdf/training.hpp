#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "hashsdf/field.hpp"
#include "hashsdf/geometry.hpp"
#include "hashsdf/renderer.hpp"

namespace hashsdf {

/// Surface-normal mode of the ablation: analytical or numerical gradients,
/// with or without progressive level activation.
enum class GradientMode { Analytical, AnalyticalProgressive, Numerical, NumericalProgressive };

std::string mode_name(GradientMode mode);  // "AG", "AG+P", "NG", "NG+P"
GradientMode parse_mode(const std::string& name);
inline bool uses_numerical(GradientMode m) {
  return m == GradientMode::Numerical || m == GradientMode::NumericalProgressive;
}
inline bool uses_progressive(GradientMode m) {
  return m == GradientMode::AnalyticalProgressive || m == GradientMode::NumericalProgressive;
}

// ---------------------------------------------------------------- losses

/// Mean absolute difference over all rays and channels.
double loss_rgb(std::span<const Vec3> rendered, std::span<const Vec3> target);
/// Mean of (|g| - 1)^2.
double loss_eikonal(std::span<const Vec3> gradients);
/// Mean of |laplacian|.
double loss_curvature(std::span<const double> laplacians);

struct LossParts {
  double rgb = 0.0;
  double eikonal = 0.0;
  double curvature = 0.0;
};

struct LossWeights {
  double eikonal = 0.1;
  double curvature_peak = 5e-4;
  double curvature = 5e-4;  // current value from the schedule
};

/// rgb + w_eik * eikonal + w_curv * curvature. Throws NonFinite naming the
/// offending part.
double total_loss(const LossParts& parts, const LossWeights& weights);

// -------------------------------------------------------------- schedule

struct ScheduleConfig {
  GradientMode mode = GradientMode::NumericalProgressive;
  int iterations = 5000;
  int activation_interval = 500;
  int initial_levels = 4;
  int warmup = 500;  // learning-rate and curvature warmup window
  int milestone_1 = 3000;
  int milestone_2 = 4000;
  double learning_rate = 1e-2;
  double eikonal_weight = 0.1;
  double curvature_weight = 5e-4;  // peak
  bool curvature_warmup = true;
  void validate(const EncodingConfig& encoding) const;
};

struct ScheduleState {
  int iteration = 0;
  double epsilon = 0.0;
  int active_levels = 0;
  double learning_rate = 0.0;
  double curvature_weight = 0.0;
  int decay_count = 0;  // epsilon decreases so far
};

/// Schedule at an iteration; a pure function of (config, encoding, iteration).
ScheduleState schedule_at(const ScheduleConfig& config, const EncodingConfig& encoding, int iteration);
/// The state one iteration later.
ScheduleState schedule_step(const ScheduleState& state, const ScheduleConfig& config, const EncodingConfig& encoding);

// ------------------------------------------------------------- optimizer

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double weight_decay = 1e-2;
  int max_consecutive_skips = 100;
};

struct AdamState {
  std::vector<float> m;
  std::vector<float> v;
  std::int64_t steps = 0;  // applied updates
  int consecutive_skips = 0;
  std::int64_t skipped = 0;
};

/// One decoupled-weight-decay Adam update. Returns false and leaves the
/// parameters untouched when a gradient is non-finite; throws NonFinite
/// after `max_consecutive_skips` skips in a row.
template <class T>
bool adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, const AdamConfig& config, double lr);

// ------------------------------------------------------ loss evaluation

/// Rays with frozen samples and their targets.
struct RayBatch {
  std::vector<Ray> rays;
  std::vector<RaySamples> samples;
  std::vector<Vec3> targets;
  std::vector<int> images;  // appearance embedding index per ray, -1 for none
};

/// Distances of the loss to its non-differentiable points, used to screen
/// finite-difference checks.
struct KinkMargins {
  double relu = std::numeric_limits<double>::infinity();       // min |pre-activation| in the color MLP
  double alpha_flat = std::numeric_limits<double>::infinity(); // min |s (f_i - f_next)|
  double alpha_clamp = std::numeric_limits<double>::infinity();// min distance of raw alpha to the upper clamp
  double laplacian = std::numeric_limits<double>::infinity();  // min |laplacian|
  double eikonal = std::numeric_limits<double>::infinity();    // min |gradient|
  double rgb = std::numeric_limits<double>::infinity();        // min |rendered - target|
};

template <class T>
struct LossEvaluation {
  LossParts parts;
  double total = 0.0;
  ParamVector<T> gradient;       // d total / d parameters (empty unless requested)
  std::vector<Vec3> rgb;         // rendered color per ray
  std::size_t sample_count = 0;  // points carrying the eikonal/curvature terms
  std::size_t field_evaluations = 0;
  KinkMargins margins;
};

struct LossSetup {
  GradientMode mode = GradientMode::NumericalProgressive;
  double epsilon = 1e-2;
  int active_levels = 1;
  LossWeights weights;
  Vec3 background = Vec3::Zero();
};

/// Renders the batch with the field, evaluates the total loss and, when
/// requested, its reverse-mode gradient with respect to every parameter.
template <class T>
LossEvaluation<T> evaluate_loss(const NeuralField<T>& field, const RayBatch& batch, const LossSetup& setup,
                                bool with_gradient);

// -------------------------------------------------------------- trainer

/// A training image with its camera.
struct TrainingView {
  Camera camera;
  std::vector<float> rgb;  // width * height * 3 in [0, 1]
  int index = 0;           // embedding index
};

struct TrainingConfig {
  FieldConfig field;
  ScheduleConfig schedule;
  SamplerConfig sampler{32, 16, 2};
  AdamConfig adam;
  int rays_per_step = 128;
  int images_per_step = 0;  // images drawn from per step; 0 uses all
  double init_radius = 0.5;
  double bound_radius = 1.0;
  Vec3 background = Vec3::Zero();
  std::uint64_t seed = 0;
  void validate() const;
};

struct StepMetrics {
  int iteration = 0;  // iteration the step was computed at
  LossParts parts;
  double total = 0.0;
  double epsilon = 0.0;
  int active_levels = 0;
  double learning_rate = 0.0;
  double curvature_weight = 0.0;
  double sharpness = 0.0;
  bool skipped = false;
};

class Trainer {
 public:
  Trainer(TrainingConfig config, std::vector<TrainingView> views);

  StepMetrics step();
  int iteration() const { return iteration_; }
  ScheduleState schedule() const;
  const TrainingConfig& config() const { return config_; }
  NeuralField<float>& field() { return field_; }
  const NeuralField<float>& field() const { return field_; }
  AdamState& optimizer() { return adam_; }
  const AdamState& optimizer() const { return adam_; }
  /// Restores iteration counter (parameters and optimizer are set directly).
  void set_iteration(int iteration) { iteration_ = iteration; }

  /// The deterministic ray batch of an iteration (samples drawn with the
  /// current field).
  RayBatch make_batch(int iteration, const ScheduleState& state) const;

 private:
  TrainingConfig config_;
  std::vector<TrainingView> views_;
  NeuralField<float> field_;
  AdamState adam_;
  int iteration_ = 0;
};

}  // namespace hashsdf
