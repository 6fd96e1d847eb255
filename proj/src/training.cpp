#include "hashsdf/training.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#if defined(__SSE2__)
#include <immintrin.h>
#endif

#include "hashsdf/error.hpp"

namespace hashsdf {

namespace {

// Flushes subnormal float results and inputs to zero for its lifetime.
// Backpropagated values through a saturated softplus land in the subnormal
// range, where arithmetic is an order of magnitude slower.
class FlushSubnormals {
 public:
#if defined(__SSE2__)
  FlushSubnormals() : saved_(_mm_getcsr()) { _mm_setcsr(saved_ | 0x8040); }  // FTZ | DAZ
  ~FlushSubnormals() { _mm_setcsr(saved_); }

 private:
  unsigned saved_;
#endif
};

}  // namespace

std::string mode_name(GradientMode mode) {
  switch (mode) {
    case GradientMode::Analytical: return "AG";
    case GradientMode::AnalyticalProgressive: return "AG+P";
    case GradientMode::Numerical: return "NG";
    case GradientMode::NumericalProgressive: return "NG+P";
  }
  return "?";
}

GradientMode parse_mode(const std::string& name) {
  for (auto m : {GradientMode::Analytical, GradientMode::AnalyticalProgressive, GradientMode::Numerical,
                 GradientMode::NumericalProgressive})
    if (mode_name(m) == name) return m;
  fail(ErrorCode::Config, "unknown gradient mode '" + name + "' (expected AG, AG+P, NG or NG+P)");
}

// ---------------------------------------------------------------- losses

double loss_rgb(std::span<const Vec3> rendered, std::span<const Vec3> target) {
  require(rendered.size() == target.size(), "loss_rgb: batch shapes differ");
  require(!rendered.empty(), "loss_rgb: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < rendered.size(); ++i) sum += (rendered[i] - target[i]).cwiseAbs().sum();
  return sum / (3.0 * static_cast<double>(rendered.size()));
}

double loss_eikonal(std::span<const Vec3> gradients) {
  require(!gradients.empty(), "loss_eikonal: empty batch");
  double sum = 0.0;
  for (const auto& g : gradients) sum += (g.norm() - 1.0) * (g.norm() - 1.0);
  return sum / static_cast<double>(gradients.size());
}

double loss_curvature(std::span<const double> laplacians) {
  require(!laplacians.empty(), "loss_curvature: empty batch");
  double sum = 0.0;
  for (double v : laplacians) sum += std::abs(v);
  return sum / static_cast<double>(laplacians.size());
}

double total_loss(const LossParts& parts, const LossWeights& weights) {
  auto check = [](double v, const char* name) {
    if (!std::isfinite(v)) {
      std::ostringstream msg;
      msg << "non-finite " << name << " loss (" << v << ")";
      fail(ErrorCode::NonFinite, msg.str());
    }
  };
  check(parts.rgb, "rgb");
  check(parts.eikonal, "eikonal");
  check(parts.curvature, "curvature");
  return parts.rgb + weights.eikonal * parts.eikonal + weights.curvature * parts.curvature;
}

// -------------------------------------------------------------- schedule

void ScheduleConfig::validate(const EncodingConfig& encoding) const {
  if (iterations < 0) fail(ErrorCode::Config, "iterations must be non-negative");
  if (activation_interval < 1) fail(ErrorCode::Config, "activation interval must be positive");
  if (initial_levels < 1 || initial_levels > encoding.levels)
    fail(ErrorCode::Config, "initial active levels must lie in [1, levels]");
  if (warmup < 0 || milestone_1 < 0 || milestone_2 < milestone_1)
    fail(ErrorCode::Config, "bad warmup or learning-rate milestones");
  if (!(learning_rate > 0) || eikonal_weight < 0 || curvature_weight < 0)
    fail(ErrorCode::Config, "learning rate must be positive and loss weights non-negative");
}

ScheduleState schedule_at(const ScheduleConfig& config, const EncodingConfig& encoding, int iteration) {
  require(iteration >= 0, "iteration must be non-negative");
  const double b = encoding.growth();
  const double eps0 = 2.0 / encoding.min_resolution;
  const double floor = 2.0 / encoding.max_resolution;
  const int k = iteration / config.activation_interval;

  ScheduleState s;
  s.iteration = iteration;
  s.epsilon = std::max(eps0 * std::pow(b, -k), floor);
  // A decrease happens at event j while the previous value is above the floor.
  int curvature_decays = 0;
  for (int j = 1; j <= k; ++j) {
    if (!(eps0 * std::pow(b, -(j - 1)) > floor * (1.0 + 1e-9))) break;
    ++s.decay_count;
    if (static_cast<long long>(j) * config.activation_interval >= config.warmup) ++curvature_decays;
  }
  s.active_levels = uses_progressive(config.mode)
                        ? std::max(config.initial_levels, std::min(encoding.levels, k + 1))
                        : encoding.levels;

  const double warm = config.warmup > 0 ? std::min(1.0, static_cast<double>(iteration) / config.warmup) : 1.0;
  s.learning_rate = config.learning_rate * warm;
  if (iteration >= config.milestone_1) s.learning_rate *= 0.1;
  if (iteration >= config.milestone_2) s.learning_rate *= 0.1;

  const double ramp = config.curvature_warmup ? warm : 1.0;
  s.curvature_weight = config.curvature_weight * ramp * std::pow(b, -curvature_decays);
  return s;
}

ScheduleState schedule_step(const ScheduleState& state, const ScheduleConfig& config, const EncodingConfig& encoding) {
  return schedule_at(config, encoding, state.iteration + 1);
}

// ------------------------------------------------------------- optimizer

template <class T>
bool adamw_step(std::span<T> params, std::span<const T> grads, AdamState& state, const AdamConfig& config,
                double lr) {
  require(params.size() == grads.size(), "adamw: gradient length mismatch");
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), 0.f);
    state.v.assign(params.size(), 0.f);
  }
  const bool finite = std::all_of(grads.begin(), grads.end(), [](T g) { return std::isfinite(g); });
  if (!finite) {
    ++state.skipped;
    if (++state.consecutive_skips >= config.max_consecutive_skips)
      fail(ErrorCode::NonFinite, "non-finite gradients for " + std::to_string(state.consecutive_skips) +
                                     " consecutive steps; aborting");
    return false;
  }
  state.consecutive_skips = 0;
  ++state.steps;
  const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.steps));
  const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.steps));
  const T decay = static_cast<T>(1.0 - lr * config.weight_decay);
  const T step = static_cast<T>(lr / c1), inv_c2 = static_cast<T>(1.0 / c2), eps = static_cast<T>(config.epsilon);
  const float b1 = static_cast<float>(config.beta1), b2 = static_cast<float>(config.beta2);
  float* m = state.m.data();
  float* v = state.v.data();
  for (std::size_t i = 0; i < params.size(); ++i) {
    const float g = static_cast<float>(grads[i]);
    m[i] = b1 * m[i] + (1.f - b1) * g;
    v[i] = b2 * v[i] + (1.f - b2) * g * g;
    params[i] = params[i] * decay - step * T(m[i]) / (std::sqrt(T(v[i]) * inv_c2) + eps);
  }
  return true;
}

template bool adamw_step<float>(std::span<float>, std::span<const float>, AdamState&, const AdamConfig&, double);
template bool adamw_step<double>(std::span<double>, std::span<const double>, AdamState&, const AdamConfig&, double);

// ------------------------------------------------------ loss evaluation

template <class T>
LossEvaluation<T> evaluate_loss(const NeuralField<T>& field, const RayBatch& batch, const LossSetup& setup,
                                bool with_gradient) {
  const std::size_t rays = batch.rays.size();
  require(rays > 0 && batch.samples.size() == rays && batch.targets.size() == rays && batch.images.size() == rays,
          "ray batch has mismatched lengths");
  const bool numerical = uses_numerical(setup.mode);
  const int f_dim = field.config().geometric_features;
  const double s = static_cast<double>(field.sharpness());

  std::vector<std::size_t> base(rays + 1, 0);
  for (std::size_t r = 0; r < rays; ++r) base[r + 1] = base[r] + batch.samples[r].t.size();
  const std::size_t m = base[rays];

  std::vector<Vec3T<T>> centers(m), dirs(m);
  std::vector<int> images(m);
  for (std::size_t r = 0; r < rays; ++r)
    for (std::size_t i = 0; i < batch.samples[r].t.size(); ++i) {
      centers[base[r] + i] = batch.samples[r].x[i].template cast<T>();
      dirs[base[r] + i] = batch.rays[r].direction.template cast<T>();
      images[base[r] + i] = batch.images[r];
    }

  LossEvaluation<T> out;
  out.sample_count = m;
  out.rgb.assign(rays, setup.background);

  // Geometry: sdf, features, gradient and Laplacian at every sample.
  SdfBatch<T> sdf;
  RowMatrix<T> gradient(m, 3);
  ColVector<T> laplacian(m);
  const T eps = static_cast<T>(setup.epsilon);
  if (numerical) {
    std::vector<Vec3T<T>> probes(7 * m);
    for (std::size_t i = 0; i < m; ++i) {
      probes[i] = centers[i];
      for (int k = 0; k < 3; ++k) {
        probes[(1 + 2 * k) * m + i] = centers[i] + eps * Vec3T<T>::Unit(k);
        probes[(2 + 2 * k) * m + i] = centers[i] - eps * Vec3T<T>::Unit(k);
      }
    }
    field.sdf_forward(probes, setup.active_levels, sdf, false);
    out.field_evaluations = probes.size();
    for (std::size_t i = 0; i < m; ++i) {
      const auto e = static_cast<Eigen::Index>(i);
      const T f0 = sdf.output(e, 0);
      AxisSamples<T> axis;
      for (int j = 0; j < 6; ++j) axis[j] = sdf.output(static_cast<Eigen::Index>((1 + j) * m + i), 0);
      for (int k = 0; k < 3; ++k) gradient(e, k) = (axis[2 * k] - axis[2 * k + 1]) / (T(2) * eps);
      laplacian[e] = numerical_laplacian(f0, axis, eps);
    }
  } else {
    field.sdf_forward(centers, setup.active_levels, sdf, true);
    out.field_evaluations = m;
    gradient = sdf.gradient;
    laplacian = sdf.laplacian;
  }
  RowMatrix<T> features = sdf.output.block(0, 1, static_cast<Eigen::Index>(m), f_dim);
  std::vector<Vec3T<T>> normals(m);
  for (std::size_t i = 0; i < m; ++i) normals[i] = gradient.row(static_cast<Eigen::Index>(i)).transpose();

  ColorBatch<T> color;
  if (m > 0) {
    field.color_forward(centers, normals, dirs, features, images, color);
    for (const auto& pre : color.pre)
      out.margins.relu = std::min(out.margins.relu, static_cast<double>(pre.cwiseAbs().minCoeff()));
  }

  // Compositing per ray.
  std::vector<double> d_f(m, 0.0);
  RowMatrix<T> d_rgb_samples = RowMatrix<T>::Zero(static_cast<Eigen::Index>(m), 3);
  double d_sharpness = 0.0;
  double rgb_sum = 0.0;
  std::vector<std::vector<AlphaGrad>> alpha(rays);
  std::vector<std::vector<Vec3>> seg_colors(rays);
  for (std::size_t r = 0; r < rays; ++r) {
    const std::size_t n = batch.samples[r].t.size();
    const std::size_t segs = n > 0 ? n - 1 : 0;
    std::vector<double> a(segs);
    alpha[r].resize(segs);
    seg_colors[r].resize(segs);
    for (std::size_t i = 0; i < segs; ++i) {
      const auto e = static_cast<Eigen::Index>(base[r] + i);
      const double fi = sdf.output(e, 0), fn = sdf.output(e + 1, 0);
      alpha[r][i] = sdf_to_alpha_grad(fi, fn, s);
      a[i] = alpha[r][i].alpha;
      seg_colors[r][i] = color.rgb.row(e).transpose().template cast<double>();
      out.margins.alpha_flat = std::min(out.margins.alpha_flat, std::abs(s * (fi - fn)));
      if (a[i] > 0.0) out.margins.alpha_clamp = std::min(out.margins.alpha_clamp, kMaxAlpha - a[i]);
    }
    out.rgb[r] = composite(a, seg_colors[r], setup.background).rgb;
    for (int k = 0; k < 3; ++k) {
      const double diff = out.rgb[r][k] - batch.targets[r][k];
      rgb_sum += std::abs(diff);
      out.margins.rgb = std::min(out.margins.rgb, std::abs(diff));
    }
  }
  out.parts.rgb = rgb_sum / (3.0 * static_cast<double>(rays));

  double eik_sum = 0.0, curv_sum = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const auto e = static_cast<Eigen::Index>(i);
    const double g = static_cast<double>(gradient.row(e).norm());
    eik_sum += (g - 1.0) * (g - 1.0);
    curv_sum += std::abs(static_cast<double>(laplacian[e]));
    out.margins.eikonal = std::min(out.margins.eikonal, g);
    out.margins.laplacian = std::min(out.margins.laplacian, std::abs(static_cast<double>(laplacian[e])));
  }
  if (m > 0) {
    out.parts.eikonal = eik_sum / static_cast<double>(m);
    out.parts.curvature = curv_sum / static_cast<double>(m);
  }
  out.total = total_loss(out.parts, setup.weights);
  if (!with_gradient) return out;

  // ---- backward
  out.gradient.assign(field.parameters().size(), T(0));
  if (m == 0) return out;
  const double rgb_scale = 1.0 / (3.0 * static_cast<double>(rays));
  for (std::size_t r = 0; r < rays; ++r) {
    const std::size_t segs = alpha[r].size();
    if (segs == 0) continue;
    Vec3 d_rgb;
    for (int k = 0; k < 3; ++k) {
      const double diff = out.rgb[r][k] - batch.targets[r][k];
      d_rgb[k] = diff > 0 ? rgb_scale : (diff < 0 ? -rgb_scale : 0.0);
    }
    std::vector<double> a(segs);
    for (std::size_t i = 0; i < segs; ++i) a[i] = alpha[r][i].alpha;
    const auto cg = composite_backward(a, seg_colors[r], setup.background, d_rgb);
    for (std::size_t i = 0; i < segs; ++i) {
      const std::size_t p = base[r] + i;
      d_f[p] += cg.d_alpha[i] * alpha[r][i].d_f;
      d_f[p + 1] += cg.d_alpha[i] * alpha[r][i].d_next;
      d_sharpness += cg.d_alpha[i] * alpha[r][i].d_sharpness;
      for (int k = 0; k < 3; ++k) d_rgb_samples(static_cast<Eigen::Index>(p), k) = static_cast<T>(cg.d_color[i][k]);
    }
  }

  const RowMatrix<T> d_color_input = field.color_backward(color, d_rgb_samples, out.gradient);
  const int normal_col = field.color_normal_column();
  const int feature_col = field.color_feature_column();

  RowMatrix<T> d_gradient(m, 3);
  ColVector<T> d_laplacian(m);
  const double eik_scale = 2.0 * setup.weights.eikonal / static_cast<double>(m);
  const double curv_scale = setup.weights.curvature / static_cast<double>(m);
  for (std::size_t i = 0; i < m; ++i) {
    const auto e = static_cast<Eigen::Index>(i);
    const double g = static_cast<double>(gradient.row(e).norm());
    const double factor = g > 0.0 ? eik_scale * (g - 1.0) / g : 0.0;
    for (int k = 0; k < 3; ++k)
      d_gradient(e, k) = static_cast<T>(factor * static_cast<double>(gradient(e, k))) + d_color_input(e, normal_col + k);
    const double lap = static_cast<double>(laplacian[e]);
    d_laplacian[e] = static_cast<T>(lap > 0 ? curv_scale : (lap < 0 ? -curv_scale : 0.0));
  }

  RowMatrix<T> d_output = RowMatrix<T>::Zero(sdf.output.rows(), sdf.output.cols());
  for (std::size_t i = 0; i < m; ++i) {
    const auto e = static_cast<Eigen::Index>(i);
    d_output(e, 0) = static_cast<T>(d_f[i]);
    for (int j = 0; j < f_dim; ++j) d_output(e, 1 + j) = d_color_input(e, feature_col + j);
  }
  if (numerical) {
    const T inv2e = T(1) / (T(2) * eps), inve2 = T(1) / (eps * eps);
    for (std::size_t i = 0; i < m; ++i) {
      const auto e = static_cast<Eigen::Index>(i);
      const T dl = d_laplacian[e];
      for (int k = 0; k < 3; ++k) {
        d_output(static_cast<Eigen::Index>((1 + 2 * k) * m + i), 0) += d_gradient(e, k) * inv2e + dl * inve2;
        d_output(static_cast<Eigen::Index>((2 + 2 * k) * m + i), 0) += -d_gradient(e, k) * inv2e + dl * inve2;
      }
      d_output(e, 0) -= T(6) * dl * inve2;
    }
    field.sdf_backward(sdf, d_output, nullptr, nullptr, out.gradient);
  } else {
    field.sdf_backward(sdf, d_output, &d_gradient, &d_laplacian, out.gradient);
  }

  const auto& log_s = field.segment("log_s");
  out.gradient[log_s.offset] += static_cast<T>(d_sharpness * s);
  return out;
}

template LossEvaluation<float> evaluate_loss<float>(const NeuralField<float>&, const RayBatch&, const LossSetup&, bool);
template LossEvaluation<double> evaluate_loss<double>(const NeuralField<double>&, const RayBatch&, const LossSetup&,
                                                      bool);

// -------------------------------------------------------------- trainer

void TrainingConfig::validate() const {
  field.validate();
  schedule.validate(field.encoding);
  sampler.validate();
  if (rays_per_step < 1) fail(ErrorCode::Config, "rays per step must be positive");
  if (images_per_step < 0) fail(ErrorCode::Config, "images per step must be non-negative");
  if (!(init_radius > 0 && init_radius < 1)) fail(ErrorCode::Config, "initial sphere radius must lie in (0, 1)");
  if (!(bound_radius > 0 && bound_radius <= 1)) fail(ErrorCode::Config, "bound radius must lie in (0, 1]");
}

Trainer::Trainer(TrainingConfig config, std::vector<TrainingView> views)
    : config_(std::move(config)), views_(std::move(views)), field_((config_.validate(), config_.field), config_.seed) {
  require(!views_.empty(), "training needs at least one view");
  for (const auto& v : views_) {
    v.camera.validate();
    require(v.rgb.size() == static_cast<std::size_t>(v.camera.intrinsics.width) * v.camera.intrinsics.height * 3,
            "training image size does not match its camera");
  }
  field_.init_sphere(config_.init_radius);
}

ScheduleState Trainer::schedule() const { return schedule_at(config_.schedule, config_.field.encoding, iteration_); }

RayBatch Trainer::make_batch(int iteration, const ScheduleState& state) const {
  const auto it = static_cast<std::uint64_t>(iteration);
  Rng rng = make_stream(config_.seed, {it, 0x6261746368ULL});
  // Images of this step: a partial Fisher-Yates draw without replacement.
  std::vector<std::size_t> pool(views_.size());
  for (std::size_t i = 0; i < pool.size(); ++i) pool[i] = i;
  std::size_t count = pool.size();
  if (config_.images_per_step > 0 && static_cast<std::size_t>(config_.images_per_step) < pool.size()) {
    count = static_cast<std::size_t>(config_.images_per_step);
    for (std::size_t i = 0; i < count; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform01(rng) * static_cast<double>(pool.size() - i));
      std::swap(pool[i], pool[std::min(j, pool.size() - 1)]);
    }
  }

  RayBatch batch;
  std::vector<std::optional<RayBounds>> bounds;
  std::vector<Rng> rngs;
  for (int r = 0; r < config_.rays_per_step; ++r) {
    const auto pick = std::min(count - 1, static_cast<std::size_t>(uniform01(rng) * static_cast<double>(count)));
    const auto& view = views_[pool[pick]];
    const int w = view.camera.intrinsics.width, h = view.camera.intrinsics.height;
    const int u = std::min(w - 1, static_cast<int>(uniform01(rng) * w));
    const int v = std::min(h - 1, static_cast<int>(uniform01(rng) * h));
    const std::size_t px = static_cast<std::size_t>(v) * w + u;
    batch.rays.push_back(generate_ray(view.camera, u, v));
    batch.targets.emplace_back(view.rgb[px * 3], view.rgb[px * 3 + 1], view.rgb[px * 3 + 2]);
    batch.images.push_back(view.index);
    bounds.push_back(ray_sphere_bounds(batch.rays.back(), config_.bound_radius));
    rngs.push_back(make_stream(config_.seed, {it, static_cast<std::uint64_t>(view.index), px}));
  }

  const int active = state.active_levels;
  const SdfBatchFn sdf = [this, active](std::span<const Vec3> p, std::span<double> out) {
    std::vector<Vec3T<float>> q(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) q[i] = p[i].cast<float>();
    std::vector<float> v(p.size());
    field_.sdf_values(q, active, v);
    std::copy(v.begin(), v.end(), out.begin());
  };
  batch.samples = sample_rays(batch.rays, bounds, config_.sampler, field_.sharpness(), sdf, rngs);
  return batch;
}

StepMetrics Trainer::step() {
  const FlushSubnormals flush;
  const ScheduleState state = schedule();
  const RayBatch batch = make_batch(iteration_, state);
  LossSetup setup;
  setup.mode = config_.schedule.mode;
  setup.epsilon = state.epsilon;
  setup.active_levels = state.active_levels;
  setup.weights = {config_.schedule.eikonal_weight, config_.schedule.curvature_weight, state.curvature_weight};
  setup.background = config_.background;
  const auto eval = evaluate_loss(field_, batch, setup, true);

  StepMetrics metrics;
  metrics.iteration = iteration_;
  metrics.parts = eval.parts;
  metrics.total = eval.total;
  metrics.epsilon = state.epsilon;
  metrics.active_levels = state.active_levels;
  metrics.learning_rate = state.learning_rate;
  metrics.curvature_weight = state.curvature_weight;
  metrics.sharpness = field_.sharpness();
  metrics.skipped =
      !adamw_step<float>(field_.parameters(), eval.gradient, adam_, config_.adam, state.learning_rate);
  ++iteration_;
  return metrics;
}

}  // namespace hashsdf
