#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "hashsdf/geometry.hpp"
#include "hashsdf/rng.hpp"

namespace hashsdf {

struct SamplerConfig {
  int n_uniform = 64;
  int n_importance = 16;  // per round
  int rounds = 4;
  void validate() const;
};

/// Sample positions along one ray. Segment i spans [t[i], t[i+1]].
struct RaySamples {
  bool hit = false;  // false: the ray misses the bounding sphere, background only
  std::vector<double> t;
  std::vector<Vec3> x;
  std::vector<double> delta;  // t[i+1] - t[i], one per segment

  std::size_t segments() const { return t.empty() ? 0 : t.size() - 1; }
  double midpoint(std::size_t i) const { return 0.5 * (t[i] + t[i + 1]); }
};

/// Evaluates the SDF at a batch of points.
using SdfBatchFn = std::function<void(std::span<const Vec3>, std::span<double>)>;

/// Stratified samples in [t_near, t_far] followed by `rounds` of importance
/// resampling driven by the opacity of the current samples under sharpness s.
/// Rays are processed in lockstep so each round costs one batched SDF call.
std::vector<RaySamples> sample_rays(std::span<const Ray> rays, std::span<const std::optional<RayBounds>> bounds,
                                    const SamplerConfig& config, double sharpness, const SdfBatchFn& sdf,
                                    std::span<Rng> rngs);

RaySamples sample_ray(const Ray& ray, const std::optional<RayBounds>& bounds, const SamplerConfig& config,
                      double sharpness, const SdfBatchFn& sdf, Rng& rng);

/// Upper clamp on per-segment opacity.
inline constexpr double kMaxAlpha = 1.0 - 1e-6;

/// Opacity of the segment between samples with SDF values f and f_next.
double sdf_to_alpha(double f, double f_next, double sharpness);

struct AlphaGrad {
  double alpha = 0.0;
  double d_f = 0.0;
  double d_next = 0.0;
  double d_sharpness = 0.0;
};

/// Opacity and its partial derivatives (zero wherever a clamp is active).
AlphaGrad sdf_to_alpha_grad(double f, double f_next, double sharpness);

struct RenderOutput {
  Vec3 rgb = Vec3::Zero();
  std::vector<double> weights;        // w_i = T_i alpha_i
  std::vector<double> transmittance;  // T_i before segment i
  double residual = 1.0;              // transmittance left after the last segment
  double opacity = 0.0;               // sum of weights
  double depth = 0.0;                 // weighted mean segment midpoint, 0 when opacity is 0
  Vec3 normal = Vec3::Zero();         // sum of w_i n_i
};

/// Front-to-back compositing of per-segment opacities and colors over a
/// constant background. `depths` and `normals` are optional per-segment
/// inputs for the depth and normal outputs.
RenderOutput composite(std::span<const double> alphas, std::span<const Vec3> colors, const Vec3& background,
                       std::span<const double> depths = {}, std::span<const Vec3> normals = {});

struct CompositeGrad {
  std::vector<double> d_alpha;
  std::vector<Vec3> d_color;
};

/// Gradients of dot(d_rgb, rgb) with respect to the opacities and colors.
CompositeGrad composite_backward(std::span<const double> alphas, std::span<const Vec3> colors,
                                 const Vec3& background, const Vec3& d_rgb);

/// Scene model consumed by the generic renderer: batched SDF plus a shader
/// taking positions, (unnormalized) normals and unit view directions.
class RenderField {
 public:
  virtual ~RenderField() = default;
  virtual void sdf(std::span<const Vec3> points, std::span<double> out) const = 0;
  virtual void color(std::span<const Vec3> points, std::span<const Vec3> normals, std::span<const Vec3> view_dirs,
                     std::span<Vec3> out) const = 0;
};

struct RenderConfig {
  SamplerConfig sampler;
  Vec3 background = Vec3::Zero();
  double bound_radius = 1.0;
  double sharpness = 64.0;
  double normal_step = 1e-3;  // epsilon of the numerical normals
};

/// Full pipeline per ray: bounds, samples, SDF, numerical normals, colors,
/// compositing. Rays are rendered independently; rngs supply one stream each.
std::vector<RenderOutput> render_rays(std::span<const Ray> rays, const RenderField& field, const RenderConfig& config,
                                      std::span<Rng> rngs);

RenderOutput render_pixel(const Camera& camera, double u, double v, const RenderField& field,
                          const RenderConfig& config, Rng& rng);

/// Per-pixel render output maps of a full image.
struct RenderedImage {
  int width = 0;
  int height = 0;
  std::vector<float> rgb;     // width * height * 3
  std::vector<float> depth;   // width * height
  std::vector<float> normal;  // width * height * 3, world space, normalized where opacity > 0
  std::vector<float> opacity;
};

/// Renders every pixel of the camera. Pixel (u, v) draws from the stream
/// stream_seed(seed, {image_id, v * width + u}).
RenderedImage render_image(const Camera& camera, const RenderField& field, const RenderConfig& config,
                           std::uint64_t seed, std::uint64_t image_id, int rows_per_batch = 8);

}  // namespace hashsdf
