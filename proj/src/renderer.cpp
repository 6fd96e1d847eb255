#include "hashsdf/renderer.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "hashsdf/error.hpp"

namespace hashsdf {

void SamplerConfig::validate() const {
  require(n_uniform >= 2, "sampler needs at least two uniform samples");
  require(n_importance >= 0 && rounds >= 0, "importance sample counts must be non-negative");
}

namespace {

double logistic(double v) { return v >= 0 ? 1.0 / (1.0 + std::exp(-v)) : std::exp(v) / (1.0 + std::exp(v)); }

struct RayState {
  std::vector<double> t;
  std::vector<double> sdf;  // NaN until evaluated
};

// Opacity-derived weights of the segments of one ray.
std::vector<double> segment_weights(const RayState& r, double s) {
  std::vector<double> w(r.t.size() - 1);
  double trans = 1.0;
  for (std::size_t i = 0; i + 1 < r.t.size(); ++i) {
    const double a = sdf_to_alpha(r.sdf[i], r.sdf[i + 1], s);
    w[i] = trans * a;
    trans *= 1.0 - a;
  }
  return w;
}

// Inverse-CDF draws over the piecewise-constant density w + 1e-5 on the
// segments, with one stratified draw per stratum.
std::vector<double> importance_draws(const RayState& r, const std::vector<double>& w, int count, Rng& rng) {
  std::vector<double> cdf(w.size() + 1, 0.0);
  for (std::size_t i = 0; i < w.size(); ++i) cdf[i + 1] = cdf[i] + w[i] + 1e-5;
  const double total = cdf.back();
  std::vector<double> out(count);
  for (int j = 0; j < count; ++j) {
    const double u = (j + uniform01(rng)) / count * total;
    std::size_t seg = static_cast<std::size_t>(std::upper_bound(cdf.begin(), cdf.end(), u) - cdf.begin());
    seg = std::clamp<std::size_t>(seg, 1, w.size()) - 1;
    const double frac = std::clamp((u - cdf[seg]) / (cdf[seg + 1] - cdf[seg]), 0.0, 1.0);
    out[j] = r.t[seg] + frac * (r.t[seg + 1] - r.t[seg]);
  }
  return out;
}

// Merges new samples into the sorted ray, nudging ties so t stays strictly
// increasing. New samples carry NaN until the next round evaluates them.
void merge_samples(RayState& r, const std::vector<double>& extra) {
  std::vector<std::pair<double, double>> all;
  all.reserve(r.t.size() + extra.size());
  for (std::size_t i = 0; i < r.t.size(); ++i) all.emplace_back(r.t[i], r.sdf[i]);
  for (double t : extra) all.emplace_back(t, std::numeric_limits<double>::quiet_NaN());
  std::stable_sort(all.begin(), all.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  for (std::size_t i = 1; i < all.size(); ++i)
    if (!(all[i].first > all[i - 1].first))
      all[i].first = std::nextafter(all[i - 1].first, std::numeric_limits<double>::infinity());
  r.t.resize(all.size());
  r.sdf.resize(all.size());
  for (std::size_t i = 0; i < all.size(); ++i) {
    r.t[i] = all[i].first;
    r.sdf[i] = all[i].second;
  }
}

}  // namespace

std::vector<RaySamples> sample_rays(std::span<const Ray> rays, std::span<const std::optional<RayBounds>> bounds,
                                    const SamplerConfig& config, double sharpness, const SdfBatchFn& sdf,
                                    std::span<Rng> rngs) {
  config.validate();
  require(bounds.size() == rays.size() && rngs.size() == rays.size(), "sampler inputs have mismatched lengths");
  const std::size_t n = rays.size();
  std::vector<RayState> state(n);
  for (std::size_t r = 0; r < n; ++r) {
    if (!bounds[r]) continue;
    const double t0 = bounds[r]->t_near, t1 = bounds[r]->t_far;
    const double step = (t1 - t0) / config.n_uniform;
    auto& s = state[r];
    s.t.resize(config.n_uniform);
    for (int j = 0; j < config.n_uniform; ++j) s.t[j] = t0 + (j + uniform01(rngs[r])) * step;
    for (int j = 1; j < config.n_uniform; ++j)
      if (!(s.t[j] > s.t[j - 1])) s.t[j] = std::nextafter(s.t[j - 1], std::numeric_limits<double>::infinity());
    s.sdf.assign(s.t.size(), std::numeric_limits<double>::quiet_NaN());
  }

  if (config.n_importance > 0) {
    std::vector<Vec3> points;
    std::vector<double> values;
    for (int round = 0; round < config.rounds; ++round) {
      // Evaluate every sample whose sdf is still unknown, all rays at once.
      points.clear();
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < state[r].t.size(); ++i)
          if (std::isnan(state[r].sdf[i])) points.push_back(rays[r].at(state[r].t[i]));
      values.resize(points.size());
      if (!points.empty()) sdf(points, values);
      std::size_t k = 0;
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t i = 0; i < state[r].t.size(); ++i)
          if (std::isnan(state[r].sdf[i])) state[r].sdf[i] = values[k++];
      for (std::size_t r = 0; r < n; ++r) {
        if (state[r].t.empty()) continue;
        const auto w = segment_weights(state[r], sharpness);
        merge_samples(state[r], importance_draws(state[r], w, config.n_importance, rngs[r]));
      }
    }
  }

  std::vector<RaySamples> out(n);
  for (std::size_t r = 0; r < n; ++r) {
    auto& o = out[r];
    if (state[r].t.empty()) continue;
    o.hit = true;
    o.t = std::move(state[r].t);
    o.x.resize(o.t.size());
    for (std::size_t i = 0; i < o.t.size(); ++i) o.x[i] = rays[r].at(o.t[i]);
    o.delta.resize(o.t.size() - 1);
    for (std::size_t i = 0; i + 1 < o.t.size(); ++i) o.delta[i] = o.t[i + 1] - o.t[i];
  }
  return out;
}

RaySamples sample_ray(const Ray& ray, const std::optional<RayBounds>& bounds, const SamplerConfig& config,
                      double sharpness, const SdfBatchFn& sdf, Rng& rng) {
  return sample_rays(std::span<const Ray>(&ray, 1), std::span<const std::optional<RayBounds>>(&bounds, 1), config,
                     sharpness, sdf, std::span<Rng>(&rng, 1))[0];
}

double sdf_to_alpha(double f, double f_next, double sharpness) { return sdf_to_alpha_grad(f, f_next, sharpness).alpha; }

AlphaGrad sdf_to_alpha_grad(double f, double f_next, double sharpness) {
  require(sharpness > 0.0, "sharpness must be positive");
  AlphaGrad g;
  const double pi = logistic(sharpness * f);
  if (pi < std::numeric_limits<double>::min()) return g;
  const double pn = logistic(sharpness * f_next);
  const double raw = (pi - pn) / pi;
  if (raw <= 0.0) return g;
  if (raw >= kMaxAlpha) {
    g.alpha = kMaxAlpha;
    return g;
  }
  g.alpha = raw;
  const double ratio = pn / pi;
  g.d_f = sharpness * ratio * (1.0 - pi);
  g.d_next = -sharpness * pn * (1.0 - pn) / pi;
  g.d_sharpness = ratio * ((1.0 - pi) * f - (1.0 - pn) * f_next);
  return g;
}

RenderOutput composite(std::span<const double> alphas, std::span<const Vec3> colors, const Vec3& background,
                       std::span<const double> depths, std::span<const Vec3> normals) {
  require(colors.size() == alphas.size(), "composite: alpha and color lists differ in length");
  require(depths.empty() || depths.size() == alphas.size(), "composite: depth list has wrong length");
  require(normals.empty() || normals.size() == alphas.size(), "composite: normal list has wrong length");
  RenderOutput out;
  out.weights.resize(alphas.size());
  out.transmittance.resize(alphas.size());
  double trans = 1.0;
  double depth_sum = 0.0;
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    out.transmittance[i] = trans;
    const double w = trans * alphas[i];
    out.weights[i] = w;
    out.rgb += w * colors[i];
    out.opacity += w;
    if (!depths.empty()) depth_sum += w * depths[i];
    if (!normals.empty()) out.normal += w * normals[i];
    trans *= 1.0 - alphas[i];
  }
  out.residual = trans;
  out.rgb += trans * background;
  out.depth = out.opacity > 0.0 ? depth_sum / out.opacity : 0.0;
  return out;
}

CompositeGrad composite_backward(std::span<const double> alphas, std::span<const Vec3> colors,
                                 const Vec3& background, const Vec3& d_rgb) {
  require(colors.size() == alphas.size(), "composite: alpha and color lists differ in length");
  const std::size_t n = alphas.size();
  CompositeGrad g;
  g.d_alpha.resize(n);
  g.d_color.resize(n);
  std::vector<double> trans(n);
  double t = 1.0;
  for (std::size_t i = 0; i < n; ++i) {
    trans[i] = t;
    t *= 1.0 - alphas[i];
  }
  // Suffix radiance R_i = alpha_i c_i + (1 - alpha_i) R_{i+1}, R_n = background.
  Vec3 suffix = background;
  for (std::size_t i = n; i-- > 0;) {
    g.d_alpha[i] = trans[i] * d_rgb.dot(colors[i] - suffix);
    g.d_color[i] = trans[i] * alphas[i] * d_rgb;
    suffix = alphas[i] * colors[i] + (1.0 - alphas[i]) * suffix;
  }
  return g;
}

std::vector<RenderOutput> render_rays(std::span<const Ray> rays, const RenderField& field, const RenderConfig& config,
                                      std::span<Rng> rngs) {
  const std::size_t n = rays.size();
  std::vector<std::optional<RayBounds>> bounds(n);
  for (std::size_t r = 0; r < n; ++r) bounds[r] = ray_sphere_bounds(rays[r], config.bound_radius);
  const SdfBatchFn sdf = [&field](std::span<const Vec3> p, std::span<double> out) { field.sdf(p, out); };
  const auto samples = sample_rays(rays, bounds, config.sampler, config.sharpness, sdf, rngs);

  // Centers followed by the six axis offsets of every sample.
  std::vector<Vec3> centers, dirs;
  for (std::size_t r = 0; r < n; ++r)
    for (const auto& x : samples[r].x) {
      centers.push_back(x);
      dirs.push_back(rays[r].direction);
    }
  const std::size_t m = centers.size();
  const double eps = config.normal_step;
  std::vector<Vec3> probes(7 * m);
  for (std::size_t i = 0; i < m; ++i) {
    probes[i] = centers[i];
    for (int k = 0; k < 3; ++k) {
      probes[(1 + 2 * k) * m + i] = centers[i] + eps * Vec3::Unit(k);
      probes[(2 + 2 * k) * m + i] = centers[i] - eps * Vec3::Unit(k);
    }
  }
  std::vector<double> values(probes.size());
  if (m > 0) field.sdf(probes, values);
  std::vector<Vec3> normals(m), colors(m);
  for (std::size_t i = 0; i < m; ++i)
    for (int k = 0; k < 3; ++k)
      normals[i][k] = (values[(1 + 2 * k) * m + i] - values[(2 + 2 * k) * m + i]) / (2.0 * eps);
  if (m > 0) field.color(centers, normals, dirs, colors);

  std::vector<RenderOutput> out(n);
  std::size_t base = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& s = samples[r];
    if (!s.hit) {
      out[r] = composite({}, {}, config.background);
      continue;
    }
    const std::size_t segs = s.segments();
    std::vector<double> alphas(segs), mids(segs);
    for (std::size_t i = 0; i < segs; ++i) {
      alphas[i] = sdf_to_alpha(values[base + i], values[base + i + 1], config.sharpness);
      mids[i] = s.midpoint(i);
    }
    out[r] = composite(alphas, std::span<const Vec3>(colors.data() + base, segs), config.background, mids,
                       std::span<const Vec3>(normals.data() + base, segs));
    base += s.t.size();
  }
  return out;
}

RenderOutput render_pixel(const Camera& camera, double u, double v, const RenderField& field,
                          const RenderConfig& config, Rng& rng) {
  const Ray ray = generate_ray(camera, u, v);
  return render_rays(std::span<const Ray>(&ray, 1), field, config, std::span<Rng>(&rng, 1))[0];
}

RenderedImage render_image(const Camera& camera, const RenderField& field, const RenderConfig& config,
                           std::uint64_t seed, std::uint64_t image_id, int rows_per_batch) {
  const int w = camera.intrinsics.width, h = camera.intrinsics.height;
  RenderedImage img;
  img.width = w;
  img.height = h;
  img.rgb.resize(static_cast<std::size_t>(w) * h * 3);
  img.depth.resize(static_cast<std::size_t>(w) * h);
  img.normal.resize(static_cast<std::size_t>(w) * h * 3);
  img.opacity.resize(static_cast<std::size_t>(w) * h);
  rows_per_batch = std::max(1, rows_per_batch);
  for (int v0 = 0; v0 < h; v0 += rows_per_batch) {
    const int v1 = std::min(h, v0 + rows_per_batch);
    std::vector<Ray> rays;
    std::vector<Rng> rngs;
    for (int v = v0; v < v1; ++v)
      for (int u = 0; u < w; ++u) {
        rays.push_back(generate_ray(camera, u, v));
        rngs.push_back(make_stream(seed, {image_id, static_cast<std::uint64_t>(v) * w + u}));
      }
    const auto out = render_rays(rays, field, config, rngs);
    for (std::size_t i = 0; i < out.size(); ++i) {
      const std::size_t p = static_cast<std::size_t>(v0) * w + i;
      for (int k = 0; k < 3; ++k) img.rgb[p * 3 + k] = static_cast<float>(std::clamp(out[i].rgb[k], 0.0, 1.0));
      img.depth[p] = static_cast<float>(out[i].depth);
      img.opacity[p] = static_cast<float>(out[i].opacity);
      const double len = out[i].normal.norm();
      for (int k = 0; k < 3; ++k) img.normal[p * 3 + k] = len > 0 ? static_cast<float>(out[i].normal[k] / len) : 0.f;
    }
  }
  return img;
}

}  // namespace hashsdf
