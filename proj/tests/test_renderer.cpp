#include <doctest.h>

#include <cmath>

#include "hashsdf/error.hpp"
#include "hashsdf/field.hpp"
#include "hashsdf/renderer.hpp"

using namespace hashsdf;

namespace {

class SphereStub : public RenderField {
 public:
  explicit SphereStub(double radius, Vec3 albedo = Vec3(1, 0, 0)) : radius_(radius), albedo_(albedo) {}
  void sdf(std::span<const Vec3> p, std::span<double> out) const override {
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = p[i].norm() - radius_;
  }
  void color(std::span<const Vec3>, std::span<const Vec3>, std::span<const Vec3>, std::span<Vec3> out) const override {
    for (auto& c : out) c = albedo_;
  }

 private:
  double radius_;
  Vec3 albedo_;
};

double logistic(double v) { return 1.0 / (1.0 + std::exp(-v)); }

SdfBatchFn stub_sdf(const RenderField& f) {
  return [&f](std::span<const Vec3> p, std::span<double> out) { f.sdf(p, out); };
}

}  // namespace

TEST_CASE("sdf_to_alpha examples") {
  CHECK(sdf_to_alpha(0.3, 0.3, 10) == 0.0);
  CHECK(sdf_to_alpha(-0.1, 0.1, 10) == 0.0);
  const double oracle = (logistic(1.0) - logistic(-1.0)) / logistic(1.0);
  CHECK(oracle == doctest::Approx(0.63212).epsilon(1e-5));
  CHECK(std::abs(sdf_to_alpha(0.1, -0.1, 10) - 0.63212) <= 1e-5);
  // Deep inside: the logistic underflows, opacity is zero rather than NaN.
  CHECK(sdf_to_alpha(-1e3, -2e3, 1e4) == 0.0);
  // Saturated crossing hits the upper clamp.
  CHECK(sdf_to_alpha(1.0, -1.0, 1e4) == kMaxAlpha);
  CHECK_THROWS_AS(sdf_to_alpha(0.1, 0.0, 0.0), Error);
}

TEST_CASE("sdf_to_alpha gradients match finite differences") {
  Rng rng = make_stream(1, {});
  const double h = 1e-6;
  int checked = 0;
  for (int i = 0; i < 500; ++i) {
    const double f = uniform(rng, -0.3, 0.3), fn = uniform(rng, -0.3, 0.3), s = uniform(rng, 5, 100);
    const auto g = sdf_to_alpha_grad(f, fn, s);
    if (g.alpha <= 1e-6 || g.alpha >= 0.99) continue;  // away from the clamps
    const double df = (sdf_to_alpha(f + h, fn, s) - sdf_to_alpha(f - h, fn, s)) / (2 * h);
    const double dn = (sdf_to_alpha(f, fn + h, s) - sdf_to_alpha(f, fn - h, s)) / (2 * h);
    const double ds = (sdf_to_alpha(f, fn, s + h) - sdf_to_alpha(f, fn, s - h)) / (2 * h);
    CHECK(g.d_f == doctest::Approx(df).epsilon(1e-5));
    CHECK(g.d_next == doctest::Approx(dn).epsilon(1e-5));
    CHECK(g.d_sharpness == doctest::Approx(ds).epsilon(1e-4));
    ++checked;
  }
  CHECK(checked > 100);
}

TEST_CASE("composite examples") {
  const Vec3 c(0.2, 0.4, 0.6);
  auto out = composite(std::vector<double>{1.0}, std::vector<Vec3>{c}, Vec3(1, 1, 1));
  CHECK((out.rgb - c).norm() < 1e-15);
  CHECK(out.opacity == 1.0);

  out = composite(std::vector<double>{0, 0, 0}, std::vector<Vec3>(3, c), Vec3(1, 1, 1));
  CHECK(out.rgb == Vec3(1, 1, 1));
  CHECK(out.opacity == 0.0);

  const Vec3 c2(0.9, 0.1, 0.3);
  out = composite(std::vector<double>{0.5, 1.0}, std::vector<Vec3>{c, c2}, Vec3::Zero());
  CHECK((out.rgb - (0.5 * c + 0.5 * c2)).norm() < 1e-15);
  CHECK(out.transmittance[1] == 0.5);
}

TEST_CASE("composite backward matches finite differences") {
  Rng rng = make_stream(2, {});
  const int n = 12;
  std::vector<double> a(n);
  std::vector<Vec3> c(n);
  for (int i = 0; i < n; ++i) {
    a[i] = uniform(rng, 0, 0.6);
    c[i] = Vec3(uniform(rng, 0, 1), uniform(rng, 0, 1), uniform(rng, 0, 1));
  }
  const Vec3 bg(0.3, 0.5, 0.7), d(0.7, -1.1, 0.4);
  const auto g = composite_backward(a, c, bg, d);
  const double h = 1e-6;
  for (int i = 0; i < n; ++i) {
    auto ap = a, am = a;
    ap[i] += h;
    am[i] -= h;
    const double fd = d.dot(composite(ap, c, bg).rgb - composite(am, c, bg).rgb) / (2 * h);
    CHECK(g.d_alpha[i] == doctest::Approx(fd).epsilon(1e-6));
    const auto w = composite(a, c, bg).weights[i];
    CHECK((g.d_color[i] - w * d).norm() < 1e-15);
  }
}

TEST_CASE("stratified sampling without importance rounds") {
  SphereStub stub(0.5);
  SamplerConfig cfg;
  cfg.n_uniform = 32;
  cfg.n_importance = 0;
  Rng rng = make_stream(3, {});
  const Ray ray{Vec3(0, 0, -3), Vec3(0, 0, 1)};
  const auto bounds = ray_sphere_bounds(ray, 1.0);
  const auto s = sample_ray(ray, bounds, cfg, 64, stub_sdf(stub), rng);
  REQUIRE(s.t.size() == 32u);
  const double step = (bounds->t_far - bounds->t_near) / 32;
  for (int j = 0; j < 32; ++j) {
    CHECK(s.t[j] >= bounds->t_near + j * step);
    CHECK(s.t[j] <= bounds->t_near + (j + 1) * step);
  }
  for (std::size_t i = 0; i < s.delta.size(); ++i) CHECK(s.delta[i] > 0);

  Rng miss_rng = make_stream(3, {});
  const Ray miss{Vec3(0, 2, -3), Vec3(0, 0, 1)};
  CHECK_FALSE(sample_ray(miss, ray_sphere_bounds(miss, 1.0), cfg, 64, stub_sdf(stub), miss_rng).hit);
}

TEST_CASE("sampling is deterministic and strictly increasing") {
  SphereStub stub(0.5);
  SamplerConfig cfg;
  const Ray ray{Vec3(0.1, -0.2, -3), Vec3(0, 0.05, 1).normalized()};
  const auto bounds = ray_sphere_bounds(ray, 1.0);
  Rng a = make_stream(4, {7}), b = make_stream(4, {7});
  const auto sa = sample_ray(ray, bounds, cfg, 64, stub_sdf(stub), a);
  const auto sb = sample_ray(ray, bounds, cfg, 64, stub_sdf(stub), b);
  CHECK(sa.t == sb.t);
  CHECK(sa.t.size() == static_cast<std::size_t>(cfg.n_uniform + cfg.rounds * cfg.n_importance));
  for (std::size_t i = 1; i < sa.t.size(); ++i) CHECK(sa.t[i] > sa.t[i - 1]);
}

TEST_CASE("importance round concentrates samples near the surface of the sphere-initialized field") {
  FieldConfig fc;
  fc.encoding.levels = 4;
  fc.encoding.min_resolution = 16;
  fc.encoding.max_resolution = 128;
  fc.encoding.channels = 2;
  fc.encoding.table_size = 1u << 14;
  NeuralField<float> field(fc, 5);
  field.init_sphere(0.5);
  const SdfBatchFn sdf = [&](std::span<const Vec3> p, std::span<double> out) {
    std::vector<Vec3T<float>> q(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) q[i] = p[i].cast<float>();
    std::vector<float> v(p.size());
    field.sdf_values(q, 4, v);
    for (std::size_t i = 0; i < p.size(); ++i) out[i] = v[i];
  };
  SamplerConfig cfg;
  cfg.n_uniform = 16;
  cfg.n_importance = 32;
  cfg.rounds = 1;
  const double cell = 2.0 / 128;
  Rng rng = make_stream(6, {});
  for (int trial = 0; trial < 20; ++trial) {
    const Vec3 target(uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2), uniform(rng, -0.2, 0.2));
    const Vec3 origin = 3.0 * Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)).normalized();
    const Ray ray{origin, (target - origin).normalized()};
    // Zero crossing of the field along the ray by bisection (sdf at t_near > 0 > sdf at the closest point).
    const auto bounds = ray_sphere_bounds(ray, 1.0);
    double lo = bounds->t_near, hi = -origin.dot(ray.direction);
    std::vector<double> v(1);
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      const Vec3 p = ray.at(mid);
      sdf(std::span<const Vec3>(&p, 1), v);
      (v[0] > 0 ? lo : hi) = mid;
    }
    const double crossing = 0.5 * (lo + hi);
    const auto s = sample_ray(ray, bounds, cfg, field.sharpness(), sdf, rng);
    int near = 0;
    for (double t : s.t)
      if (std::abs(t - crossing) <= 10 * cell) ++near;
    CHECK(near >= static_cast<int>(s.t.size()) / 2);
  }
}

TEST_CASE("render_pixel on the sphere stub") {
  SphereStub stub(0.5);
  RenderConfig cfg;
  cfg.sharpness = 1000;
  const Camera cam = look_at(Vec3(0, -3, 0), Vec3::Zero(), {80, 80, 32, 32, 64, 64});
  Rng rng = make_stream(7, {});
  const auto hit = render_pixel(cam, 31.5, 31.5, stub, cfg, rng);  // pixel center = principal point
  CHECK((hit.rgb - Vec3(1, 0, 0)).norm() < 0.05);
  CHECK(std::abs(hit.depth - 2.5) < 0.02);
  CHECK(hit.opacity >= 0.99);
  // Expected normal points back toward the camera.
  CHECK(hit.normal.normalized().dot(Vec3(0, -1, 0)) > 0.99);

  cfg.background = Vec3(0.25, 0.5, 0.75);
  const auto miss = render_pixel(cam, 0, 0, stub, cfg, rng);
  CHECK(miss.rgb == cfg.background);
  CHECK(miss.opacity == 0.0);
}

TEST_CASE("transmittance is monotone and energy is conserved") {
  SphereStub stub(0.45, Vec3(0.2, 0.8, 0.5));
  RenderConfig cfg;
  cfg.sampler.n_uniform = 32;
  cfg.sampler.n_importance = 8;
  cfg.sampler.rounds = 2;
  Rng rng = make_stream(8, {});
  int violations = 0;
  for (int i = 0; i < 2000; ++i) {
    cfg.sharpness = std::exp(uniform(rng, std::log(5.0), std::log(5000.0)));
    const Vec3 o = 2.5 * Vec3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)).normalized();
    const Ray ray{o, (Vec3(uniform(rng, -0.6, 0.6), uniform(rng, -0.6, 0.6), uniform(rng, -0.6, 0.6)) - o).normalized()};
    const auto out = render_rays(std::span<const Ray>(&ray, 1), stub, cfg, std::span<Rng>(&rng, 1))[0];
    if (std::abs(out.opacity + out.residual - 1.0) > 1e-5) ++violations;
    for (std::size_t k = 1; k < out.transmittance.size(); ++k)
      if (out.transmittance[k] > out.transmittance[k - 1]) ++violations;
    for (double w : out.weights)
      if (w < 0) ++violations;
  }
  CHECK(violations == 0);
}

TEST_CASE("increasing sharpness narrows the weight distribution") {
  SphereStub stub(0.5);
  SamplerConfig cfg;
  cfg.n_uniform = 1024;
  cfg.n_importance = 0;
  const Ray ray{Vec3(0, 0, -3), Vec3(0, 0, 1)};
  Rng rng = make_stream(9, {});
  const auto s = sample_ray(ray, ray_sphere_bounds(ray, 1.0), cfg, 1, stub_sdf(stub), rng);
  std::vector<double> f(s.x.size());
  stub.sdf(s.x, f);
  double prev = std::numeric_limits<double>::infinity();
  for (double sharp : {10.0, 20.0, 40.0}) {
    std::vector<double> a(s.segments());
    std::vector<Vec3> c(s.segments(), Vec3::Ones());
    for (std::size_t i = 0; i < a.size(); ++i) a[i] = sdf_to_alpha(f[i], f[i + 1], sharp);
    const auto out = composite(a, c, Vec3::Zero());
    double mean = 0, var = 0;
    for (std::size_t i = 0; i < a.size(); ++i) mean += out.weights[i] * s.midpoint(i) / out.opacity;
    for (std::size_t i = 0; i < a.size(); ++i)
      var += out.weights[i] * std::pow(s.midpoint(i) - mean, 2) / out.opacity;
    CHECK(std::sqrt(var) < prev);
    prev = std::sqrt(var);
  }
}

TEST_CASE("splitting a segment leaves the composite unchanged") {
  // Monotonically decreasing SDF samples with a constant color per split segment.
  const std::vector<double> f{0.3, 0.1, -0.05, -0.2};
  const double s = 20;
  const std::vector<Vec3> colors{Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
  std::vector<double> a;
  for (int i = 0; i < 3; ++i) a.push_back(sdf_to_alpha(f[i], f[i + 1], s));
  const auto coarse = composite(a, colors, Vec3(0.5, 0.5, 0.5));
  // Split the middle segment at an intermediate SDF value.
  const double fm = 0.02;
  const std::vector<double> a2{a[0], sdf_to_alpha(f[1], fm, s), sdf_to_alpha(fm, f[2], s), a[2]};
  const std::vector<Vec3> c2{colors[0], colors[1], colors[1], colors[2]};
  const auto fine = composite(a2, c2, Vec3(0.5, 0.5, 0.5));
  CHECK((fine.rgb - coarse.rgb).norm() < 1e-6);
  CHECK(std::abs(fine.opacity - coarse.opacity) < 1e-6);
}

TEST_CASE("render_image is deterministic") {
  SphereStub stub(0.5);
  RenderConfig cfg;
  cfg.sampler.n_uniform = 16;
  cfg.sampler.n_importance = 8;
  cfg.sampler.rounds = 1;
  const Camera cam = look_at(Vec3(0, -3, 0.5), Vec3::Zero(), {20, 20, 8, 8, 16, 16});
  const auto a = render_image(cam, stub, cfg, 3, 1, 5);
  const auto b = render_image(cam, stub, cfg, 3, 1, 3);  // batch layout must not matter
  CHECK(a.rgb == b.rgb);
  CHECK(a.depth == b.depth);
}
