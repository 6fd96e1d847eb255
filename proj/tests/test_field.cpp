#include <doctest.h>

#include <cmath>
#include <vector>

#include "hashsdf/error.hpp"
#include "hashsdf/field.hpp"

using namespace hashsdf;
using V3 = Vec3T<double>;

namespace {

FieldConfig tiny_config() {
  FieldConfig c;
  c.encoding.levels = 2;
  c.encoding.min_resolution = 4;
  c.encoding.max_resolution = 8;
  c.encoding.channels = 2;
  c.encoding.table_size = 1u << 9;
  c.sdf_hidden = 16;
  c.geometric_features = 3;
  c.color_hidden = 8;
  c.color_layers = 4;
  return c;
}

// A field whose grid actually matters: sphere init plus sizeable tables.
NeuralField<double> textured_field(const FieldConfig& c, std::uint64_t seed, double table_scale = 0.05) {
  NeuralField<double> f(c, seed);
  f.init_sphere(0.5);
  Rng rng = make_stream(seed, {99});
  init_tables<double>(f.tables(), rng, table_scale);
  // Give the encoding columns of the first layer some weight.
  auto w1 = f.segment_values("sdf.w1");
  const int d = c.sdf_input_dim();
  for (int j = 0; j < c.sdf_hidden; ++j)
    for (int i = 0; i < d - 3; ++i) w1[j * d + i] = uniform(rng, -1, 1);
  return f;
}

V3 interior_point(const HashGrid& g, Rng& rng, double margin) {
  for (;;) {
    V3 x(uniform(rng, -0.9, 0.9), uniform(rng, -0.9, 0.9), uniform(rng, -0.9, 0.9));
    bool ok = true;
    for (int l = 0; l < g.levels(); ++l)
      for (int k = 0; k < 3; ++k) {
        const double pos = (x[k] + 1) * g.resolution(l) / 2;
        const double frac = pos - std::floor(pos);
        if (frac < margin || frac > 1 - margin) ok = false;
      }
    if (ok) return x;
  }
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

}  // namespace

TEST_CASE("parameter layout") {
  const auto c = tiny_config();
  NeuralField<float> f(c, 1);
  std::size_t total = 0;
  for (const auto& s : f.segments()) {
    CHECK(s.offset == total);
    CHECK(s.size == static_cast<std::size_t>(s.rows) * static_cast<std::size_t>(s.cols));
    total += s.size;
  }
  CHECK(total == f.parameters().size());
  CHECK(f.segment("grid").size == f.grid().parameter_count());
  CHECK(f.segment("sdf.w1").cols == c.sdf_input_dim());
  CHECK(f.segment("sdf.w2").rows == 1 + c.geometric_features);
  CHECK(f.segment("color.w0").cols == c.color_input_dim());
  CHECK(f.segment("color.w4").rows == 3);
  CHECK(f.sharpness() == doctest::Approx(64.0));
  CHECK_THROWS_AS(f.segment("nope"), Error);
  for (float v : f.tables()) CHECK(std::abs(v) <= 1e-4f);
}

TEST_CASE("init_sphere fits |x| - r") {
  FieldConfig c;  // default widths
  c.encoding.levels = 4;
  c.encoding.min_resolution = 16;
  c.encoding.max_resolution = 128;
  c.encoding.channels = 4;
  c.encoding.table_size = 1u << 14;
  NeuralField<float> f(c, 3);
  f.init_sphere(0.5);
  CHECK(std::abs(f.sdf_eval({0, 0, 0}, 4).sdf + 0.5f) < 0.05f);
  CHECK(std::abs(f.sdf_eval({0.5f, 0, 0}, 4).sdf) < 0.05f);
  CHECK(f.sdf_eval({0, 0, 0}, 4).sdf < 0);
  CHECK(f.sdf_eval({0, 0.9f, 0}, 4).sdf > 0);
  CHECK(f.sdf_eval({0.9f / std::sqrt(3.0f), -0.9f / std::sqrt(3.0f), 0.9f / std::sqrt(3.0f)}, 4).sdf > 0);

  Rng rng = make_stream(5, {});
  std::vector<Vec3T<float>> pts(10000);
  for (auto& p : pts) p = Vec3T<float>(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
  std::vector<float> vals(pts.size());
  f.sdf_values(pts, 4, vals);
  double err = 0;
  for (std::size_t i = 0; i < pts.size(); ++i) err += std::abs(vals[i] - (pts[i].norm() - 0.5));
  err /= pts.size();
  MESSAGE("init_sphere mean |error| = " << err);
  CHECK(err < 0.05);

  CHECK_THROWS_AS(f.init_sphere(1.0), Error);
  CHECK_THROWS_AS(f.init_sphere(0.0), Error);
}

TEST_CASE("sdf evaluation is deterministic and batch-consistent") {
  auto f = textured_field(tiny_config(), 4);
  const V3 x(0.11, -0.32, 0.45);
  const auto a = f.sdf_eval(x, 2), b = f.sdf_eval(x, 2);
  CHECK(a.sdf == b.sdf);
  CHECK(a.features == b.features);
  CHECK(a.features.size() == 3u);
  std::vector<V3> pts{x, V3(0.7, 0.1, -0.2)};
  std::vector<double> vals(2);
  f.sdf_values(pts, 2, vals);
  CHECK(vals[0] == doctest::Approx(a.sdf).epsilon(1e-13));

  NeuralField<double> g(tiny_config(), 4);
  NeuralField<double> h(tiny_config(), 4);
  CHECK(std::equal(g.parameters().begin(), g.parameters().end(), h.parameters().begin()));
}

TEST_CASE("non-finite sdf is reported") {
  NeuralField<double> f(tiny_config(), 1);
  f.segment_values("sdf.b2")[0] = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(f.sdf_eval(V3(0.1, 0.2, 0.3), 2), Error);
  try {
    f.sdf_eval(V3(0.1, 0.2, 0.3), 2);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::NonFinite);
  }
}

TEST_CASE("analytical gradient: constant tables and constant MLP give zero") {
  NeuralField<double> f(tiny_config(), 2);
  for (auto& v : f.tables()) v = 0.3;
  for (auto& v : f.segment_values("sdf.w2")) v = 0.0;
  const auto g = f.analytical_gradient(V3(0.2, 0.1, -0.6), 2);
  CHECK(g.norm() == 0.0);
}

TEST_CASE("analytical gradient matches finite differences at cell-interior points") {
  auto f = textured_field(tiny_config(), 5);
  Rng rng = make_stream(6, {});
  const double h = 1e-6;
  for (int trial = 0; trial < 100; ++trial) {
    const V3 x = interior_point(f.grid(), rng, 1e-3);
    const V3 g = f.analytical_gradient(x, 2);
    for (int k = 0; k < 3; ++k) {
      V3 p = x, m = x;
      p[k] += h;
      m[k] -= h;
      const double fd = (f.sdf_eval(p, 2).sdf - f.sdf_eval(m, 2).sdf) / (2 * h);
      CHECK(rel_err(g[k], fd) <= 1e-4);
    }
  }
}

TEST_CASE("batched gradient and Laplacian agree with probes") {
  auto f = textured_field(tiny_config(), 7);
  Rng rng = make_stream(8, {});
  std::vector<V3> pts;
  for (int i = 0; i < 20; ++i) pts.push_back(interior_point(f.grid(), rng, 0.05));
  SdfBatch<double> batch;
  f.sdf_forward(pts, 2, batch, true);
  auto sdf = [&](const V3& p) { return f.sdf_eval(p, 2).sdf; };
  for (std::size_t i = 0; i < pts.size(); ++i) {
    AxisSamples<double> s;
    const double eps = 1e-4;
    const V3 ng = numerical_gradient(sdf, pts[i], eps, &s);
    for (int k = 0; k < 3; ++k) CHECK(rel_err(batch.gradient(i, k), ng[k]) < 1e-5);
    // Laplacian oracle: second differences of the exact network within a cell.
    const double lap = numerical_laplacian(sdf(pts[i]), s, eps);
    CHECK(std::abs(batch.laplacian[i] - lap) <= 1e-3 * std::max(1.0, std::abs(lap)));
  }
}

TEST_CASE("analytical gradient locality") {
  auto f = textured_field(tiny_config(), 9);
  const V3 x(0.13, -0.29, 0.41);
  const V3 before = f.analytical_gradient(x, 2);
  // Level 1 (V = 8): x sits in cell (4, 2, 5). Corner (0, 0, 0) is far away.
  const auto& grid = f.grid();
  const std::size_t far_row = grid.row(1, 0, 0, 0);
  const std::size_t near_row = grid.row(1, 4, 2, 5);
  REQUIRE(far_row != near_row);
  auto tables = f.tables();
  tables[grid.offset(1) + far_row * 2] += 1.0;
  CHECK(f.analytical_gradient(x, 2) == before);
  tables[grid.offset(1) + near_row * 2] += 1.0;
  CHECK(f.analytical_gradient(x, 2) != before);
}

TEST_CASE("numerical gradient and Laplacian on stub fields") {
  const V3 a(0.3, -1.25, 2.0);
  auto affine = [&](const V3& x) { return a.dot(x) + 0.7; };
  const V3 x(0.25, 0.5, -0.125);
  AxisSamples<double> s;
  const V3 g = numerical_gradient(affine, x, 0.125, &s);
  CHECK((g - a).norm() < 1e-14);
  CHECK(std::abs(numerical_laplacian(affine(x), s, 0.125)) < 1e-12);

  auto sphere = [](const V3& p) { return p.norm() - 0.5; };
  const V3 gs = numerical_gradient(sphere, V3(0.5, 0, 0), 0.25);
  CHECK(gs == V3(1, 0, 0));

  auto quad = [](const V3& p) { return p.squaredNorm(); };
  for (double eps : {0.5, 0.25, 0.0625}) {
    AxisSamples<double> q;
    numerical_gradient(quad, x, eps, &q);
    CHECK(numerical_laplacian(quad(x), q, eps) == 6.0);
  }

  AxisSamples<double> q;
  const V3 p(0.5, 0, 0);
  numerical_gradient(sphere, p, 1e-3, &q);
  CHECK(std::abs(numerical_laplacian(sphere(p), q, 1e-3) - 4.0) < 1e-2);
  CHECK_THROWS(numerical_gradient(sphere, p, 0.0));
}

TEST_CASE("normal plus Laplacian costs exactly six extra evaluations") {
  int calls = 0;
  auto counted = [&](const V3& p) {
    ++calls;
    return p.norm() - 0.5;
  };
  const V3 x(0.1, 0.2, 0.3);
  const double center = counted(x);
  calls = 0;
  AxisSamples<double> s;
  numerical_gradient(counted, x, 1e-2, &s);
  numerical_laplacian(center, s, 1e-2);
  CHECK(calls == 6);
}

TEST_CASE("numerical gradient converges to the analytical one") {
  auto f = textured_field(tiny_config(), 11);
  auto sdf = [&](const V3& p) { return f.sdf_eval(p, 2).sdf; };
  Rng rng = make_stream(12, {});
  for (int trial = 0; trial < 10; ++trial) {
    // Margin keeps all probes of the largest eps inside one cell at every level.
    const V3 x = interior_point(f.grid(), rng, 0.1);
    const V3 ag = f.analytical_gradient(x, 2);
    double prev = std::numeric_limits<double>::infinity();
    for (double eps : {1e-2, 1e-3, 1e-4}) {
      const double err = (numerical_gradient(sdf, x, eps) - ag).norm();
      CHECK(err < prev);
      prev = err;
    }
  }
}

TEST_CASE("numerical gradient with a wide step reaches neighbouring cells") {
  auto f = textured_field(tiny_config(), 13);
  auto sdf = [&](const V3& p) { return f.sdf_eval(p, 2).sdf; };
  // Level 1 cell width is 0.25; x sits in cell (4, 4, 4), eps reaches cell 5 along +x.
  const V3 x(0.1, 0.1, 0.1);
  const double eps = 0.2;
  const V3 before = numerical_gradient(sdf, x, eps);
  const V3 ag_before = f.analytical_gradient(x, 2);
  const auto& grid = f.grid();
  // Corner (6, 4, 4) belongs to cell 5 along x but not to the containing cell.
  auto tables = f.tables();
  tables[grid.offset(1) + grid.row(1, 6, 4, 4) * 2] += 1.0;
  CHECK((numerical_gradient(sdf, x, eps) - before).norm() > 0.0);
  CHECK(f.analytical_gradient(x, 2) == ag_before);
}

TEST_CASE("color output range, embeddings and spherical harmonics") {
  auto c = tiny_config();
  c.appearance = true;
  c.image_count = 3;
  NeuralField<double> f(c, 21);
  for (double v : f.segment_values("embeddings")) CHECK(v == 0.0);
  Rng rng = make_stream(22, {});
  std::vector<double> feat(3);
  for (int i = 0; i < 1000; ++i) {
    const V3 x(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    const V3 n = V3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)) * 5.0;
    const V3 d = V3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)).normalized();
    for (auto& v : feat) v = uniform(rng, -10, 10);
    const V3 rgb = f.color_eval(x, n, d, feat, i % 4 - 1);
    for (int k = 0; k < 3; ++k) {
      CHECK(rgb[k] >= 0.0);
      CHECK(rgb[k] <= 1.0);
    }
  }
  // Zero embedding equals the novel-view path.
  const V3 x(0.1, 0.2, 0.3), n(0, 0, 1), d = V3(1, 1, 0).normalized();
  CHECK(f.color_eval(x, n, d, feat, 0) == f.color_eval(x, n, d, feat, -1));
  CHECK(f.color_eval(x, n, d, feat, 0) == f.color_eval(x, n, d, feat, 17));
  f.segment_values("embeddings")[0] = 2.0;
  CHECK(f.color_eval(x, n, d, feat, 0) != f.color_eval(x, n, d, feat, -1));

  // SH: constant band, and orthonormality by Monte Carlo on the sphere.
  const auto sh = spherical_harmonics<double>(V3(0, 0, 1));
  CHECK(sh[0] == doctest::Approx(0.5 / std::sqrt(std::numbers::pi)));
  CHECK(sh[2] == doctest::Approx(std::sqrt(3.0 / (4 * std::numbers::pi))));
  Eigen::Matrix<double, 16, 16> gram = Eigen::Matrix<double, 16, 16>::Zero();
  const int n_mc = 200000;
  for (int i = 0; i < n_mc; ++i) {
    const double z = uniform(rng, -1, 1), phi = uniform(rng, 0, 2 * std::numbers::pi);
    const double r = std::sqrt(1 - z * z);
    const auto y = spherical_harmonics<double>(V3(r * std::cos(phi), r * std::sin(phi), z));
    Eigen::Map<const Eigen::Matrix<double, 16, 1>> v(y.data());
    gram += v * v.transpose();
  }
  gram *= 4 * std::numbers::pi / n_mc;
  CHECK((gram - Eigen::Matrix<double, 16, 16>::Identity()).cwiseAbs().maxCoeff() < 0.03);
}

TEST_CASE("sdf backward matches finite differences for value, gradient and Laplacian terms") {
  auto f = textured_field(tiny_config(), 31, 0.2);
  Rng rng = make_stream(32, {});
  std::vector<V3> pts;
  for (int i = 0; i < 6; ++i) pts.push_back(interior_point(f.grid(), rng, 0.02));
  const int out = 1 + tiny_config().geometric_features;
  RowMatrix<double> u(pts.size(), out);
  RowMatrix<double> ug(pts.size(), 3);
  ColVector<double> ul(pts.size());
  for (auto* m : {&u, &ug}) m->unaryExpr([&](double) { return uniform(rng, -1, 1); });
  for (Eigen::Index i = 0; i < u.size(); ++i) u.data()[i] = uniform(rng, -1, 1);
  for (Eigen::Index i = 0; i < ug.size(); ++i) ug.data()[i] = uniform(rng, -1, 1);
  for (Eigen::Index i = 0; i < ul.size(); ++i) ul[i] = uniform(rng, -1, 1) * 1e-2;

  auto objective = [&](const NeuralField<double>& field) {
    SdfBatch<double> b;
    field.sdf_forward(pts, 2, b, true);
    return (b.output.cwiseProduct(u)).sum() + (b.gradient.cwiseProduct(ug)).sum() + b.laplacian.dot(ul);
  };
  SdfBatch<double> batch;
  f.sdf_forward(pts, 2, batch, true);
  std::vector<double> grad(f.parameters().size(), 0.0);
  f.sdf_backward(batch, u, &ug, &ul, grad);

  const double h = 1e-4;
  int checked = 0;
  auto params = f.parameters();
  for (const auto& seg : f.segments()) {
    if (seg.name.rfind("color", 0) == 0 || seg.name == "embeddings" || seg.name == "log_s") continue;
    const std::size_t step = seg.name == "grid" ? 3 : 1;
    for (std::size_t i = seg.offset; i < seg.offset + seg.size; i += step) {
      const double orig = params[i];
      params[i] = orig + h;
      const double lp = objective(f);
      params[i] = orig - h;
      const double lm = objective(f);
      params[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      INFO(seg.name << "[" << i - seg.offset << "] analytic " << grad[i] << " fd " << fd);
      CHECK(rel_err(grad[i], fd) <= 1e-3);
      ++checked;
    }
  }
  CHECK(checked > 100);
}

TEST_CASE("color backward matches finite differences") {
  auto c = tiny_config();
  c.appearance = true;
  c.image_count = 2;
  NeuralField<double> f(c, 41);
  Rng rng = make_stream(42, {});
  for (auto& v : f.segment_values("embeddings")) v = uniform(rng, -1, 1);
  const std::size_t n = 5;
  std::vector<V3> pos(n), nrm(n), dir(n);
  std::vector<int> img{0, 1, -1, 1, 0};
  RowMatrix<double> feat(n, 3), w(n, 3);
  for (std::size_t i = 0; i < n; ++i) {
    pos[i] = V3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    nrm[i] = V3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    dir[i] = V3(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1)).normalized();
    for (int k = 0; k < 3; ++k) {
      feat(i, k) = uniform(rng, -1, 1);
      w(i, k) = uniform(rng, -1, 1);
    }
  }
  auto objective = [&](const NeuralField<double>& field, const RowMatrix<double>& features,
                       const std::vector<V3>& normals) {
    ColorBatch<double> b;
    field.color_forward(pos, normals, dir, features, img, b);
    return b.rgb.cwiseProduct(w).sum();
  };
  ColorBatch<double> batch;
  f.color_forward(pos, nrm, dir, feat, img, batch);
  std::vector<double> grad(f.parameters().size(), 0.0);
  const RowMatrix<double> dinput = f.color_backward(batch, w, grad);
  const double h = 1e-4;
  auto params = f.parameters();
  int checked = 0;
  for (const auto& seg : f.segments()) {
    if (seg.name.rfind("color", 0) != 0 && seg.name != "embeddings") continue;
    for (std::size_t i = seg.offset; i < seg.offset + seg.size; ++i) {
      const double orig = params[i];
      params[i] = orig + h;
      const double lp = objective(f, feat, nrm);
      params[i] = orig - h;
      const double lm = objective(f, feat, nrm);
      params[i] = orig;
      const double fd = (lp - lm) / (2 * h);
      INFO(seg.name << "[" << i - seg.offset << "]");
      CHECK(rel_err(grad[i], fd) <= 1e-3);
      ++checked;
    }
  }
  CHECK(checked > 500);
  // Input gradients for the normal and feature columns.
  for (std::size_t p = 0; p < n; ++p)
    for (int k = 0; k < 3; ++k) {
      auto np = nrm, nm = nrm;
      np[p][k] += h;
      nm[p][k] -= h;
      const double fdn = (objective(f, feat, np) - objective(f, feat, nm)) / (2 * h);
      CHECK(rel_err(dinput(p, f.color_normal_column() + k), fdn) <= 1e-3);
      auto fp = feat, fm = feat;
      fp(p, k) += h;
      fm(p, k) -= h;
      const double fdf = (objective(f, fp, nrm) - objective(f, fm, nrm)) / (2 * h);
      CHECK(rel_err(dinput(p, f.color_feature_column() + k), fdf) <= 1e-3);
    }
}
