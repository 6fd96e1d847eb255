#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numbers>

#include "hashsdf/error.hpp"
#include "hashsdf/synthetic.hpp"

using namespace hashsdf;

namespace {

AnalyticScene single(const Primitive& p) {
  AnalyticScene s;
  s.primitives = {p};
  s.nodes = {{CsgOp::Leaf, 0, -1, -1}};
  return s;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::filesystem::path temp_dir(const std::string& name) {
  const auto d = std::filesystem::temp_directory_path() / ("hashsdf_test_synth_" + name);
  std::filesystem::remove_all(d);
  return d;
}

DatasetConfig small_dataset() {
  DatasetConfig c;
  c.rig.views = 4;
  c.rig.image_size = 16;
  c.test_views = 2;
  c.gt_points = 2000;
  c.seed = 11;
  return c;
}

}  // namespace

TEST_CASE("primitive and CSG distance examples") {
  const auto sphere = make_scene(SceneKind::Sphere);
  CHECK(scene_sdf(sphere, Vec3::Zero()) == doctest::Approx(-0.5));
  CHECK(scene_sdf(sphere, Vec3(1, 0, 0)) == doctest::Approx(0.5));

  AnalyticScene two;
  two.primitives = {{PrimitiveType::Sphere, Vec3(-0.4, 0, 0), Vec3(0.3, 0, 0), Vec3::Constant(0.5)},
                    {PrimitiveType::Sphere, Vec3(0.4, 0, 0), Vec3(0.3, 0, 0), Vec3::Constant(0.5)}};
  two.nodes = {{CsgOp::Leaf, 0, -1, -1}, {CsgOp::Leaf, 1, -1, -1}, {CsgOp::Union, -1, 0, 1}};
  two.root = 2;
  CHECK(scene_sdf(two, Vec3::Zero()) == doctest::Approx(0.1));

  // Box: distance to a face and to a corner.
  const auto box = single({PrimitiveType::Box, Vec3::Zero(), Vec3(0.2, 0.3, 0.4), Vec3::Constant(0.5)});
  CHECK(box.sdf(Vec3(0.5, 0, 0)) == doctest::Approx(0.3));
  CHECK(box.sdf(Vec3(0.3, 0.4, 0.5)) == doctest::Approx(std::sqrt(0.03)));
  CHECK(box.sdf(Vec3::Zero()) == doctest::Approx(-0.2));
  // Torus: distance from the tube center circle minus the minor radius.
  const auto torus = single({PrimitiveType::Torus, Vec3::Zero(), Vec3(0.5, 0.2, 0), Vec3::Constant(0.5)});
  CHECK(torus.sdf(Vec3(0.5, 0, 0)) == doctest::Approx(-0.2));
  CHECK(torus.sdf(Vec3::Zero()) == doctest::Approx(0.3));
  CHECK(torus.sdf(Vec3(0, 0.5, 0.5)) == doctest::Approx(0.3));

  const auto diff = make_scene(SceneKind::CsgDiff);
  CHECK(diff.sdf(Vec3(-0.2, 0.2, -0.2)) < 0);
  CHECK(diff.sdf(Vec3(0.45, -0.45, 0.45)) > 0);  // carved out by the box
}

TEST_CASE("primitive distance fields satisfy the eikonal property away from the medial axis") {
  Rng rng = make_stream(5, {});
  const Primitive prims[] = {{PrimitiveType::Sphere, Vec3(0.1, 0, 0), Vec3(0.5, 0, 0), Vec3::Zero()},
                             {PrimitiveType::Box, Vec3::Zero(), Vec3(0.45, 0.35, 0.3), Vec3::Zero()},
                             {PrimitiveType::Torus, Vec3::Zero(), Vec3(0.5, 0.2, 0), Vec3::Zero()}};
  for (const auto& prim : prims) {
    int tested = 0;
    while (tested < 1000) {
      const Vec3 x(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
      const Vec3 p = x - prim.center;
      bool near_medial = false;
      if (prim.type == PrimitiveType::Sphere) near_medial = p.norm() < 1e-2;
      if (prim.type == PrimitiveType::Box) {
        Vec3 q = p.cwiseAbs() - prim.size;
        std::sort(q.data(), q.data() + 3);
        near_medial = q[2] < 0 && q[2] - q[1] < 1e-2;  // inside, two faces nearly equidistant
      }
      if (prim.type == PrimitiveType::Torus) {
        const double ring = std::hypot(p.x(), p.y());
        near_medial = ring < 1e-2 || std::hypot(ring - prim.size.x(), p.z()) < 1e-2;
      }
      if (near_medial) continue;
      Vec3 g;
      const double h = 1e-6;
      for (int k = 0; k < 3; ++k) {
        Vec3 d = Vec3::Zero();
        d[k] = h;
        g[k] = (prim.sdf(x + d) - prim.sdf(x - d)) / (2 * h);
      }
      CHECK(std::abs(g.norm() - 1.0) <= 1e-4);
      ++tested;
    }
  }
}

TEST_CASE("scene descriptor round trip and validation") {
  for (auto kind : {SceneKind::Sphere, SceneKind::Box, SceneKind::Torus, SceneKind::CsgDiff}) {
    const auto scene = make_scene(kind);
    CHECK(parse_scene_kind(scene_kind_name(kind)) == kind);
    const auto back = AnalyticScene::from_json(scene.to_json());
    CHECK(back.to_json() == scene.to_json());
    Rng rng = make_stream(1, {});
    for (int i = 0; i < 50; ++i) {
      const Vec3 x(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
      CHECK(back.sdf(x) == scene.sdf(x));
    }
  }
  CHECK_THROWS_AS(parse_scene_kind("CUBE"), Error);
  auto big = make_scene(SceneKind::Sphere);
  big.primitives[0].size.x() = 0.99;
  CHECK_THROWS_AS(big.validate(), Error);
}

TEST_CASE("ground-truth rendering: misses, lit center and traced depth") {
  auto scene = make_scene(SceneKind::Sphere);
  Intrinsics k{60, 60, 16.5, 16.5, 33, 33};
  Camera cam = look_at(Vec3(0, -2.5, 0), Vec3::Zero(), k);
  scene.lighting.direction = Vec3(0, -1, 0);  // along the view axis, towards the camera
  const auto gt = render_ground_truth(scene, cam);

  // Corner pixels miss: exactly the background.
  for (int c = 0; c < 3; ++c) CHECK(gt.rgb.at(0, 0, c) == static_cast<float>(scene.background[c]));
  CHECK(gt.mask.at(0, 0, 0) == 0.f);

  // The center pixel's ray is the principal axis: n.l = 1.
  const Vec3& albedo = scene.primitives[0].albedo;
  for (int c = 0; c < 3; ++c)
    CHECK(gt.rgb.at(16, 16, c) == doctest::Approx(albedo[c] * (scene.lighting.ambient + 1.0)).epsilon(1e-6));
  double brightest = 0;
  for (int v = 0; v < 33; ++v)
    for (int u = 0; u < 33; ++u) brightest = std::max(brightest, static_cast<double>(gt.rgb.at(u, v, 0)));
  CHECK(brightest == doctest::Approx(gt.rgb.at(16, 16, 0)));

  // Analytic ray-sphere intersection: t_near = 2.5 - 0.5.
  CHECK(std::abs(gt.depth.at(16, 16, 0) - 2.0) < 1e-3);
  CHECK(gt.mask.at(16, 16, 0) == 1.f);
}

TEST_CASE("specular lobe adds view-dependent highlights") {
  auto scene = make_scene(SceneKind::Sphere);
  scene.lighting.specular = 0.3;
  scene.primitives[0].albedo = Vec3::Constant(0.3);
  const Vec3 n = Vec3::UnitZ();
  scene.lighting.direction = Vec3::UnitZ();
  const Vec3 head_on = shade(scene, 0, n, Vec3::UnitZ());
  const Vec3 grazing = shade(scene, 0, n, Vec3(1, 0, 0.2).normalized());
  CHECK(head_on.x() > grazing.x());
  scene.lighting.specular = 0.0;
  CHECK(shade(scene, 0, n, Vec3::UnitZ()) == shade(scene, 0, n, Vec3(1, 0, 0.2).normalized()));
}

TEST_CASE("orbit rig: equal spacing and equal distance") {
  RigConfig rig;
  rig.views = 4;
  const auto cams = make_rig(rig, 0);
  REQUIRE(cams.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    const Vec3 a = cams[i].pose.translation, b = cams[(i + 1) % 4].pose.translation;
    CHECK(a.norm() == doctest::Approx(rig.distance));
    CHECK((a - b).norm() == doctest::Approx((cams[0].pose.translation - cams[1].pose.translation).norm()));
    CHECK(a.z() == doctest::Approx(cams[0].pose.translation.z()));
    // Looking at the origin.
    CHECK((cams[i].pose.rotation.col(2) + a.normalized()).norm() < 1e-12);
    cams[i].validate();
  }
  rig.rig = Rig::Hemisphere;
  rig.views = 20;
  for (const auto& c : make_rig(rig, 3)) {
    CHECK(c.pose.translation.z() > 0);
    CHECK(c.pose.translation.norm() == doctest::Approx(rig.distance));
  }
}

TEST_CASE("surface samples lie on the zero set with area-uniform density") {
  for (auto kind : {SceneKind::Sphere, SceneKind::Torus, SceneKind::CsgDiff}) {
    const auto scene = make_scene(kind);
    Rng rng = make_stream(2, {});
    const auto pts = sample_surface_points(scene, 3000, rng);
    for (const auto& p : pts) CHECK(std::abs(scene_sdf(scene, p)) < 1e-6);
  }
  // On a sphere, the cap above half the radius holds a quarter of the area.
  const auto sphere = make_scene(SceneKind::Sphere);
  Rng rng = make_stream(3, {});
  const auto pts = sample_surface_points(sphere, 20000, rng);
  double cap = 0;
  for (const auto& p : pts) cap += p.z() > 0.25 ? 1 : 0;
  CHECK(cap / pts.size() == doctest::Approx(0.25).epsilon(0.06));
}

TEST_CASE("datasets are deterministic, complete and loadable") {
  const auto scene = make_scene(SceneKind::Torus);
  auto cfg = small_dataset();
  cfg.exposure = true;
  const auto a = temp_dir("a"), b = temp_dir("b");
  make_dataset(scene, cfg, a);
  make_dataset(scene, cfg, b);
  int files = 0;
  for (const auto& entry : std::filesystem::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    ++files;
    const auto rel = std::filesystem::relative(entry.path(), a);
    CHECK(slurp(entry.path()) == slurp(b / rel));
  }
  CHECK(files == 3 + 2 * 6);  // cameras, scene, points, then images and masks

  const auto points = read_points(a / "gt_points.bin");
  CHECK(points.size() == 2000);
  for (const auto& p : points) CHECK(std::abs(scene_sdf(scene, p)) < 1e-4);

  const auto ds = load_dataset(a);
  CHECK(ds.views.size() == 6);
  CHECK(ds.split(true).size() == 4);
  CHECK(ds.split(false).size() == 2);
  CHECK(ds.background == scene.background);
  const auto gains = ds.scene.at("exposure_gains").get<std::vector<double>>();
  REQUIRE(gains.size() == 6);
  for (double g : gains) {
    CHECK(g >= 0.8);
    CHECK(g <= 1.25);
  }
  const auto cams = make_rig(cfg.rig, cfg.seed);
  CHECK(ds.views[1].camera.pose.rotation == cams[1].pose.rotation);
  CHECK(ds.views[1].camera.pose.translation == cams[1].pose.translation);
  CHECK(ds.views[1].camera.intrinsics.fx == cams[1].intrinsics.fx);

  // Stored pixels are the 8-bit quantization of the exposure-scaled render.
  auto gt = render_ground_truth(scene, cams[1]);
  for (std::size_t i = 0; i < gt.rgb.data.size(); ++i)
    CHECK(ds.views[1].rgb.data[i] == quantize8(std::min(1.f, static_cast<float>(gt.rgb.data[i] * gains[1]))));
  for (std::size_t i = 0; i < gt.mask.data.size(); ++i) CHECK(ds.views[1].mask.data[i] == gt.mask.data[i]);

  std::filesystem::remove_all(a);
  std::filesystem::remove_all(b);
}

TEST_CASE("dataset errors") {
  auto cfg = small_dataset();
  cfg.rig.views = 1;
  CHECK_THROWS_AS(make_dataset(make_scene(SceneKind::Sphere), cfg, temp_dir("bad")), Error);
  try {
    load_dataset(temp_dir("missing"));
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::Io);
  }
  CHECK_THROWS_AS(parse_rig("spiral"), Error);
}
