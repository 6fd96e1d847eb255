#include "hashsdf/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include <Eigen/Geometry>

#include "hashsdf/binary_io.hpp"
#include "hashsdf/error.hpp"

namespace hashsdf {

// ------------------------------------------------------------ primitives

double Primitive::sdf(const Vec3& x) const {
  const Vec3 p = x - center;
  switch (type) {
    case PrimitiveType::Sphere:
      return p.norm() - size.x();
    case PrimitiveType::Box: {
      const Vec3 q = p.cwiseAbs() - size;
      return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
    case PrimitiveType::Torus: {
      const double ring = std::hypot(p.x(), p.y()) - size.x();
      return std::hypot(ring, p.z()) - size.y();
    }
  }
  return 0.0;
}

double Primitive::extent() const {
  switch (type) {
    case PrimitiveType::Sphere:
      return center.norm() + size.x();
    case PrimitiveType::Box:
      return center.norm() + size.norm();
    case PrimitiveType::Torus:
      return center.norm() + size.x() + size.y();
  }
  return 0.0;
}

// ----------------------------------------------------------------- scene

SceneSample AnalyticScene::evaluate(const Vec3& x) const {
  auto eval = [&](auto&& self, int n) -> SceneSample {
    const CsgNode& node = nodes[n];
    if (node.op == CsgOp::Leaf) return {primitives[node.primitive].sdf(x), node.primitive};
    const SceneSample a = self(self, node.left);
    SceneSample b = self(self, node.right);
    switch (node.op) {
      case CsgOp::Union:
        return b.value < a.value ? b : a;
      case CsgOp::Intersection:
        return b.value > a.value ? b : a;
      case CsgOp::Difference:
        b.value = -b.value;
        return b.value > a.value ? b : a;
      case CsgOp::Leaf:
        break;
    }
    return a;
  };
  return eval(eval, root);
}

Vec3 AnalyticScene::normal(const Vec3& x, double step) const {
  Vec3 g;
  for (int k = 0; k < 3; ++k) {
    Vec3 d = Vec3::Zero();
    d[k] = step;
    g[k] = sdf(x + d) - sdf(x - d);
  }
  const double len = g.norm();
  return len > 0.0 ? Vec3(g / len) : Vec3::UnitZ();
}

void AnalyticScene::validate() const {
  require(!primitives.empty() && !nodes.empty(), "scene needs at least one primitive");
  require(root >= 0 && root < static_cast<int>(nodes.size()), "scene root out of range");
  for (const auto& n : nodes) {
    if (n.op == CsgOp::Leaf) {
      require(n.primitive >= 0 && n.primitive < static_cast<int>(primitives.size()), "scene leaf out of range");
    } else {
      require(n.left >= 0 && n.left < static_cast<int>(nodes.size()) && n.right >= 0 &&
                  n.right < static_cast<int>(nodes.size()),
              "scene operator child out of range");
    }
  }
  for (const auto& p : primitives) {
    require(p.size.x() > 0.0, "primitive size must be positive");
    require(p.type == PrimitiveType::Sphere || p.size.y() > 0.0, "primitive size must be positive");
    require(p.type != PrimitiveType::Box || p.size.z() > 0.0, "box half extents must be positive");
  }
  require(extent() <= kRoiRadius + 1e-12, "scene geometry must lie inside the normalized ball");
  require(std::abs(lighting.direction.norm() - 1.0) < 1e-9, "light direction must be a unit vector");
}

double AnalyticScene::extent() const {
  // Subtracted and intersected-away parts add no geometry.
  auto bound = [&](auto&& self, int n) -> double {
    const CsgNode& node = nodes[n];
    switch (node.op) {
      case CsgOp::Leaf: return primitives[node.primitive].extent();
      case CsgOp::Union: return std::max(self(self, node.left), self(self, node.right));
      case CsgOp::Intersection: return std::min(self(self, node.left), self(self, node.right));
      case CsgOp::Difference: return self(self, node.left);
    }
    return 0.0;
  };
  return bound(bound, root);
}

namespace {

const char* primitive_name(PrimitiveType t) {
  switch (t) {
    case PrimitiveType::Sphere: return "sphere";
    case PrimitiveType::Box: return "box";
    case PrimitiveType::Torus: return "torus";
  }
  return "";
}

const char* op_name(CsgOp op) {
  switch (op) {
    case CsgOp::Leaf: return "leaf";
    case CsgOp::Union: return "union";
    case CsgOp::Intersection: return "intersection";
    case CsgOp::Difference: return "difference";
  }
  return "";
}

nlohmann::json vec_json(const Vec3& v) { return {v.x(), v.y(), v.z()}; }
Vec3 json_vec(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  require(v.size() == 3, "expected a 3-vector");
  return {v[0], v[1], v[2]};
}

nlohmann::json node_json(const AnalyticScene& s, int n) {
  const CsgNode& node = s.nodes[n];
  if (node.op == CsgOp::Leaf) return {{"primitive", node.primitive}};
  return {{"op", op_name(node.op)}, {"children", {node_json(s, node.left), node_json(s, node.right)}}};
}

int parse_node(AnalyticScene& s, const nlohmann::json& j) {
  CsgNode node;
  if (j.contains("primitive")) {
    node.primitive = j.at("primitive").get<int>();
  } else {
    const auto op = j.at("op").get<std::string>();
    if (op == "union") node.op = CsgOp::Union;
    else if (op == "intersection") node.op = CsgOp::Intersection;
    else if (op == "difference") node.op = CsgOp::Difference;
    else fail(ErrorCode::InvalidInput, "unknown CSG operator '" + op + "'");
    const auto& children = j.at("children");
    require(children.size() == 2, "CSG operators take two children");
    node.left = parse_node(s, children[0]);
    node.right = parse_node(s, children[1]);
  }
  s.nodes.push_back(node);
  return static_cast<int>(s.nodes.size()) - 1;
}

}  // namespace

nlohmann::json AnalyticScene::to_json() const {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : primitives)
    prims.push_back({{"type", primitive_name(p.type)},
                     {"center", vec_json(p.center)},
                     {"size", vec_json(p.size)},
                     {"albedo", vec_json(p.albedo)}});
  return {{"name", name},
          {"primitives", prims},
          {"csg", node_json(*this, root)},
          {"background", vec_json(background)},
          {"lighting",
           {{"direction", vec_json(lighting.direction)},
            {"ambient", lighting.ambient},
            {"specular", lighting.specular},
            {"shininess", lighting.shininess}}}};
}

AnalyticScene AnalyticScene::from_json(const nlohmann::json& j) {
  AnalyticScene s;
  try {
    s.name = j.value("name", "");
    for (const auto& p : j.at("primitives")) {
      Primitive prim;
      const auto type = p.at("type").get<std::string>();
      if (type == "sphere") prim.type = PrimitiveType::Sphere;
      else if (type == "box") prim.type = PrimitiveType::Box;
      else if (type == "torus") prim.type = PrimitiveType::Torus;
      else fail(ErrorCode::InvalidInput, "unknown primitive type '" + type + "'");
      prim.center = json_vec(p.at("center"));
      prim.size = json_vec(p.at("size"));
      prim.albedo = json_vec(p.at("albedo"));
      s.primitives.push_back(prim);
    }
    s.root = parse_node(s, j.at("csg"));
    s.background = json_vec(j.at("background"));
    const auto& l = j.at("lighting");
    s.lighting.direction = json_vec(l.at("direction"));
    s.lighting.ambient = l.at("ambient").get<double>();
    s.lighting.specular = l.at("specular").get<double>();
    s.lighting.shininess = l.at("shininess").get<double>();
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidInput, std::string("malformed scene descriptor: ") + e.what());
  }
  s.validate();
  return s;
}

double scene_sdf(const AnalyticScene& scene, const Vec3& x) { return scene.sdf(x); }

SceneKind parse_scene_kind(const std::string& name) {
  if (name == "SPHERE") return SceneKind::Sphere;
  if (name == "BOX") return SceneKind::Box;
  if (name == "TORUS") return SceneKind::Torus;
  if (name == "CSG-DIFF") return SceneKind::CsgDiff;
  fail(ErrorCode::Config, "unknown scene '" + name + "' (expected SPHERE, BOX, TORUS or CSG-DIFF)");
}

std::string scene_kind_name(SceneKind kind) {
  switch (kind) {
    case SceneKind::Sphere: return "SPHERE";
    case SceneKind::Box: return "BOX";
    case SceneKind::Torus: return "TORUS";
    case SceneKind::CsgDiff: return "CSG-DIFF";
  }
  return "";
}

AnalyticScene make_scene(SceneKind kind) {
  AnalyticScene s;
  s.name = scene_kind_name(kind);
  const Vec3 warm(0.75, 0.55, 0.3);  // stays below 1 under full light plus ambient
  auto leaf = [&s](const Primitive& p) {
    s.primitives.push_back(p);
    s.nodes.push_back({CsgOp::Leaf, static_cast<int>(s.primitives.size()) - 1, -1, -1});
    return static_cast<int>(s.nodes.size()) - 1;
  };
  switch (kind) {
    case SceneKind::Sphere:
      s.root = leaf({PrimitiveType::Sphere, Vec3::Zero(), Vec3(0.5, 0, 0), warm});
      break;
    case SceneKind::Box:
      s.root = leaf({PrimitiveType::Box, Vec3::Zero(), Vec3(0.45, 0.35, 0.3), warm});
      break;
    case SceneKind::Torus:
      s.root = leaf({PrimitiveType::Torus, Vec3::Zero(), Vec3(0.5, 0.2, 0), warm});
      break;
    case SceneKind::CsgDiff: {
      const int a = leaf({PrimitiveType::Sphere, Vec3::Zero(), Vec3(0.6, 0, 0), warm});
      const int b = leaf({PrimitiveType::Box, Vec3(0.35, -0.35, 0.35), Vec3(0.35, 0.35, 0.35), Vec3(0.4, 0.75, 0.45)});
      s.nodes.push_back({CsgOp::Difference, -1, a, b});
      s.root = static_cast<int>(s.nodes.size()) - 1;
      break;
    }
  }
  s.validate();
  return s;
}

void SceneField::sdf(std::span<const Vec3> points, std::span<double> out) const {
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = scene_.sdf(points[i]);
}

void SceneField::color(std::span<const Vec3> points, std::span<const Vec3> normals, std::span<const Vec3> view_dirs,
                       std::span<Vec3> out) const {
  for (std::size_t i = 0; i < points.size(); ++i) {
    const double len = normals[i].norm();
    const Vec3 n = len > 0.0 ? Vec3(normals[i] / len) : Vec3::UnitZ();
    out[i] = shade(scene_, scene_.evaluate(points[i]).primitive, n, -view_dirs[i]);
  }
}

// ------------------------------------------------------------- rendering

TraceResult sphere_trace(const AnalyticScene& scene, const Ray& ray) {
  TraceResult r;
  const auto bounds = ray_sphere_bounds(ray, 1.0);
  if (!bounds) return r;
  double t = bounds->t_near;
  for (r.steps = 0; r.steps < kTraceSteps && t <= bounds->t_far; ++r.steps) {
    const SceneSample s = scene.evaluate(ray.at(t));
    if (s.value < kTraceThreshold) {
      r.hit = true;
      r.t = t;
      r.point = ray.at(t);
      r.primitive = s.primitive;
      return r;
    }
    t += s.value;
  }
  return r;
}

Vec3 shade(const AnalyticScene& scene, int primitive, const Vec3& normal, const Vec3& to_eye) {
  const Lighting& light = scene.lighting;
  const Vec3& albedo = scene.primitives.at(static_cast<std::size_t>(primitive)).albedo;
  const double diffuse = std::max(normal.dot(light.direction), 0.0);
  Vec3 c = albedo * (light.ambient + diffuse);
  if (light.specular > 0.0 && diffuse > 0.0) {
    const Vec3 reflected = 2.0 * normal.dot(light.direction) * normal - light.direction;
    c += Vec3::Constant(light.specular * std::pow(std::max(reflected.dot(to_eye.normalized()), 0.0), light.shininess));
  }
  return c.cwiseMax(0.0).cwiseMin(1.0);
}

GroundTruthImage render_ground_truth(const AnalyticScene& scene, const Camera& camera) {
  camera.validate();
  const int w = camera.intrinsics.width, h = camera.intrinsics.height;
  GroundTruthImage out{Image(w, h, 3), Image(w, h, 1), Image(w, h, 1)};
  for (int v = 0; v < h; ++v)
    for (int u = 0; u < w; ++u) {
      const Ray ray = generate_ray(camera, u, v);
      const TraceResult hit = sphere_trace(scene, ray);
      Vec3 c = scene.background;
      if (hit.hit) {
        c = shade(scene, hit.primitive, scene.normal(hit.point), -ray.direction);
        out.mask.at(u, v, 0) = 1.f;
        out.depth.at(u, v, 0) = static_cast<float>(hit.t);
      }
      for (int k = 0; k < 3; ++k) out.rgb.at(u, v, k) = static_cast<float>(c[k]);
    }
  return out;
}

// ------------------------------------------------------------------- rigs

Rig parse_rig(const std::string& name) {
  if (name == "orbit") return Rig::Orbit;
  if (name == "hemisphere") return Rig::Hemisphere;
  fail(ErrorCode::Config, "unknown rig '" + name + "' (expected orbit or hemisphere)");
}

std::string rig_name(Rig rig) { return rig == Rig::Orbit ? "orbit" : "hemisphere"; }

void RigConfig::validate() const {
  require(views >= 1, "rig needs at least one view");
  require(image_size >= 1, "image size must be positive");
  require(distance > 1.0, "cameras must sit outside the unit ball");
  require(fov_deg > 0.0 && fov_deg < 180.0, "field of view must be in (0, 180) degrees");
}

std::vector<Camera> make_rig(const RigConfig& config, std::uint64_t seed, double azimuth_offset) {
  config.validate();
  Intrinsics k;
  k.width = k.height = config.image_size;
  k.fx = k.fy = 0.5 * config.image_size / std::tan(0.5 * config.fov_deg * std::numbers::pi / 180.0);
  k.cx = k.cy = 0.5 * config.image_size;
  const double two_pi = 2.0 * std::numbers::pi;
  std::vector<Camera> cameras;
  if (config.rig == Rig::Orbit) {
    const double elev = config.elevation_deg * std::numbers::pi / 180.0;
    for (int i = 0; i < config.views; ++i) {
      const double az = two_pi * (i + azimuth_offset) / config.views;
      const Vec3 eye = config.distance * Vec3(std::cos(elev) * std::cos(az), std::cos(elev) * std::sin(az), std::sin(elev));
      cameras.push_back(look_at(eye, Vec3::Zero(), k));
    }
  } else {
    Rng rng = make_stream(seed, {0x726967ULL});
    const double rotation = two_pi * uniform01(rng);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    const double lo = std::sin(10.0 * std::numbers::pi / 180.0), hi = std::sin(80.0 * std::numbers::pi / 180.0);
    for (int i = 0; i < config.views; ++i) {
      const double z = lo + (hi - lo) * (i + 0.5) / config.views;
      const double r = std::sqrt(1.0 - z * z);
      const double az = rotation + golden * (i + azimuth_offset);
      cameras.push_back(look_at(config.distance * Vec3(r * std::cos(az), r * std::sin(az), z), Vec3::Zero(), k));
    }
  }
  return cameras;
}

// ------------------------------------------------------- surface samples

std::vector<Vec3> sample_surface_points(const AnalyticScene& scene, std::size_t count, Rng& rng) {
  constexpr double band = 0.01;
  constexpr double tolerance = 1e-9;
  std::vector<Vec3> points;
  points.reserve(count);
  const double box = std::min(scene.extent() + 2 * band, 1.0);
  std::size_t attempts = 0;
  while (points.size() < count) {
    if (++attempts > 1000 * count + 100000) fail(ErrorCode::InvalidInput, "surface sampling failed to converge");
    Vec3 x(uniform(rng, -box, box), uniform(rng, -box, box), uniform(rng, -box, box));
    if (std::abs(scene.sdf(x)) >= band) continue;
    bool converged = false;
    for (int it = 0; it < 50 && !converged; ++it) {
      const double f = scene.sdf(x);
      if (std::abs(f) < tolerance) {
        converged = true;
        break;
      }
      // Newton step along the unit gradient of a distance field.
      x -= f * scene.normal(x, 1e-7);
    }
    if (converged) points.push_back(x);
  }
  return points;
}

// -------------------------------------------------------------- datasets

void DatasetConfig::validate() const {
  rig.validate();
  require(rig.views >= 2, "a dataset needs at least two training views");
  require(test_views >= 0, "test view count must be non-negative");
  require(gt_points >= 1, "ground-truth point count must be positive");
}

void write_points(const std::filesystem::path& path, std::span<const Vec3> points) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  for (const auto& p : points)
    for (int k = 0; k < 3; ++k) io::write_pod(out, static_cast<float>(p[k]));
  if (!out) fail(ErrorCode::Io, "failed writing '" + path.string() + "'");
}

std::vector<Vec3> read_points(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary | std::ios::ate);
  if (!in) fail(ErrorCode::Io, "cannot open '" + path.string() + "'");
  const auto bytes = static_cast<std::size_t>(in.tellg());
  if (bytes % 12 != 0) fail(ErrorCode::Io, "'" + path.string() + "' is not a list of float32 triples");
  in.seekg(0);
  std::vector<float> raw(bytes / 4);
  io::read_array<float>(in, raw);
  std::vector<Vec3> points(bytes / 12);
  for (std::size_t i = 0; i < points.size(); ++i) points[i] = Vec3(raw[3 * i], raw[3 * i + 1], raw[3 * i + 2]);
  return points;
}

namespace {

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::Io, "cannot open '" + path.string() + "' for writing");
  out << text;
  if (!out) fail(ErrorCode::Io, "failed writing '" + path.string() + "'");
}

std::string frame_stem(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%03d", index);
  return buf;
}

}  // namespace

void make_dataset(const AnalyticScene& scene, const DatasetConfig& config, const std::filesystem::path& dir) {
  config.validate();
  scene.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir / "images", ec);
  std::filesystem::create_directories(dir / "masks", ec);
  if (ec) fail(ErrorCode::Io, "cannot create dataset directory '" + dir.string() + "': " + ec.message());

  std::vector<Camera> cameras = make_rig(config.rig, config.seed);
  const std::size_t n_train = cameras.size();
  if (config.test_views > 0) {
    RigConfig test_rig = config.rig;
    test_rig.views = config.test_views;
    // Held-out orbit views fall between training azimuths.
    const double offset = config.rig.rig == Rig::Orbit ? 0.5 * config.test_views / config.rig.views : 0.5;
    for (const auto& c : make_rig(test_rig, config.seed + 1, offset)) cameras.push_back(c);
  }

  Rng gain_rng = make_stream(config.seed, {0x6761696eULL});
  std::vector<double> gains(cameras.size(), 1.0);
  if (config.exposure)
    for (auto& g : gains) g = std::exp(uniform(gain_rng, std::log(0.8), std::log(1.25)));

  nlohmann::json frames = nlohmann::json::array();
  for (std::size_t i = 0; i < cameras.size(); ++i) {
    GroundTruthImage gt = render_ground_truth(scene, cameras[i]);
    if (config.exposure)
      for (auto& v : gt.rgb.data) v = std::min(1.f, static_cast<float>(v * gains[i]));
    const std::string stem = frame_stem(static_cast<int>(i));
    write_png(dir / "images" / (stem + ".png"), gt.rgb);
    write_png(dir / "masks" / (stem + ".png"), gt.mask);
    nlohmann::json record = camera_to_json(cameras[i]);
    record["image"] = "images/" + stem + ".png";
    record["mask"] = "masks/" + stem + ".png";
    record["split"] = i < n_train ? "train" : "test";
    frames.push_back(record);
  }
  const nlohmann::json camera_file = {{"version", 1},
                                      {"scene_transform", transform_to_json(SceneTransform{})},
                                      {"background", vec_json(scene.background)},
                                      {"frames", frames}};
  write_text(dir / "cameras.json", camera_file.dump(2) + "\n");

  nlohmann::json descriptor = scene.to_json();
  descriptor["rig"] = rig_name(config.rig.rig);
  descriptor["seed"] = config.seed;
  descriptor["exposure_gains"] = gains;
  write_text(dir / "scene.json", descriptor.dump(2) + "\n");

  Rng point_rng = make_stream(config.seed, {0x707473ULL});
  write_points(dir / "gt_points.bin", sample_surface_points(scene, config.gt_points, point_rng));
}

std::vector<DatasetView> SceneDataset::split(bool train) const {
  std::vector<DatasetView> out;
  for (const auto& v : views)
    if (v.train == train) out.push_back(v);
  return out;
}

SceneDataset load_dataset(const std::filesystem::path& dir) {
  SceneDataset ds;
  ds.root = dir;
  std::ifstream in(dir / "cameras.json");
  if (!in) fail(ErrorCode::Io, "cannot open '" + (dir / "cameras.json").string() + "'");
  nlohmann::json file;
  try {
    file = nlohmann::json::parse(in);
    if (file.contains("scene_transform")) ds.transform = transform_from_json(file.at("scene_transform"));
    if (file.contains("background")) ds.background = json_vec(file.at("background"));
    for (const auto& record : file.at("frames")) {
      DatasetView view;
      view.camera = camera_from_json(record);
      view.camera.validate();
      view.train = record.value("split", "train") != "test";
      view.rgb = read_png(dir / record.at("image").get<std::string>());
      if (view.rgb.channels != 3 || view.rgb.width != view.camera.intrinsics.width ||
          view.rgb.height != view.camera.intrinsics.height)
        fail(ErrorCode::InvalidInput, "image size or channels do not match camera record");
      if (record.contains("mask")) view.mask = read_png(dir / record.at("mask").get<std::string>());
      ds.views.push_back(std::move(view));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidInput, std::string("malformed camera file: ") + e.what());
  }
  std::ifstream scene_in(dir / "scene.json");
  if (scene_in) {
    try {
      ds.scene = nlohmann::json::parse(scene_in);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::InvalidInput, std::string("malformed scene descriptor: ") + e.what());
    }
  } else {
    ds.scene = nlohmann::json::object();
  }
  require(!ds.views.empty(), "dataset has no frames");
  return ds;
}

}  // namespace hashsdf
