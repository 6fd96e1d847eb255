#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hashsdf/geometry.hpp"
#include "hashsdf/image.hpp"
#include "hashsdf/renderer.hpp"
#include "hashsdf/rng.hpp"

namespace hashsdf {

enum class PrimitiveType { Sphere, Box, Torus };

/// `size` holds the radius (x) for spheres, half extents for boxes, and the
/// major (x) and minor (y) radii for tori lying in the xy-plane.
struct Primitive {
  PrimitiveType type = PrimitiveType::Sphere;
  Vec3 center = Vec3::Zero();
  Vec3 size = Vec3(0.5, 0.0, 0.0);
  Vec3 albedo = Vec3::Constant(0.7);

  double sdf(const Vec3& x) const;
  /// Radius of the smallest origin-centered ball containing the primitive.
  double extent() const;
};

enum class CsgOp { Leaf, Union, Intersection, Difference };

struct CsgNode {
  CsgOp op = CsgOp::Leaf;
  int primitive = -1;  // leaves
  int left = -1;       // operators; Difference is left minus right
  int right = -1;
};

struct Lighting {
  Vec3 direction = Vec3(0.4, -0.3, 0.85).normalized();  // towards the light
  double ambient = 0.25;
  double specular = 0.0;
  double shininess = 32.0;
};

/// Result of evaluating the CSG tree: the distance and the primitive whose
/// surface realizes it (used for albedo lookup).
struct SceneSample {
  double value = 0.0;
  int primitive = -1;
};

/// CSG tree of analytic primitives. Single primitives are exact distance
/// fields; unions are exact outside overlaps; intersections and differences
/// are lower bounds on the true distance.
struct AnalyticScene {
  std::string name;
  std::vector<Primitive> primitives;
  std::vector<CsgNode> nodes;
  int root = 0;
  Vec3 background = Vec3(0.1, 0.3, 0.6);
  Lighting lighting;

  SceneSample evaluate(const Vec3& x) const;
  double sdf(const Vec3& x) const { return evaluate(x).value; }
  /// Normalized central-difference gradient.
  Vec3 normal(const Vec3& x, double step = 1e-6) const;
  /// Radius of an origin-centered ball containing the solid.
  double extent() const;
  /// Throws InvalidInput on a malformed tree or geometry outside kRoiRadius.
  void validate() const;

  nlohmann::json to_json() const;
  static AnalyticScene from_json(const nlohmann::json& j);
};

double scene_sdf(const AnalyticScene& scene, const Vec3& x);

enum class SceneKind { Sphere, Box, Torus, CsgDiff };
SceneKind parse_scene_kind(const std::string& name);  // SPHERE, BOX, TORUS, CSG-DIFF
std::string scene_kind_name(SceneKind kind);
AnalyticScene make_scene(SceneKind kind);

/// The analytic scene as a renderer field: exact SDF plus Lambert shading of
/// the nearest primitive's albedo.
class SceneField final : public RenderField {
 public:
  explicit SceneField(const AnalyticScene& scene) : scene_(scene) {}
  void sdf(std::span<const Vec3> points, std::span<double> out) const override;
  void color(std::span<const Vec3> points, std::span<const Vec3> normals, std::span<const Vec3> view_dirs,
             std::span<Vec3> out) const override;

 private:
  const AnalyticScene& scene_;
};

// ------------------------------------------------------------ rendering

inline constexpr int kTraceSteps = 256;
inline constexpr double kTraceThreshold = 1e-4;

struct TraceResult {
  bool hit = false;
  double t = 0.0;
  Vec3 point = Vec3::Zero();
  int primitive = -1;
  int steps = 0;
};

/// Sphere tracing inside the unit ball.
TraceResult sphere_trace(const AnalyticScene& scene, const Ray& ray);

/// albedo * (ambient + max(n.l, 0)) plus an optional white specular lobe,
/// clamped to [0, 1]. `to_eye` points from the surface to the camera.
Vec3 shade(const AnalyticScene& scene, int primitive, const Vec3& normal, const Vec3& to_eye);

struct GroundTruthImage {
  Image rgb;     // 3 channels
  Image mask;    // 1 channel, 1 on hits
  Image depth;   // 1 channel, ray parameter t on hits, 0 elsewhere
};

GroundTruthImage render_ground_truth(const AnalyticScene& scene, const Camera& camera);

// -------------------------------------------------------------- datasets

enum class Rig { Orbit, Hemisphere };
Rig parse_rig(const std::string& name);  // "orbit" | "hemisphere"
std::string rig_name(Rig rig);

struct RigConfig {
  Rig rig = Rig::Orbit;
  int views = 16;
  int image_size = 64;
  double distance = 2.6;
  double elevation_deg = 25.0;  // orbit circle height
  double fov_deg = 40.0;
  void validate() const;
};

/// Cameras looking at the origin. Orbit: equally spaced azimuths on one
/// circle starting at `azimuth_offset` (fraction of the spacing).
/// Hemisphere: Fibonacci directions over elevations 10..80 degrees with a
/// seeded azimuth rotation.
std::vector<Camera> make_rig(const RigConfig& config, std::uint64_t seed, double azimuth_offset = 0.0);

/// Points on the zero set: uniform samples from a thin band around the
/// surface projected by Newton steps; the band makes the density
/// approximately area-uniform. Every point satisfies |sdf| < 1e-6.
std::vector<Vec3> sample_surface_points(const AnalyticScene& scene, std::size_t count, Rng& rng);

struct DatasetConfig {
  RigConfig rig;
  int test_views = 4;          // held-out views between the training azimuths
  bool exposure = false;       // random per-image gain in [0.8, 1.25]
  std::size_t gt_points = 100000;
  std::uint64_t seed = 0;
  void validate() const;
};

/// Writes cameras.json, images/NNN.png, masks/NNN.png, gt_points.bin and
/// scene.json into `dir` (created if needed).
void make_dataset(const AnalyticScene& scene, const DatasetConfig& config, const std::filesystem::path& dir);

struct DatasetView {
  Camera camera;
  bool train = true;
  Image rgb;
  Image mask;  // may be empty
};

struct SceneDataset {
  std::filesystem::path root;
  std::vector<DatasetView> views;
  SceneTransform transform;
  Vec3 background = Vec3::Zero();
  nlohmann::json scene;  // scene.json contents (empty object if absent)
  std::vector<DatasetView> split(bool train) const;
};

/// Loads a dataset directory. gt_points.bin is read separately.
SceneDataset load_dataset(const std::filesystem::path& dir);

void write_points(const std::filesystem::path& path, std::span<const Vec3> points);
std::vector<Vec3> read_points(const std::filesystem::path& path);

}  // namespace hashsdf
