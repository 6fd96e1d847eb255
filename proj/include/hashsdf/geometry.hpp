#pragma once

#include <optional>
#include <span>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

namespace hashsdf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

/// Pinhole intrinsics in pixels.
struct Intrinsics {
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;
};

/// Rigid camera-to-world transform.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();
};

/// Pinhole camera. Camera frame follows the OpenCV convention: +x right,
/// +y down, +z forward (viewing direction).
struct Camera {
  Intrinsics intrinsics;
  Pose pose;

  Vec3 center() const { return pose.translation; }
  Vec3 forward() const { return pose.rotation.col(2); }
  /// Throws InvalidInput unless the rotation is proper orthonormal and the
  /// intrinsics are consistent with the image size.
  void validate() const;
};

struct Ray {
  Vec3 origin = Vec3::Zero();
  Vec3 direction = Vec3::UnitZ();

  Vec3 at(double t) const { return origin + t * direction; }
};

struct Aabb {
  Vec3 lo = Vec3::Zero();
  Vec3 hi = Vec3::Zero();
};

/// Uniform scale followed by translation: x' = scale * x + translation.
struct SceneTransform {
  double scale = 1.0;
  Vec3 translation = Vec3::Zero();

  Vec3 apply(const Vec3& x) const { return scale * x + translation; }
  Camera apply(const Camera& camera) const;
  Aabb apply(const Aabb& box) const;
  /// this after `first`.
  SceneTransform compose(const SceneTransform& first) const;
};

/// Target radius of the normalized region of interest.
inline constexpr double kRoiRadius = 0.95;

struct NormalizedScene {
  SceneTransform transform;
  std::vector<Camera> cameras;
};

/// Similarity transform taking the bounding sphere of `roi` onto the ball of
/// radius kRoiRadius centered at the origin, plus the transformed cameras.
NormalizedScene normalize_scene(std::span<const Camera> cameras, const Aabb& roi);

/// Back-projects the pixel center (u + 0.5, v + 0.5).
Ray generate_ray(const Camera& camera, double u, double v);

struct RayBounds {
  double t_near = 0.0;
  double t_far = 0.0;
};

/// Intersection interval of the ray with the origin-centered sphere, clamped
/// to t >= 0. Empty when the ray misses or the sphere lies behind the origin.
std::optional<RayBounds> ray_sphere_bounds(const Ray& ray, double radius);

/// Builds a camera at `eye` looking at `target` with world +z as the up hint.
Camera look_at(const Vec3& eye, const Vec3& target, const Intrinsics& intrinsics,
               const Vec3& up_hint = Vec3::UnitZ());

// Camera file records (see README, "Camera file").
nlohmann::json camera_to_json(const Camera& camera);
Camera camera_from_json(const nlohmann::json& record);
nlohmann::json transform_to_json(const SceneTransform& transform);
SceneTransform transform_from_json(const nlohmann::json& record);

}  // namespace hashsdf
