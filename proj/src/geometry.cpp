#include "hashsdf/geometry.hpp"

#include <cmath>
#include <limits>

#include <Eigen/Geometry>
#include <nlohmann/json.hpp>

#include "hashsdf/error.hpp"

namespace hashsdf {

void Camera::validate() const {
  const auto& k = intrinsics;
  require(k.width > 0 && k.height > 0, "camera image size must be positive");
  require(k.fx > 0.0 && k.fy > 0.0, "camera focal lengths must be positive");
  require(k.cx >= 0.0 && k.cx < k.width && k.cy >= 0.0 && k.cy < k.height,
          "principal point must lie inside the image");
  const Mat3& r = pose.rotation;
  require((r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff() < 1e-6,
          "camera rotation is not orthonormal");
  require(std::abs(r.determinant() - 1.0) < 1e-6, "camera rotation must have determinant +1");
  require(pose.translation.allFinite(), "camera translation must be finite");
}

Camera SceneTransform::apply(const Camera& camera) const {
  Camera out = camera;
  out.pose.translation = apply(camera.pose.translation);
  return out;
}

Aabb SceneTransform::apply(const Aabb& box) const {
  return Aabb{apply(box.lo), apply(box.hi)};
}

SceneTransform SceneTransform::compose(const SceneTransform& first) const {
  return SceneTransform{scale * first.scale, scale * first.translation + translation};
}

NormalizedScene normalize_scene(std::span<const Camera> cameras, const Aabb& roi) {
  const Vec3 extent = roi.hi - roi.lo;
  if (!(extent.array() > 0.0).all()) fail(ErrorCode::InvalidInput, "region of interest has zero extent");
  const Vec3 center = 0.5 * (roi.lo + roi.hi);
  const double radius = 0.5 * extent.norm();

  NormalizedScene out;
  out.transform.scale = kRoiRadius / radius;
  out.transform.translation = -out.transform.scale * center;
  out.cameras.reserve(cameras.size());
  for (const Camera& camera : cameras) out.cameras.push_back(out.transform.apply(camera));
  return out;
}

Ray generate_ray(const Camera& camera, double u, double v) {
  const auto& k = camera.intrinsics;
  if (!(u >= 0.0 && u < k.width && v >= 0.0 && v < k.height))
    fail(ErrorCode::InvalidInput, "pixel outside the image");
  const Vec3 local((u + 0.5 - k.cx) / k.fx, (v + 0.5 - k.cy) / k.fy, 1.0);
  return Ray{camera.pose.translation, (camera.pose.rotation * local).normalized()};
}

std::optional<RayBounds> ray_sphere_bounds(const Ray& ray, double radius) {
  // |o + t d|^2 = r^2 with |d| = 1.
  const double b = ray.origin.dot(ray.direction);
  const double c = ray.origin.squaredNorm() - radius * radius;
  const double disc = b * b - c;
  if (disc < 0.0) return std::nullopt;
  const double root = std::sqrt(disc);
  const double t0 = -b - root;
  const double t1 = -b + root;
  if (t1 < 0.0) return std::nullopt;
  return RayBounds{std::max(t0, 0.0), t1};
}

Camera look_at(const Vec3& eye, const Vec3& target, const Intrinsics& intrinsics, const Vec3& up_hint) {
  const Vec3 forward = (target - eye).normalized();
  Vec3 right = forward.cross(-up_hint);
  if (right.norm() < 1e-9) right = forward.cross(Vec3::UnitY());
  right.normalize();
  const Vec3 down = forward.cross(right);
  Camera camera;
  camera.intrinsics = intrinsics;
  camera.pose.rotation.col(0) = right;
  camera.pose.rotation.col(1) = down;
  camera.pose.rotation.col(2) = forward;
  camera.pose.translation = eye;
  return camera;
}

nlohmann::json camera_to_json(const Camera& camera) {
  const auto& k = camera.intrinsics;
  std::vector<double> matrix;
  matrix.reserve(12);
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) matrix.push_back(camera.pose.rotation(r, c));
    matrix.push_back(camera.pose.translation[r]);
  }
  return nlohmann::json{{"fx", k.fx},       {"fy", k.fy},         {"cx", k.cx},
                        {"cy", k.cy},       {"width", k.width},   {"height", k.height},
                        {"camera_to_world", matrix}};
}

Camera camera_from_json(const nlohmann::json& record) {
  Camera camera;
  try {
    auto& k = camera.intrinsics;
    k.fx = record.at("fx").get<double>();
    k.fy = record.at("fy").get<double>();
    k.cx = record.at("cx").get<double>();
    k.cy = record.at("cy").get<double>();
    k.width = record.at("width").get<int>();
    k.height = record.at("height").get<int>();
    const auto matrix = record.at("camera_to_world").get<std::vector<double>>();
    require(matrix.size() == 12, "camera_to_world must hold 12 values (row-major 3x4)");
    for (int r = 0; r < 3; ++r) {
      for (int c = 0; c < 3; ++c) camera.pose.rotation(r, c) = matrix[r * 4 + c];
      camera.pose.translation[r] = matrix[r * 4 + 3];
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidInput, std::string("malformed camera record: ") + e.what());
  }
  camera.validate();
  return camera;
}

nlohmann::json transform_to_json(const SceneTransform& transform) {
  return nlohmann::json{{"scale", transform.scale},
                        {"translation", {transform.translation.x(), transform.translation.y(),
                                         transform.translation.z()}}};
}

SceneTransform transform_from_json(const nlohmann::json& record) {
  SceneTransform t;
  t.scale = record.at("scale").get<double>();
  const auto v = record.at("translation").get<std::vector<double>>();
  require(v.size() == 3 && t.scale > 0.0, "malformed scene transform");
  t.translation = Vec3(v[0], v[1], v[2]);
  return t;
}

}  // namespace hashsdf
