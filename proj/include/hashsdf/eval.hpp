#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "hashsdf/geometry.hpp"
#include "hashsdf/image.hpp"
#include "hashsdf/mesh.hpp"
#include "hashsdf/rng.hpp"

namespace hashsdf {

/// Exact nearest-neighbour queries over a fixed point set. Distances are
/// computed with the same arithmetic as a brute-force scan, so results are
/// bit-identical to it.
class KdTree {
 public:
  explicit KdTree(std::span<const Vec3> points);
  /// Squared distance to the nearest point.
  double nearest_squared(const Vec3& query) const;
  double nearest(const Vec3& query) const;
  std::size_t size() const { return points_.size(); }

 private:
  struct Node {
    int axis = -1;  // -1 marks a leaf
    double split = 0.0;
    std::uint32_t begin = 0, end = 0;  // leaf range in points_
    std::uint32_t left = 0, right = 0;
  };
  std::uint32_t build(std::uint32_t begin, std::uint32_t end);

  std::vector<Vec3> points_;
  std::vector<Node> nodes_;
};

/// Mean nearest-neighbour distance from every point of `from` to `to`.
double mean_nearest_distance(std::span<const Vec3> from, const KdTree& to);

/// 0.5 * (mean NN distance a->b + mean NN distance b->a). InvalidInput on
/// empty sets.
double chamfer(std::span<const Vec3> a, std::span<const Vec3> b);
/// Same definition by exhaustive search (reference for tests).
double chamfer_brute_force(std::span<const Vec3> a, std::span<const Vec3> b);

struct F1Score {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Precision: fraction of `pred` within `tau` of `gt`; recall: the converse.
F1Score f1_score(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau);

/// 10 log10(1 / MSE) over pixels whose mask value exceeds 0.5 (all pixels
/// without a mask). Identical inputs give +infinity.
double psnr(const Image& a, const Image& b, const Image* mask = nullptr);

/// Uniform area-weighted surface samples. InvalidInput on an empty mesh.
std::vector<Vec3> sample_mesh_points(const TriangleMesh& mesh, std::size_t count, Rng& rng);

}  // namespace hashsdf
