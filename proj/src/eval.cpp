#include "hashsdf/eval.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include <Eigen/Geometry>

#include "hashsdf/error.hpp"

namespace hashsdf {

namespace {

constexpr std::uint32_t kLeafSize = 8;

void require_points(std::span<const Vec3> points, const char* what) {
  require(!points.empty(), std::string(what) + " point set is empty");
}

}  // namespace

KdTree::KdTree(std::span<const Vec3> points) : points_(points.begin(), points.end()) {
  require_points(points, "kd-tree");
  nodes_.reserve(2 * points_.size() / kLeafSize + 1);
  build(0, static_cast<std::uint32_t>(points_.size()));
}

std::uint32_t KdTree::build(std::uint32_t begin, std::uint32_t end) {
  const auto id = static_cast<std::uint32_t>(nodes_.size());
  nodes_.emplace_back();
  if (end - begin <= kLeafSize) {
    nodes_[id].begin = begin;
    nodes_[id].end = end;
    return id;
  }
  Vec3 lo = points_[begin], hi = points_[begin];
  for (std::uint32_t i = begin; i < end; ++i) {
    lo = lo.cwiseMin(points_[i]);
    hi = hi.cwiseMax(points_[i]);
  }
  int axis = 0;
  (hi - lo).maxCoeff(&axis);
  const std::uint32_t mid = begin + (end - begin) / 2;
  std::nth_element(points_.begin() + begin, points_.begin() + mid, points_.begin() + end,
                   [axis](const Vec3& a, const Vec3& b) { return a[axis] < b[axis]; });
  const double split = points_[mid][axis];
  const std::uint32_t left = build(begin, mid);
  const std::uint32_t right = build(mid, end);
  Node& node = nodes_[id];
  node.axis = axis;
  node.split = split;
  node.left = left;
  node.right = right;
  return id;
}

double KdTree::nearest_squared(const Vec3& query) const {
  double best = std::numeric_limits<double>::infinity();
  // (node, lower bound on the squared distance to its region along the split)
  std::vector<std::pair<std::uint32_t, double>> stack{{0u, 0.0}};
  while (!stack.empty()) {
    const auto [id, bound] = stack.back();
    stack.pop_back();
    if (bound >= best) continue;
    const Node& node = nodes_[id];
    if (node.axis < 0) {
      for (std::uint32_t i = node.begin; i < node.end; ++i) best = std::min(best, (points_[i] - query).squaredNorm());
      continue;
    }
    const double d = query[node.axis] - node.split;
    // Left holds coordinates <= split, right >= split; visit the near side first.
    const std::uint32_t near = d <= 0.0 ? node.left : node.right;
    const std::uint32_t far = d <= 0.0 ? node.right : node.left;
    stack.emplace_back(far, std::max(bound, d * d));
    stack.emplace_back(near, bound);
  }
  return best;
}

double KdTree::nearest(const Vec3& query) const { return std::sqrt(nearest_squared(query)); }

double mean_nearest_distance(std::span<const Vec3> from, const KdTree& to) {
  require_points(from, "query");
  double sum = 0.0;
  for (const auto& p : from) sum += to.nearest(p);
  return sum / static_cast<double>(from.size());
}

double chamfer(std::span<const Vec3> a, std::span<const Vec3> b) {
  require_points(a, "first");
  require_points(b, "second");
  const KdTree ta(a), tb(b);
  return 0.5 * (mean_nearest_distance(a, tb) + mean_nearest_distance(b, ta));
}

double chamfer_brute_force(std::span<const Vec3> a, std::span<const Vec3> b) {
  require_points(a, "first");
  require_points(b, "second");
  auto directed = [](std::span<const Vec3> from, std::span<const Vec3> to) {
    double sum = 0.0;
    for (const auto& p : from) {
      double best = std::numeric_limits<double>::infinity();
      for (const auto& q : to) best = std::min(best, (q - p).squaredNorm());
      sum += std::sqrt(best);
    }
    return sum / static_cast<double>(from.size());
  };
  return 0.5 * (directed(a, b) + directed(b, a));
}

F1Score f1_score(std::span<const Vec3> pred, std::span<const Vec3> gt, double tau) {
  require(tau > 0.0, "f1 threshold must be positive");
  require_points(pred, "predicted");
  require_points(gt, "ground-truth");
  const KdTree tp(pred), tg(gt);
  auto within = [tau](std::span<const Vec3> from, const KdTree& to) {
    std::size_t n = 0;
    for (const auto& p : from) n += to.nearest(p) <= tau ? 1 : 0;
    return static_cast<double>(n) / static_cast<double>(from.size());
  };
  F1Score s;
  s.precision = within(pred, tg);
  s.recall = within(gt, tp);
  s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  return s;
}

double psnr(const Image& a, const Image& b, const Image* mask) {
  require(a.width == b.width && a.height == b.height && a.channels == b.channels && a.data.size() == b.data.size(),
          "psnr: image shapes differ");
  if (mask)
    require(mask->width == a.width && mask->height == a.height && mask->channels == 1,
            "psnr: mask shape differs from the images");
  double sum = 0.0;
  std::size_t count = 0;
  for (std::size_t p = 0; p < a.pixel_count(); ++p) {
    if (mask && !(mask->data[p] > 0.5f)) continue;
    for (int c = 0; c < a.channels; ++c) {
      const double d = static_cast<double>(a.data[p * a.channels + c]) - b.data[p * b.channels + c];
      sum += d * d;
    }
    count += static_cast<std::size_t>(a.channels);
  }
  require(count > 0, "psnr: no pixels selected");
  const double mse = sum / static_cast<double>(count);
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

std::vector<Vec3> sample_mesh_points(const TriangleMesh& mesh, std::size_t count, Rng& rng) {
  require(!mesh.empty(), "cannot sample points from an empty mesh");
  std::vector<double> cumulative(mesh.triangles.size());
  double total = 0.0;
  for (std::size_t i = 0; i < mesh.triangles.size(); ++i) {
    const auto& t = mesh.triangles[i];
    total += 0.5 * (mesh.vertices[t[1]] - mesh.vertices[t[0]]).cross(mesh.vertices[t[2]] - mesh.vertices[t[0]]).norm();
    cumulative[i] = total;
  }
  std::vector<Vec3> points(count);
  for (auto& p : points) {
    const double pick = uniform01(rng) * total;
    const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
    const auto& t = mesh.triangles[std::min<std::size_t>(it - cumulative.begin(), cumulative.size() - 1)];
    // Uniform barycentric coordinates via the square-root warp.
    const double r1 = std::sqrt(uniform01(rng)), r2 = uniform01(rng);
    p = (1.0 - r1) * mesh.vertices[t[0]] + r1 * (1.0 - r2) * mesh.vertices[t[1]] + r1 * r2 * mesh.vertices[t[2]];
  }
  return points;
}

}  // namespace hashsdf
