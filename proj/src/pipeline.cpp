#include "hashsdf/pipeline.hpp"

#include <algorithm>

#include "hashsdf/error.hpp"

namespace hashsdf {

namespace {

std::vector<Vec3T<float>> to_float(std::span<const Vec3> points) {
  std::vector<Vec3T<float>> out(points.size());
  for (std::size_t i = 0; i < points.size(); ++i) out[i] = points[i].cast<float>();
  return out;
}

}  // namespace

FieldView::FieldView(const NeuralField<float>& field, GradientMode mode, double epsilon, int active_levels,
                     int image_index)
    : field_(field), mode_(mode), epsilon_(epsilon), active_levels_(active_levels), image_index_(image_index) {
  require(active_levels >= 1 && active_levels <= field.levels(), "active level count out of range");
  require(!uses_numerical(mode) || epsilon > 0.0, "numerical normals need a positive step");
}

void FieldView::sdf(std::span<const Vec3> points, std::span<double> out) const {
  const auto q = to_float(points);
  std::vector<float> values(q.size());
  field_.sdf_values(q, active_levels_, values);
  std::copy(values.begin(), values.end(), out.begin());
}

void FieldView::color(std::span<const Vec3> points, std::span<const Vec3>, std::span<const Vec3> view_dirs,
                      std::span<Vec3> out) const {
  const std::size_t n = points.size();
  if (n == 0) return;
  const auto q = to_float(points);
  SdfBatch<float> center;
  field_.sdf_forward(q, active_levels_, center, !uses_numerical(mode_));
  std::vector<Vec3T<float>> normals(n);
  if (uses_numerical(mode_)) {
    // Six axis probes per point in one batch: +x, -x, +y, -y, +z, -z.
    const auto eps = static_cast<float>(epsilon_);
    std::vector<Vec3T<float>> probes(6 * n);
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) {
        probes[6 * i + 2 * k] = q[i] + eps * Vec3T<float>::Unit(k);
        probes[6 * i + 2 * k + 1] = q[i] - eps * Vec3T<float>::Unit(k);
      }
    std::vector<float> values(6 * n);
    field_.sdf_values(probes, active_levels_, values);
    for (std::size_t i = 0; i < n; ++i)
      for (int k = 0; k < 3; ++k) normals[i][k] = (values[6 * i + 2 * k] - values[6 * i + 2 * k + 1]) / (2 * eps);
  } else {
    for (std::size_t i = 0; i < n; ++i) normals[i] = center.gradient.row(static_cast<Eigen::Index>(i)).transpose();
  }
  const RowMatrix<float> features = center.output.rightCols(field_.config().geometric_features);
  const auto dirs = to_float(view_dirs);
  const std::vector<int> images(n, image_index_);
  ColorBatch<float> batch;
  field_.color_forward(q, normals, dirs, features, images, batch);
  for (std::size_t i = 0; i < n; ++i) out[i] = batch.rgb.row(static_cast<Eigen::Index>(i)).transpose().cast<double>();
}

std::vector<TrainingView> training_views(const SceneDataset& dataset) {
  std::vector<TrainingView> views;
  for (std::size_t i = 0; i < dataset.views.size(); ++i) {
    const auto& v = dataset.views[i];
    if (!v.train) continue;
    views.push_back({v.camera, v.rgb.data, static_cast<int>(views.size())});
  }
  require(!views.empty(), "dataset has no training views");
  return views;
}

}  // namespace hashsdf
