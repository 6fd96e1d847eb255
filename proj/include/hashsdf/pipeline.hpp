#pragma once

#include <vector>

#include "hashsdf/field.hpp"
#include "hashsdf/renderer.hpp"
#include "hashsdf/synthetic.hpp"
#include "hashsdf/training.hpp"

namespace hashsdf {

/// A trained field seen by the renderer and the mesher. Colors use the
/// same surface normals as training: central differences with `epsilon` in
/// numerical modes, the analytical gradient otherwise. Normals handed in by
/// the renderer are ignored for that reason.
class FieldView final : public RenderField {
 public:
  FieldView(const NeuralField<float>& field, GradientMode mode, double epsilon, int active_levels,
            int image_index = -1);
  void sdf(std::span<const Vec3> points, std::span<double> out) const override;
  void color(std::span<const Vec3> points, std::span<const Vec3> normals, std::span<const Vec3> view_dirs,
             std::span<Vec3> out) const override;

 private:
  const NeuralField<float>& field_;
  GradientMode mode_;
  double epsilon_;
  int active_levels_;
  int image_index_;
};

/// Training views of a dataset; embedding indices follow frame order.
std::vector<TrainingView> training_views(const SceneDataset& dataset);

}  // namespace hashsdf
