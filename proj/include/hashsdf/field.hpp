#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "hashsdf/encoding.hpp"
#include "hashsdf/rng.hpp"

namespace hashsdf {

template <class T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ColVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
/// Parameter-sized buffers. Eigen maps over them vectorize the same way on
/// every allocation, so reductions are bit-reproducible.
template <class T>
using ParamVector = std::vector<T, Eigen::aligned_allocator<T>>;

struct FieldConfig {
  EncodingConfig encoding;
  int sdf_hidden = 64;
  int geometric_features = 15;  // F
  double softplus_beta = 100.0;
  int color_hidden = 64;
  int color_layers = 4;  // hidden layers of the color MLP
  int sh_degree = 4;     // 16 view-direction coefficients
  bool appearance = false;
  int appearance_dim = 8;
  int image_count = 0;
  double init_sharpness = 64.0;

  int sdf_input_dim() const { return encoding.levels * encoding.channels + 3; }
  int sh_dim() const { return sh_degree * sh_degree; }
  int color_input_dim() const {
    return 3 + 3 + sh_dim() + geometric_features + (appearance ? appearance_dim : 0);
  }
  void validate() const;
};

/// Named slice of the flat parameter vector.
struct ParamSegment {
  std::string name;
  std::size_t offset = 0;
  std::size_t size = 0;
  int rows = 1;  // matrix shape for weights, rows x cols == size
  int cols = 1;
};

/// Real spherical harmonics of degree < 4 (16 coefficients) of a unit direction.
template <class T>
std::array<T, 16> spherical_harmonics(const Vec3T<T>& d);

template <class T>
struct SdfValue {
  T sdf{};
  std::vector<T> features;  // length F
};

/// Forward activations of a batch of SDF evaluations, retained for the
/// backward pass. With derivatives enabled the batch also holds the
/// analytical gradient and Laplacian of the sdf output.
template <class T>
struct SdfBatch {
  std::size_t size = 0;
  int active_levels = 0;
  bool derivatives = false;
  RowMatrix<T> input;   // n x D: [encoding, raw position]
  RowMatrix<T> pre;     // n x H
  RowMatrix<T> hidden;  // n x H
  RowMatrix<T> slope;   // n x H, softplus derivative at pre
  RowMatrix<T> output;  // n x (1 + F), column 0 is the sdf
  EncodingCache<T> cache;
  std::array<RowMatrix<T>, 3> jacobian;  // n x D each: d input / d x_k
  std::array<RowMatrix<T>, 3> q;         // n x H each: d pre / d x_k
  RowMatrix<T> gradient;                 // n x 3
  ColVector<T> laplacian;                // n

  T sdf(std::size_t i) const { return output(static_cast<Eigen::Index>(i), 0); }
};

template <class T>
struct ColorBatch {
  std::size_t size = 0;
  RowMatrix<T> input;
  std::vector<RowMatrix<T>> pre;     // per hidden layer
  std::vector<RowMatrix<T>> hidden;  // per hidden layer
  RowMatrix<T> rgb;                  // n x 3
  std::vector<int> images;
};

/// The neural SDF (hash encoding + one-hidden-layer MLP), the color MLP,
/// per-image appearance embeddings and the logistic sharpness, all stored
/// in one flat parameter vector.
template <class T>
class NeuralField {
 public:
  explicit NeuralField(const FieldConfig& config, std::uint64_t seed = 0);

  const FieldConfig& config() const { return config_; }
  const HashGrid& grid() const { return grid_; }
  int levels() const { return grid_.levels(); }

  std::span<T> parameters() { return params_; }
  std::span<const T> parameters() const { return params_; }
  const std::vector<ParamSegment>& segments() const { return segments_; }
  const ParamSegment& segment(const std::string& name) const;
  std::span<T> segment_values(const std::string& name);
  std::span<const T> segment_values(const std::string& name) const;
  std::span<const T> tables() const { return {params_.data() + tables_.offset, tables_.size}; }
  std::span<T> tables() { return {params_.data() + tables_.offset, tables_.size}; }

  T log_sharpness() const { return params_[log_s_.offset]; }
  T sharpness() const;
  void set_sharpness(T s);

  /// Geometric initialization: the field approximates |x| - radius.
  void init_sphere(double radius);

  SdfValue<T> sdf_eval(const Vec3T<T>& x, int active_levels) const;
  /// Exact gradient of the composed network (reverse mode through the MLP
  /// and the analytical encoding derivative).
  Vec3T<T> analytical_gradient(const Vec3T<T>& x, int active_levels) const;
  Vec3T<T> color_eval(const Vec3T<T>& x, const Vec3T<T>& normal, const Vec3T<T>& view_dir,
                      std::span<const T> features, int image_index) const;

  /// Batched SDF forward. `derivatives` also evaluates the analytical
  /// gradient and Laplacian and keeps what their backward pass needs.
  void sdf_forward(std::span<const Vec3T<T>> points, int active_levels, SdfBatch<T>& batch,
                   bool derivatives = false) const;
  /// Sdf column only, no cache.
  void sdf_values(std::span<const Vec3T<T>> points, int active_levels, std::span<T> out) const;
  /// Accumulates parameter gradients. `doutput` is n x (1 + F); `dgradient`
  /// (n x 3) and `dlaplacian` (n) are only read for derivative batches.
  void sdf_backward(const SdfBatch<T>& batch, const RowMatrix<T>& doutput, const RowMatrix<T>* dgradient,
                    const ColVector<T>* dlaplacian, std::span<T> dparams) const;

  /// Batched color forward. Rows of `features` are the geometric features.
  void color_forward(std::span<const Vec3T<T>> positions, std::span<const Vec3T<T>> normals,
                     std::span<const Vec3T<T>> view_dirs, const RowMatrix<T>& features,
                     std::span<const int> images, ColorBatch<T>& batch) const;
  /// Accumulates parameter gradients from d loss / d rgb and returns
  /// d loss / d input (n x color_input_dim).
  RowMatrix<T> color_backward(const ColorBatch<T>& batch, const RowMatrix<T>& drgb, std::span<T> dparams) const;

  /// Column offsets inside the color input.
  int color_normal_column() const { return 3; }
  int color_feature_column() const { return 6 + config_.sh_dim(); }

 private:
  ParamSegment& add_segment(const std::string& name, int rows, int cols);
  Eigen::Map<RowMatrix<T>> matrix(const ParamSegment& s);
  Eigen::Map<const RowMatrix<T>> matrix(const ParamSegment& s) const;
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> row_vector(const ParamSegment& s);
  Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> row_vector(const ParamSegment& s) const;

  FieldConfig config_;
  HashGrid grid_;
  ParamVector<T> params_;
  std::vector<ParamSegment> segments_;
  ParamSegment tables_, sdf_w1_, sdf_b1_, sdf_w2_, sdf_b2_, embeddings_, log_s_;
  std::vector<ParamSegment> color_w_, color_b_;
};

/// SDF values at x + eps * e_k and x - eps * e_k, ordered +x, -x, +y, -y, +z, -z.
template <class T>
using AxisSamples = std::array<T, 6>;

/// Central-difference gradient of any SDF callable using exactly six
/// evaluations; the samples are handed back for the Laplacian.
template <class T, class Sdf>
Vec3T<T> numerical_gradient(Sdf&& sdf, const Vec3T<T>& x, T eps, AxisSamples<T>* samples = nullptr) {
  if (!(eps > T(0))) throw std::invalid_argument("numerical_gradient: eps must be positive");
  AxisSamples<T> s;
  Vec3T<T> g;
  for (int k = 0; k < 3; ++k) {
    Vec3T<T> p = x, m = x;
    p[k] += eps;
    m[k] -= eps;
    s[2 * k] = sdf(p);
    s[2 * k + 1] = sdf(m);
    g[k] = (s[2 * k] - s[2 * k + 1]) / (T(2) * eps);
  }
  if (samples) *samples = s;
  return g;
}

/// Discrete Laplacian from the center value and the six axis samples.
template <class T>
T numerical_laplacian(T center, const AxisSamples<T>& samples, T eps) {
  T sum = T(0);
  for (int k = 0; k < 3; ++k) sum += samples[2 * k] + samples[2 * k + 1] - T(2) * center;
  return sum / (eps * eps);
}

/// Copies parameters between fields of identical layout, converting
/// precision (float training field <-> double oracle field).
template <class T, class U>
void copy_parameters(const NeuralField<U>& from, NeuralField<T>& to) {
  auto src = from.parameters();
  auto dst = to.parameters();
  if (src.size() != dst.size()) throw std::invalid_argument("field layouts differ");
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
}

}  // namespace hashsdf
