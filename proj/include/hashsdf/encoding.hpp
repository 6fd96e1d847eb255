#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include <Eigen/Core>

#include "hashsdf/rng.hpp"

namespace hashsdf {

template <class T>
using Vec3T = Eigen::Matrix<T, 3, 1>;

/// Geometry of the multi-resolution grid. Resolutions count cells per
/// axis across the domain cube [-1, 1]^3, so the cell size at a level with
/// resolution V is 2 / V.
struct EncodingConfig {
  int levels = 16;
  int min_resolution = 32;
  int max_resolution = 2048;
  int channels = 8;
  std::uint32_t table_size = 1u << 22;

  /// Per-level growth factor b.
  double growth() const;
  void validate() const;
};

/// V_l = floor(V_min * b^(l-1)), l = 1..L.
std::vector<int> level_resolutions(const EncodingConfig& config);

/// Nominal (unfloored) cell size 2 / (V_min * b^l) of zero-based level l.
double nominal_cell_size(const EncodingConfig& config, int level);

inline constexpr std::uint32_t kHashPrimeY = 2654435761u;
inline constexpr std::uint32_t kHashPrimeZ = 805459861u;

/// Row of the level's feature table for a lattice corner. Dense row-major
/// (x fastest) when the level's (V+1)^3 corners fit in the table, otherwise
/// the XOR-of-primes spatial hash modulo the table size.
std::uint32_t hash_index(const std::array<int, 3>& corner, int level, const EncodingConfig& config);

/// Precomputed per-level layout of the feature tables inside one flat
/// parameter span (level-major, then row, then channel).
class HashGrid {
 public:
  explicit HashGrid(EncodingConfig config);

  const EncodingConfig& config() const { return config_; }
  int levels() const { return config_.levels; }
  int channels() const { return config_.channels; }
  int feature_dim() const { return config_.levels * config_.channels; }
  int resolution(int level) const { return resolutions_[level]; }
  const std::vector<int>& resolutions() const { return resolutions_; }
  bool dense(int level) const { return dense_[level] != 0; }
  std::size_t rows(int level) const { return rows_[level]; }
  /// Scalar offset of the level's table within the parameter span.
  std::size_t offset(int level) const { return offsets_[level]; }
  std::size_t parameter_count() const { return offsets_.back(); }

  std::uint32_t row(int level, int ix, int iy, int iz) const;

 private:
  EncodingConfig config_;
  std::vector<int> resolutions_;
  std::vector<std::uint8_t> dense_;
  std::vector<std::size_t> rows_;
  std::vector<std::size_t> offsets_;
};

/// Uniform initialization in [-scale, scale].
template <class T>
void init_tables(std::span<T> tables, Rng& rng, double scale = 1e-4);

struct EncodeFlags {
  bool clamped = false;       ///< input left the domain cube and was clamped
  bool on_cell_face = false;  ///< some coordinate sits exactly on a cell face
};

/// Trilinear hash-grid encoding of one point into `out` (length c * L).
/// Levels >= active_levels are written as exact zeros.
template <class T>
EncodeFlags encode(const Vec3T<T>& x, const HashGrid& grid, std::span<const T> tables, int active_levels,
                   std::span<T> out);

/// d(encoding)/dx as a row-major (c * L) x 3 matrix written into `out`.
template <class T>
EncodeFlags encode_grad_analytic(const Vec3T<T>& x, const HashGrid& grid, std::span<const T> tables,
                                 int active_levels, std::span<T> out);

/// Per-point, per-level corner rows and trilinear weights recorded by the
/// batched encoder for the backward pass.
template <class T>
struct EncodingCache {
  int active_levels = 0;
  std::size_t points = 0;
  bool with_weight_gradients = false;
  std::vector<std::uint32_t> rows;          // [point][level][8]
  std::vector<T> weights;                   // [point][level][8]
  std::vector<T> weight_gradients;          // [point][level][8][3], d weight / dx
  std::size_t clamped = 0;

  std::size_t slot(std::size_t point, int level) const {
    return (point * static_cast<std::size_t>(active_levels) + level) * 8;
  }
};

/// Encodes a batch. Row p of `out` (stride `out_stride`) receives the c * L
/// features of points[p]. When `cache` is given the interpolation stencils
/// are recorded; `weight_gradients` additionally records dweight/dx.
template <class T>
void encode_batch(std::span<const Vec3T<T>> points, const HashGrid& grid, std::span<const T> tables,
                  int active_levels, T* out, std::size_t out_stride, EncodingCache<T>* cache = nullptr,
                  bool weight_gradients = false);

/// Feature Jacobians for a cached batch: jac[k] row p (stride `stride`)
/// receives d features / d x_k, inactive levels zero.
template <class T>
void encode_jacobian_batch(const HashGrid& grid, std::span<const T> tables, const EncodingCache<T>& cache,
                           std::array<T*, 3> jac, std::size_t stride);

/// Accumulates d loss / d tables given d loss / d features.
template <class T>
void encode_backward(const HashGrid& grid, const EncodingCache<T>& cache, const T* dfeatures,
                     std::size_t stride, std::span<T> dtables);

/// Accumulates d loss / d tables given d loss / d (feature Jacobian), one
/// (points x c*L) matrix per spatial axis.
template <class T>
void encode_jacobian_backward(const HashGrid& grid, const EncodingCache<T>& cache,
                              std::array<const T*, 3> djac, std::size_t stride, std::span<T> dtables);

/// Fourier features (sin(2^l pi x), cos(2^l pi x)) per axis for l < L_freq,
/// laid out per frequency as [sin x, sin y, sin z, cos x, cos y, cos z].
/// Frequencies >= active_frequencies are zeroed (coarse-to-fine annealing).
struct FourierFeatures {
  std::vector<double> values;    // 6 * L_freq
  std::vector<double> jacobian;  // row-major (6 * L_freq) x 3
};

FourierFeatures fourier_encode(const Eigen::Vector3d& x, int frequencies, int active_frequencies = -1);

}  // namespace hashsdf
