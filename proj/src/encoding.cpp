#include "hashsdf/encoding.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <type_traits>

#include "hashsdf/error.hpp"

namespace hashsdf {

double EncodingConfig::growth() const {
  if (levels <= 1) return 1.0;
  return std::exp((std::log(static_cast<double>(max_resolution)) - std::log(static_cast<double>(min_resolution))) /
                  (levels - 1));
}

void EncodingConfig::validate() const {
  require(levels >= 1, "encoding needs at least one level");
  require(min_resolution >= 1 && min_resolution <= max_resolution, "need 1 <= V_min <= V_max");
  require(channels >= 1, "encoding needs at least one channel");
  require(table_size >= 1 && (table_size & (table_size - 1)) == 0, "table size must be a power of two");
}

std::vector<int> level_resolutions(const EncodingConfig& config) {
  config.validate();
  const double b = config.growth();
  std::vector<int> out(config.levels);
  for (int l = 0; l < config.levels; ++l) {
    // The relative slack absorbs rounding in b^(L-1) so the last level is V_max.
    const double v = config.min_resolution * std::pow(b, l);
    out[l] = static_cast<int>(std::floor(v * (1.0 + 1e-12)));
  }
  out.front() = config.min_resolution;
  out.back() = config.levels > 1 ? config.max_resolution : config.min_resolution;
  return out;
}

double nominal_cell_size(const EncodingConfig& config, int level) {
  return 2.0 / (config.min_resolution * std::pow(config.growth(), level));
}

namespace {

std::uint64_t corner_count(int resolution) {
  const std::uint64_t n = static_cast<std::uint64_t>(resolution) + 1;
  return n * n * n;
}

std::uint32_t spatial_hash(std::uint32_t x, std::uint32_t y, std::uint32_t z, std::uint32_t table_size) {
  return (x ^ (y * kHashPrimeY) ^ (z * kHashPrimeZ)) & (table_size - 1);
}

}  // namespace

std::uint32_t hash_index(const std::array<int, 3>& corner, int level, const EncodingConfig& config) {
  const auto res = level_resolutions(config);
  require(level >= 0 && level < config.levels, "level out of range");
  const int v = res[level];
  for (int k = 0; k < 3; ++k) require(corner[k] >= 0 && corner[k] <= v, "corner outside the level lattice");
  if (corner_count(v) <= config.table_size) {
    const std::uint32_t n = static_cast<std::uint32_t>(v) + 1;
    return static_cast<std::uint32_t>(corner[0]) + n * (static_cast<std::uint32_t>(corner[1]) + n * static_cast<std::uint32_t>(corner[2]));
  }
  return spatial_hash(corner[0], corner[1], corner[2], config.table_size);
}

HashGrid::HashGrid(EncodingConfig config) : config_(config), resolutions_(level_resolutions(config)) {
  offsets_.push_back(0);
  for (int l = 0; l < config_.levels; ++l) {
    const std::uint64_t corners = corner_count(resolutions_[l]);
    dense_.push_back(corners <= config_.table_size ? 1 : 0);
    rows_.push_back(static_cast<std::size_t>(std::min<std::uint64_t>(corners, config_.table_size)));
    offsets_.push_back(offsets_.back() + rows_.back() * config_.channels);
  }
}

std::uint32_t HashGrid::row(int level, int ix, int iy, int iz) const {
  if (dense_[level]) {
    const std::uint32_t n = static_cast<std::uint32_t>(resolutions_[level]) + 1;
    return static_cast<std::uint32_t>(ix) + n * (static_cast<std::uint32_t>(iy) + n * static_cast<std::uint32_t>(iz));
  }
  return spatial_hash(ix, iy, iz, config_.table_size);
}

template <class T>
void init_tables(std::span<T> tables, Rng& rng, double scale) {
  for (T& v : tables) v = static_cast<T>(uniform(rng, -scale, scale));
}

namespace {

// Runs fn with the channel count as a compile-time constant for the usual
// widths so the per-corner loops vectorize; 0 stands for any other width.
template <class Fn>
void dispatch_channels(int c, Fn&& fn) {
  switch (c) {
    case 2: fn(std::integral_constant<int, 2>{}); break;
    case 4: fn(std::integral_constant<int, 4>{}); break;
    case 8: fn(std::integral_constant<int, 8>{}); break;
    default: fn(std::integral_constant<int, 0>{});
  }
}

// dst += a * src over c channels.
template <int C, class T>
inline void axpy(T* dst, T a, const T* src, int c) {
  if constexpr (C > 0) {
    for (int ch = 0; ch < C; ++ch) dst[ch] += a * src[ch];
  } else {
    for (int ch = 0; ch < c; ++ch) dst[ch] += a * src[ch];
  }
}

// Trilinear stencil of one point at one level. Corner b has offsets
// (b & 1, (b >> 1) & 1, (b >> 2) & 1) from the cell's lower corner.
template <class T>
struct Stencil {
  std::array<std::uint32_t, 8> rows;
  std::array<T, 8> weights;
  std::array<std::array<T, 3>, 8> dweights;
};

template <class T>
std::array<T, 3> clamp_to_domain(const Vec3T<T>& x, bool& clamped) {
  std::array<T, 3> out;
  for (int k = 0; k < 3; ++k) {
    const T v = x[k];
    // NaN falls through to the clamp branch too.
    if (!(v >= T(-1) && v <= T(1))) {
      clamped = true;
      out[k] = std::isnan(v) ? T(0) : std::clamp(v, T(-1), T(1));
    } else {
      out[k] = v;
    }
  }
  return out;
}

template <class T>
void locate(const HashGrid& grid, int level, const std::array<T, 3>& xc, Stencil<T>& s, bool& on_face,
            bool with_gradients) {
  const int v = grid.resolution(level);
  const T half = static_cast<T>(v) / T(2);
  int cell[3];
  T beta[3];
  for (int k = 0; k < 3; ++k) {
    const T pos = (xc[k] + T(1)) * half;
    int i = static_cast<int>(std::floor(pos));
    i = std::clamp(i, 0, v - 1);
    cell[k] = i;
    beta[k] = pos - static_cast<T>(i);
    if (beta[k] == T(0) || beta[k] == T(1)) on_face = true;
  }
  // Per-axis parts of the row index and weight; corner b combines part
  // (b >> k) & 1 of axis k.
  std::uint32_t px[2], py[2], pz[2];
  if (grid.dense(level)) {
    const std::uint32_t n = static_cast<std::uint32_t>(v) + 1;
    for (int o = 0; o < 2; ++o) {
      px[o] = static_cast<std::uint32_t>(cell[0] + o);
      py[o] = n * static_cast<std::uint32_t>(cell[1] + o);
      pz[o] = n * n * static_cast<std::uint32_t>(cell[2] + o);
    }
    for (int b = 0; b < 8; ++b) s.rows[b] = px[b & 1] + py[(b >> 1) & 1] + pz[(b >> 2) & 1];
  } else {
    const std::uint32_t mask = static_cast<std::uint32_t>(grid.config().table_size) - 1;
    for (int o = 0; o < 2; ++o) {
      px[o] = static_cast<std::uint32_t>(cell[0] + o);
      py[o] = static_cast<std::uint32_t>(cell[1] + o) * kHashPrimeY;
      pz[o] = static_cast<std::uint32_t>(cell[2] + o) * kHashPrimeZ;
    }
    for (int b = 0; b < 8; ++b) s.rows[b] = (px[b & 1] ^ py[(b >> 1) & 1] ^ pz[(b >> 2) & 1]) & mask;
  }
  const T wx[2] = {T(1) - beta[0], beta[0]}, wy[2] = {T(1) - beta[1], beta[1]}, wz[2] = {T(1) - beta[2], beta[2]};
  for (int b = 0; b < 8; ++b) {
    const int ox = b & 1, oy = (b >> 1) & 1, oz = (b >> 2) & 1;
    s.weights[b] = wx[ox] * wy[oy] * wz[oz];
  }
  if (with_gradients) {
    const T d[2] = {-half, half};
    for (int b = 0; b < 8; ++b) {
      const int ox = b & 1, oy = (b >> 1) & 1, oz = (b >> 2) & 1;
      s.dweights[b][0] = d[ox] * wy[oy] * wz[oz];
      s.dweights[b][1] = d[oy] * wx[ox] * wz[oz];
      s.dweights[b][2] = d[oz] * wx[ox] * wy[oy];
    }
  }
}

}  // namespace

template <class T>
EncodeFlags encode(const Vec3T<T>& x, const HashGrid& grid, std::span<const T> tables, int active_levels,
                   std::span<T> out) {
  require(out.size() == static_cast<std::size_t>(grid.feature_dim()), "feature buffer has wrong length");
  require(active_levels >= 0 && active_levels <= grid.levels(), "active level count out of range");
  EncodeFlags flags;
  const auto xc = clamp_to_domain(x, flags.clamped);
  const int c = grid.channels();
  std::fill(out.begin(), out.end(), T(0));
  Stencil<T> s;
  for (int l = 0; l < active_levels; ++l) {
    locate(grid, l, xc, s, flags.on_cell_face, false);
    const T* table = tables.data() + grid.offset(l);
    T* feat = out.data() + l * c;
    for (int b = 0; b < 8; ++b) {
      const T* entry = table + static_cast<std::size_t>(s.rows[b]) * c;
      for (int ch = 0; ch < c; ++ch) feat[ch] += s.weights[b] * entry[ch];
    }
  }
  return flags;
}

template <class T>
EncodeFlags encode_grad_analytic(const Vec3T<T>& x, const HashGrid& grid, std::span<const T> tables,
                                 int active_levels, std::span<T> out) {
  require(out.size() == static_cast<std::size_t>(grid.feature_dim()) * 3, "jacobian buffer has wrong length");
  require(active_levels >= 0 && active_levels <= grid.levels(), "active level count out of range");
  EncodeFlags flags;
  const auto xc = clamp_to_domain(x, flags.clamped);
  const int c = grid.channels();
  std::fill(out.begin(), out.end(), T(0));
  Stencil<T> s;
  for (int l = 0; l < active_levels; ++l) {
    locate(grid, l, xc, s, flags.on_cell_face, true);
    const T* table = tables.data() + grid.offset(l);
    for (int b = 0; b < 8; ++b) {
      const T* entry = table + static_cast<std::size_t>(s.rows[b]) * c;
      for (int ch = 0; ch < c; ++ch)
        for (int k = 0; k < 3; ++k) out[(l * c + ch) * 3 + k] += s.dweights[b][k] * entry[ch];
    }
  }
  return flags;
}

template <class T>
void encode_batch(std::span<const Vec3T<T>> points, const HashGrid& grid, std::span<const T> tables,
                  int active_levels, T* out, std::size_t out_stride, EncodingCache<T>* cache,
                  bool weight_gradients) {
  require(active_levels >= 0 && active_levels <= grid.levels(), "active level count out of range");
  const int c = grid.channels();
  const int dim = grid.feature_dim();
  if (cache) {
    cache->active_levels = active_levels;
    cache->points = points.size();
    cache->with_weight_gradients = weight_gradients;
    cache->clamped = 0;
    const std::size_t slots = points.size() * static_cast<std::size_t>(active_levels) * 8;
    cache->rows.resize(slots);
    cache->weights.resize(slots);
    cache->weight_gradients.resize(weight_gradients ? slots * 3 : 0);
  }
  dispatch_channels(c, [&](auto width) {
    constexpr int C = decltype(width)::value;
    Stencil<T> s;
    for (std::size_t p = 0; p < points.size(); ++p) {
      bool clamped = false, on_face = false;
      const auto xc = clamp_to_domain(points[p], clamped);
      if (cache && clamped) ++cache->clamped;
      T* row = out + p * out_stride;
      std::fill(row, row + dim, T(0));
      for (int l = 0; l < active_levels; ++l) {
        locate(grid, l, xc, s, on_face, weight_gradients);
        const T* table = tables.data() + grid.offset(l);
        T* feat = row + l * c;
        for (int b = 0; b < 8; ++b)
          axpy<C>(feat, s.weights[b], table + static_cast<std::size_t>(s.rows[b]) * c, c);
        if (cache) {
          const std::size_t base = cache->slot(p, l);
          std::copy(s.rows.begin(), s.rows.end(), cache->rows.begin() + base);
          std::copy(s.weights.begin(), s.weights.end(), cache->weights.begin() + base);
          if (weight_gradients)
            for (int b = 0; b < 8; ++b)
              for (int k = 0; k < 3; ++k) cache->weight_gradients[(base + b) * 3 + k] = s.dweights[b][k];
        }
      }
    }
  });
}

template <class T>
void encode_jacobian_batch(const HashGrid& grid, std::span<const T> tables, const EncodingCache<T>& cache,
                           std::array<T*, 3> jac, std::size_t stride) {
  require(cache.with_weight_gradients, "encoding cache lacks weight gradients");
  const int c = grid.channels();
  const int dim = grid.feature_dim();
  dispatch_channels(c, [&](auto width) {
    constexpr int C = decltype(width)::value;
    for (std::size_t p = 0; p < cache.points; ++p) {
      for (int k = 0; k < 3; ++k) std::fill(jac[k] + p * stride, jac[k] + p * stride + dim, T(0));
      for (int l = 0; l < cache.active_levels; ++l) {
        const std::size_t base = cache.slot(p, l);
        const T* table = tables.data() + grid.offset(l);
        for (int b = 0; b < 8; ++b) {
          const T* entry = table + static_cast<std::size_t>(cache.rows[base + b]) * c;
          const T* dw = &cache.weight_gradients[(base + b) * 3];
          for (int k = 0; k < 3; ++k) axpy<C>(jac[k] + p * stride + l * c, dw[k], entry, c);
        }
      }
    }
  });
}

template <class T>
void encode_backward(const HashGrid& grid, const EncodingCache<T>& cache, const T* dfeatures,
                     std::size_t stride, std::span<T> dtables) {
  const int c = grid.channels();
  dispatch_channels(c, [&](auto width) {
    constexpr int C = decltype(width)::value;
    for (std::size_t p = 0; p < cache.points; ++p) {
      const T* dfeat = dfeatures + p * stride;
      for (int l = 0; l < cache.active_levels; ++l) {
        const std::size_t base = cache.slot(p, l);
        T* table = dtables.data() + grid.offset(l);
        const T* dlevel = dfeat + l * c;
        for (int b = 0; b < 8; ++b)
          axpy<C>(table + static_cast<std::size_t>(cache.rows[base + b]) * c, cache.weights[base + b], dlevel, c);
      }
    }
  });
}

template <class T>
void encode_jacobian_backward(const HashGrid& grid, const EncodingCache<T>& cache,
                              std::array<const T*, 3> djac, std::size_t stride, std::span<T> dtables) {
  require(cache.with_weight_gradients, "encoding cache lacks weight gradients");
  const int c = grid.channels();
  dispatch_channels(c, [&](auto width) {
    constexpr int C = decltype(width)::value;
    for (std::size_t p = 0; p < cache.points; ++p) {
      for (int l = 0; l < cache.active_levels; ++l) {
        const std::size_t base = cache.slot(p, l);
        T* table = dtables.data() + grid.offset(l);
        for (int b = 0; b < 8; ++b) {
          T* entry = table + static_cast<std::size_t>(cache.rows[base + b]) * c;
          const T* dw = &cache.weight_gradients[(base + b) * 3];
          for (int k = 0; k < 3; ++k) axpy<C>(entry, dw[k], djac[k] + p * stride + l * c, c);
        }
      }
    }
  });
}

FourierFeatures fourier_encode(const Eigen::Vector3d& x, int frequencies, int active_frequencies) {
  require(frequencies >= 0, "frequency count must be non-negative");
  if (active_frequencies < 0) active_frequencies = frequencies;
  FourierFeatures out;
  out.values.assign(static_cast<std::size_t>(6 * frequencies), 0.0);
  out.jacobian.assign(static_cast<std::size_t>(18 * frequencies), 0.0);
  for (int l = 0; l < std::min(frequencies, active_frequencies); ++l) {
    const double omega = std::ldexp(std::numbers::pi, l);
    for (int k = 0; k < 3; ++k) {
      const double s = std::sin(omega * x[k]);
      const double co = std::cos(omega * x[k]);
      const int sin_row = 6 * l + k;
      const int cos_row = 6 * l + 3 + k;
      out.values[sin_row] = s;
      out.values[cos_row] = co;
      out.jacobian[sin_row * 3 + k] = omega * co;
      out.jacobian[cos_row * 3 + k] = -omega * s;
    }
  }
  return out;
}

#define HASHSDF_INSTANTIATE(T)                                                                                \
  template void init_tables<T>(std::span<T>, Rng&, double);                                                   \
  template EncodeFlags encode<T>(const Vec3T<T>&, const HashGrid&, std::span<const T>, int, std::span<T>);    \
  template EncodeFlags encode_grad_analytic<T>(const Vec3T<T>&, const HashGrid&, std::span<const T>, int,     \
                                               std::span<T>);                                                 \
  template void encode_batch<T>(std::span<const Vec3T<T>>, const HashGrid&, std::span<const T>, int, T*,      \
                                std::size_t, EncodingCache<T>*, bool);                                        \
  template void encode_jacobian_batch<T>(const HashGrid&, std::span<const T>, const EncodingCache<T>&,        \
                                         std::array<T*, 3>, std::size_t);                                     \
  template void encode_backward<T>(const HashGrid&, const EncodingCache<T>&, const T*, std::size_t,           \
                                   std::span<T>);                                                             \
  template void encode_jacobian_backward<T>(const HashGrid&, const EncodingCache<T>&, std::array<const T*, 3>, \
                                            std::size_t, std::span<T>);

HASHSDF_INSTANTIATE(float)
HASHSDF_INSTANTIATE(double)

#undef HASHSDF_INSTANTIATE

}  // namespace hashsdf
