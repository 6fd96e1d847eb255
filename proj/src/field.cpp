#include "hashsdf/field.hpp"

#include <cmath>
#include <numbers>
#include <sstream>

#include "hashsdf/error.hpp"

namespace hashsdf {

void FieldConfig::validate() const {
  encoding.validate();
  require(sdf_hidden >= 1 && color_hidden >= 1 && color_layers >= 1, "network widths must be positive");
  require(geometric_features >= 0, "geometric feature width must be non-negative");
  require(softplus_beta > 0.0, "softplus beta must be positive");
  require(sh_degree == 4, "only degree-4 (16 coefficient) view encoding is supported");
  require(!appearance || (appearance_dim >= 1 && image_count >= 0), "bad appearance embedding shape");
  require(init_sharpness > 0.0, "initial sharpness must be positive");
}

template <class T>
std::array<T, 16> spherical_harmonics(const Vec3T<T>& d) {
  const T x = d.x(), y = d.y(), z = d.z();
  const T xx = x * x, yy = y * y, zz = z * z;
  return {T(0.28209479177387814),
          T(-0.48860251190291987) * y,
          T(0.48860251190291987) * z,
          T(-0.48860251190291987) * x,
          T(1.0925484305920792) * x * y,
          T(-1.0925484305920792) * y * z,
          T(0.94617469575755997) * zz - T(0.31539156525251999),
          T(-1.0925484305920792) * x * z,
          T(0.54627421529603959) * (xx - yy),
          T(0.59004358992664352) * y * (T(-3) * xx + yy),
          T(2.8906114426405538) * x * y * z,
          T(0.45704579946446572) * y * (T(1) - T(5) * zz),
          T(0.3731763325901154) * z * (T(5) * zz - T(3)),
          T(0.45704579946446572) * x * (T(1) - T(5) * zz),
          T(1.4453057213202769) * z * (xx - yy),
          T(0.59004358992664352) * x * (-xx + T(3) * yy)};
}

namespace {

// Softplus with sharpness beta and its first three derivatives.
template <class T>
T softplus(T z, T beta) {
  const T bz = beta * z;
  return (std::max(bz, T(0)) + std::log1p(std::exp(-std::abs(bz)))) / beta;
}

// Softplus and its derivative for a whole matrix, sharing one vectorized exp.
template <class T>
void softplus_rows(const RowMatrix<T>& z, T beta, RowMatrix<T>& value, RowMatrix<T>& slope) {
  // Capped so e stays a normal float; subnormal arithmetic is very slow.
  const Eigen::Array<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> e =
      (-(beta * z.array()).abs().min(T(80))).exp();
  // e lies in (0, 1], where log(1 + e) is accurate and, unlike log1p, vectorized.
  value = (((beta * z.array()).max(T(0)) + (T(1) + e).log()) / beta).matrix();
  // logistic(beta z): 1 / (1 + e) for z >= 0, e / (1 + e) below; branch free.
  slope = ((z.array() >= T(0)).template cast<T>().max(e) / (T(1) + e)).matrix();
}

template <class T>
T logistic(T v) {
  return v >= T(0) ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
}

}  // namespace

template <class T>
NeuralField<T>::NeuralField(const FieldConfig& config, std::uint64_t seed)
    : config_(config), grid_((config.validate(), config.encoding)) {
  const int d = config_.sdf_input_dim();
  const int h = config_.sdf_hidden;
  const int out = 1 + config_.geometric_features;

  tables_ = add_segment("grid", static_cast<int>(grid_.parameter_count() / config_.encoding.channels),
                        config_.encoding.channels);
  sdf_w1_ = add_segment("sdf.w1", h, d);
  sdf_b1_ = add_segment("sdf.b1", 1, h);
  sdf_w2_ = add_segment("sdf.w2", out, h);
  sdf_b2_ = add_segment("sdf.b2", 1, out);
  int fan_in = config_.color_input_dim();
  for (int i = 0; i <= config_.color_layers; ++i) {
    const int fan_out = i == config_.color_layers ? 3 : config_.color_hidden;
    color_w_.push_back(add_segment("color.w" + std::to_string(i), fan_out, fan_in));
    color_b_.push_back(add_segment("color.b" + std::to_string(i), 1, fan_out));
    fan_in = fan_out;
  }
  embeddings_ = add_segment("embeddings", config_.appearance ? config_.image_count : 0,
                            config_.appearance ? config_.appearance_dim : 0);
  log_s_ = add_segment("log_s", 1, 1);
  params_.assign(segments_.back().offset + segments_.back().size, T(0));

  Rng rng = make_stream(seed, {0x4649454cULL});
  init_tables<T>(tables(), rng);
  auto uniform_fill = [&](const ParamSegment& s, double bound) {
    for (std::size_t i = 0; i < s.size; ++i) params_[s.offset + i] = static_cast<T>(uniform(rng, -bound, bound));
  };
  uniform_fill(sdf_w1_, 1.0 / std::sqrt(static_cast<double>(d)));
  uniform_fill(sdf_w2_, 1.0 / std::sqrt(static_cast<double>(h)));
  for (std::size_t i = 0; i < color_w_.size(); ++i) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(color_w_[i].cols));
    uniform_fill(color_w_[i], bound);
    uniform_fill(color_b_[i], bound);
  }
  params_[log_s_.offset] = static_cast<T>(std::log(config_.init_sharpness));
}

template <class T>
ParamSegment& NeuralField<T>::add_segment(const std::string& name, int rows, int cols) {
  ParamSegment s;
  s.name = name;
  s.offset = segments_.empty() ? 0 : segments_.back().offset + segments_.back().size;
  s.rows = rows;
  s.cols = cols;
  s.size = static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols);
  segments_.push_back(s);
  return segments_.back();
}

template <class T>
const ParamSegment& NeuralField<T>::segment(const std::string& name) const {
  for (const auto& s : segments_)
    if (s.name == name) return s;
  fail(ErrorCode::InvalidInput, "unknown parameter segment '" + name + "'");
}

template <class T>
std::span<T> NeuralField<T>::segment_values(const std::string& name) {
  const auto& s = segment(name);
  return {params_.data() + s.offset, s.size};
}

template <class T>
std::span<const T> NeuralField<T>::segment_values(const std::string& name) const {
  const auto& s = segment(name);
  return {params_.data() + s.offset, s.size};
}

template <class T>
Eigen::Map<RowMatrix<T>> NeuralField<T>::matrix(const ParamSegment& s) {
  return {params_.data() + s.offset, s.rows, s.cols};
}

template <class T>
Eigen::Map<const RowMatrix<T>> NeuralField<T>::matrix(const ParamSegment& s) const {
  return {params_.data() + s.offset, s.rows, s.cols};
}

template <class T>
Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> NeuralField<T>::row_vector(const ParamSegment& s) {
  return {params_.data() + s.offset, static_cast<Eigen::Index>(s.size)};
}

template <class T>
Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> NeuralField<T>::row_vector(const ParamSegment& s) const {
  return {params_.data() + s.offset, static_cast<Eigen::Index>(s.size)};
}

template <class T>
T NeuralField<T>::sharpness() const {
  return std::exp(log_sharpness());
}

template <class T>
void NeuralField<T>::set_sharpness(T s) {
  require(s > T(0), "sharpness must be positive");
  params_[log_s_.offset] = std::log(s);
}

template <class T>
void NeuralField<T>::init_sphere(double radius) {
  require(radius > 0.0 && radius < 1.0, "sphere radius must lie in (0, 1)");
  const int h = config_.sdf_hidden;
  const int pos = grid_.feature_dim();
  auto w1 = matrix(sdf_w1_);
  auto w2 = matrix(sdf_w2_);
  auto b1 = row_vector(sdf_b1_);
  auto b2 = row_vector(sdf_b2_);

  // Hidden units are ramps u_j . x along golden-spiral directions; their sum
  // is proportional to |x|. Hash-feature inputs start disconnected.
  w1.setZero();
  b1.setZero();
  const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
  std::vector<Eigen::Vector3d> dirs(h);
  for (int j = 0; j < h; ++j) {
    const double z = 1.0 - (2.0 * j + 1.0) / h;
    const double r = std::sqrt(std::max(0.0, 1.0 - z * z));
    const double phi = golden * j;
    dirs[j] = Eigen::Vector3d(r * std::cos(phi), r * std::sin(phi), z);
    for (int k = 0; k < 3; ++k) w1(j, pos + k) = static_cast<T>(dirs[j][k]);
  }

  // Least-squares fit of a * sum_j softplus(u_j . x) + b to |x| - radius
  // over uniform samples of the domain cube.
  Rng rng = make_stream(0x5350484552ULL, {static_cast<std::uint64_t>(h)});
  const double beta = config_.softplus_beta;
  double sxx = 0, sx = 0, sy = 0, sxy = 0;
  const int samples = 8192;
  for (int i = 0; i < samples; ++i) {
    const Eigen::Vector3d x(uniform(rng, -1, 1), uniform(rng, -1, 1), uniform(rng, -1, 1));
    double s = 0.0;
    for (int j = 0; j < h; ++j) s += softplus(dirs[j].dot(x), beta);
    const double y = x.norm() - radius;
    sxx += s * s;
    sx += s;
    sy += y;
    sxy += s * y;
  }
  const double n = samples;
  const double a = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  const double b = (sy - a * sx) / n;
  w2.row(0).setConstant(static_cast<T>(a));
  b2[0] = static_cast<T>(b);
  for (int o = 1; o < w2.rows(); ++o) {
    for (int j = 0; j < h; ++j) w2(o, j) = static_cast<T>(uniform(rng, -1.0, 1.0) / std::sqrt(static_cast<double>(h)));
    b2[o] = T(0);
  }
}

template <class T>
void NeuralField<T>::sdf_forward(std::span<const Vec3T<T>> points, int active_levels, SdfBatch<T>& batch,
                                 bool derivatives) const {
  const auto n = static_cast<Eigen::Index>(points.size());
  const int d = config_.sdf_input_dim();
  const int h = config_.sdf_hidden;
  const int dim = grid_.feature_dim();
  const T beta = static_cast<T>(config_.softplus_beta);
  const auto w1 = matrix(sdf_w1_);
  const auto w2 = matrix(sdf_w2_);

  batch.size = points.size();
  batch.active_levels = active_levels;
  batch.derivatives = derivatives;
  batch.input.resize(n, d);
  encode_batch<T>(points, grid_, tables(), active_levels, batch.input.data(), d, &batch.cache, derivatives);
  for (Eigen::Index p = 0; p < n; ++p)
    for (int k = 0; k < 3; ++k) batch.input(p, dim + k) = points[p][k];

  batch.pre.noalias() = batch.input * w1.transpose();
  batch.pre.rowwise() += row_vector(sdf_b1_);
  softplus_rows(batch.pre, beta, batch.hidden, batch.slope);
  batch.output.noalias() = batch.hidden * w2.transpose();
  batch.output.rowwise() += row_vector(sdf_b2_);

  if (!derivatives) return;
  for (int k = 0; k < 3; ++k) {
    batch.jacobian[k].setZero(n, d);
    for (Eigen::Index p = 0; p < n; ++p) batch.jacobian[k](p, dim + k) = T(1);
  }
  encode_jacobian_batch<T>(grid_, tables(), batch.cache,
                           {batch.jacobian[0].data(), batch.jacobian[1].data(), batch.jacobian[2].data()}, d);
  const RowMatrix<T>& s1 = batch.slope;
  const RowMatrix<T> s2 = s1.unaryExpr([beta](T s) { return beta * s * (T(1) - s); });
  const auto w = w2.row(0);
  const RowMatrix<T> m = s1.array().rowwise() * w.array();
  const RowMatrix<T> ws2 = s2.array().rowwise() * w.array();
  batch.gradient.resize(n, 3);
  batch.laplacian.setZero(n);
  for (int k = 0; k < 3; ++k) {
    batch.q[k].noalias() = batch.jacobian[k] * w1.transpose();
    batch.gradient.col(k) = (batch.q[k].array() * m.array()).rowwise().sum();
    batch.laplacian += (batch.q[k].array().square() * ws2.array()).rowwise().sum().matrix();
  }
  (void)h;
}

template <class T>
void NeuralField<T>::sdf_values(std::span<const Vec3T<T>> points, int active_levels, std::span<T> out) const {
  require(out.size() == points.size(), "output buffer has wrong length");
  const int d = config_.sdf_input_dim();
  const int dim = grid_.feature_dim();
  const T beta = static_cast<T>(config_.softplus_beta);
  const auto w1 = matrix(sdf_w1_);
  const auto w = matrix(sdf_w2_).row(0);
  const T b2 = params_[sdf_b2_.offset];
  // Chunked so huge lattices never materialize one giant activation matrix.
  const std::size_t chunk = 8192;
  RowMatrix<T> input, pre, hidden, slope;
  for (std::size_t start = 0; start < points.size(); start += chunk) {
    const std::size_t count = std::min(chunk, points.size() - start);
    input.resize(static_cast<Eigen::Index>(count), d);
    encode_batch<T>(points.subspan(start, count), grid_, tables(), active_levels, input.data(), d);
    for (std::size_t p = 0; p < count; ++p)
      for (int k = 0; k < 3; ++k) input(static_cast<Eigen::Index>(p), dim + k) = points[start + p][k];
    pre.noalias() = input * w1.transpose();
    pre.rowwise() += row_vector(sdf_b1_);
    softplus_rows(pre, beta, hidden, slope);
    for (std::size_t p = 0; p < count; ++p) {
      T acc = b2;
      const auto row = hidden.row(static_cast<Eigen::Index>(p));
      for (Eigen::Index j = 0; j < row.size(); ++j) acc += w[j] * row[j];
      out[start + p] = acc;
    }
  }
}

template <class T>
void NeuralField<T>::sdf_backward(const SdfBatch<T>& batch, const RowMatrix<T>& doutput,
                                  const RowMatrix<T>* dgradient, const ColVector<T>* dlaplacian,
                                  std::span<T> dparams) const {
  require(dparams.size() == params_.size(), "gradient buffer has wrong length");
  const T beta = static_cast<T>(config_.softplus_beta);
  const auto w1 = matrix(sdf_w1_);
  const auto w2 = matrix(sdf_w2_);
  Eigen::Map<RowMatrix<T>> dw1(dparams.data() + sdf_w1_.offset, sdf_w1_.rows, sdf_w1_.cols);
  Eigen::Map<RowMatrix<T>> dw2(dparams.data() + sdf_w2_.offset, sdf_w2_.rows, sdf_w2_.cols);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db1(dparams.data() + sdf_b1_.offset, sdf_b1_.size);
  Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> db2(dparams.data() + sdf_b2_.offset, sdf_b2_.size);
  std::span<T> dtables(dparams.data() + tables_.offset, tables_.size);

  const RowMatrix<T>& s1 = batch.slope;
  dw2.noalias() += doutput.transpose() * batch.hidden;
  db2 += doutput.colwise().sum();
  RowMatrix<T> dpre;
  dpre.noalias() = doutput * w2;  // kept apart so Eigen uses its blocked product
  dpre.array() *= s1.array();

  const bool second_order = batch.derivatives && (dgradient || dlaplacian);
  if (second_order) {
    const Eigen::Index n = batch.pre.rows();
    const int h = config_.sdf_hidden;
    const RowMatrix<T> s2 = s1.unaryExpr([beta](T s) { return beta * s * (T(1) - s); });
    const auto w = w2.row(0);
    std::array<RowMatrix<T>, 3> dq;
    for (auto& m : dq) m.setZero(n, h);
    Eigen::Matrix<T, 1, Eigen::Dynamic> dw = Eigen::Matrix<T, 1, Eigen::Dynamic>::Zero(h);
    if (dgradient) {
      // g_k = sum_j q_jk * s1_j * w_j
      const RowMatrix<T> m = s1.array().rowwise() * w.array();
      RowMatrix<T> dm = RowMatrix<T>::Zero(n, h);
      for (int k = 0; k < 3; ++k) {
        dq[k] += (m.array().colwise() * dgradient->col(k).array()).matrix();
        dm += (batch.q[k].array().colwise() * dgradient->col(k).array()).matrix();
      }
      dw += dm.cwiseProduct(s1).colwise().sum();
      dpre += (dm.cwiseProduct(s2).array().rowwise() * w.array()).matrix();
    }
    if (dlaplacian) {
      // lap = sum_j w_j s2_j sum_k q_jk^2
      const RowMatrix<T> s3 = s1.unaryExpr([beta](T s) { return beta * beta * s * (T(1) - s) * (T(1) - T(2) * s); });
      RowMatrix<T> r = RowMatrix<T>::Zero(n, h);
      for (int k = 0; k < 3; ++k) r += batch.q[k].cwiseAbs2();
      const auto& dl = dlaplacian->array();
      const RowMatrix<T> ws2 = s2.array().rowwise() * w.array();
      for (int k = 0; k < 3; ++k)
        dq[k] += ((T(2) * ws2.cwiseProduct(batch.q[k])).array().colwise() * dl).matrix();
      dw += (s2.cwiseProduct(r).array().colwise() * dl).matrix().colwise().sum();
      dpre += ((s3.cwiseProduct(r).array().rowwise() * w.array()).colwise() * dl).matrix();
    }
    dw2.row(0) += dw;
    std::array<RowMatrix<T>, 3> djac;
    for (int k = 0; k < 3; ++k) {
      dw1.noalias() += dq[k].transpose() * batch.jacobian[k];
      djac[k].noalias() = dq[k] * w1;
    }
    encode_jacobian_backward<T>(grid_, batch.cache, {djac[0].data(), djac[1].data(), djac[2].data()},
                                static_cast<std::size_t>(w1.cols()), dtables);
  }

  dw1.noalias() += dpre.transpose() * batch.input;
  db1 += dpre.colwise().sum();
  const RowMatrix<T> dinput = dpre * w1;
  encode_backward<T>(grid_, batch.cache, dinput.data(), static_cast<std::size_t>(dinput.cols()), dtables);
}

template <class T>
void NeuralField<T>::color_forward(std::span<const Vec3T<T>> positions, std::span<const Vec3T<T>> normals,
                                   std::span<const Vec3T<T>> view_dirs, const RowMatrix<T>& features,
                                   std::span<const int> images, ColorBatch<T>& batch) const {
  const auto n = static_cast<Eigen::Index>(positions.size());
  require(normals.size() == positions.size() && view_dirs.size() == positions.size() &&
              features.rows() == n && images.size() == positions.size(),
          "color batch inputs have mismatched lengths");
  const int f = config_.geometric_features;
  require(features.cols() == f, "feature width mismatch");
  const int fcol = color_feature_column();
  batch.size = positions.size();
  batch.images.assign(images.begin(), images.end());
  batch.input.setZero(n, config_.color_input_dim());
  for (Eigen::Index p = 0; p < n; ++p) {
    for (int k = 0; k < 3; ++k) {
      batch.input(p, k) = positions[p][k];
      batch.input(p, 3 + k) = normals[p][k];
    }
    const auto sh = spherical_harmonics<T>(view_dirs[p]);
    for (int i = 0; i < config_.sh_dim(); ++i) batch.input(p, 6 + i) = sh[i];
    for (int i = 0; i < f; ++i) batch.input(p, fcol + i) = features(p, i);
    if (config_.appearance && images[p] >= 0 && images[p] < config_.image_count) {
      const T* e = params_.data() + embeddings_.offset + static_cast<std::size_t>(images[p]) * config_.appearance_dim;
      for (int i = 0; i < config_.appearance_dim; ++i) batch.input(p, fcol + f + i) = e[i];
    }
  }
  const int layers = config_.color_layers;
  batch.pre.resize(layers);
  batch.hidden.resize(layers);
  for (int i = 0; i < layers; ++i) {
    const RowMatrix<T>& in = i == 0 ? batch.input : batch.hidden[i - 1];
    batch.pre[i].noalias() = in * matrix(color_w_[i]).transpose();
    batch.pre[i].rowwise() += row_vector(color_b_[i]);
    batch.hidden[i] = batch.pre[i].cwiseMax(T(0));
  }
  RowMatrix<T> logits = batch.hidden.back() * matrix(color_w_[layers]).transpose();
  logits.rowwise() += row_vector(color_b_[layers]);
  batch.rgb = logits.unaryExpr([](T v) { return logistic(v); });
}

template <class T>
RowMatrix<T> NeuralField<T>::color_backward(const ColorBatch<T>& batch, const RowMatrix<T>& drgb,
                                            std::span<T> dparams) const {
  require(dparams.size() == params_.size(), "gradient buffer has wrong length");
  const int layers = config_.color_layers;
  auto dmat = [&](const ParamSegment& s) {
    return Eigen::Map<RowMatrix<T>>(dparams.data() + s.offset, s.rows, s.cols);
  };
  auto dvec = [&](const ParamSegment& s) {
    return Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>>(dparams.data() + s.offset, s.size);
  };
  RowMatrix<T> dpre = drgb.cwiseProduct(batch.rgb.cwiseProduct((T(1) - batch.rgb.array()).matrix()));
  for (int i = layers; i >= 0; --i) {
    const RowMatrix<T>& in = i == 0 ? batch.input : batch.hidden[i - 1];
    auto dw = dmat(color_w_[i]);
    dw.noalias() += dpre.transpose() * in;
    dvec(color_b_[i]) += dpre.colwise().sum();
    RowMatrix<T> din = dpre * matrix(color_w_[i]);
    if (i == 0) {
      dpre = std::move(din);
      break;
    }
    dpre = din.cwiseProduct((batch.pre[i - 1].array() > T(0)).template cast<T>().matrix());
  }
  if (config_.appearance) {
    const int col = color_feature_column() + config_.geometric_features;
    for (std::size_t p = 0; p < batch.size; ++p) {
      const int image = batch.images[p];
      if (image < 0 || image >= config_.image_count) continue;
      T* e = dparams.data() + embeddings_.offset + static_cast<std::size_t>(image) * config_.appearance_dim;
      for (int i = 0; i < config_.appearance_dim; ++i) e[i] += dpre(static_cast<Eigen::Index>(p), col + i);
    }
  }
  return dpre;
}

template <class T>
SdfValue<T> NeuralField<T>::sdf_eval(const Vec3T<T>& x, int active_levels) const {
  SdfBatch<T> batch;
  sdf_forward(std::span<const Vec3T<T>>(&x, 1), active_levels, batch);
  SdfValue<T> out;
  out.sdf = batch.output(0, 0);
  out.features.assign(batch.output.data() + 1, batch.output.data() + batch.output.cols());
  if (!std::isfinite(out.sdf)) {
    std::ostringstream msg;
    msg << "non-finite sdf " << out.sdf << " at (" << x.x() << ", " << x.y() << ", " << x.z()
        << "), active levels " << active_levels;
    fail(ErrorCode::NonFinite, msg.str());
  }
  return out;
}

template <class T>
Vec3T<T> NeuralField<T>::analytical_gradient(const Vec3T<T>& x, int active_levels) const {
  SdfBatch<T> batch;
  sdf_forward(std::span<const Vec3T<T>>(&x, 1), active_levels, batch, true);
  return batch.gradient.row(0).transpose();
}

template <class T>
Vec3T<T> NeuralField<T>::color_eval(const Vec3T<T>& x, const Vec3T<T>& normal, const Vec3T<T>& view_dir,
                                    std::span<const T> features, int image_index) const {
  RowMatrix<T> feat(1, config_.geometric_features);
  require(features.size() == static_cast<std::size_t>(config_.geometric_features), "feature width mismatch");
  for (int i = 0; i < config_.geometric_features; ++i) feat(0, i) = features[i];
  ColorBatch<T> batch;
  color_forward(std::span<const Vec3T<T>>(&x, 1), std::span<const Vec3T<T>>(&normal, 1),
                std::span<const Vec3T<T>>(&view_dir, 1), feat, std::span<const int>(&image_index, 1), batch);
  return batch.rgb.row(0).transpose();
}

template std::array<float, 16> spherical_harmonics<float>(const Vec3T<float>&);
template std::array<double, 16> spherical_harmonics<double>(const Vec3T<double>&);
template class NeuralField<float>;
template class NeuralField<double>;

}  // namespace hashsdf
