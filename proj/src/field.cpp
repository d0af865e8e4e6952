#include "declutter/field.hpp"

#include <cmath>
#include <numbers>
#include <random>

namespace declutter {

void EncodingConfig::validate() const {
  if (l_pos < 1) throw ValidationError("encoding l_pos must be >= 1");
  if (l_dir < 0) throw ValidationError("encoding l_dir must be >= 0");
}

void FieldConfig::validate() const {
  encoding.validate();
  if (depth < 1 || width < 2) throw ValidationError("field depth must be >= 1 and width >= 2");
  if (!(bound_radius > 0.0)) throw ValidationError("field bound_radius must be > 0");
}

double band_weight(int band, double f_max, bool smooth) {
  if (!smooth) return (band + 1 <= f_max) ? 1.0 : 0.0;
  const double whole = std::floor(f_max);
  if (band < whole) return 1.0;
  if (band == static_cast<int>(whole)) return f_max - whole;
  return 0.0;
}

double frequency_max(long t, int bands, long t_freq_end) {
  if (t < 0) throw ValidationError("frequency_max: iteration must be >= 0");
  if (t_freq_end <= 0 || t >= t_freq_end) return static_cast<double>(bands);
  return bands * (static_cast<double>(t) / static_cast<double>(t_freq_end));
}

namespace {

// Writes the encoding of `dims` values into out[0 .. width). Band j uses
// sin/cos(2^j pi p), generated by the double-angle recurrence in double precision.
template <typename T, typename In>
void encode_values(const In* p, int dims, int bands, const double* weights, bool identity, T* out) {
  int row = 0;
  if (identity) {
    for (int i = 0; i < dims; ++i) out[row++] = T(p[i]);
  }
  for (int i = 0; i < dims; ++i) {
    const double a = std::numbers::pi * double(p[i]);
    double s = std::sin(a), c = std::cos(a);
    for (int j = 0; j < bands; ++j) {
      out[row++] = T(weights[j] * s);
      out[row++] = T(weights[j] * c);
      const double s2 = 2.0 * s * c;
      c = (c - s) * (c + s);
      s = s2;
    }
  }
}

// d/dp of the encoding, contracted with the incoming gradient column.
template <typename T>
void encode_backward(const T* p, int dims, int bands, const double* weights, bool identity, const T* grad, T* d_p) {
  int row = 0;
  for (int i = 0; i < dims; ++i) d_p[i] = T(0);
  if (identity) {
    for (int i = 0; i < dims; ++i) d_p[i] += grad[row++];
  }
  for (int i = 0; i < dims; ++i) {
    const double a = std::numbers::pi * double(p[i]);
    double s = std::sin(a), c = std::cos(a);
    double freq = std::numbers::pi;
    double acc = 0.0;
    for (int j = 0; j < bands; ++j) {
      if (weights[j] != 0.0) acc += weights[j] * freq * (c * double(grad[row]) - s * double(grad[row + 1]));
      row += 2;
      const double s2 = 2.0 * s * c;
      c = (c - s) * (c + s);
      s = s2;
      freq *= 2.0;
    }
    d_p[i] += T(acc);
  }
}

std::vector<double> band_weights(int bands, double f_max, bool smooth) {
  std::vector<double> w(bands);
  for (int j = 0; j < bands; ++j) w[j] = band_weight(j, f_max, smooth);
  return w;
}

template <typename T>
T softplus(T x) {
  return x > T(20) ? x : std::log1p(std::exp(x));
}

template <typename T>
T sigmoid(T x) {
  return T(1) / (T(1) + std::exp(-x));
}

}  // namespace

void positional_encoding(std::span<const double> p, int bands, double f_max, bool include_identity, bool smooth,
                         std::span<double> out) {
  const int dims = static_cast<int>(p.size());
  const std::size_t width = std::size_t(dims) * ((include_identity ? 1 : 0) + 2 * bands);
  if (out.size() != width) throw ValidationError("positional_encoding: output width mismatch");
  const auto w = band_weights(bands, f_max, smooth);
  encode_values<double, double>(p.data(), dims, bands, w.data(), include_identity, out.data());
}

template <typename T>
RadianceField<T>::RadianceField(FieldConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& enc = config_.encoding;
  pos_width_ = enc.width(enc.l_pos);
  dir_width_ = enc.width(enc.l_dir);
  color_width_ = std::max(1, config_.width / 2);
  const int w = config_.width;
  for (int l = 0; l < config_.depth; ++l) {
    int in = (l == 0) ? pos_width_ : w;
    if (l > 0 && l == config_.skip_layer) in += pos_width_;
    layers_.push_back(add_layer(in, w));
  }
  density_ = add_layer(w, 1);
  feature_ = add_layer(w, w);
  color_hidden_ = add_layer(w + dir_width_, color_width_);
  color_out_ = add_layer(color_width_, 3);
}

template <typename T>
typename RadianceField<T>::Dense RadianceField<T>::add_layer(int in, int out) {
  Dense d;
  d.in = in;
  d.out = out;
  d.weight = total_;
  total_ += std::size_t(in) * out;
  d.bias = total_;
  total_ += out;
  return d;
}

template <typename T>
std::vector<T> RadianceField<T>::init_parameters(std::uint64_t seed) const {
  std::vector<T> params(total_, T(0));
  std::mt19937_64 rng(seed);
  auto fill = [&](const Dense& d) {
    const double bound = 1.0 / std::sqrt(double(d.in));
    std::uniform_real_distribution<double> u(-bound, bound);
    for (std::size_t i = 0; i < std::size_t(d.in) * d.out; ++i) params[d.weight + i] = T(u(rng));
  };
  for (const auto& d : layers_) fill(d);
  fill(density_);
  fill(feature_);
  fill(color_hidden_);
  fill(color_out_);
  return params;
}

template <typename T>
void RadianceField<T>::forward(std::span<const T> params, std::span<const T> points, std::span<const T> dirs,
                               int samples, double f_max_pos, double f_max_dir, std::span<T> sigma, std::span<T> rgb,
                               FieldCache<T>* cache) const {
  using Map = Eigen::Map<const MatX<T>>;
  using Vec = Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  if (params.size() != total_) throw ValidationError("field: parameter block has the wrong size");
  const int rays = static_cast<int>(dirs.size() / 3);
  const int n_points = static_cast<int>(points.size() / 3);
  if (samples < 1 || n_points != rays * samples) throw ValidationError("field: points must be rays x samples");

  FieldCache<T> local;
  FieldCache<T>& c = cache ? *cache : local;
  c.points = n_points;
  c.rays = rays;
  c.samples = samples;
  c.f_max_pos = f_max_pos;
  c.f_max_dir = f_max_dir;

  const auto& enc = config_.encoding;
  const auto w_pos = band_weights(enc.l_pos, f_max_pos, enc.smooth_mask);
  const auto w_dir = band_weights(enc.l_dir, f_max_dir, enc.smooth_mask);
  const T inv_radius = T(1.0 / config_.bound_radius);
  c.pos_in.resize(3, n_points);
  c.pos_enc.resize(pos_width_, n_points);
  for (int p = 0; p < n_points; ++p) {
    for (int i = 0; i < 3; ++i) c.pos_in(i, p) = (points[std::size_t(p) * 3 + i] - T(config_.bound_center[i])) * inv_radius;
    encode_values<T, T>(c.pos_in.col(p).data(), 3, enc.l_pos, w_pos.data(), enc.include_identity, c.pos_enc.col(p).data());
  }
  c.dir_in.resize(3, rays);
  c.dir_enc.resize(dir_width_, rays);
  for (int r = 0; r < rays; ++r) {
    for (int i = 0; i < 3; ++i) c.dir_in(i, r) = dirs[std::size_t(r) * 3 + i];
    encode_values<T, T>(c.dir_in.col(r).data(), 3, enc.l_dir, w_dir.data(), enc.include_identity, c.dir_enc.col(r).data());
  }

  // Weights are copied into aligned matrices: vectorized products over a Map
  // peel to the first aligned element, so their summation order would depend on
  // where the parameter block happens to sit in memory.
  const int w = config_.width;
  c.hidden.resize(config_.depth);
  for (int l = 0; l < config_.depth; ++l) {
    const Dense& d = layers_[l];
    const MatX<T> weight = Map(params.data() + d.weight, d.out, d.in);
    Vec bias(params.data() + d.bias, d.out);
    MatX<T>& h = c.hidden[l];
    if (l == 0) {
      h.noalias() = weight * c.pos_enc;
    } else if (l == config_.skip_layer) {
      h.noalias() = weight.leftCols(w) * c.hidden[l - 1];
      h.noalias() += weight.rightCols(pos_width_) * c.pos_enc;
    } else {
      h.noalias() = weight * c.hidden[l - 1];
    }
    h.colwise() += bias;
    h = h.cwiseMax(T(0));
  }
  const MatX<T>& top = c.hidden.back();

  {
    const MatX<T> weight = Map(params.data() + density_.weight, 1, w);
    c.density_pre.noalias() = weight * top;
    c.density_pre.array() += params[density_.bias];
  }
  {
    const MatX<T> weight = Map(params.data() + feature_.weight, w, w);
    Vec bias(params.data() + feature_.bias, w);
    c.feature.noalias() = weight * top;
    c.feature.colwise() += bias;
  }
  {
    const MatX<T> weight = Map(params.data() + color_hidden_.weight, color_width_, w + dir_width_);
    Vec bias(params.data() + color_hidden_.bias, color_width_);
    c.color_hidden.noalias() = weight.leftCols(w) * c.feature;
    const MatX<T> dir_term = weight.rightCols(dir_width_) * c.dir_enc;
    for (int r = 0; r < rays; ++r) {
      c.color_hidden.middleCols(std::size_t(r) * samples, samples).colwise() += dir_term.col(r) + bias;
    }
    c.color_hidden = c.color_hidden.cwiseMax(T(0));
  }
  {
    const MatX<T> weight = Map(params.data() + color_out_.weight, 3, color_width_);
    Vec bias(params.data() + color_out_.bias, 3);
    c.rgb.noalias() = weight * c.color_hidden;
    c.rgb.colwise() += bias;
    c.rgb = c.rgb.unaryExpr([](T v) { return sigmoid(v); });
  }

  for (int p = 0; p < n_points; ++p) {
    sigma[p] = softplus(c.density_pre(0, p));
    for (int ch = 0; ch < 3; ++ch) rgb[std::size_t(p) * 3 + ch] = c.rgb(ch, p);
  }
}

template <typename T>
void RadianceField<T>::backward(std::span<const T> params, const FieldCache<T>& c, std::span<const T> d_sigma,
                                std::span<const T> d_rgb, std::span<T> d_params, std::span<T> d_points,
                                std::span<T> d_dirs) const {
  using Map = Eigen::Map<const MatX<T>>;
  using GradMap = Eigen::Map<MatX<T>>;
  using GradVec = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>>;
  using VecX = Eigen::Matrix<T, Eigen::Dynamic, 1>;
  const int n_points = c.points;
  const int w = config_.width;
  const bool want_inputs = !d_points.empty() || !d_dirs.empty();

  // RGB head.
  MatX<T> d_out(3, n_points);
  for (int p = 0; p < n_points; ++p)
    for (int ch = 0; ch < 3; ++ch) {
      const T v = c.rgb(ch, p);
      d_out(ch, p) = d_rgb[std::size_t(p) * 3 + ch] * v * (T(1) - v);
    }
  const MatX<T> w_out = Map(params.data() + color_out_.weight, 3, color_width_);
  GradMap(d_params.data() + color_out_.weight, 3, color_width_) += MatX<T>(d_out * c.color_hidden.transpose());
  GradVec(d_params.data() + color_out_.bias, 3) += VecX(d_out.rowwise().sum());

  MatX<T> d_hidden_c = w_out.transpose() * d_out;
  d_hidden_c = d_hidden_c.cwiseProduct((c.color_hidden.array() > T(0)).matrix().template cast<T>());
  const MatX<T> w_ch = Map(params.data() + color_hidden_.weight, color_width_, w + dir_width_);
  GradMap g_ch(d_params.data() + color_hidden_.weight, color_width_, w + dir_width_);
  g_ch.leftCols(w) += MatX<T>(d_hidden_c * c.feature.transpose());
  MatX<T> d_ray(color_width_, c.rays);
  for (int r = 0; r < c.rays; ++r) d_ray.col(r) = d_hidden_c.middleCols(std::size_t(r) * c.samples, c.samples).rowwise().sum();
  g_ch.rightCols(dir_width_) += MatX<T>(d_ray * c.dir_enc.transpose());
  GradVec(d_params.data() + color_hidden_.bias, color_width_) += VecX(d_ray.rowwise().sum());

  const MatX<T> d_feature = w_ch.leftCols(w).transpose() * d_hidden_c;
  const MatX<T>& top = c.hidden.back();
  const MatX<T> w_feat = Map(params.data() + feature_.weight, w, w);
  GradMap(d_params.data() + feature_.weight, w, w) += MatX<T>(d_feature * top.transpose());
  GradVec(d_params.data() + feature_.bias, w) += VecX(d_feature.rowwise().sum());

  // Density head: softplus' = sigmoid.
  MatX<T> d_pre(1, n_points);
  for (int p = 0; p < n_points; ++p) d_pre(0, p) = d_sigma[p] * sigmoid(c.density_pre(0, p));
  const MatX<T> w_den = Map(params.data() + density_.weight, 1, w);
  GradMap(d_params.data() + density_.weight, 1, w) += MatX<T>(d_pre * top.transpose());
  d_params[density_.bias] += d_pre.sum();

  MatX<T> d_h = w_feat.transpose() * d_feature;
  d_h.noalias() += w_den.transpose() * d_pre;

  MatX<T> d_enc;
  if (want_inputs) d_enc = MatX<T>::Zero(pos_width_, n_points);
  for (int l = config_.depth - 1; l >= 0; --l) {
    const Dense& d = layers_[l];
    const MatX<T> weight = Map(params.data() + d.weight, d.out, d.in);
    GradMap g_weight(d_params.data() + d.weight, d.out, d.in);
    const MatX<T> d_z = d_h.cwiseProduct((c.hidden[l].array() > T(0)).matrix().template cast<T>());
    GradVec(d_params.data() + d.bias, d.out) += VecX(d_z.rowwise().sum());
    if (l == 0) {
      g_weight += MatX<T>(d_z * c.pos_enc.transpose());
      if (want_inputs) d_enc.noalias() += weight.transpose() * d_z;
    } else if (l == config_.skip_layer) {
      g_weight.leftCols(w) += MatX<T>(d_z * c.hidden[l - 1].transpose());
      g_weight.rightCols(pos_width_) += MatX<T>(d_z * c.pos_enc.transpose());
      if (want_inputs) d_enc.noalias() += weight.rightCols(pos_width_).transpose() * d_z;
      d_h.noalias() = weight.leftCols(w).transpose() * d_z;
    } else {
      g_weight += MatX<T>(d_z * c.hidden[l - 1].transpose());
      d_h.noalias() = weight.transpose() * d_z;
    }
  }

  if (!want_inputs) return;
  const auto& enc = config_.encoding;
  const auto w_pos = band_weights(enc.l_pos, c.f_max_pos, enc.smooth_mask);
  const auto w_dir = band_weights(enc.l_dir, c.f_max_dir, enc.smooth_mask);
  if (!d_points.empty()) {
    const T inv_radius = T(1.0 / config_.bound_radius);
    for (int p = 0; p < n_points; ++p) {
      T g[3];
      encode_backward<T>(c.pos_in.col(p).data(), 3, enc.l_pos, w_pos.data(), enc.include_identity, d_enc.col(p).data(), g);
      for (int i = 0; i < 3; ++i) d_points[std::size_t(p) * 3 + i] = g[i] * inv_radius;
    }
  }
  if (!d_dirs.empty()) {
    const MatX<T> d_dir_enc = w_ch.rightCols(dir_width_).transpose() * d_ray;
    for (int r = 0; r < c.rays; ++r) {
      T g[3];
      encode_backward<T>(c.dir_in.col(r).data(), 3, enc.l_dir, w_dir.data(), enc.include_identity, d_dir_enc.col(r).data(), g);
      for (int i = 0; i < 3; ++i) d_dirs[std::size_t(r) * 3 + i] = g[i];
    }
  }
}

template class RadianceField<float>;
template class RadianceField<double>;

}  // namespace declutter
