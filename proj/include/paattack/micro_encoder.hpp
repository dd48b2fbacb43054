#pragma once

#include "paattack/binary_io.hpp"
#include "paattack/core.hpp"
#include "paattack/encoder.hpp"
#include "paattack/random.hpp"

#include <cmath>
#include <cstdint>
#include <functional>
#include <numbers>
#include <string>
#include <vector>

namespace paattack {

struct EncoderConfig {
  int image_height = 32;
  int image_width = 32;
  int channels = 3;
  int patch_size = 4;
  int depth = 4;
  int heads = 4;
  int dim = 32;
  double mlp_ratio = 2.0;
  std::uint64_t seed = 7;

  // 8x8 images, 2 layers, 2 heads, d=16: small enough for exhaustive checks.
  static EncoderConfig toy(std::uint64_t seed = 7) {
    EncoderConfig c;
    c.image_height = 8;
    c.image_width = 8;
    c.depth = 2;
    c.heads = 2;
    c.dim = 16;
    c.seed = seed;
    return c;
  }

  int grid_rows() const { return image_height / patch_size; }
  int grid_cols() const { return image_width / patch_size; }
  int num_tokens() const { return grid_rows() * grid_cols(); }
  int hidden() const { return std::max(1, static_cast<int>(std::lround(mlp_ratio * dim))); }
  int patch_len() const { return channels * patch_size * patch_size; }

  void validate() const {
    require(image_height > 0 && image_width > 0 && channels > 0 && patch_size > 0 && depth > 0 && heads > 0 &&
                dim > 0 && mlp_ratio > 0.0,
            ErrorCode::InvalidConfig, "all dimensions must be positive");
    require(image_height % patch_size == 0 && image_width % patch_size == 0, ErrorCode::InvalidConfig,
            "image dimensions must be multiples of patch_size");
    require(num_tokens() >= 4, ErrorCode::InvalidConfig, "need at least 4 patch tokens");
    require(dim % heads == 0, ErrorCode::InvalidConfig,
            "token_dim " + std::to_string(dim) + " not divisible by heads " + std::to_string(heads));
  }

  friend bool operator==(const EncoderConfig&, const EncoderConfig&) = default;
};

template <typename T>
struct LayerParams {
  Vector<T> ln1_gain, ln1_bias;
  Matrix<T> wq, wk, wv, wo;
  Vector<T> bq, bk, bv, bo;
  Vector<T> ln2_gain, ln2_bias;
  Matrix<T> w1, w2;
  Vector<T> b1, b2;
};

template <typename T>
struct EncoderParams {
  Matrix<T> patch_weight;  // [C*P*P, d]
  Vector<T> patch_bias;
  Vector<T> class_token;
  Matrix<T> pos_embed;     // [N+1, d]
  std::vector<LayerParams<T>> layers;
  Vector<T> final_gain, final_bias;
};

enum class InitKind { Weight, Bias, Embedding, Gain, Shift };

namespace detail {

template <typename T, typename Fn>
void visit_params(EncoderParams<T>& p, Fn&& fn) {
  auto mat = [&](Matrix<T>& m, InitKind kind, int fan_in) { fn(m.data(), m.size(), kind, fan_in); };
  auto vec = [&](Vector<T>& v, InitKind kind, int fan_in) { fn(v.data(), v.size(), kind, fan_in); };
  const int d = static_cast<int>(p.class_token.size());
  mat(p.patch_weight, InitKind::Weight, static_cast<int>(p.patch_weight.rows()));
  vec(p.patch_bias, InitKind::Bias, static_cast<int>(p.patch_weight.rows()));
  vec(p.class_token, InitKind::Embedding, d);
  mat(p.pos_embed, InitKind::Embedding, d);
  for (auto& l : p.layers) {
    const int hid = static_cast<int>(l.w1.cols());
    vec(l.ln1_gain, InitKind::Gain, d);
    vec(l.ln1_bias, InitKind::Shift, d);
    mat(l.wq, InitKind::Weight, d);
    vec(l.bq, InitKind::Bias, d);
    mat(l.wk, InitKind::Weight, d);
    vec(l.bk, InitKind::Bias, d);
    mat(l.wv, InitKind::Weight, d);
    vec(l.bv, InitKind::Bias, d);
    mat(l.wo, InitKind::Weight, d);
    vec(l.bo, InitKind::Bias, d);
    vec(l.ln2_gain, InitKind::Gain, d);
    vec(l.ln2_bias, InitKind::Shift, d);
    mat(l.w1, InitKind::Weight, d);
    vec(l.b1, InitKind::Bias, d);
    mat(l.w2, InitKind::Weight, hid);
    vec(l.b2, InitKind::Bias, hid);
  }
  vec(p.final_gain, InitKind::Gain, d);
  vec(p.final_bias, InitKind::Shift, d);
}

template <typename T>
EncoderParams<T> shaped_params(const EncoderConfig& c) {
  const int d = c.dim, hid = c.hidden();
  EncoderParams<T> p;
  p.patch_weight.resize(c.patch_len(), d);
  p.patch_bias.resize(d);
  p.class_token.resize(d);
  p.pos_embed.resize(c.num_tokens() + 1, d);
  p.layers.resize(c.depth);
  for (auto& l : p.layers) {
    l.ln1_gain.resize(d);
    l.ln1_bias.resize(d);
    l.ln2_gain.resize(d);
    l.ln2_bias.resize(d);
    for (auto* m : {&l.wq, &l.wk, &l.wv, &l.wo}) m->resize(d, d);
    for (auto* v : {&l.bq, &l.bk, &l.bv, &l.bo, &l.b2}) v->resize(d);
    l.w1.resize(d, hid);
    l.b1.resize(hid);
    l.w2.resize(hid, d);
  }
  p.final_gain.resize(d);
  p.final_bias.resize(d);
  return p;
}

template <typename T>
struct LnCache {
  Matrix<T> xhat;
  Vector<T> inv_std;
};

inline constexpr double kLayerNormEps = 1e-6;

template <typename T>
Matrix<T> layer_norm(const Matrix<T>& x, const Vector<T>& gain, const Vector<T>& bias, LnCache<T>& cache) {
  const auto rows = x.rows(), cols = x.cols();
  cache.xhat.resize(rows, cols);
  cache.inv_std.resize(rows);
  Matrix<T> y(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    const T mean = x.row(i).mean();
    const T var = (x.row(i).array() - mean).square().mean();
    const T inv = T(1) / std::sqrt(var + T(kLayerNormEps));
    cache.inv_std(i) = inv;
    cache.xhat.row(i) = (x.row(i).array() - mean) * inv;
    y.row(i) = cache.xhat.row(i).cwiseProduct(gain.transpose()) + bias.transpose();
  }
  return y;
}

template <typename T>
Matrix<T> layer_norm_backward(const Matrix<T>& dy, const Vector<T>& gain, const LnCache<T>& cache) {
  Matrix<T> dx(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < dy.rows(); ++i) {
    const auto dxhat = dy.row(i).cwiseProduct(gain.transpose()).eval();
    const T mean_d = dxhat.mean();
    const T mean_dx = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
    dx.row(i) = cache.inv_std(i) * (dxhat.array() - mean_d - cache.xhat.row(i).array() * mean_dx);
  }
  return dx;
}

template <typename T>
T gelu(T u) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  return T(0.5) * u * (T(1) + std::tanh(k * (u + T(0.044715) * u * u * u)));
}

template <typename T>
T gelu_grad(T u) {
  const T k = static_cast<T>(std::sqrt(2.0 / std::numbers::pi));
  const T t = std::tanh(k * (u + T(0.044715) * u * u * u));
  return T(0.5) * (T(1) + t) + T(0.5) * u * (T(1) - t * t) * k * (T(1) + T(3) * T(0.044715) * u * u);
}

template <typename T>
void softmax_rows(Matrix<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    const T mx = s.row(i).maxCoeff();
    s.row(i) = (s.row(i).array() - mx).exp();
    s.row(i) /= s.row(i).sum();
  }
}

template <typename T>
void add_row_bias(Matrix<T>& m, const Vector<T>& b) {
  m.rowwise() += b.transpose();
}

}  // namespace detail

// Small pre-norm vision transformer with a class token. Parameters are fixed
// at construction; encode/vjp are const and reentrant.
template <typename T>
class MicroEncoder final : public Encoder<T> {
 public:
  explicit MicroEncoder(const EncoderConfig& config) : config_(config) {
    config_.validate();
    params_ = detail::shaped_params<T>(config_);
    // Uniform(-s, s) with s = 1/sqrt(fan_in), norm gains centred on 1;
    // tensors drawn in canonical order.
    Rng rng(derive_seed(config_.seed, "micro-encoder"));
    detail::visit_params(params_, [&](T* data, Eigen::Index n, InitKind kind, int fan_in) {
      const double s = 1.0 / std::sqrt(static_cast<double>(fan_in));
      for (Eigen::Index i = 0; i < n; ++i) {
        switch (kind) {
          case InitKind::Gain: data[i] = static_cast<T>(1.0 + rng.uniform(-s, s)); break;
          default: data[i] = static_cast<T>(rng.uniform(-s, s)); break;
        }
      }
    });
  }

  MicroEncoder(const EncoderConfig& config, EncoderParams<T> params) : config_(config), params_(std::move(params)) {
    config_.validate();
  }

  const EncoderConfig& config() const { return config_; }
  const EncoderParams<T>& params() const { return params_; }

  EncoderInfo info() const override {
    return EncoderInfo{config_.num_tokens(), config_.dim,      config_.depth,      config_.heads,
                       config_.channels,     config_.image_height, config_.image_width, config_.patch_size,
                       "micro-vit"};
  }

  Encoded<T> encode(const ImageTensor<T>& x) const override {
    Cache cache;
    return forward(x, cache);
  }

  std::vector<T> vjp(const ImageTensor<T>& x, const Matrix<T>& cot_patch, const Vector<T>& cot_class) const override {
    check_cotangent_shape(info(), cot_patch, cot_class);
    Cache cache;
    forward(x, cache);
    return backward(cache, cot_patch, cot_class);
  }

  // Flat list of every parameter value in canonical order.
  std::vector<T> flat_parameters() const {
    std::vector<T> out;
    auto copy = params_;
    detail::visit_params(copy, [&](T* data, Eigen::Index n, InitKind, int) { out.insert(out.end(), data, data + n); });
    return out;
  }

 private:
  struct LayerCache {
    Matrix<T> z_in;
    detail::LnCache<T> ln1;
    Matrix<T> q, k, v;
    std::vector<Matrix<T>> attn;
    detail::LnCache<T> ln2;
    Matrix<T> u;
  };
  struct Cache {
    std::vector<LayerCache> layers;
    detail::LnCache<T> ln_final;
  };

  Matrix<T> patchify(const ImageTensor<T>& x) const {
    const int P = config_.patch_size, gc = config_.grid_cols();
    Matrix<T> xp(config_.num_tokens(), config_.patch_len());
    for (int j = 0; j < config_.num_tokens(); ++j) {
      const int gy = j / gc, gx = j % gc;
      for (int c = 0; c < config_.channels; ++c)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px) xp(j, (c * P + py) * P + px) = x.at(c, gy * P + py, gx * P + px);
    }
    return xp;
  }

  Encoded<T> forward(const ImageTensor<T>& x, Cache& cache) const {
    check_image_shape(info(), x.channels, x.height, x.width);
    const int N = config_.num_tokens(), d = config_.dim, H = config_.heads, dh = d / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Matrix<T> embedded = patchify(x) * params_.patch_weight;
    detail::add_row_bias(embedded, params_.patch_bias);
    Matrix<T> z(N + 1, d);
    z.row(0) = params_.class_token.transpose();
    z.bottomRows(N) = embedded;
    z += params_.pos_embed;

    Encoded<T> out;
    auto& att = out.attention;
    att.layers = config_.depth;
    att.heads = H;
    att.length = N + 1;
    att.rows.resize(static_cast<size_t>(config_.depth) * H * (N + 1));

    cache.layers.resize(config_.depth);
    for (int l = 0; l < config_.depth; ++l) {
      const auto& p = params_.layers[l];
      auto& c = cache.layers[l];
      c.z_in = z;
      const Matrix<T> h1 = detail::layer_norm(z, p.ln1_gain, p.ln1_bias, c.ln1);
      c.q = h1 * p.wq;
      detail::add_row_bias(c.q, p.bq);
      c.k = h1 * p.wk;
      detail::add_row_bias(c.k, p.bk);
      c.v = h1 * p.wv;
      detail::add_row_bias(c.v, p.bv);
      Matrix<T> mixed(N + 1, d);
      c.attn.resize(H);
      for (int h = 0; h < H; ++h) {
        Matrix<T> a = (c.q.middleCols(h * dh, dh) * c.k.middleCols(h * dh, dh).transpose()) * scale;
        detail::softmax_rows(a);
        mixed.middleCols(h * dh, dh) = a * c.v.middleCols(h * dh, dh);
        for (int j = 0; j <= N; ++j) att.at(l, h, j) = a(0, j);
        c.attn[h] = std::move(a);
      }
      Matrix<T> proj = mixed * p.wo;
      detail::add_row_bias(proj, p.bo);
      z += proj;
      const Matrix<T> h2 = detail::layer_norm(z, p.ln2_gain, p.ln2_bias, c.ln2);
      c.u = h2 * p.w1;
      detail::add_row_bias(c.u, p.b1);
      Matrix<T> ffn = c.u.unaryExpr([](T u) { return detail::gelu(u); }) * p.w2;
      detail::add_row_bias(ffn, p.b2);
      z += ffn;
    }
    const Matrix<T> final_tokens = detail::layer_norm(z, params_.final_gain, params_.final_bias, cache.ln_final);
    out.features.class_token = final_tokens.row(0).transpose();
    out.features.patch_tokens = final_tokens.bottomRows(N);
    return out;
  }

  std::vector<T> backward(const Cache& cache, const Matrix<T>& cot_patch, const Vector<T>& cot_class) const {
    const int N = config_.num_tokens(), d = config_.dim, H = config_.heads, dh = d / H;
    const T scale = T(1) / std::sqrt(static_cast<T>(dh));

    Matrix<T> dout(N + 1, d);
    dout.row(0) = cot_class.transpose();
    dout.bottomRows(N) = cot_patch;
    Matrix<T> dz = detail::layer_norm_backward(dout, params_.final_gain, cache.ln_final);

    for (int l = config_.depth - 1; l >= 0; --l) {
      const auto& p = params_.layers[l];
      const auto& c = cache.layers[l];
      // feed-forward residual branch
      const Matrix<T> du =
          (dz * p.w2.transpose()).cwiseProduct(c.u.unaryExpr([](T u) { return detail::gelu_grad(u); }));
      dz += detail::layer_norm_backward<T>(du * p.w1.transpose(), p.ln2_gain, c.ln2);
      // attention residual branch
      const Matrix<T> dmixed = dz * p.wo.transpose();
      Matrix<T> dq(N + 1, d), dk(N + 1, d), dv(N + 1, d);
      for (int h = 0; h < H; ++h) {
        const auto& a = c.attn[h];
        const auto dmixed_h = dmixed.middleCols(h * dh, dh);
        const Matrix<T> da = dmixed_h * c.v.middleCols(h * dh, dh).transpose();
        dv.middleCols(h * dh, dh) = a.transpose() * dmixed_h;
        const Vector<T> row_dot = a.cwiseProduct(da).rowwise().sum();
        Matrix<T> ds = a.cwiseProduct(da - row_dot.replicate(1, N + 1));
        ds *= scale;
        dq.middleCols(h * dh, dh) = ds * c.k.middleCols(h * dh, dh);
        dk.middleCols(h * dh, dh) = ds.transpose() * c.q.middleCols(h * dh, dh);
      }
      const Matrix<T> dh1 = dq * p.wq.transpose() + dk * p.wk.transpose() + dv * p.wv.transpose();
      dz += detail::layer_norm_backward(dh1, p.ln1_gain, c.ln1);
    }

    const Matrix<T> dpatches = dz.bottomRows(N) * params_.patch_weight.transpose();
    const int P = config_.patch_size, gc = config_.grid_cols();
    std::vector<T> grad(static_cast<size_t>(config_.channels) * config_.image_height * config_.image_width);
    for (int j = 0; j < N; ++j) {
      const int gy = j / gc, gx = j % gc;
      for (int ch = 0; ch < config_.channels; ++ch)
        for (int py = 0; py < P; ++py)
          for (int px = 0; px < P; ++px)
            grad[(static_cast<size_t>(ch) * config_.image_height + gy * P + py) * config_.image_width + gx * P + px] =
                dpatches(j, (ch * P + py) * P + px);
    }
    return grad;
  }

  EncoderConfig config_;
  EncoderParams<T> params_;
};

// Parameter snapshot ("PAEN"):
//   magic "PAEN" | u32 version=1 | u32 scalar width (4|8) |
//   u32 image_height, image_width, channels, patch_size, depth, heads, dim |
//   f64 mlp_ratio | u64 seed | u64 parameter count | parameters in canonical order.
template <typename T>
std::string encode_snapshot(const MicroEncoder<T>& enc) {
  const auto& c = enc.config();
  ByteWriter w;
  w.magic("PAEN");
  w.u32(1);
  w.u32(sizeof(T));
  for (int v : {c.image_height, c.image_width, c.channels, c.patch_size, c.depth, c.heads, c.dim})
    w.u32(static_cast<std::uint32_t>(v));
  w.f64(c.mlp_ratio);
  w.u64(c.seed);
  const auto flat = enc.flat_parameters();
  w.u64(flat.size());
  for (T v : flat) w.scalar(v);
  return w.bytes();
}

template <typename T>
MicroEncoder<T> decode_snapshot(std::string bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic("PAEN");
  require(r.u32() == 1, ErrorCode::Io, "unsupported snapshot version");
  const auto width = r.u32();
  require(width == 4 || width == 8, ErrorCode::Io, "bad scalar width");
  EncoderConfig c;
  for (int* f : {&c.image_height, &c.image_width, &c.channels, &c.patch_size, &c.depth, &c.heads, &c.dim})
    *f = static_cast<int>(r.u32());
  c.mlp_ratio = r.f64();
  c.seed = r.u64();
  c.validate();
  auto params = detail::shaped_params<T>(c);
  const auto count = r.u64();
  std::uint64_t seen = 0;
  detail::visit_params(params, [&](T* data, Eigen::Index n, InitKind, int) {
    for (Eigen::Index i = 0; i < n; ++i) data[i] = static_cast<T>(r.scalar(width));
    seen += static_cast<std::uint64_t>(n);
  });
  require(seen == count && r.at_end(), ErrorCode::Io, "snapshot parameter count mismatch");
  return MicroEncoder<T>(c, std::move(params));
}

}  // namespace paattack
