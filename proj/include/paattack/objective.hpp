#pragma once

#include "paattack/core.hpp"

#include <cmath>
#include <string>
#include <vector>

namespace paattack {

template <typename T>
struct TokenWeights {
  Vector<T> w;  // [N], nonnegative, sums to 1

  static TokenWeights uniform(int n) { return {Vector<T>::Constant(n, T(1) / static_cast<T>(n))}; }
};

template <typename T>
struct LossBreakdown {
  T vision_term = T(0);  // -(1/N) sum_j cos(v_j, v'_j)
  T guide_term = T(0);   // (1/N) sum_j cos(v'_j, p_j)
  T objective = T(0);    // ascended quantity
  Vector<T> per_token;   // w_j [-cos(v_j, v'_j) + lambda cos(v'_j, p_j)]
};

// Layer used for attention weights. Indices are 1-based; Middle resolves to
// ceil(L/2) and Final to L.
struct LayerSelector {
  enum class Kind { Middle, Final, Index };
  Kind kind = Kind::Middle;
  int index = 0;

  static LayerSelector middle() { return {Kind::Middle, 0}; }
  static LayerSelector final_layer() { return {Kind::Final, 0}; }
  static LayerSelector at(int one_based) { return {Kind::Index, one_based}; }

  int resolve(int layers) const {
    switch (kind) {
      case Kind::Middle: return (layers + 1) / 2;
      case Kind::Final: return layers;
      case Kind::Index:
        require(index >= 1 && index <= layers, ErrorCode::OutOfRange,
                "layer " + std::to_string(index) + " outside 1.." + std::to_string(layers));
        return index;
    }
    return layers;
  }

  std::string to_string() const {
    switch (kind) {
      case Kind::Middle: return "middle";
      case Kind::Final: return "final";
      case Kind::Index: return std::to_string(index);
    }
    return "middle";
  }

  static LayerSelector parse(const std::string& s) {
    if (s == "middle") return middle();
    if (s == "final") return final_layer();
    try {
      size_t used = 0;
      const int k = std::stoi(s, &used);
      if (used == s.size()) return at(k);
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::InvalidConfig, "layer selector must be middle, final, or an index: " + s);
  }

  friend bool operator==(const LayerSelector&, const LayerSelector&) = default;
};

template <typename Row>
auto row_norm_checked(const Row& r) {
  const auto n = r.norm();
  require(n > 0 && std::isfinite(static_cast<double>(n)), ErrorCode::DegenerateFeature,
          "zero-norm or non-finite token row");
  return n;
}

template <typename A, typename B>
auto cosine(const A& a, const B& b) {
  const auto na = row_norm_checked(a);
  const auto nb = row_norm_checked(b);
  return a.dot(b) / (na * nb);
}

template <typename T>
void check_same_shape(const Matrix<T>& a, const Matrix<T>& b) {
  require(a.rows() == b.rows() && a.cols() == b.cols(), ErrorCode::ShapeMismatch, "token grid shapes differ");
}

// Mean per-token cosine similarity of two [N, d] grids.
template <typename T>
T mean_token_cosine(const Matrix<T>& a, const Matrix<T>& b) {
  check_same_shape(a, b);
  T acc = T(0);
  for (Eigen::Index j = 0; j < a.rows(); ++j) acc += cosine(a.row(j), b.row(j));
  return acc / static_cast<T>(a.rows());
}

template <typename T>
T vision_loss(const TokenFeatures<T>& v_clean, const TokenFeatures<T>& v_adv) {
  return -mean_token_cosine(v_clean.patch_tokens, v_adv.patch_tokens);
}

template <typename T>
T guide_loss(const TokenFeatures<T>& v_adv, const Matrix<T>& anchor) {
  return mean_token_cosine(v_adv.patch_tokens, anchor);
}

// Head-averaged class-to-patch attention at one layer (class entry dropped).
template <typename T>
Vector<T> layer_attention(const AttentionProfile<T>& profile, const LayerSelector& layer) {
  const int l = layer.resolve(profile.layers) - 1;
  const int n = profile.length - 1;
  Vector<T> a = Vector<T>::Zero(n);
  for (int h = 0; h < profile.heads; ++h)
    for (int j = 0; j < n; ++j) a(j) += profile.at(l, h, j + 1);
  return a / static_cast<T>(profile.heads);
}

template <typename T>
TokenWeights<T> attention_weights(const AttentionProfile<T>& profile, const LayerSelector& layer, double temperature) {
  require(temperature > 0.0, ErrorCode::Precondition, "temperature must be positive");
  const Vector<T> a = layer_attention(profile, layer) / static_cast<T>(temperature);
  const T mx = a.maxCoeff();
  Vector<T> e = (a.array() - mx).exp();
  return {e / e.sum()};
}

template <typename T>
LossBreakdown<T> objective(const TokenFeatures<T>& v_clean, const TokenFeatures<T>& v_adv, const Matrix<T>& anchor,
                           const TokenWeights<T>& weights, double lambda) {
  check_same_shape(v_clean.patch_tokens, v_adv.patch_tokens);
  check_same_shape(v_adv.patch_tokens, anchor);
  const auto n = v_adv.patch_tokens.rows();
  require(weights.w.size() == n, ErrorCode::ShapeMismatch, "weight count differs from token count");
  LossBreakdown<T> out;
  out.per_token.resize(n);
  const T lam = static_cast<T>(lambda);
  for (Eigen::Index j = 0; j < n; ++j) {
    const T c_vis = cosine(v_clean.patch_tokens.row(j), v_adv.patch_tokens.row(j));
    const T c_guide = cosine(v_adv.patch_tokens.row(j), anchor.row(j));
    out.vision_term -= c_vis;
    out.guide_term += c_guide;
    out.per_token(j) = weights.w(j) * (-c_vis + lam * c_guide);
  }
  const T inv_n = T(1) / static_cast<T>(n);
  out.vision_term *= inv_n;
  out.guide_term *= inv_n;
  out.objective = out.per_token.sum() * inv_n;
  return out;
}

// d cos(u, b) / du = b / (|u||b|) - cos(u, b) u / |u|^2
template <typename T, typename U, typename B>
Eigen::Matrix<T, 1, Eigen::Dynamic> cosine_grad(const U& u, const B& b) {
  const T nu = row_norm_checked(u);
  const T nb = row_norm_checked(b);
  const T c = u.dot(b) / (nu * nb);
  return b / (nu * nb) - (c / (nu * nu)) * u;
}

template <typename T>
struct Cotangent {
  Matrix<T> patch;
  Vector<T> class_token;
};

// Gradient of `objective` with respect to the adversarial token features.
template <typename T>
Cotangent<T> objective_cotangent(const TokenFeatures<T>& v_clean, const TokenFeatures<T>& v_adv,
                                 const Matrix<T>& anchor, const TokenWeights<T>& weights, double lambda) {
  check_same_shape(v_clean.patch_tokens, v_adv.patch_tokens);
  check_same_shape(v_adv.patch_tokens, anchor);
  const auto n = v_adv.patch_tokens.rows();
  require(weights.w.size() == n, ErrorCode::ShapeMismatch, "weight count differs from token count");
  Cotangent<T> out{Matrix<T>::Zero(n, v_adv.patch_tokens.cols()), Vector<T>::Zero(v_adv.patch_tokens.cols())};
  const T lam = static_cast<T>(lambda);
  const T inv_n = T(1) / static_cast<T>(n);
  for (Eigen::Index j = 0; j < n; ++j) {
    const auto u = v_adv.patch_tokens.row(j);
    const T coef = weights.w(j) * inv_n;
    auto g = (-cosine_grad<T>(u, v_clean.patch_tokens.row(j))).eval();
    if (lam != T(0)) g += lam * cosine_grad<T>(u, anchor.row(j));
    out.patch.row(j) = coef * g;
  }
  return out;
}

}  // namespace paattack
