#pragma once

#include "paattack/core.hpp"
#include "paattack/micro_encoder.hpp"
#include "paattack/random.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace paattack::testing {

inline EncoderConfig toy_config(std::uint64_t seed = 7) { return EncoderConfig::toy(seed); }

template <typename T = double>
ImageTensor<T> random_image(const EncoderConfig& c, std::uint64_t seed, double lo = 0.05, double hi = 0.95) {
  Rng rng(seed);
  ImageTensor<T> img(c.channels, c.image_height, c.image_width);
  for (auto& p : img.pixels) p = static_cast<T>(rng.uniform(lo, hi));
  return img;
}

template <typename T = double>
Matrix<T> random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(rng.uniform(-scale, scale));
  return m;
}

template <typename T = double>
Vector<T> random_vector(Eigen::Index n, Rng& rng, double scale = 1.0) {
  Vector<T> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = static_cast<T>(rng.uniform(-scale, scale));
  return v;
}

inline double relative_error(double a, double b) {
  const double denom = std::max(std::abs(a), std::abs(b));
  return denom == 0.0 ? 0.0 : std::abs(a - b) / denom;
}

}  // namespace paattack::testing
