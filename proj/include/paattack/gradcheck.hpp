#pragma once

#include "paattack/core.hpp"
#include "paattack/encoder.hpp"

#include <functional>
#include <vector>

namespace paattack {

template <typename T>
using FeatureLoss = std::function<double(const TokenFeatures<T>&)>;

struct PixelEstimate {
  size_t pixel = 0;
  double value = 0.0;
};

// Central-difference estimate of d loss(f(x)) / dx at the probed pixel
// indices (all pixels when `probes` is empty). Probes may step outside
// [0,1]; the encoder only checks shapes.
template <typename T>
std::vector<PixelEstimate> fd_gradient_oracle(const Encoder<T>& enc, const ImageTensor<T>& x,
                                              const FeatureLoss<T>& loss, double h,
                                              std::vector<size_t> probes = {}) {
  require(h > 0.0, ErrorCode::Precondition, "finite-difference step must be positive");
  check_image_shape(enc.info(), x.channels, x.height, x.width);
  if (probes.empty()) {
    probes.resize(x.size());
    for (size_t i = 0; i < probes.size(); ++i) probes[i] = i;
  }
  std::vector<PixelEstimate> out;
  out.reserve(probes.size());
  ImageTensor<T> probe = x;
  for (size_t idx : probes) {
    require(idx < x.size(), ErrorCode::ShapeMismatch, "probe index out of range");
    const T original = probe.pixels[idx];
    probe.pixels[idx] = original + static_cast<T>(h);
    const double plus = loss(enc.encode(probe).features);
    probe.pixels[idx] = original - static_cast<T>(h);
    const double minus = loss(enc.encode(probe).features);
    probe.pixels[idx] = original;
    out.push_back({idx, (plus - minus) / (2.0 * h)});
  }
  return out;
}

}  // namespace paattack
