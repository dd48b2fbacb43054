#pragma once

#include "paattack/core.hpp"
#include "paattack/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <string>
#include <vector>

namespace paattack {

// Seeded synthetic image generator. Each image is a textured background
// (base colour, one oriented sinusoidal grating, per-pixel noise) with one
// filled shape on top; the label is the shape identity:
//   0 disc, 1 square, 2 triangle, 3 plus, 4 ring, 5 diagonal bar.
// Backgrounds are dark (channel values in [0.1, 0.4]) and shapes bright
// ([0.6, 0.9]), so shape contrast has a consistent sign across images.
enum class ShapeKind { Disc, Square, Triangle, Plus, Ring, Bar };

inline constexpr int kShapeKinds = 6;

struct LabeledImage {
  std::string id;
  int label = 0;
  ImageTensor<double> image;
};

inline bool shape_covers(ShapeKind kind, double dx, double dy, double r) {
  switch (kind) {
    case ShapeKind::Disc: return dx * dx + dy * dy <= r * r;
    case ShapeKind::Square: return std::abs(dx) <= 0.8 * r && std::abs(dy) <= 0.8 * r;
    case ShapeKind::Triangle: return dy <= 0.8 * r && dy >= -r && std::abs(dx) <= (dy + r) * 0.6;
    case ShapeKind::Plus:
      return (std::abs(dx) <= 0.3 * r && std::abs(dy) <= r) || (std::abs(dy) <= 0.3 * r && std::abs(dx) <= r);
    case ShapeKind::Ring: {
      const double d2 = dx * dx + dy * dy;
      return d2 <= r * r && d2 >= 0.36 * r * r;
    }
    case ShapeKind::Bar: return std::abs(dx - dy) <= 0.35 * r && std::abs(dx + dy) <= 1.6 * r;
  }
  return false;
}

inline ImageTensor<double> synthesize_image(int label, int channels, int height, int width, Rng& rng) {
  ImageTensor<double> img(channels, height, width);
  std::vector<double> base(channels), fg(channels);
  for (int c = 0; c < channels; ++c) {
    base[c] = rng.uniform(0.1, 0.4);
    fg[c] = rng.uniform(0.6, 0.9);
  }
  const double angle = rng.uniform(0.0, std::numbers::pi);
  const double freq = rng.uniform(0.3, 1.2);
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double amp = rng.uniform(0.03, 0.1);
  const double r = rng.uniform(0.30, 0.34) * std::min(height, width);
  const double cy = rng.uniform(0.47, 0.53) * height, cx = rng.uniform(0.47, 0.53) * width;
  const auto kind = static_cast<ShapeKind>(label % kShapeKinds);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x) {
      const double texture = amp * std::sin(freq * (std::cos(angle) * x + std::sin(angle) * y) + phase);
      const bool inside = shape_covers(kind, x + 0.5 - cx, y + 0.5 - cy, r);
      for (int c = 0; c < channels; ++c) {
        const double v = (inside ? fg[c] : base[c] + texture) + rng.uniform(-0.03, 0.03);
        img.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
    }
  return img;
}

// `count` images with labels cycling through `classes`; ids are
// "<prefix>-<index>".
inline std::vector<LabeledImage> synthetic_dataset(int count, int classes, std::uint64_t seed,
                                                   const std::string& prefix, int channels = 3, int height = 32,
                                                   int width = 32) {
  require(classes >= 1 && classes <= kShapeKinds, ErrorCode::Precondition, "classes must be in 1..6");
  Rng rng(derive_seed(seed, "synthetic:" + prefix));
  std::vector<LabeledImage> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    const int label = i % classes;
    out.push_back({prefix + "-" + std::to_string(i), label, synthesize_image(label, channels, height, width, rng)});
  }
  return out;
}

}  // namespace paattack
