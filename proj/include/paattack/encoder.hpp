#pragma once

#include "paattack/core.hpp"

#include <string>
#include <vector>

namespace paattack {

struct EncoderInfo {
  int num_tokens = 0;  // N, patch tokens only
  int dim = 0;         // d
  int layers = 0;      // L
  int heads = 0;       // H
  int channels = 0;
  int height = 0;
  int width = 0;
  int patch_size = 0;
  std::string provider_id;

  friend bool operator==(const EncoderInfo&, const EncoderInfo&) = default;
};

// What the attack engine needs from a vision encoder: forward features with
// class-token attention taps, and pixel-space vector-Jacobian products.
// Implementations must be pure functions of their inputs.
template <typename T>
class Encoder {
 public:
  virtual ~Encoder() = default;

  virtual EncoderInfo info() const = 0;
  virtual Encoded<T> encode(const ImageTensor<T>& x) const = 0;
  // Returns d<cotangent, f(x)>/dx in the image layout.
  virtual std::vector<T> vjp(const ImageTensor<T>& x, const Matrix<T>& cotangent_patch,
                             const Vector<T>& cotangent_class) const = 0;
};

inline void check_image_shape(const EncoderInfo& info, int c, int h, int w) {
  require(c == info.channels && h == info.height && w == info.width, ErrorCode::ShapeMismatch,
          "image shape [" + std::to_string(c) + "," + std::to_string(h) + "," + std::to_string(w) +
              "] does not match encoder input [" + std::to_string(info.channels) + "," +
              std::to_string(info.height) + "," + std::to_string(info.width) + "]");
}

template <typename T>
void check_cotangent_shape(const EncoderInfo& info, const Matrix<T>& cot_patch, const Vector<T>& cot_class) {
  require(cot_patch.rows() == info.num_tokens && cot_patch.cols() == info.dim && cot_class.size() == info.dim,
          ErrorCode::ShapeMismatch, "cotangent shape does not match encoder output");
}

}  // namespace paattack
