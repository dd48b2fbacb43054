#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace paattack {

enum class ErrorCode {
  InvalidConfig,
  ShapeMismatch,
  Precondition,
  DegenerateFeature,
  DegenerateMemory,
  DegenerateLabels,
  Disjointness,
  EmptyCluster,
  OutOfRange,
  IncompatibleBank,
  ProtocolVersion,
  MalformedMessage,
  Transport,
  RemoteError,
  Io,
};

inline std::string_view to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::InvalidConfig: return "invalid-config";
    case ErrorCode::ShapeMismatch: return "shape-mismatch";
    case ErrorCode::Precondition: return "precondition";
    case ErrorCode::DegenerateFeature: return "degenerate-feature";
    case ErrorCode::DegenerateMemory: return "degenerate-memory";
    case ErrorCode::DegenerateLabels: return "degenerate-labels";
    case ErrorCode::Disjointness: return "disjointness-violation";
    case ErrorCode::EmptyCluster: return "empty-cluster";
    case ErrorCode::OutOfRange: return "out-of-range";
    case ErrorCode::IncompatibleBank: return "incompatible-bank";
    case ErrorCode::ProtocolVersion: return "protocol-version-mismatch";
    case ErrorCode::MalformedMessage: return "malformed-message";
    case ErrorCode::Transport: return "transport";
    case ErrorCode::RemoteError: return "remote-error";
    case ErrorCode::Io: return "io";
  }
  return "unknown";
}

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) throw Error(code, what);
}

template <typename T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using Vector = Eigen::Matrix<T, Eigen::Dynamic, 1>;

// Pixel grid in [0,1], layout [channels][height][width] flattened row-major.
template <typename T>
struct ImageTensor {
  int channels = 0;
  int height = 0;
  int width = 0;
  std::vector<T> pixels;

  ImageTensor() = default;
  ImageTensor(int c, int h, int w, T fill = T(0))
      : channels(c), height(h), width(w), pixels(static_cast<size_t>(c) * h * w, fill) {}

  size_t size() const { return pixels.size(); }
  T& at(int c, int y, int x) { return pixels[(static_cast<size_t>(c) * height + y) * width + x]; }
  T at(int c, int y, int x) const { return pixels[(static_cast<size_t>(c) * height + y) * width + x]; }

  bool same_shape(const ImageTensor& o) const {
    return channels == o.channels && height == o.height && width == o.width;
  }

  bool valid() const {
    if (pixels.size() != static_cast<size_t>(channels) * height * width) return false;
    for (T p : pixels)
      if (!std::isfinite(p) || p < T(0) || p > T(1)) return false;
    return true;
  }

  template <typename U>
  ImageTensor<U> cast() const {
    ImageTensor<U> out(channels, height, width);
    for (size_t i = 0; i < pixels.size(); ++i) out.pixels[i] = static_cast<U>(pixels[i]);
    return out;
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

template <typename T>
struct TokenFeatures {
  Matrix<T> patch_tokens;  // [N, d]
  Vector<T> class_token;   // [d]

  int num_tokens() const { return static_cast<int>(patch_tokens.rows()); }
  int dim() const { return static_cast<int>(patch_tokens.cols()); }
};

// Class-token attention rows after softmax, [L][H][N+1] flattened.
template <typename T>
struct AttentionProfile {
  int layers = 0;
  int heads = 0;
  int length = 0;  // N + 1
  std::vector<T> rows;

  T at(int l, int h, int j) const { return rows[(static_cast<size_t>(l) * heads + h) * length + j]; }
  T& at(int l, int h, int j) { return rows[(static_cast<size_t>(l) * heads + h) * length + j]; }
};

template <typename T>
struct Encoded {
  TokenFeatures<T> features;
  AttentionProfile<T> attention;
};

template <typename T>
T linf_distance(const ImageTensor<T>& a, const ImageTensor<T>& b) {
  T m = T(0);
  for (size_t i = 0; i < a.pixels.size(); ++i) m = std::max(m, std::abs(a.pixels[i] - b.pixels[i]));
  return m;
}

}  // namespace paattack
