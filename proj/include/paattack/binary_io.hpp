#pragma once

#include "paattack/core.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <string>
#include <string_view>
#include <vector>

namespace paattack {

// Little-endian byte sink for the flat binary containers.
class ByteWriter {
 public:
  void magic(std::string_view tag) { bytes_.insert(bytes_.end(), tag.begin(), tag.end()); }

  void u32(std::uint32_t v) {
    for (int i = 0; i < 4; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void u64(std::uint64_t v) {
    for (int i = 0; i < 8; ++i) bytes_.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
  }
  void f32(float v) { u32(std::bit_cast<std::uint32_t>(v)); }
  void f64(double v) { u64(std::bit_cast<std::uint64_t>(v)); }

  template <typename T>
  void scalar(T v) {
    if constexpr (sizeof(T) == 4) f32(static_cast<float>(v));
    else f64(static_cast<double>(v));
  }

  void str(std::string_view s) {
    u32(static_cast<std::uint32_t>(s.size()));
    bytes_.insert(bytes_.end(), s.begin(), s.end());
  }

  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string bytes) : bytes_(std::move(bytes)) {}

  void expect_magic(std::string_view tag) {
    need(tag.size());
    require(std::string_view(bytes_).substr(pos_, tag.size()) == tag, ErrorCode::Io,
            "bad magic, expected '" + std::string(tag) + "'");
    pos_ += tag.size();
  }

  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }
  float f32() { return std::bit_cast<float>(u32()); }
  double f64() { return std::bit_cast<double>(u64()); }

  // Reads one scalar stored with `width` bytes (4 or 8).
  double scalar(std::uint32_t width) { return width == 4 ? static_cast<double>(f32()) : f64(); }

  std::string str() {
    const auto n = u32();
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  bool at_end() const { return pos_ == bytes_.size(); }

 private:
  void need(size_t n) const {
    require(pos_ + n <= bytes_.size(), ErrorCode::Io, "container truncated");
  }

  std::string bytes_;
  size_t pos_ = 0;
};

inline std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  require(static_cast<bool>(in), ErrorCode::Io, "cannot open " + path);
  return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

inline void write_file(const std::string& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(static_cast<bool>(out), ErrorCode::Io, "cannot write " + path);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  require(static_cast<bool>(out), ErrorCode::Io, "write failed for " + path);
}

// Generic dense tensor container ("PATN"):
//   magic "PATN" | u32 version=1 | u32 scalar width (4|8) | u32 rank |
//   u64 dims[rank] | values, little-endian, row-major.
struct DenseTensor {
  std::vector<std::uint64_t> shape;
  std::vector<double> values;

  std::uint64_t element_count() const {
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

inline std::string encode_tensor(const DenseTensor& t, std::uint32_t width = 8) {
  require(width == 4 || width == 8, ErrorCode::Precondition, "scalar width must be 4 or 8");
  require(t.element_count() == t.values.size(), ErrorCode::ShapeMismatch, "tensor shape/value count mismatch");
  ByteWriter w;
  w.magic("PATN");
  w.u32(1);
  w.u32(width);
  w.u32(static_cast<std::uint32_t>(t.shape.size()));
  for (auto s : t.shape) w.u64(s);
  for (double v : t.values) {
    if (width == 4) w.f32(static_cast<float>(v));
    else w.f64(v);
  }
  return w.bytes();
}

inline DenseTensor decode_tensor(std::string bytes) {
  ByteReader r(std::move(bytes));
  r.expect_magic("PATN");
  require(r.u32() == 1, ErrorCode::Io, "unsupported tensor container version");
  const auto width = r.u32();
  require(width == 4 || width == 8, ErrorCode::Io, "bad scalar width");
  const auto rank = r.u32();
  require(rank <= 8, ErrorCode::Io, "tensor rank too large");
  DenseTensor t;
  for (std::uint32_t i = 0; i < rank; ++i) t.shape.push_back(r.u64());
  const auto n = t.element_count();
  require(n < (1ULL << 32), ErrorCode::Io, "tensor too large");
  t.values.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) t.values.push_back(r.scalar(width));
  require(r.at_end(), ErrorCode::Io, "trailing bytes in tensor container");
  return t;
}

template <typename T>
DenseTensor to_dense(const ImageTensor<T>& img) {
  DenseTensor t;
  t.shape = {static_cast<std::uint64_t>(img.channels), static_cast<std::uint64_t>(img.height),
             static_cast<std::uint64_t>(img.width)};
  t.values.assign(img.pixels.begin(), img.pixels.end());
  return t;
}

template <typename T>
ImageTensor<T> image_from_dense(const DenseTensor& t) {
  require(t.shape.size() == 3, ErrorCode::ShapeMismatch, "image tensor must have rank 3");
  ImageTensor<T> img(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]));
  for (size_t i = 0; i < t.values.size(); ++i) img.pixels[i] = static_cast<T>(t.values[i]);
  require(img.valid(), ErrorCode::Io, "image pixels must be finite and within [0,1]");
  return img;
}

template <typename T>
DenseTensor to_dense(const Matrix<T>& m) {
  DenseTensor t;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.values.assign(m.data(), m.data() + m.size());
  return t;
}

template <typename T>
void save_image(const std::string& path, const ImageTensor<T>& img) {
  write_file(path, encode_tensor(to_dense(img), sizeof(T) == 4 ? 4 : 8));
}

template <typename T>
ImageTensor<T> load_image(const std::string& path) {
  return image_from_dense<T>(decode_tensor(read_file(path)));
}

}  // namespace paattack
