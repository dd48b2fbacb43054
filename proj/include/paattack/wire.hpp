#pragma once

#include "paattack/core.hpp"
#include "paattack/encoder.hpp"

#include <json.hpp>
#include <sodium.h>

#include <bit>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

// Encoder bridge wire protocol, version "1".
//
// Framing: each message is a 4-byte big-endian byte length followed by a
// UTF-8 JSON document of that length.
//
// Every document carries "kind" and an integer correlation "id"; replies
// echo the request id. Kinds and payloads:
//   hello          {version}
//   info           request: {} ; reply: {N, d, L, H, channels, height, width, patch_size, provider_id}
//   encode_request {image}
//   encode_reply   {patch_tokens, class_token, attention}
//   vjp_request    {image, cotangent_patch, cotangent_class}
//   vjp_reply      {gradient}
//   error          {code, message}   codes: "shape", "version", "malformed", "unsupported", "internal"
// Tensors are {"shape": [..], "data": base64 of little-endian float32,
// row-major}. Image shape is [C, H, W]; attention shape is [L, H, N+1].
namespace paattack::wire {

inline constexpr std::string_view kProtocolVersion = "1";
inline constexpr std::uint32_t kMaxFrameBytes = 256u << 20;

using Json = nlohmann::json;

inline std::string base64_encode(std::string_view bytes) {
  std::string out(sodium_base64_encoded_len(bytes.size(), sodium_base64_VARIANT_ORIGINAL), '\0');
  sodium_bin2base64(out.data(), out.size(), reinterpret_cast<const unsigned char*>(bytes.data()), bytes.size(),
                    sodium_base64_VARIANT_ORIGINAL);
  out.resize(out.size() - 1);  // drop the terminating NUL
  return out;
}

// Strict decode: padding required, no whitespace or trailing garbage.
inline std::string base64_decode(std::string_view text) {
  require(text.size() % 4 == 0, ErrorCode::MalformedMessage, "base64 length not a multiple of 4");
  std::string out(text.size() / 4 * 3, '\0');
  size_t len = 0;
  const char* end = nullptr;
  const int rc = sodium_base642bin(reinterpret_cast<unsigned char*>(out.data()), out.size(), text.data(), text.size(),
                                   nullptr, &len, &end, sodium_base64_VARIANT_ORIGINAL);
  require(rc == 0 && end == text.data() + text.size(), ErrorCode::MalformedMessage, "invalid base64 payload");
  out.resize(len);
  return out;
}

struct WireTensor {
  std::vector<std::uint64_t> shape;
  std::vector<float> data;

  std::uint64_t count() const {
    std::uint64_t n = 1;
    for (auto s : shape) n *= s;
    return n;
  }
};

inline Json tensor_to_json(const WireTensor& t) {
  require(t.count() == t.data.size(), ErrorCode::ShapeMismatch, "wire tensor shape/data mismatch");
  std::string bytes;
  bytes.reserve(t.data.size() * 4);
  for (float f : t.data) {
    const auto u = std::bit_cast<std::uint32_t>(f);
    for (int i = 0; i < 4; ++i) bytes += static_cast<char>((u >> (8 * i)) & 0xFF);
  }
  return Json{{"shape", t.shape}, {"data", base64_encode(bytes)}};
}

inline WireTensor tensor_from_json(const Json& j) {
  require(j.is_object() && j.contains("shape") && j.contains("data") && j["shape"].is_array() &&
              j["data"].is_string(),
          ErrorCode::MalformedMessage, "tensor needs shape and data");
  WireTensor t;
  for (const auto& s : j["shape"]) {
    require(s.is_number_unsigned() || (s.is_number_integer() && s.get<std::int64_t>() >= 0),
            ErrorCode::MalformedMessage, "tensor shape entries must be nonnegative integers");
    t.shape.push_back(s.get<std::uint64_t>());
  }
  const std::string bytes = base64_decode(j["data"].get<std::string>());
  require(bytes.size() == t.count() * 4, ErrorCode::MalformedMessage, "tensor data length does not match shape");
  t.data.resize(t.count());
  for (size_t i = 0; i < t.data.size(); ++i) {
    std::uint32_t u = 0;
    for (int k = 0; k < 4; ++k) u |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + k])) << (8 * k);
    t.data[i] = std::bit_cast<float>(u);
  }
  return t;
}

template <typename T>
WireTensor image_tensor(const ImageTensor<T>& img) {
  WireTensor t;
  t.shape = {static_cast<std::uint64_t>(img.channels), static_cast<std::uint64_t>(img.height),
             static_cast<std::uint64_t>(img.width)};
  t.data.assign(img.pixels.begin(), img.pixels.end());
  return t;
}

template <typename T>
ImageTensor<T> image_from_wire(const WireTensor& t) {
  require(t.shape.size() == 3, ErrorCode::ShapeMismatch, "image tensor must have rank 3");
  ImageTensor<T> img(static_cast<int>(t.shape[0]), static_cast<int>(t.shape[1]), static_cast<int>(t.shape[2]));
  for (size_t i = 0; i < t.data.size(); ++i) img.pixels[i] = static_cast<T>(t.data[i]);
  return img;
}

template <typename T>
WireTensor matrix_tensor(const Matrix<T>& m) {
  WireTensor t;
  t.shape = {static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())};
  t.data.assign(m.data(), m.data() + m.size());
  return t;
}

template <typename T>
Matrix<T> matrix_from_wire(const WireTensor& t) {
  require(t.shape.size() == 2, ErrorCode::ShapeMismatch, "expected a rank-2 tensor");
  Matrix<T> m(static_cast<Eigen::Index>(t.shape[0]), static_cast<Eigen::Index>(t.shape[1]));
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(t.data[i]);
  return m;
}

template <typename T>
WireTensor vector_tensor(const Vector<T>& v) {
  WireTensor t;
  t.shape = {static_cast<std::uint64_t>(v.size())};
  t.data.assign(v.data(), v.data() + v.size());
  return t;
}

template <typename T>
Vector<T> vector_from_wire(const WireTensor& t) {
  require(t.shape.size() == 1, ErrorCode::ShapeMismatch, "expected a rank-1 tensor");
  Vector<T> v(static_cast<Eigen::Index>(t.shape[0]));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = static_cast<T>(t.data[i]);
  return v;
}

// 4-byte big-endian length prefix + body.
inline std::string frame(std::string_view body) {
  require(body.size() <= kMaxFrameBytes, ErrorCode::MalformedMessage, "frame too large");
  const auto n = static_cast<std::uint32_t>(body.size());
  std::string out;
  out.reserve(4 + body.size());
  for (int i = 3; i >= 0; --i) out += static_cast<char>((n >> (8 * i)) & 0xFF);
  out.append(body);
  return out;
}

inline std::uint32_t frame_length(std::string_view header) {
  require(header.size() == 4, ErrorCode::MalformedMessage, "frame header must be 4 bytes");
  std::uint32_t n = 0;
  for (char c : header) n = (n << 8) | static_cast<unsigned char>(c);
  require(n <= kMaxFrameBytes, ErrorCode::MalformedMessage, "frame length exceeds limit");
  return n;
}

// Parses one complete frame (header + body, nothing more).
inline Json parse_frame(std::string_view bytes) {
  require(bytes.size() >= 4, ErrorCode::MalformedMessage, "truncated frame header");
  const auto n = frame_length(bytes.substr(0, 4));
  require(bytes.size() == 4 + static_cast<size_t>(n), ErrorCode::MalformedMessage, "truncated or oversized frame");
  Json doc = Json::parse(bytes.substr(4), nullptr, false);
  require(!doc.is_discarded() && doc.is_object(), ErrorCode::MalformedMessage, "frame body is not a JSON object");
  require(doc.contains("kind") && doc["kind"].is_string(), ErrorCode::MalformedMessage, "message without kind");
  require(doc.contains("id") && doc["id"].is_number_integer(), ErrorCode::MalformedMessage,
          "message without integer id");
  return doc;
}

inline Json message(std::string_view kind, std::int64_t id) { return Json{{"kind", kind}, {"id", id}}; }

inline Json error_message(std::int64_t id, std::string_view code, std::string_view text) {
  Json j = message("error", id);
  j["code"] = code;
  j["message"] = text;
  return j;
}

inline Json info_to_json(const EncoderInfo& info, std::int64_t id) {
  Json j = message("info", id);
  j["N"] = info.num_tokens;
  j["d"] = info.dim;
  j["L"] = info.layers;
  j["H"] = info.heads;
  j["channels"] = info.channels;
  j["height"] = info.height;
  j["width"] = info.width;
  j["patch_size"] = info.patch_size;
  j["provider_id"] = info.provider_id;
  return j;
}

inline EncoderInfo info_from_json(const Json& j) {
  try {
    EncoderInfo info;
    info.num_tokens = j.at("N").get<int>();
    info.dim = j.at("d").get<int>();
    info.layers = j.at("L").get<int>();
    info.heads = j.at("H").get<int>();
    info.channels = j.at("channels").get<int>();
    info.height = j.at("height").get<int>();
    info.width = j.at("width").get<int>();
    info.patch_size = j.at("patch_size").get<int>();
    info.provider_id = j.at("provider_id").get<std::string>();
    require(info.num_tokens > 0 && info.dim > 0 && info.layers > 0 && info.heads > 0 && info.channels > 0 &&
                info.height > 0 && info.width > 0 && info.patch_size > 0,
            ErrorCode::MalformedMessage, "info counts must be positive");
    return info;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::MalformedMessage, std::string("bad info message: ") + e.what());
  }
}

template <typename T>
Json attention_to_json(const AttentionProfile<T>& a) {
  WireTensor t;
  t.shape = {static_cast<std::uint64_t>(a.layers), static_cast<std::uint64_t>(a.heads),
             static_cast<std::uint64_t>(a.length)};
  t.data.assign(a.rows.begin(), a.rows.end());
  return tensor_to_json(t);
}

template <typename T>
AttentionProfile<T> attention_from_json(const Json& j) {
  const WireTensor t = tensor_from_json(j);
  require(t.shape.size() == 3, ErrorCode::MalformedMessage, "attention must have rank 3");
  AttentionProfile<T> a;
  a.layers = static_cast<int>(t.shape[0]);
  a.heads = static_cast<int>(t.shape[1]);
  a.length = static_cast<int>(t.shape[2]);
  a.rows.assign(t.data.begin(), t.data.end());
  return a;
}

}  // namespace paattack::wire
