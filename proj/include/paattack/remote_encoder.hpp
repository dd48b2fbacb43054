#pragma once

#include "paattack/encoder.hpp"
#include "paattack/transport.hpp"
#include "paattack/wire.hpp"

#include <functional>
#include <memory>
#include <mutex>
#include <string>
#include <vector>

namespace paattack::wire {

// One handshaken connection: hello/hello, then info (cached). Single owner.
class Connection {
 public:
  explicit Connection(std::unique_ptr<Stream> stream) : stream_(std::move(stream)) {
    Json hello = message("hello", next_id_++);
    hello["version"] = kProtocolVersion;
    const Json reply = call(hello, "hello");
    require(reply.contains("version") && reply["version"] == kProtocolVersion, ErrorCode::ProtocolVersion,
            "server speaks protocol version " + reply.value("version", std::string("?")));
    info_ = info_from_json(call(message("info", next_id_++), "info"));
  }

  const EncoderInfo& info() const { return info_; }

  // Sends a request and returns its reply, which must echo the id and have
  // the expected kind. Error replies are mapped onto local error codes.
  Json call(const Json& request, std::string_view expected_kind) {
    send_message(*stream_, request);
    Json reply = receive_message(*stream_);
    require(reply["id"] == request["id"], ErrorCode::MalformedMessage, "reply id does not echo the request id");
    const std::string kind = reply["kind"].get<std::string>();
    if (kind == "error") {
      const std::string code = reply.value("code", std::string("internal"));
      const std::string text = "server error (" + code + "): " + reply.value("message", std::string{});
      if (code == "version") throw Error(ErrorCode::ProtocolVersion, text);
      if (code == "shape") throw Error(ErrorCode::ShapeMismatch, text);
      if (code == "malformed") throw Error(ErrorCode::MalformedMessage, text);
      throw Error(ErrorCode::RemoteError, text);
    }
    require(kind == expected_kind, ErrorCode::MalformedMessage,
            "expected " + std::string(expected_kind) + " reply, got " + kind);
    return reply;
  }

  std::int64_t next_id() { return next_id_++; }

 private:
  std::unique_ptr<Stream> stream_;
  EncoderInfo info_;
  std::int64_t next_id_ = 1;
};

using StreamFactory = std::function<std::unique_ptr<Stream>()>;

// Encoder provider backed by a remote service. Each concurrent caller checks
// out its own connection; idle connections are pooled. Values cross the
// wire as 32-bit floats.
template <typename T>
class RemoteEncoder final : public Encoder<T> {
 public:
  explicit RemoteEncoder(StreamFactory factory) : factory_(std::move(factory)) {
    auto first = std::make_unique<Connection>(factory_());
    info_ = first->info();
    idle_.push_back(std::move(first));
  }

  static RemoteEncoder tcp(const std::string& host, int port) {
    return RemoteEncoder([host, port] { return tcp_connect(host, port); });
  }

  static RemoteEncoder subprocess(const std::vector<std::string>& argv) {
    return RemoteEncoder([argv] { return std::make_unique<Subprocess>(argv); });
  }

  EncoderInfo info() const override { return info_; }

  Encoded<T> encode(const ImageTensor<T>& x) const override {
    check_image_shape(info_, x.channels, x.height, x.width);
    auto conn = checkout();
    Json req = message("encode_request", conn->next_id());
    req["image"] = tensor_to_json(image_tensor(x));
    const Json reply = conn->call(req, "encode_reply");
    Encoded<T> out;
    try {
      out.features.patch_tokens = matrix_from_wire<T>(tensor_from_json(reply.at("patch_tokens")));
      out.features.class_token = vector_from_wire<T>(tensor_from_json(reply.at("class_token")));
      out.attention = attention_from_json<T>(reply.at("attention"));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedMessage, std::string("bad encode_reply: ") + e.what());
    } catch (const Error& e) {
      throw Error(ErrorCode::MalformedMessage, std::string("bad encode_reply: ") + e.what());
    }
    require(out.features.patch_tokens.rows() == info_.num_tokens && out.features.patch_tokens.cols() == info_.dim &&
                out.features.class_token.size() == info_.dim && out.attention.layers == info_.layers &&
                out.attention.heads == info_.heads && out.attention.length == info_.num_tokens + 1,
            ErrorCode::MalformedMessage, "encode_reply disagrees with declared encoder info");
    checkin(std::move(conn));
    return out;
  }

  std::vector<T> vjp(const ImageTensor<T>& x, const Matrix<T>& cot_patch, const Vector<T>& cot_class) const override {
    check_image_shape(info_, x.channels, x.height, x.width);
    check_cotangent_shape(info_, cot_patch, cot_class);
    auto conn = checkout();
    Json req = message("vjp_request", conn->next_id());
    req["image"] = tensor_to_json(image_tensor(x));
    req["cotangent_patch"] = tensor_to_json(matrix_tensor(cot_patch));
    req["cotangent_class"] = tensor_to_json(vector_tensor(cot_class));
    const Json reply = conn->call(req, "vjp_reply");
    WireTensor g;
    try {
      g = tensor_from_json(reply.at("gradient"));
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::MalformedMessage, std::string("bad vjp_reply: ") + e.what());
    }
    require(g.data.size() == x.pixels.size(), ErrorCode::MalformedMessage, "vjp_reply gradient has the wrong size");
    checkin(std::move(conn));
    return std::vector<T>(g.data.begin(), g.data.end());
  }

  // Connections opened so far (pooled or in use).
  size_t connections_opened() const {
    std::lock_guard lock(mutex_);
    return opened_;
  }

 private:
  std::unique_ptr<Connection> checkout() const {
    {
      std::lock_guard lock(mutex_);
      if (!idle_.empty()) {
        auto c = std::move(idle_.back());
        idle_.pop_back();
        return c;
      }
      ++opened_;
    }
    auto c = std::make_unique<Connection>(factory_());
    require(c->info() == info_, ErrorCode::MalformedMessage, "server info changed between connections");
    return c;
  }

  // Failed calls drop their connection instead of returning it, since the
  // stream may be out of sync.
  void checkin(std::unique_ptr<Connection> c) const {
    std::lock_guard lock(mutex_);
    idle_.push_back(std::move(c));
  }

  StreamFactory factory_;
  EncoderInfo info_;
  mutable std::mutex mutex_;
  mutable std::vector<std::unique_ptr<Connection>> idle_;
  mutable size_t opened_ = 1;
};

}  // namespace paattack::wire
