#pragma once

#include "paattack/encoder.hpp"
#include "paattack/transport.hpp"
#include "paattack/wire.hpp"

#include <atomic>
#include <memory>
#include <mutex>
#include <thread>
#include <vector>

// Server side of the encoder wire protocol over any in-process Encoder.
// Used for loopback testing of the remote client and by `serve-loopback`.
namespace paattack::wire {

namespace detail {

inline std::string error_code_for(ErrorCode c) {
  switch (c) {
    case ErrorCode::ShapeMismatch: return "shape";
    case ErrorCode::ProtocolVersion: return "version";
    case ErrorCode::MalformedMessage: return "malformed";
    default: return "internal";
  }
}

}  // namespace detail

// Answers one request document. Never throws for request-level problems;
// they become error replies echoing the request id.
template <typename T>
Json handle_request(const Encoder<T>& encoder, const Json& request) {
  const std::int64_t id = request.value("id", std::int64_t{-1});
  const std::string kind = request.value("kind", std::string{});
  try {
    if (kind == "hello") {
      const auto version = request.contains("version") && request["version"].is_string()
                               ? request["version"].get<std::string>()
                               : std::string{};
      if (version != kProtocolVersion)
        return error_message(id, "version", "unsupported protocol version '" + version + "', expected '1'");
      Json reply = message("hello", id);
      reply["version"] = kProtocolVersion;
      return reply;
    }
    if (kind == "info") return info_to_json(encoder.info(), id);
    if (kind == "encode_request") {
      require(request.contains("image"), ErrorCode::MalformedMessage, "encode_request without image");
      const auto image = image_from_wire<T>(tensor_from_json(request["image"]));
      const auto info = encoder.info();
      check_image_shape(info, image.channels, image.height, image.width);
      const auto out = encoder.encode(image);
      Json reply = message("encode_reply", id);
      reply["patch_tokens"] = tensor_to_json(matrix_tensor(out.features.patch_tokens));
      reply["class_token"] = tensor_to_json(vector_tensor(out.features.class_token));
      reply["attention"] = attention_to_json(out.attention);
      return reply;
    }
    if (kind == "vjp_request") {
      require(request.contains("image") && request.contains("cotangent_patch") && request.contains("cotangent_class"),
              ErrorCode::MalformedMessage, "vjp_request needs image, cotangent_patch, cotangent_class");
      const auto image = image_from_wire<T>(tensor_from_json(request["image"]));
      const auto info = encoder.info();
      check_image_shape(info, image.channels, image.height, image.width);
      const auto cp = tensor_from_json(request["cotangent_patch"]);
      const auto cc = tensor_from_json(request["cotangent_class"]);
      require(cp.shape.size() == 2 && cc.shape.size() == 1, ErrorCode::ShapeMismatch, "cotangent rank mismatch");
      const auto cot_patch = matrix_from_wire<T>(cp);
      const auto cot_class = vector_from_wire<T>(cc);
      check_cotangent_shape(info, cot_patch, cot_class);
      const auto grad = encoder.vjp(image, cot_patch, cot_class);
      WireTensor g;
      g.shape = {static_cast<std::uint64_t>(image.channels), static_cast<std::uint64_t>(image.height),
                 static_cast<std::uint64_t>(image.width)};
      g.data.assign(grad.begin(), grad.end());
      Json reply = message("vjp_reply", id);
      reply["gradient"] = tensor_to_json(g);
      return reply;
    }
    return error_message(id, "unsupported", "unknown message kind '" + kind + "'");
  } catch (const Error& e) {
    return error_message(id, detail::error_code_for(e.code()), e.what());
  } catch (const std::exception& e) {
    return error_message(id, "internal", e.what());
  }
}

// Serves frames until the peer closes. A frame that cannot be parsed gets a
// "malformed" error reply (id -1) and ends the session, since framing can no
// longer be trusted.
template <typename T>
void serve_stream(const Encoder<T>& encoder, Stream& stream) {
  for (;;) {
    Json request;
    try {
      request = parse_frame(read_frame(stream));
    } catch (const Error& e) {
      if (e.code() == ErrorCode::Transport) return;  // peer closed between frames
      try {
        send_message(stream, error_message(-1, "malformed", e.what()));
      } catch (const Error&) {
      }
      return;
    }
    try {
      send_message(stream, handle_request(encoder, request));
    } catch (const Error&) {
      return;
    }
  }
}

// TCP loopback server: one thread per connection. The encoder must outlive
// the server and be safe for concurrent const calls.
template <typename T>
class TcpBridgeServer {
 public:
  TcpBridgeServer(const Encoder<T>& encoder, int port = 0) : encoder_(encoder), listener_(port) {
    acceptor_ = std::thread([this] { accept_loop(); });
  }
  ~TcpBridgeServer() { stop(); }
  TcpBridgeServer(const TcpBridgeServer&) = delete;
  TcpBridgeServer& operator=(const TcpBridgeServer&) = delete;

  int port() const { return listener_.port(); }

  void stop() {
    if (stopped_.exchange(true)) return;
    listener_.close();
    if (acceptor_.joinable()) acceptor_.join();
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(mutex_);
      for (auto* s : open_) s->interrupt();
      workers.swap(workers_);
    }
    for (auto& w : workers) w.join();
  }

  // Blocks until stop() is called from elsewhere or the listener fails.
  void wait() {
    if (acceptor_.joinable()) acceptor_.join();
  }

 private:
  void accept_loop() {
    while (!stopped_) {
      auto conn = listener_.accept();
      if (!conn) return;
      std::lock_guard lock(mutex_);
      if (stopped_) return;
      workers_.emplace_back([this, c = std::shared_ptr<Stream>(std::move(conn))] {
        {
          std::lock_guard l(mutex_);
          open_.push_back(c.get());
        }
        serve_stream(encoder_, *c);
        std::lock_guard l(mutex_);
        std::erase(open_, c.get());
      });
    }
  }

  const Encoder<T>& encoder_;
  TcpListener listener_;
  std::atomic<bool> stopped_{false};
  std::mutex mutex_;
  std::vector<std::thread> workers_;
  std::vector<Stream*> open_;
  std::thread acceptor_;
};

}  // namespace paattack::wire
