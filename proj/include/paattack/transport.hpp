#pragma once

#include "paattack/core.hpp"
#include "paattack/wire.hpp"

#include <arpa/inet.h>
#include <cerrno>
#include <csignal>
#include <cstring>
#include <fcntl.h>
#include <memory>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <spawn.h>
#include <string>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>
#include <vector>

extern char** environ;

namespace paattack::wire {

// Byte stream carrying frames. read_exact throws Transport on EOF.
class Stream {
 public:
  virtual ~Stream() = default;
  virtual void write_all(std::string_view bytes) = 0;
  virtual std::string read_exact(size_t n) = 0;
  // Signals end of output to the peer where the transport allows it.
  virtual void close_write() {}
  // Unblocks pending reads from another thread where the transport allows it.
  virtual void interrupt() {}
};

inline std::string errno_text(const char* what) { return std::string(what) + ": " + std::strerror(errno); }

// A pair of file descriptors (identical for sockets). Owns them.
class FdStream final : public Stream {
 public:
  FdStream(int read_fd, int write_fd, bool socket, bool owns = true)
      : read_fd_(read_fd), write_fd_(write_fd), socket_(socket), owns_(owns) {}
  ~FdStream() override {
    if (!owns_) return;
    if (read_fd_ >= 0) ::close(read_fd_);
    if (write_fd_ >= 0 && write_fd_ != read_fd_) ::close(write_fd_);
  }
  FdStream(const FdStream&) = delete;
  FdStream& operator=(const FdStream&) = delete;

  void write_all(std::string_view bytes) override {
    require(write_fd_ >= 0, ErrorCode::Transport, "stream closed for writing");
    size_t done = 0;
    while (done < bytes.size()) {
      const ssize_t n = socket_ ? ::send(write_fd_, bytes.data() + done, bytes.size() - done, MSG_NOSIGNAL)
                                : ::write(write_fd_, bytes.data() + done, bytes.size() - done);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw Error(ErrorCode::Transport, errno_text("write failed"));
      done += static_cast<size_t>(n);
    }
  }

  std::string read_exact(size_t count) override {
    std::string out(count, '\0');
    size_t done = 0;
    while (done < count) {
      const ssize_t n = ::read(read_fd_, out.data() + done, count - done);
      if (n < 0 && errno == EINTR) continue;
      if (n < 0) throw Error(ErrorCode::Transport, errno_text("read failed"));
      if (n == 0)
        throw Error(ErrorCode::Transport, done == 0 ? "connection closed" : "connection closed mid-frame");
      done += static_cast<size_t>(n);
    }
    return out;
  }

  void close_write() override {
    if (socket_) {
      ::shutdown(write_fd_, SHUT_WR);
    } else if (write_fd_ >= 0) {
      if (owns_) ::close(write_fd_);
      write_fd_ = -1;
    }
  }

  void interrupt() override {
    if (socket_) ::shutdown(read_fd_, SHUT_RDWR);
  }

 private:
  int read_fd_;
  int write_fd_;
  bool socket_;
  bool owns_;
};

inline void send_message(Stream& s, const Json& message) { s.write_all(frame(message.dump())); }

// Reads one frame. EOF before the first byte is a Transport error (peer
// closed between frames); EOF anywhere later means a truncated frame and is
// reported as MalformedMessage.
inline std::string read_frame(Stream& s) {
  std::string bytes = s.read_exact(1);
  try {
    bytes += s.read_exact(3);
    bytes += s.read_exact(frame_length(bytes));
  } catch (const Error& e) {
    if (e.code() != ErrorCode::Transport) throw;
    throw Error(ErrorCode::MalformedMessage, std::string("truncated frame (") + e.what() + ")");
  }
  return bytes;
}

inline Json receive_message(Stream& s) { return parse_frame(read_frame(s)); }

inline std::unique_ptr<Stream> tcp_connect(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* found = nullptr;
  const int rc = ::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &found);
  require(rc == 0, ErrorCode::Transport, "cannot resolve " + host + ": " + ::gai_strerror(rc));
  int fd = -1;
  for (addrinfo* a = found; a; a = a->ai_next) {
    fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(found);
  require(fd >= 0, ErrorCode::Transport, "cannot connect to " + host + ":" + std::to_string(port));
  const int one = 1;
  ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
  return std::make_unique<FdStream>(fd, fd, true);
}

// Listening socket on the IPv4 loopback interface; port 0 picks a free port.
class TcpListener {
 public:
  explicit TcpListener(int port = 0, const std::string& address = "127.0.0.1") {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    require(fd_ >= 0, ErrorCode::Transport, errno_text("socket"));
    const int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, address.c_str(), &addr.sin_addr) != 1) {
      ::close(fd_);
      throw Error(ErrorCode::Transport, "bad listen address: " + address);
    }
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(fd_, 64) != 0) {
      const std::string msg = errno_text("bind/listen");
      ::close(fd_);
      throw Error(ErrorCode::Transport, msg);
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }
  ~TcpListener() { close(); }
  TcpListener(const TcpListener&) = delete;
  TcpListener& operator=(const TcpListener&) = delete;

  int port() const { return port_; }

  // Blocks for the next connection; returns nullptr once the listener is closed.
  std::unique_ptr<Stream> accept() {
    for (;;) {
      const int fd = ::accept(fd_, nullptr, nullptr);
      if (fd >= 0) {
        const int one = 1;
        ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
        return std::make_unique<FdStream>(fd, fd, true);
      }
      if (errno == EINTR) continue;
      return nullptr;
    }
  }

  // Unblocks a pending accept().
  void close() {
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  int port_ = 0;
};

// Child process whose stdin/stdout carry the frame stream.
class Subprocess final : public Stream {
 public:
  explicit Subprocess(const std::vector<std::string>& argv) {
    require(!argv.empty(), ErrorCode::Precondition, "subprocess needs a command");
    std::signal(SIGPIPE, SIG_IGN);
    int to_child[2], from_child[2];
    require(::pipe2(to_child, O_CLOEXEC) == 0, ErrorCode::Transport, errno_text("pipe"));
    if (::pipe2(from_child, O_CLOEXEC) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw Error(ErrorCode::Transport, errno_text("pipe"));
    }
    posix_spawn_file_actions_t actions;
    posix_spawn_file_actions_init(&actions);
    posix_spawn_file_actions_adddup2(&actions, to_child[0], STDIN_FILENO);
    posix_spawn_file_actions_adddup2(&actions, from_child[1], STDOUT_FILENO);
    std::vector<char*> args;
    for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    const int rc = ::posix_spawnp(&pid_, args[0], &actions, nullptr, args.data(), environ);
    posix_spawn_file_actions_destroy(&actions);
    ::close(to_child[0]);
    ::close(from_child[1]);
    if (rc != 0) {
      ::close(to_child[1]);
      ::close(from_child[0]);
      throw Error(ErrorCode::Transport, "cannot spawn " + argv[0] + ": " + std::strerror(rc));
    }
    io_ = std::make_unique<FdStream>(from_child[0], to_child[1], false);
  }

  ~Subprocess() override {
    io_->close_write();
    io_.reset();
    int status = 0;
    ::waitpid(pid_, &status, 0);
  }

  void write_all(std::string_view bytes) override { io_->write_all(bytes); }
  std::string read_exact(size_t n) override { return io_->read_exact(n); }
  void close_write() override { io_->close_write(); }

 private:
  pid_t pid_ = -1;
  std::unique_ptr<FdStream> io_;
};

// The current process's stdin/stdout (not owned).
inline std::unique_ptr<Stream> stdio_stream() {
  std::signal(SIGPIPE, SIG_IGN);
  return std::make_unique<FdStream>(STDIN_FILENO, STDOUT_FILENO, false, false);
}

}  // namespace paattack::wire
