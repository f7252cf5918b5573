#pragma once

#include <arpa/inet.h>
#include <fcntl.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <climits>
#include <cstring>
#include <functional>
#include <list>
#include <string>
#include <thread>
#include <utility>
#include <vector>

#include "privpart/data.hpp"
#include "privpart/metrics.hpp"
#include "privpart/partition.hpp"
#include "privpart/wire.hpp"

namespace privpart {

namespace detail {

class UniqueFd {
 public:
  UniqueFd() = default;
  explicit UniqueFd(int fd) : fd_(fd) {}
  UniqueFd(UniqueFd&& o) noexcept : fd_(o.release()) {}
  UniqueFd& operator=(UniqueFd&& o) noexcept {
    reset(o.release());
    return *this;
  }
  UniqueFd(const UniqueFd&) = delete;
  UniqueFd& operator=(const UniqueFd&) = delete;
  ~UniqueFd() { reset(); }

  int get() const { return fd_; }
  int release() { return std::exchange(fd_, -1); }
  void reset(int fd = -1) {
    if (fd_ >= 0) ::close(fd_);
    fd_ = fd;
  }
  explicit operator bool() const { return fd_ >= 0; }

 private:
  int fd_ = -1;
};

using NetClock = std::chrono::steady_clock;

inline int remaining_ms(NetClock::time_point deadline) {
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      deadline - NetClock::now())
                      .count();
  if (ms <= 0) return 0;
  return ms > INT_MAX ? INT_MAX : static_cast<int>(ms);
}

inline sockaddr_in make_addr(const std::string& host, uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  const std::string ip = host == "localhost" ? "127.0.0.1" : host;
  if (inet_pton(AF_INET, ip.c_str(), &addr.sin_addr) != 1)
    throw NetError("cannot parse IPv4 address '" + host + "'");
  return addr;
}

inline void wait_ready(int fd, short events, NetClock::time_point deadline,
                       const char* what) {
  for (;;) {
    pollfd p{fd, events, 0};
    const int rc = ::poll(&p, 1, remaining_ms(deadline));
    if (rc > 0) return;
    if (rc == 0) throw NetError(std::string(what) + " timed out");
    if (errno != EINTR)
      throw NetError(std::string(what) + " poll failed: " +
                     std::strerror(errno));
  }
}

inline void send_all(int fd, const uint8_t* data, size_t n,
                     NetClock::time_point deadline, const char* what) {
  size_t off = 0;
  while (off < n) {
    const ssize_t k = ::send(fd, data + off, n - off, MSG_NOSIGNAL);
    if (k > 0) {
      off += static_cast<size_t>(k);
      continue;
    }
    if (k < 0 && (errno == EAGAIN || errno == EWOULDBLOCK)) {
      wait_ready(fd, POLLOUT, deadline, what);
      continue;
    }
    if (k < 0 && errno == EINTR) continue;
    throw NetError(std::string(what) + " send failed: " +
                   std::strerror(errno));
  }
}

inline void recv_exact(int fd, uint8_t* data, size_t n,
                       NetClock::time_point deadline, const char* what) {
  size_t off = 0;
  while (off < n) {
    const ssize_t k = ::recv(fd, data + off, n - off, 0);
    if (k > 0) {
      off += static_cast<size_t>(k);
      continue;
    }
    if (k == 0)
      throw NetError(std::string(what) + ": connection closed mid-frame");
    if (errno == EAGAIN || errno == EWOULDBLOCK) {
      wait_ready(fd, POLLIN, deadline, what);
      continue;
    }
    if (errno == EINTR) continue;
    throw NetError(std::string(what) + " recv failed: " +
                   std::strerror(errno));
  }
}

}  // namespace detail

struct ServeConfig {
  std::string host = "127.0.0.1";
  uint16_t port = 0;  // 0 binds an ephemeral port
  size_t max_concurrent = 4;
  size_t payload_cap = default_payload_cap;
  int io_timeout_ms = 30000;  // per-frame read budget once a frame starts
};

// Serves the remote partition over a stream socket. Connections are handled
// one frame at a time, up to max_concurrent connections in parallel; the
// partition itself is a frozen read-only snapshot, so concurrent forwards
// need no locking. Malformed traffic gets an ERROR frame and the connection
// stays usable, except when the magic itself is wrong (the stream cannot be
// re-synchronized, so it is dropped after the ERROR).
class RemoteServer {
 public:
  explicit RemoteServer(BipartiteNetwork<float> bp, ServeConfig cfg = {})
      : bp_(std::move(bp)), cfg_(std::move(cfg)) {
    if (bp_.remote.input_shape() != bp_.hidden_shape)
      throw Error("remote partition expects input " +
                  shape_str(bp_.remote.input_shape()) +
                  " but the hidden descriptor says " +
                  shape_str(bp_.hidden_shape));
  }

  RemoteServer(const RemoteServer&) = delete;
  RemoteServer& operator=(const RemoteServer&) = delete;
  ~RemoteServer() { stop(); }

  void start() {
    if (accept_thread_.joinable()) throw NetError("server already running");
    detail::UniqueFd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd)
      throw NetError(std::string("socket failed: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(fd.get(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr = detail::make_addr(cfg_.host, cfg_.port);
    if (::bind(fd.get(), reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) !=
        0)
      throw NetError("bind to " + cfg_.host + ":" +
                     std::to_string(cfg_.port) + " failed: " +
                     std::strerror(errno));
    if (::listen(fd.get(), 16) != 0)
      throw NetError(std::string("listen failed: ") + std::strerror(errno));
    sockaddr_in bound{};
    socklen_t len = sizeof(bound);
    ::getsockname(fd.get(), reinterpret_cast<sockaddr*>(&bound), &len);
    port_ = ntohs(bound.sin_port);
    stop_.store(false);
    listener_ = std::move(fd);
    accept_thread_ = std::thread([this] { accept_loop(); });
  }

  // Graceful shutdown: stops accepting, lets every frame already on the
  // wire finish and get its response, then joins all workers.
  void stop() {
    if (!accept_thread_.joinable()) return;
    stop_.store(true);
    accept_thread_.join();
    listener_.reset();
    for (Conn& c : conns_)
      if (c.thread.joinable()) c.thread.join();
    conns_.clear();
  }

  uint16_t port() const { return port_; }
  size_t requests_served() const { return served_.load(); }

  // Observer invoked after each fully received frame, before dispatch.
  void on_frame(std::function<void(MsgType, size_t)> fn) {
    observer_ = std::move(fn);
  }

 private:
  struct Conn {
    std::thread thread;
    std::atomic<bool> done{false};
  };

  void accept_loop() {
    while (!stop_.load()) {
      reap_finished();
      if (active_.load() >= cfg_.max_concurrent) {
        std::this_thread::sleep_for(std::chrono::milliseconds(5));
        continue;
      }
      pollfd p{listener_.get(), POLLIN, 0};
      const int rc = ::poll(&p, 1, 50);
      if (rc <= 0) continue;
      const int client = ::accept(listener_.get(), nullptr, nullptr);
      if (client < 0) continue;
      active_.fetch_add(1);
      Conn& conn = conns_.emplace_back();
      conn.thread = std::thread([this, client, &conn] {
        handle_connection(detail::UniqueFd(client));
        active_.fetch_sub(1);
        conn.done.store(true);
      });
    }
  }

  void reap_finished() {
    for (auto it = conns_.begin(); it != conns_.end();) {
      if (it->done.load()) {
        it->thread.join();
        it = conns_.erase(it);
      } else {
        ++it;
      }
    }
  }

  // Waits for the first byte of the next frame, honoring shutdown between
  // frames; once a frame has started it is read to completion (bounded by
  // io_timeout and a short post-shutdown grace) so in-flight work drains.
  bool read_header(int fd, uint8_t* out) {
    size_t off = 0;
    auto deadline = detail::NetClock::time_point::max();
    detail::NetClock::time_point stop_seen{};
    while (off < wire_header_bytes) {
      if (detail::NetClock::now() > deadline) return false;
      if (stop_.load()) {
        if (off == 0) return false;
        if (stop_seen == detail::NetClock::time_point{})
          stop_seen = detail::NetClock::now() + std::chrono::seconds(1);
        else if (detail::NetClock::now() > stop_seen)
          return false;
      }
      pollfd p{fd, POLLIN, 0};
      const int rc = ::poll(&p, 1, 50);
      if (rc < 0 && errno != EINTR) return false;
      if (rc <= 0) continue;
      const ssize_t k = ::recv(fd, out + off, wire_header_bytes - off, 0);
      if (k > 0) {
        if (off == 0)
          deadline = detail::NetClock::now() +
                     std::chrono::milliseconds(cfg_.io_timeout_ms);
        off += static_cast<size_t>(k);
        continue;
      }
      if (k == 0) return false;
      if (errno != EINTR && errno != EAGAIN && errno != EWOULDBLOCK)
        return false;
    }
    return true;
  }

  bool read_body(int fd, uint8_t* out, size_t n) {
    const auto deadline = detail::NetClock::now() +
                          std::chrono::milliseconds(cfg_.io_timeout_ms);
    detail::NetClock::time_point stop_seen{};
    size_t off = 0;
    while (off < n) {
      if (detail::NetClock::now() > deadline) return false;
      if (stop_.load()) {
        if (stop_seen == detail::NetClock::time_point{})
          stop_seen = detail::NetClock::now() + std::chrono::seconds(1);
        else if (detail::NetClock::now() > stop_seen)
          return false;
      }
      pollfd p{fd, POLLIN, 0};
      const int rc = ::poll(&p, 1, 50);
      if (rc < 0 && errno != EINTR) return false;
      if (rc <= 0) continue;
      const ssize_t k = ::recv(fd, out + off, n - off, 0);
      if (k > 0) {
        off += static_cast<size_t>(k);
        continue;
      }
      if (k == 0) return false;
      if (errno != EINTR && errno != EAGAIN && errno != EWOULDBLOCK)
        return false;
    }
    return true;
  }

  bool drain_body(int fd, uint64_t n) {
    std::vector<uint8_t> scratch(64 * 1024);
    while (n > 0) {
      const size_t chunk = n < scratch.size() ? static_cast<size_t>(n)
                                              : scratch.size();
      if (!read_body(fd, scratch.data(), chunk)) return false;
      n -= chunk;
    }
    return true;
  }

  bool send_frame(int fd, MsgType type, const std::vector<uint8_t>& payload) {
    try {
      const std::vector<uint8_t> bytes = encode_frame(type, payload);
      const auto deadline = detail::NetClock::now() +
                            std::chrono::milliseconds(cfg_.io_timeout_ms);
      detail::send_all(fd, bytes.data(), bytes.size(), deadline, "reply");
      return true;
    } catch (const NetError&) {
      return false;
    }
  }

  Frame handle_request(MsgType type, const std::vector<uint8_t>& payload) {
    try {
      switch (type) {
        case MsgType::ping:
          return {MsgType::pong, {}};
        case MsgType::infer_req: {
          const Tensor<float> h = decode_tensor(payload);
          bool ok = h.rank() == bp_.hidden_shape.size() + 1;
          for (size_t i = 0; ok && i < bp_.hidden_shape.size(); ++i)
            ok = h.dim(i + 1) == bp_.hidden_shape[i];
          if (!ok)
            return {MsgType::error,
                    encode_error_payload(
                        WireFault::shape_mismatch,
                        "hidden batch " + shape_str(h.shape()) +
                            " does not match per-sample shape " +
                            shape_str(bp_.hidden_shape))};
          return {MsgType::infer_resp, encode_tensor(bp_.remote_forward(h))};
        }
        default:
          return {MsgType::error,
                  encode_error_payload(
                      WireFault::bad_type,
                      "server cannot handle message type " +
                          std::to_string(static_cast<int>(type)))};
      }
    } catch (const WireError& e) {
      return {MsgType::error, encode_error_payload(e.fault, e.what())};
    } catch (const std::exception& e) {
      return {MsgType::error,
              encode_error_payload(WireFault::internal, e.what())};
    }
  }

  void handle_connection(detail::UniqueFd fd) {
    for (;;) {
      uint8_t header[wire_header_bytes];
      if (!read_header(fd.get(), header)) return;
      FrameHeader h;
      try {
        h = parse_frame_header(header);
      } catch (const WireError& e) {
        send_frame(fd.get(), MsgType::error,
                   encode_error_payload(e.fault, e.what()));
        return;
      }
      if (h.length > cfg_.payload_cap) {
        if (!drain_body(fd.get(), h.length)) return;
        if (!send_frame(fd.get(), MsgType::error,
                        encode_error_payload(
                            WireFault::oversized,
                            "declared payload of " + std::to_string(h.length) +
                                " bytes exceeds the " +
                                std::to_string(cfg_.payload_cap) +
                                " byte cap")))
          return;
        continue;
      }
      std::vector<uint8_t> payload(h.length);
      if (h.length && !read_body(fd.get(), payload.data(), payload.size()))
        return;
      if (!h.known()) {
        if (!send_frame(fd.get(), MsgType::error,
                        encode_error_payload(
                            WireFault::bad_type,
                            "unknown message type " +
                                std::to_string(h.raw_type))))
          return;
        continue;
      }
      if (observer_) observer_(h.type(), payload.size());
      const Frame reply = handle_request(h.type(), payload);
      served_.fetch_add(1);
      if (!send_frame(fd.get(), reply.type, reply.payload)) return;
      if (stop_.load()) return;
    }
  }

  BipartiteNetwork<float> bp_;
  ServeConfig cfg_;
  detail::UniqueFd listener_;
  std::thread accept_thread_;
  std::list<Conn> conns_;
  std::atomic<bool> stop_{false};
  std::atomic<size_t> active_{0};
  std::atomic<size_t> served_{0};
  std::function<void(MsgType, size_t)> observer_;
  uint16_t port_ = 0;
};

// Blocking client connection. Every call shares one overall deadline across
// connect/send/receive; safe to use from multiple threads with separate
// instances.
class RemoteLink {
 public:
  RemoteLink(const std::string& host, uint16_t port, int timeout_ms = 10000)
      : host_(host), port_(port), timeout_ms_(timeout_ms) {
    const auto deadline = detail::NetClock::now() +
                          std::chrono::milliseconds(timeout_ms_);
    detail::UniqueFd fd(::socket(AF_INET, SOCK_STREAM, 0));
    if (!fd)
      throw NetError(std::string("socket failed: ") + std::strerror(errno));
    ::fcntl(fd.get(), F_SETFL, O_NONBLOCK);
    sockaddr_in addr = detail::make_addr(host, port);
    if (::connect(fd.get(), reinterpret_cast<sockaddr*>(&addr),
                  sizeof(addr)) != 0) {
      if (errno != EINPROGRESS) throw connect_error(std::strerror(errno));
      detail::wait_ready(fd.get(), POLLOUT, deadline, "connect");
      int err = 0;
      socklen_t len = sizeof(err);
      ::getsockopt(fd.get(), SOL_SOCKET, SO_ERROR, &err, &len);
      if (err != 0) throw connect_error(std::strerror(err));
    }
    fd_ = std::move(fd);
  }

  // Sends one frame and returns the raw reply.
  Frame exchange(MsgType type, const std::vector<uint8_t>& payload) {
    const auto deadline = detail::NetClock::now() +
                          std::chrono::milliseconds(timeout_ms_);
    const std::vector<uint8_t> bytes = encode_frame(type, payload);
    detail::send_all(fd_.get(), bytes.data(), bytes.size(), deadline,
                     "request");
    uint8_t header[wire_header_bytes];
    detail::recv_exact(fd_.get(), header, sizeof(header), deadline,
                       "response");
    const FrameHeader h = parse_frame_header(header);
    if (!h.known())
      throw NetError("server replied with unknown message type " +
                     std::to_string(h.raw_type));
    if (h.length > default_payload_cap)
      throw NetError("server reply of " + std::to_string(h.length) +
                     " bytes exceeds the payload cap");
    Frame f;
    f.type = h.type();
    f.payload.resize(h.length);
    if (h.length)
      detail::recv_exact(fd_.get(), f.payload.data(), f.payload.size(),
                         deadline, "response payload");
    return f;
  }

  // Like exchange, but ERROR replies become NetError exceptions.
  Frame roundtrip(MsgType type, const std::vector<uint8_t>& payload) {
    Frame reply = exchange(type, payload);
    if (reply.type == MsgType::error) {
      const ErrorInfo info = decode_error_payload(reply.payload);
      throw NetError(std::string("server fault (") + fault_name(info.fault) +
                     "): " + info.message);
    }
    return reply;
  }

  void ping() {
    const Frame f = roundtrip(MsgType::ping, {});
    if (f.type != MsgType::pong)
      throw NetError("expected PONG, got message type " +
                     std::to_string(static_cast<int>(f.type)));
  }

 private:
  NetError connect_error(const std::string& why) const {
    return NetError("connect to " + host_ + ":" + std::to_string(port_) +
                    " failed: " + why);
  }

  std::string host_;
  uint16_t port_;
  int timeout_ms_;
  detail::UniqueFd fd_;
};

struct InferenceResult {
  Tensor<float> logits;
  std::vector<int32_t> labels;
};

// Runs the local partition on the image batch, ships only the hidden
// activations to the server, and returns its logits with argmax labels.
// The raw pixels never leave this process.
inline InferenceResult infer(const BipartiteNetwork<float>& bp,
                             const std::string& host, uint16_t port,
                             const Tensor<float>& images,
                             int timeout_ms = 10000) {
  const Tensor<float> x =
      detail::shape_batch<float>(images, bp.local.input_shape());
  const Tensor<float> h = bp.local_forward(x);
  RemoteLink link(host, port, timeout_ms);
  const Frame reply = link.roundtrip(MsgType::infer_req, encode_tensor(h));
  if (reply.type != MsgType::infer_resp)
    throw NetError("expected INFER_RESP, got message type " +
                   std::to_string(static_cast<int>(reply.type)));
  InferenceResult out;
  out.logits = decode_tensor(reply.payload);
  if (out.logits.rank() != 2 || out.logits.dim(0) != h.dim(0))
    throw NetError("malformed logits batch " + shape_str(out.logits.shape()) +
                   " for " + std::to_string(h.dim(0)) + " samples");
  const size_t classes = out.logits.dim(1);
  out.labels.resize(out.logits.dim(0));
  for (size_t i = 0; i < out.labels.size(); ++i)
    out.labels[i] = static_cast<int32_t>(
        argmax_row(out.logits.data() + i * classes, classes));
  return out;
}

}  // namespace privpart
