// SPDX-License-Identifier: Apache-2.0
#pragma once

// Prediction-only TCP service for a source model, and its client.
//
// Framing: u32 little-endian payload length, then a UTF-8 JSON object.
// Requests:
//   {"type":"hello"}
//   {"type":"predict","mode":"soft"|"hard","samples":[[T*D_in values], ...]}
// Responses:
//   {"type":"hello","series_len":T,"channels":D_in,"classes":K}
//   {"type":"predict","mode":"soft","probs":[[K values], ...]}
//   {"type":"predict","mode":"hard","labels":[...]}
//   {"type":"error","code":"FORBIDDEN"|"MALFORMED"|"BAD_REQUEST","message":...}
// Any other request type is answered with FORBIDDEN. Doubles are written in
// shortest round-trip form, so values survive the wire unchanged.

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/time.h>
#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <mutex>
#include <optional>
#include <ostream>
#include <string>
#include <thread>

#include <json.hpp>

#include "cpfm/teacher.hpp"

namespace cpfm {

using json = nlohmann::json;

inline constexpr std::size_t kMaxFrameBytes = std::size_t{1} << 28;
inline constexpr const char* kTeacherAddrEnv = "CPFM_TEACHER_ADDR";

namespace wire {

struct Address {
  std::string host;
  std::uint16_t port = 0;
};

/// "host:port"; the host may be empty (meaning 127.0.0.1).
inline Address parse_address(const std::string& text) {
  const auto colon = text.rfind(':');
  if (colon == std::string::npos) throw ConfigError("address '" + text + "' is not host:port");
  Address a;
  a.host = text.substr(0, colon);
  if (a.host.empty()) a.host = "127.0.0.1";
  const std::string port = text.substr(colon + 1);
  char* end = nullptr;
  const long p = std::strtol(port.c_str(), &end, 10);
  if (port.empty() || *end != '\0' || p < 0 || p > 65535) throw ConfigError("bad port in address '" + text + "'");
  a.port = static_cast<std::uint16_t>(p);
  return a;
}

/// Closes the descriptor on destruction.
class Socket {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {}
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Socket() { reset(); }
  int fd() const { return fd_; }
  bool valid() const { return fd_ >= 0; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

inline std::string sys_error(const std::string& what) { return what + ": " + std::strerror(errno); }

inline void send_all(int fd, const char* data, std::size_t n) {
  while (n > 0) {
    const ssize_t sent = ::send(fd, data, n, MSG_NOSIGNAL);
    if (sent < 0) {
      if (errno == EINTR) continue;
      throw TransportError(sys_error("send"));
    }
    data += sent;
    n -= static_cast<std::size_t>(sent);
  }
}

/// Reads exactly n bytes. Returns false on a clean close before the first byte.
inline bool recv_all(int fd, char* data, std::size_t n) {
  std::size_t got = 0;
  while (got < n) {
    const ssize_t r = ::recv(fd, data + got, n - got, 0);
    if (r == 0) {
      if (got == 0) return false;
      throw TransportError("connection closed mid-frame");
    }
    if (r < 0) {
      if (errno == EINTR) continue;
      throw TransportError(sys_error("recv"));
    }
    got += static_cast<std::size_t>(r);
  }
  return true;
}

inline void write_frame(int fd, const std::string& payload) {
  if (payload.size() > kMaxFrameBytes) throw ContractError("frame too large");
  const auto n = static_cast<std::uint32_t>(payload.size());
  const char header[4] = {static_cast<char>(n & 0xff), static_cast<char>((n >> 8) & 0xff),
                          static_cast<char>((n >> 16) & 0xff), static_cast<char>((n >> 24) & 0xff)};
  send_all(fd, header, 4);
  send_all(fd, payload.data(), payload.size());
}

enum class FrameStatus { ok, closed, too_large };

inline FrameStatus read_frame(int fd, std::string& payload) {
  unsigned char header[4];
  if (!recv_all(fd, reinterpret_cast<char*>(header), 4)) return FrameStatus::closed;
  const std::uint32_t n = header[0] | (header[1] << 8) | (header[2] << 16) | (std::uint32_t{header[3]} << 24);
  if (n > kMaxFrameBytes) return FrameStatus::too_large;
  payload.resize(n);
  if (n > 0 && !recv_all(fd, payload.data(), n)) throw TransportError("connection closed mid-frame");
  return FrameStatus::ok;
}

inline Socket connect_to(const Address& a) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  const std::string port = std::to_string(a.port);
  if (const int rc = ::getaddrinfo(a.host.c_str(), port.c_str(), &hints, &res); rc != 0) {
    throw TransportError("resolve " + a.host + ": " + ::gai_strerror(rc));
  }
  std::string last = "no addresses";
  for (addrinfo* p = res; p; p = p->ai_next) {
    Socket s(::socket(p->ai_family, p->ai_socktype, p->ai_protocol));
    if (!s.valid()) continue;
    if (::connect(s.fd(), p->ai_addr, p->ai_addrlen) == 0) {
      ::freeaddrinfo(res);
      const int one = 1;
      ::setsockopt(s.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      return s;
    }
    last = std::strerror(errno);
  }
  ::freeaddrinfo(res);
  throw TransportError("connect " + a.host + ":" + port + ": " + last);
}

inline json error_message(const std::string& code, const std::string& message) {
  return {{"type", "error"}, {"code", code}, {"message", message}};
}

}  // namespace wire

/// Request counters. The service keeps nothing else about its callers.
struct ServiceStats {
  std::size_t connections = 0;
  std::size_t hello = 0;
  std::size_t predict = 0;
  std::size_t samples = 0;
  std::size_t forbidden = 0;
  std::size_t malformed = 0;
  std::size_t bad_request = 0;
};

/// Answers one request payload. Never throws for bad input; errors become
/// error responses.
inline std::string handle_request(Teacher& teacher, const std::string& payload, ServiceStats& stats) {
  json req = json::parse(payload, nullptr, false);
  if (req.is_discarded() || !req.is_object()) {
    ++stats.malformed;
    return wire::error_message("MALFORMED", "payload is not a JSON object").dump();
  }
  const auto type_it = req.find("type");
  if (type_it == req.end() || !type_it->is_string()) {
    ++stats.malformed;
    return wire::error_message("MALFORMED", "missing string field 'type'").dump();
  }
  const std::string type = type_it->get<std::string>();
  const TeacherInfo info = teacher.info();
  auto bad = [&](const std::string& why) {
    ++stats.bad_request;
    return wire::error_message("BAD_REQUEST", why).dump();
  };

  if (type == "hello") {
    if (req.size() != 1) return bad("hello takes no fields");
    ++stats.hello;
    return json{{"type", "hello"},
                {"series_len", info.series_len},
                {"channels", info.channels},
                {"classes", info.classes}}
        .dump();
  }
  if (type != "predict") {
    ++stats.forbidden;
    return wire::error_message("FORBIDDEN", "message type '" + type + "' is not served").dump();
  }

  for (const auto& item : req.items())
    if (item.key() != "type" && item.key() != "mode" && item.key() != "samples") {
      return bad("unknown field '" + item.key() + "'");
    }
  const auto mode_it = req.find("mode");
  if (mode_it == req.end() || !mode_it->is_string()) return bad("missing string field 'mode'");
  const std::string mode = mode_it->get<std::string>();
  if (mode != "soft" && mode != "hard") return bad("mode must be soft or hard");
  const auto samples_it = req.find("samples");
  if (samples_it == req.end() || !samples_it->is_array()) return bad("missing array field 'samples'");

  const std::size_t width = std::size_t{info.series_len} * info.channels;
  Dataset batch{info.series_len, info.channels, info.classes, {}, {}, false};
  batch.values.reserve(samples_it->size() * width);
  for (const json& row : *samples_it) {
    if (!row.is_array() || row.size() != width) {
      return bad("each sample needs " + std::to_string(width) + " values");
    }
    for (const json& v : row) {
      if (!v.is_number()) return bad("sample values must be numbers");
      batch.values.push_back(v.get<double>());
    }
  }
  ++stats.predict;
  stats.samples += batch.size();

  json resp{{"type", "predict"}, {"mode", mode}};
  if (mode == "soft") {
    resp["probs"] = teacher.soft_labels(batch);
  } else {
    resp["labels"] = teacher.hard_labels(batch);
  }
  return resp.dump();
}

class TeacherServer {
 public:
  /// Binds and listens immediately; port 0 picks a free port.
  TeacherServer(std::shared_ptr<Teacher> teacher, const std::string& address, std::ostream* log = nullptr)
      : teacher_(std::move(teacher)), log_(log) {
    const wire::Address a = wire::parse_address(address);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(a.port);
    const std::string host = a.host == "localhost" ? "127.0.0.1" : a.host;
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) {
      throw ConfigError("serve: host must be an IPv4 address, got '" + a.host + "'");
    }
    listener_ = wire::Socket(::socket(AF_INET, SOCK_STREAM, 0));
    if (!listener_.valid()) throw TransportError(wire::sys_error("socket"));
    const int one = 1;
    ::setsockopt(listener_.fd(), SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    if (::bind(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      throw TransportError(wire::sys_error("bind " + address));
    }
    if (::listen(listener_.fd(), 16) != 0) throw TransportError(wire::sys_error("listen"));
    socklen_t len = sizeof addr;
    ::getsockname(listener_.fd(), reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
  }

  TeacherServer(const TeacherServer&) = delete;
  TeacherServer& operator=(const TeacherServer&) = delete;
  ~TeacherServer() { stop(); }

  std::uint16_t port() const { return port_; }
  std::string address() const { return "127.0.0.1:" + std::to_string(port_); }

  /// Runs the accept loop on a background thread.
  void start() {
    if (thread_.joinable()) return;
    thread_ = std::thread([this] { serve_forever(); });
  }

  /// Blocking accept loop, one connection at a time, until stop().
  void serve_forever() {
    while (!stopping_) {
      if (!wait_readable(listener_.fd())) continue;
      wire::Socket conn(::accept(listener_.fd(), nullptr, nullptr));
      if (!conn.valid()) continue;
      const int one = 1;
      ::setsockopt(conn.fd(), IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
      // A peer that stalls mid-frame is dropped rather than holding the loop.
      const timeval timeout{10, 0};
      ::setsockopt(conn.fd(), SOL_SOCKET, SO_RCVTIMEO, &timeout, sizeof timeout);
      bump([](ServiceStats& s) { ++s.connections; });
      try {
        serve_connection(conn.fd());
      } catch (const TransportError&) {
        // The peer went away; wait for the next one.
      }
    }
  }

  void stop() {
    stopping_ = true;
    if (thread_.joinable()) thread_.join();
  }

  ServiceStats stats() const {
    std::lock_guard lock(mutex_);
    return stats_;
  }

 private:
  bool wait_readable(int fd) const {
    pollfd p{fd, POLLIN, 0};
    return ::poll(&p, 1, 50) > 0;
  }

  template <class F>
  void bump(F&& f) {
    std::lock_guard lock(mutex_);
    f(stats_);
  }

  void serve_connection(int fd) {
    std::string payload;
    while (!stopping_) {
      if (!wait_readable(fd)) continue;
      const wire::FrameStatus st = wire::read_frame(fd, payload);
      if (st == wire::FrameStatus::closed) return;
      if (st == wire::FrameStatus::too_large) {
        // The stream cannot be resynchronized after an oversized header.
        bump([](ServiceStats& s) { ++s.malformed; });
        wire::write_frame(fd, wire::error_message("MALFORMED", "frame exceeds size limit").dump());
        return;
      }
      ServiceStats local;
      std::string reply = handle_request(*teacher_, payload, local);
      bump([&](ServiceStats& s) {
        s.hello += local.hello;
        s.predict += local.predict;
        s.samples += local.samples;
        s.forbidden += local.forbidden;
        s.malformed += local.malformed;
        s.bad_request += local.bad_request;
      });
      if (log_) {
        const ServiceStats now = stats();
        *log_ << "requests hello=" << now.hello << " predict=" << now.predict << " samples=" << now.samples
              << " refused=" << now.forbidden + now.malformed + now.bad_request << '\n';
      }
      wire::write_frame(fd, reply);
    }
  }

  std::shared_ptr<Teacher> teacher_;
  std::ostream* log_;
  wire::Socket listener_;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::thread thread_;
  mutable std::mutex mutex_;
  ServiceStats stats_;
};

/// Error response from the service.
class ServiceError : public ContractError {
 public:
  ServiceError(std::string code, const std::string& message)
      : ContractError("teacher service " + code + ": " + message), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

inline std::string default_teacher_address() {
  const char* env = std::getenv(kTeacherAddrEnv);
  return env && *env ? env : "127.0.0.1:7070";
}

struct RetryPolicy {
  std::size_t retries = 3;
  std::chrono::milliseconds first_backoff{50};
};

class RemoteTeacher final : public Teacher {
 public:
  explicit RemoteTeacher(std::string address = default_teacher_address(), RetryPolicy retry = {})
      : address_(wire::parse_address(address)), retry_(retry) {}

  TeacherInfo info() override {
    if (!info_) {
      const json r = call(json{{"type", "hello"}}, "hello");
      info_ = TeacherInfo{r.at("series_len").get<std::uint32_t>(), r.at("channels").get<std::uint32_t>(),
                          r.at("classes").get<std::uint32_t>()};
    }
    return *info_;
  }

  std::vector<Distribution> soft_labels(const Dataset& batch) override {
    const TeacherInfo ti = info();
    const json r = call(request(batch, "soft"), "predict");
    const auto probs = r.at("probs").get<std::vector<Distribution>>();
    if (probs.size() != batch.size()) throw ContractError("teacher service returned the wrong number of labels");
    for (const Distribution& p : probs) {
      if (p.size() != ti.classes) throw ContractError("teacher service returned a label of the wrong size");
      double sum = 0.0;
      for (double v : p) sum += v;
      if (std::abs(sum - 1.0) > 1e-9) throw ContractError("teacher service returned a label off the simplex");
    }
    return probs;
  }

  std::vector<std::size_t> hard_labels(const Dataset& batch) override {
    const TeacherInfo ti = info();
    const json r = call(request(batch, "hard"), "predict");
    auto labels = r.at("labels").get<std::vector<std::size_t>>();
    if (labels.size() != batch.size()) throw ContractError("teacher service returned the wrong number of labels");
    for (std::size_t l : labels)
      if (l >= ti.classes) throw ContractError("teacher service returned an out-of-range class");
    return labels;
  }

 private:
  json request(const Dataset& batch, const char* mode) {
    check_batch_shape(info(), batch);
    json samples = json::array();
    for (std::size_t i = 0; i < batch.size(); ++i) {
      auto s = batch.sample(i);
      samples.push_back(std::vector<double>(s.begin(), s.end()));
    }
    return {{"type", "predict"}, {"mode", mode}, {"samples", std::move(samples)}};
  }

  /// Sends one request, reconnecting and backing off on transport failures.
  json call(const json& req, const std::string& expect_type) {
    const std::string payload = req.dump();
    auto backoff = retry_.first_backoff;
    for (std::size_t attempt = 0;; ++attempt) {
      try {
        if (!conn_.valid()) conn_ = wire::connect_to(address_);
        wire::write_frame(conn_.fd(), payload);
        std::string reply;
        if (wire::read_frame(conn_.fd(), reply) != wire::FrameStatus::ok) {
          throw TransportError("service closed the connection");
        }
        json r = json::parse(reply, nullptr, false);
        if (r.is_discarded() || !r.is_object()) throw ContractError("teacher service sent a malformed reply");
        if (r.value("type", "") == "error") throw ServiceError(r.value("code", "?"), r.value("message", ""));
        if (r.value("type", "") != expect_type) throw ContractError("teacher service sent an unexpected reply");
        return r;
      } catch (const TransportError& e) {
        conn_.reset();
        if (attempt >= retry_.retries) {
          throw TransportError("teacher at " + address_.host + ":" + std::to_string(address_.port) +
                               " unreachable after " + std::to_string(attempt + 1) + " attempts: " + e.what());
        }
        std::this_thread::sleep_for(backoff);
        backoff *= 2;
      }
    }
  }

  wire::Address address_;
  RetryPolicy retry_;
  wire::Socket conn_;
  std::optional<TeacherInfo> info_;
};

}  // namespace cpfm
