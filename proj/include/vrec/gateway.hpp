#pragma once

// Filtered inference service over a VersionStore.
//
// Wire protocol: UTF-8, one JSON object per line in each direction, one response per request
// line. An optional "id" member is echoed back.
//
//   {"classify": [x_1, ..., x_d]}
//     -> {"label": 3, "flagged": false, "delta": 0.01, "version": 2, "threshold": 0.07}
//        "delta" and "threshold" are null while no version has been retired.
//   {"breach": true}
//     -> {"rotated": true, "deployed": 3, "retired": [1, 2], "threshold": 0.09, "rotations": 2}
//   {"status": true}
//     -> {"deployed": 3, "retired": [1, 2], "threshold": 0.09, "queries": 120, "flagged": 7,
//         "rotations": 2, "errors": 0, "latency_us": {"count": 120, "mean": 41.5, "max": 210.0}}
//   anything else
//     -> {"error": "..."}   (the connection stays open)

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <chrono>
#include <cstdint>
#include <cstring>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "vrec/filter.hpp"
#include "vrec/versioning.hpp"

namespace vrec {

/// Immutable view of what is being served. A filter exists iff some version is retired.
struct GatewaySnapshot {
  std::shared_ptr<const ModelVersion> deployed;
  std::vector<int> retired_ids;
  std::optional<FilterState> filter;
};

struct ClassifyResponse {
  int label = 0;
  bool flagged = false;
  std::optional<double> delta;
  int version = 0;
  std::optional<double> threshold;
};

inline nlohmann::json to_json(const ClassifyResponse& r) {
  return {{"label", r.label},
          {"flagged", r.flagged},
          {"delta", r.delta ? nlohmann::json(*r.delta) : nlohmann::json(nullptr)},
          {"version", r.version},
          {"threshold", r.threshold ? nlohmann::json(*r.threshold) : nlohmann::json(nullptr)}};
}

/// Classifies `x` against one snapshot. Throws DimensionError on a wrong input length.
[[nodiscard]] inline ClassifyResponse classify_handler(std::span<const double> x, const GatewaySnapshot& snap) {
  const auto& model = snap.deployed->model;
  if (x.size() != model.input_dim()) throw DimensionError("classify input", model.input_dim(), x.size());
  ClassifyResponse r;
  r.version = snap.deployed->id;
  if (!snap.filter) {
    r.label = predict(model, x);
    return r;
  }
  const auto v = judge(x, *snap.filter);
  r.label = v.label;
  r.flagged = v.decision == Decision::flagged;
  r.delta = v.delta_max;
  r.threshold = snap.filter->threshold;
  return r;
}

/// Builds the snapshot for the store's current state, calibrating a filter over all retired
/// versions on `validation`.
[[nodiscard]] inline std::shared_ptr<const GatewaySnapshot> make_snapshot(const VersionStore& store,
                                                                          std::span<const Sample> validation,
                                                                          double target_fpr) {
  const auto* dep = store.deployed();
  if (dep == nullptr) throw std::invalid_argument("gateway: store has no deployed version");
  auto snap = std::make_shared<GatewaySnapshot>();
  snap->deployed = std::make_shared<const ModelVersion>(*dep);
  std::vector<MlpModel> breached;
  for (const auto* v : store.retired()) {
    snap->retired_ids.push_back(v->id);
    breached.push_back(v->model);
  }
  if (!breached.empty()) {
    auto f = make_filter(dep->model, std::move(breached), validation, target_fpr);
    f.deployed_id = dep->id;
    f.breached_ids = snap->retired_ids;
    snap->filter = std::move(f);
  }
  return snap;
}

struct GatewayOptions {
  double target_fpr = 0.05;
  double sigma0 = kDefaultSigma0;
  int hidden_per_label = 100;
  TrainConfig train;
  std::uint64_t seed = 0;  // drives hidden assignments and training seeds of new versions
};

class Gateway {
 public:
  Gateway(VersionStore& store, TaskDataset task, GatewayOptions options)
      : store_(store), task_(std::move(task)), options_(std::move(options)), rng_(options_.seed) {
    current_ = make_snapshot(store_, task_.validation, options_.target_fpr);
  }

  std::shared_ptr<const GatewaySnapshot> snapshot() const {
    std::lock_guard lock(snap_mutex_);
    return current_;
  }

  ClassifyResponse classify(std::span<const double> x) {
    const auto start = std::chrono::steady_clock::now();
    const auto snap = snapshot();
    auto r = classify_handler(x, *snap);
    queries_.fetch_add(1, std::memory_order_relaxed);
    if (r.flagged) flagged_.fetch_add(1, std::memory_order_relaxed);
    record_latency(std::chrono::steady_clock::now() - start);
    return r;
  }

  /// Retires the deployed version, trains and deploys a replacement, recalibrates, and swaps
  /// the served snapshot in one step. Concurrent breaches are serialised.
  std::shared_ptr<const GatewaySnapshot> breach() {
    std::lock_guard lock(breach_mutex_);
    retire_and_replace(store_, task_, options_.sigma0, options_.train, rng_, options_.hidden_per_label);
    auto next = make_snapshot(store_, task_.validation, options_.target_fpr);
    {
      std::lock_guard snap_lock(snap_mutex_);
      current_ = next;
    }
    rotations_.fetch_add(1, std::memory_order_relaxed);
    return next;
  }

  nlohmann::json status() const {
    const auto snap = snapshot();
    const auto count = latency_count_.load();
    return {{"deployed", snap->deployed->id},
            {"retired", snap->retired_ids},
            {"threshold", snap->filter ? nlohmann::json(*snap->filter->threshold) : nlohmann::json(nullptr)},
            {"queries", queries_.load()},
            {"flagged", flagged_.load()},
            {"rotations", rotations_.load()},
            {"errors", errors_.load()},
            {"latency_us",
             {{"count", count},
              {"mean", count == 0 ? 0.0 : static_cast<double>(latency_total_ns_.load()) / 1e3 / static_cast<double>(count)},
              {"max", static_cast<double>(latency_max_ns_.load()) / 1e3}}}};
  }

  /// Handles one request line and returns the response line (without the newline).
  std::string handle_line(const std::string& line) {
    nlohmann::json id;
    try {
      const auto req = nlohmann::json::parse(line);
      if (!req.is_object()) throw std::invalid_argument("request must be a JSON object");
      if (req.contains("id")) id = req["id"];
      nlohmann::json resp;
      if (req.contains("classify")) {
        resp = to_json(classify(req["classify"].get<std::vector<double>>()));
      } else if (req.contains("breach")) {
        const auto snap = breach();
        resp = {{"rotated", true},
                {"deployed", snap->deployed->id},
                {"retired", snap->retired_ids},
                {"threshold", *snap->filter->threshold},
                {"rotations", rotations_.load()}};
      } else if (req.contains("status")) {
        resp = status();
      } else {
        throw std::invalid_argument("unknown request; expected classify, breach or status");
      }
      if (!id.is_null()) resp["id"] = id;
      return resp.dump();
    } catch (const std::exception& e) {
      errors_.fetch_add(1, std::memory_order_relaxed);
      nlohmann::json resp{{"error", e.what()}};
      if (!id.is_null()) resp["id"] = id;
      return resp.dump();
    }
  }

 private:
  void record_latency(std::chrono::steady_clock::duration d) {
    const auto ns = static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(d).count());
    latency_count_.fetch_add(1, std::memory_order_relaxed);
    latency_total_ns_.fetch_add(ns, std::memory_order_relaxed);
    auto prev = latency_max_ns_.load(std::memory_order_relaxed);
    while (ns > prev && !latency_max_ns_.compare_exchange_weak(prev, ns, std::memory_order_relaxed)) {
    }
  }

  VersionStore& store_;
  TaskDataset task_;
  GatewayOptions options_;
  Rng rng_;
  mutable std::mutex snap_mutex_;
  std::mutex breach_mutex_;
  std::shared_ptr<const GatewaySnapshot> current_;
  std::atomic<std::uint64_t> queries_{0};
  std::atomic<std::uint64_t> flagged_{0};
  std::atomic<std::uint64_t> rotations_{0};
  std::atomic<std::uint64_t> errors_{0};
  std::atomic<std::uint64_t> latency_count_{0};
  std::atomic<std::uint64_t> latency_total_ns_{0};
  std::atomic<std::uint64_t> latency_max_ns_{0};
};

namespace detail {

inline bool send_all(int fd, const std::string& data) {
  std::size_t sent = 0;
  while (sent < data.size()) {
    const auto n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) return false;
    sent += static_cast<std::size_t>(n);
  }
  return true;
}

inline sockaddr_in loopback_address(const std::string& host, std::uint16_t port) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(port);
  if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw std::invalid_argument("bad IPv4 address '" + host + "'");
  return addr;
}

}  // namespace detail

/// TCP front end: one thread per connection, newline-delimited requests.
class GatewayServer {
 public:
  static constexpr std::size_t kMaxLine = 1 << 24;

  explicit GatewayServer(Gateway& gateway, std::string host = "127.0.0.1", std::uint16_t port = 0)
      : gateway_(gateway) {
    listen_fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (listen_fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
    const int one = 1;
    ::setsockopt(listen_fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    auto addr = detail::loopback_address(host, port);
    if (::bind(listen_fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0 || ::listen(listen_fd_, 64) != 0) {
      const std::string err = std::strerror(errno);
      ::close(listen_fd_);
      throw IoError("bind " + host + ":" + std::to_string(port) + ": " + err);
    }
    socklen_t len = sizeof addr;
    ::getsockname(listen_fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    acceptor_ = std::jthread([this] { accept_loop(); });
  }

  GatewayServer(const GatewayServer&) = delete;
  GatewayServer& operator=(const GatewayServer&) = delete;
  ~GatewayServer() { stop(); }

  std::uint16_t port() const { return port_; }

  void stop() {
    if (stopping_.exchange(true)) return;
    ::shutdown(listen_fd_, SHUT_RDWR);
    ::close(listen_fd_);
    if (acceptor_.joinable()) acceptor_.join();
    std::list<Connection> conns;
    {
      std::lock_guard lock(conn_mutex_);
      for (auto& c : connections_) ::shutdown(c.fd, SHUT_RDWR);
      conns.swap(connections_);
    }
    for (auto& c : conns) {
      if (c.worker.joinable()) c.worker.join();
      ::close(c.fd);
    }
  }

 private:
  struct Connection {
    int fd = -1;
    std::atomic<bool> done{false};
    std::jthread worker;
  };

  // Caller holds conn_mutex_.
  void reap_finished() {
    for (auto it = connections_.begin(); it != connections_.end();) {
      if (it->done) {
        it->worker.join();
        ::close(it->fd);
        it = connections_.erase(it);
      } else {
        ++it;
      }
    }
  }

  void accept_loop() {
    while (!stopping_) {
      const int fd = ::accept(listen_fd_, nullptr, nullptr);
      if (fd < 0) {
        if (errno == EINTR) continue;
        return;
      }
      std::lock_guard lock(conn_mutex_);
      if (stopping_) {
        ::close(fd);
        return;
      }
      reap_finished();
      auto& c = connections_.emplace_back();
      c.fd = fd;
      c.worker = std::jthread([this, &c] {
        serve(c.fd);
        c.done = true;
      });
    }
  }

  void serve(int fd) {
    std::string buffer;
    char chunk[65536];
    while (true) {
      const auto n = ::recv(fd, chunk, sizeof chunk, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) return;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t start = 0;
      for (auto pos = buffer.find('\n'); pos != std::string::npos; pos = buffer.find('\n', start)) {
        std::string line = buffer.substr(start, pos - start);
        start = pos + 1;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty()) continue;
        if (!detail::send_all(fd, gateway_.handle_line(line) + "\n")) return;
      }
      buffer.erase(0, start);
      if (buffer.size() > kMaxLine) {
        detail::send_all(fd, R"({"error":"request line too long"})" "\n");
        return;
      }
    }
  }

  Gateway& gateway_;
  int listen_fd_ = -1;
  std::uint16_t port_ = 0;
  std::atomic<bool> stopping_{false};
  std::mutex conn_mutex_;
  std::list<Connection> connections_;
  std::jthread acceptor_;
};

/// Blocking line client, used by tests and the command-line tool.
class GatewayClient {
 public:
  GatewayClient(const std::string& host, std::uint16_t port) {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw IoError(std::string("socket: ") + std::strerror(errno));
    auto addr = detail::loopback_address(host, port);
    if (::connect(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
      const std::string err = std::strerror(errno);
      ::close(fd_);
      throw IoError("connect " + host + ":" + std::to_string(port) + ": " + err);
    }
  }
  GatewayClient(const GatewayClient&) = delete;
  GatewayClient& operator=(const GatewayClient&) = delete;
  ~GatewayClient() { ::close(fd_); }

  std::string request_line(const std::string& line) {
    if (!detail::send_all(fd_, line + "\n")) throw IoError("gateway connection closed");
    while (true) {
      const auto pos = buffer_.find('\n');
      if (pos != std::string::npos) {
        std::string out = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        return out;
      }
      char chunk[65536];
      const auto n = ::recv(fd_, chunk, sizeof chunk, 0);
      if (n < 0 && errno == EINTR) continue;
      if (n <= 0) throw IoError("gateway connection closed");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

  nlohmann::json request(const nlohmann::json& req) { return nlohmann::json::parse(request_line(req.dump())); }

 private:
  int fd_ = -1;
  std::string buffer_;
};

}  // namespace vrec
