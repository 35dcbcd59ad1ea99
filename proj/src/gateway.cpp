#include "ppd/gateway.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <chrono>
#include <cstring>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "ppd/md5.hpp"
#include "ppd/metrics.hpp"

namespace ppd::gateway {

using nlohmann::json;

int BackendRegistry::add(char role, const std::string& address, double now) {
  if (role != 'P' && role != 'D' && role != 'R')
    throw std::invalid_argument("backend role must be P, D, or R");
  std::lock_guard lock(mu_);
  int id = next_id_++;
  map_[id] = BackendEntry{id, role, address, now};
  return id;
}

bool BackendRegistry::heartbeat(int id, double now) {
  std::lock_guard lock(mu_);
  auto it = map_.find(id);
  if (it == map_.end()) return false;
  it->second.last_heartbeat = now;
  return true;
}

std::size_t BackendRegistry::remove(int id) {
  std::lock_guard lock(mu_);
  return map_.erase(id);
}

std::vector<int> BackendRegistry::prune_dead(double now, double timeout_s) {
  std::lock_guard lock(mu_);
  std::vector<int> removed;
  for (auto it = map_.begin(); it != map_.end();) {
    if (now - it->second.last_heartbeat > timeout_s) {
      removed.push_back(it->first);
      it = map_.erase(it);
    } else {
      ++it;
    }
  }
  return removed;
}

std::vector<BackendEntry> BackendRegistry::snapshot() const {
  std::lock_guard lock(mu_);
  std::vector<BackendEntry> out;
  out.reserve(map_.size());
  for (const auto& [id, e] : map_) out.push_back(e);
  return out;
}

std::optional<BackendEntry> BackendRegistry::find(int id) const {
  std::lock_guard lock(mu_);
  auto it = map_.find(id);
  if (it == map_.end()) return std::nullopt;
  return it->second;
}

std::size_t BackendRegistry::size() const {
  std::lock_guard lock(mu_);
  return map_.size();
}

Gateway::Gateway(routing::RoutingPolicy policy) : policy_(std::move(policy)) {
  policy_.validate();
}

int Gateway::pick_backend(char preferred, char fallback, std::size_t counter) {
  std::vector<int> ids;
  for (const auto& e : registry_.snapshot())
    if (e.role == preferred) ids.push_back(e.id);
  if (ids.empty())
    for (const auto& e : registry_.snapshot())
      if (e.role == fallback) ids.push_back(e.id);
  if (ids.empty()) return -1;
  return ids[counter % ids.size()];
}

RouteReply Gateway::route(const RouteQuery& q, double now) {
  auto t0 = std::chrono::steady_clock::now();
  std::lock_guard lock(mu_);
  RouteReply reply;

  for (int id : registry_.prune_dead(now, backend_timeout_s))
    sessions_.invalidate_backend(id);
  sessions_.evict_expired(now, session_ttl_s);

  if (q.turn_index == 1) arrivals_.push_back(now);
  while (!arrivals_.empty() && arrivals_.front() < now - 10.0)
    arrivals_.erase(arrivals_.begin());
  double measured_qps = double(arrivals_.size()) / 10.0;

  int n_p = 0, n_d = 0, n_r = 0;
  for (const auto& e : registry_.snapshot()) {
    if (e.role == 'P') ++n_p;
    if (e.role == 'D') ++n_d;
    if (e.role == 'R') ++n_r;
  }

  auto conv_hash = md5(q.conv_first_message);
  ++stats_.queries;

  auto finish = [&](RouteReply r) {
    if (!r.ok)
      ++stats_.errors;
    else if (r.target == "P_path")
      ++stats_.p_path;
    else if (r.target == "D_local")
      ++stats_.d_local;
    else
      ++stats_.r_local;
    auto us = std::chrono::duration<double, std::micro>(
                  std::chrono::steady_clock::now() - t0)
                  .count();
    decision_latencies_us_.push_back(us);
    if (decision_latencies_us_.size() > 100000)
      decision_latencies_us_.erase(decision_latencies_us_.begin(),
                                   decision_latencies_us_.begin() + 50000);
    return r;
  };

  if (n_p == 0 && n_d == 0) {
    // Replica-only deployment: pin each conversation to one R backend.
    if (n_r == 0) {
      reply.error = "no_capacity";
      return finish(reply);
    }
    auto existing = sessions_.find(conv_hash);
    int backend = -1;
    if (existing) {
      backend = existing->assigned_pd;
      sessions_.update(conv_hash, now);
    } else {
      reply.session_missing = q.turn_index > 1;
      backend = pick_backend('R', 'R', rr_decode_++);
      sessions_.update(conv_hash, now, backend);
    }
    reply.ok = true;
    reply.target = "R_local";
    reply.decode_backend = backend;
    return finish(reply);
  }

  // P-D deployment (R backends can stand in for a missing side).
  bool has_prefill = n_p > 0 || n_r > 0;
  bool has_decode = n_d > 0 || n_r > 0;
  if (!has_prefill || !has_decode) {
    reply.error = "no_capacity";
    return finish(reply);
  }

  workload::TurnRequest req;
  req.conv_id = q.conv_first_message;
  req.turn_index = q.turn_index;
  req.new_input_tokens = q.new_input_tokens;
  req.cached_context_tokens = q.cached_context_tokens;
  req.target_output_tokens = q.target_output_tokens;
  req.arrival_time = now;

  auto assign_pd = [&]() { return pick_backend('D', 'R', rr_decode_++); };
  auto decision = routing::decide(req, conv_hash, measured_qps, policy_,
                                  sessions_, now, assign_pd);
  reply.ok = true;
  reply.x_used = decision.x_used;
  reply.session_missing = decision.session_missing;
  reply.table_miss = decision.table_miss;
  auto session = sessions_.find(conv_hash);
  reply.decode_backend = session ? session->assigned_pd : -1;
  if (decision.target == routing::RouteDecision::Target::P_path) {
    reply.target = "P_path";
    reply.prefill_backend = pick_backend('P', 'R', rr_prefill_++);
  } else {
    reply.target = "D_local";
  }
  return finish(reply);
}

GatewayStats Gateway::stats() const {
  std::lock_guard lock(mu_);
  GatewayStats s = stats_;
  s.sessions = long(sessions_.size());
  s.backends = long(registry_.size());
  if (!decision_latencies_us_.empty())
    s.decision_latency_p99_us =
        metrics::nearest_rank_percentile(decision_latencies_us_, 99);
  return s;
}

std::string Gateway::handle_message(const std::string& payload, double now) {
  json reply;
  try {
    json msg = json::parse(payload);
    std::string kind = msg.at("kind").get<std::string>();
    if (kind == "register") {
      std::string role = msg.at("role").get<std::string>();
      if (role.size() != 1) throw std::invalid_argument("bad role");
      int id = registry_.add(role[0], msg.value("address", ""), now);
      reply = {{"kind", "register_reply"}, {"id", id}};
    } else if (kind == "heartbeat") {
      bool ok = registry_.heartbeat(msg.at("id").get<int>(), now);
      reply = {{"kind", "heartbeat_reply"}, {"ok", ok}};
    } else if (kind == "route") {
      RouteQuery q;
      q.conv_first_message = msg.at("conv_first_message").get<std::string>();
      q.turn_index = msg.at("turn_index").get<int>();
      q.new_input_tokens = msg.value("new_input_tokens", 0L);
      q.cached_context_tokens = msg.value("cached_context_tokens", 0L);
      q.target_output_tokens = msg.value("target_output_tokens", 0L);
      auto r = route(q, now);
      reply = {{"kind", "route_reply"},
               {"ok", r.ok},
               {"x_used", r.x_used},
               {"session_missing", r.session_missing},
               {"table_miss", r.table_miss}};
      if (r.ok) {
        reply["target"] = r.target;
        reply["decode_backend"] = r.decode_backend;
        if (r.prefill_backend >= 0) reply["prefill_backend"] = r.prefill_backend;
      } else {
        reply["error"] = r.error;
      }
    } else if (kind == "stats") {
      auto s = stats();
      reply = {{"kind", "stats_reply"},
               {"queries", s.queries},
               {"p_path", s.p_path},
               {"d_local", s.d_local},
               {"r_local", s.r_local},
               {"errors", s.errors},
               {"sessions", s.sessions},
               {"backends", s.backends},
               {"decision_latency_p99_us", s.decision_latency_p99_us}};
    } else {
      reply = {{"kind", "error"}, {"error", "unknown_kind"}};
    }
  } catch (const std::exception& e) {
    reply = {{"kind", "error"}, {"error", e.what()}};
  }
  return reply.dump();
}

std::string encode_frame(const std::string& payload) {
  if (payload.size() > 0xffffffffull)
    throw std::invalid_argument("frame too large");
  std::uint32_t len = std::uint32_t(payload.size());
  std::string out(4, '\0');
  out[0] = char((len >> 24) & 0xff);
  out[1] = char((len >> 16) & 0xff);
  out[2] = char((len >> 8) & 0xff);
  out[3] = char(len & 0xff);
  out += payload;
  return out;
}

std::optional<std::string> try_decode_frame(std::string& buf) {
  if (buf.size() < 4) return std::nullopt;
  std::uint32_t len = (std::uint32_t(std::uint8_t(buf[0])) << 24) |
                      (std::uint32_t(std::uint8_t(buf[1])) << 16) |
                      (std::uint32_t(std::uint8_t(buf[2])) << 8) |
                      std::uint32_t(std::uint8_t(buf[3]));
  if (buf.size() < 4 + std::size_t(len)) return std::nullopt;
  std::string payload = buf.substr(4, len);
  buf.erase(0, 4 + std::size_t(len));
  return payload;
}

namespace {

double wall_seconds() {
  return std::chrono::duration<double>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

void serve_connection(Gateway* gw, int fd) {
  std::string buf;
  char chunk[4096];
  for (;;) {
    ssize_t n = ::read(fd, chunk, sizeof(chunk));
    if (n <= 0) break;
    buf.append(chunk, std::size_t(n));
    while (auto payload = try_decode_frame(buf)) {
      std::string reply =
          encode_frame(gw->handle_message(*payload, wall_seconds()));
      std::size_t off = 0;
      while (off < reply.size()) {
        ssize_t w = ::write(fd, reply.data() + off, reply.size() - off);
        if (w <= 0) {
          ::close(fd);
          return;
        }
        off += std::size_t(w);
      }
    }
  }
  ::close(fd);
}

}  // namespace

int serve_tcp(Gateway& gw, int port, const std::atomic<bool>& stop) {
  int listener = ::socket(AF_INET, SOCK_STREAM, 0);
  if (listener < 0) return -1;
  int one = 1;
  ::setsockopt(listener, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(std::uint16_t(port));
  if (::bind(listener, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) < 0 ||
      ::listen(listener, 64) < 0) {
    ::close(listener);
    return -1;
  }
  std::vector<std::thread> workers;
  while (!stop.load()) {
    pollfd pfd{listener, POLLIN, 0};
    int r = ::poll(&pfd, 1, 100);
    if (r <= 0) continue;
    int fd = ::accept(listener, nullptr, nullptr);
    if (fd < 0) continue;
    workers.emplace_back(serve_connection, &gw, fd);
  }
  ::close(listener);
  for (auto& t : workers) t.join();
  return 0;
}

}  // namespace ppd::gateway
