#pragma once

#include <atomic>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "ppd/routing.hpp"

namespace ppd::gateway {

struct BackendEntry {
  int id = -1;
  char role = '?';  // 'P', 'D', or 'R'
  std::string address;
  double last_heartbeat = 0;
};

// Heartbeat-tracked backend set. A backend whose last heartbeat is more than
// `timeout_s` old is pruned.
class BackendRegistry {
 public:
  int add(char role, const std::string& address, double now);
  // False when the backend is unknown (e.g. already pruned).
  bool heartbeat(int id, double now);
  std::size_t remove(int id);
  // Removes stale backends and returns their ids.
  std::vector<int> prune_dead(double now, double timeout_s = 30.0);
  std::vector<BackendEntry> snapshot() const;
  std::optional<BackendEntry> find(int id) const;
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::map<int, BackendEntry> map_;
  int next_id_ = 0;
};

struct RouteQuery {
  std::string conv_first_message;
  int turn_index = 1;
  long new_input_tokens = 0;
  long cached_context_tokens = 0;
  long target_output_tokens = 0;
};

struct RouteReply {
  bool ok = false;
  std::string error;           // "no_capacity" when no backend can serve
  std::string target;          // "P_path" | "D_local" | "R_local"
  int prefill_backend = -1;    // P-path prefill host (unset for local routes)
  int decode_backend = -1;     // pinned decode/replica backend
  int x_used = 0;
  bool session_missing = false;
  bool table_miss = false;
};

struct GatewayStats {
  long queries = 0;
  long p_path = 0;
  long d_local = 0;
  long r_local = 0;
  long errors = 0;
  long sessions = 0;
  long backends = 0;
  double decision_latency_p99_us = 0;
};

// Routing front end: backend registry + session affinity + the online
// decision procedure. All entry points take an explicit `now` (seconds) so
// tests can drive the clock.
class Gateway {
 public:
  explicit Gateway(routing::RoutingPolicy policy);

  BackendRegistry& registry() { return registry_; }
  routing::SessionTable& sessions() { return sessions_; }

  // Prunes dead backends (invalidating their sessions), evicts expired
  // sessions, and routes one request.
  RouteReply route(const RouteQuery& q, double now);

  GatewayStats stats() const;

  // One framed JSON message in, one framed JSON reply payload out.
  // Kinds: register, heartbeat, route, stats.
  std::string handle_message(const std::string& payload, double now);

  double session_ttl_s = 3600.0;
  double backend_timeout_s = 30.0;

 private:
  int pick_backend(char preferred, char fallback, std::size_t counter);

  mutable std::mutex mu_;
  routing::RoutingPolicy policy_;
  BackendRegistry registry_;
  routing::SessionTable sessions_;
  std::vector<double> arrivals_;  // Turn-1 arrival times for QPS estimation
  std::size_t rr_decode_ = 0, rr_prefill_ = 0;
  GatewayStats stats_;
  std::vector<double> decision_latencies_us_;
};

// --- wire framing: 4-byte big-endian length prefix + JSON payload ---

std::string encode_frame(const std::string& payload);
// Consumes one complete frame from the front of `buf` if available.
std::optional<std::string> try_decode_frame(std::string& buf);

// Blocking TCP server; handles each connection on its own thread and frames
// requests through Gateway::handle_message with a wall clock. Returns when
// `stop` becomes true (checked between accepts).
int serve_tcp(Gateway& gw, int port, const std::atomic<bool>& stop);

}  // namespace ppd::gateway
