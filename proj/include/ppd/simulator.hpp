#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "ppd/costmodel.hpp"
#include "ppd/metrics.hpp"
#include "ppd/routing.hpp"
#include "ppd/workload.hpp"

namespace ppd::sim {

struct ClusterConfig {
  std::string name;  // "1P_3D", "4R", "1R_1P_2D", ...
  int p_nodes = 0;
  int d_nodes = 0;
  int r_nodes = 0;
  routing::RoutingPolicy policy;
  std::shared_ptr<const cost::CalibrationTable> calib;
  int max_decode_batch = 256;
  double request_timeout_s = 30.0;

  void validate() const;  // throws std::invalid_argument

  // Expands a named shape ("2P_2D", "4R", "1R_1P_2D") into node counts.
  static ClusterConfig from_name(
      const std::string& name, routing::RoutingPolicy policy,
      std::shared_ptr<const cost::CalibrationTable> calib);
};

struct NodeStats {
  char role = '?';
  double prefill_busy_s = 0;
  double decode_busy_s = 0;
};

struct SimResult {
  std::vector<metrics::RequestRecord> records;
  long link_transfers = 0;
  double link_bytes = 0;
  std::vector<double> link_queue_delays;
  std::vector<NodeStats> node_stats;
  double makespan = 0;
  // Queue-wait sample per served prefill job, in service order.
  std::vector<double> prefill_wait_samples;
  long session_miss_fallbacks = 0;
};

// Deterministic event-driven execution of the workload on the cluster.
// Conversations without Turn-1 arrival times are replayed as a Poisson
// process at qps_replay (pass <= 0 to require pre-scheduled arrivals).
SimResult run_simulation(const ClusterConfig& config,
                         const std::vector<workload::Conversation>& convs,
                         double qps_replay, std::uint64_t seed,
                         double think_time_s = 0.0);

}  // namespace ppd::sim
