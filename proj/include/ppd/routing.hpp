#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>
#include <vector>

#include "ppd/md5.hpp"
#include "ppd/workload.hpp"

namespace ppd::routing {

struct SLOWeights {
  double w_ttft = 1.0;
  double w_tpot = 1.0;
  void validate() const;  // non-negative, not both zero
};

enum class ContextClass { small, medium, large };
const char* to_string(ContextClass c);
ContextClass context_class_from_string(const std::string& s);

inline constexpr std::array<double, 10> kQpsGrid = {0.5, 1, 2,  4,  6,
                                                    8,   10, 12, 16, 20};

// Nearest grid value, ties toward the lower bin.
double nearest_qps_bin(double q);

struct WorkloadKey {
  ContextClass context_class = ContextClass::small;
  workload::Category workload_type = workload::Category::balanced;
  double qps_bin = 1.0;

  std::string str() const;  // "small|balanced|4"
  static WorkloadKey parse(const std::string& s);
  auto operator<=>(const WorkloadKey&) const = default;
};

// Context thresholds: small < 4096 <= medium < 16384 <= large.
// Requires t >= 2 (Turn 1 never reaches the table).
WorkloadKey discretize(int turn, long n_in, long n_out, long n_ctx, double q);

struct DecisionEntry {
  WorkloadKey key;
  double ttft_x0 = 0, ttft_x1 = 0;
  double tpot_x0 = 0, tpot_x1 = 0;
  double delta_ttft = 0;  // (ttft_x0 - ttft_x1) / ttft_x0
  double delta_tpot = 0;  // (tpot_x1 - tpot_x0) / tpot_x0
  double score = 0;       // w_ttft*delta_ttft - w_tpot*delta_tpot
  int x_star = 0;         // 1 iff score > 0
  bool available = true;
};

// Score computation of the offline phase (lines that derive the table entry
// from the two benchmarked modes).
DecisionEntry make_entry(const WorkloadKey& key, double ttft_x0,
                         double ttft_x1, double tpot_x0, double tpot_x1,
                         const SLOWeights& w);

struct DecisionTable {
  std::map<std::string, DecisionEntry> entries;
  SLOWeights weights;
  std::string calibration_hash;
  std::string built_at;

  std::optional<DecisionEntry> lookup(const WorkloadKey& key) const;
  void insert(const DecisionEntry& e);

  std::string to_json() const;
  static DecisionTable from_json(const std::string& text);
  static DecisionTable load(const std::filesystem::path& p);
  void save(const std::filesystem::path& p) const;
};

// Representative workload benchmarked for one grid key during Phase 1.
struct GridSpec {
  WorkloadKey key;
  workload::WorkloadSpec spec;
};

// Category-centroid representatives for every (context, type, qps) key.
std::vector<GridSpec> default_grid();

// Evaluates one (spec, x) pair to (mean T2+ TTFT, mean TPOT) aggregates.
// nullopt marks a failed benchmark run (the entry becomes unavailable).
using BenchmarkRunner = std::function<std::optional<std::pair<double, double>>(
    const GridSpec& spec, int x)>;

DecisionTable build_decision_table(const std::vector<GridSpec>& grid,
                                   const SLOWeights& weights,
                                   const BenchmarkRunner& runner,
                                   const std::string& calibration_hash);

struct SessionEntry {
  Digest128 conv_hash{};
  int turn_count = 0;
  int assigned_pd = -1;  // node/backend identifier
  double last_access = 0;
};

// Shared-mutex protected session map keyed by the MD5 digest of the
// conversation's first user message.
class SessionTable {
 public:
  // Creates (turn_count=1) or increments; refreshes last_access. The
  // assigned_pd is recorded only at creation.
  SessionEntry update(const Digest128& conv_hash, double now,
                      std::optional<int> assigned_pd = std::nullopt);
  std::optional<SessionEntry> find(const Digest128& conv_hash) const;
  std::size_t erase(const Digest128& conv_hash);
  // Removes exactly the entries with now - last_access > ttl_s.
  std::size_t evict_expired(double now, double ttl_s = 3600.0);
  // Drops sessions pinned to a removed backend; returns count.
  std::size_t invalidate_backend(int assigned_pd);
  std::size_t size() const;

 private:
  mutable std::shared_mutex mu_;
  std::unordered_map<std::string, SessionEntry> map_;
};

struct RoutingPolicy {
  enum class Mode { static_x, dynamic };
  Mode mode = Mode::static_x;
  double x = 0.0;  // static fraction in [0, 1]
  std::shared_ptr<const DecisionTable> table;  // dynamic mode
  SLOWeights weights;
  // Bresenham-style accumulator for deterministic fractional routing.
  double stride_acc = 0.0;

  void validate() const;
  static RoutingPolicy static_policy(double x);
  static RoutingPolicy dynamic_policy(std::shared_ptr<const DecisionTable> t);
};

struct RouteDecision {
  enum class Target { P_path, D_local };
  Target target = Target::P_path;
  int x_used = 0;
  bool session_missing = false;  // evicted/unknown session on a Turn-2+ request
  bool table_miss = false;       // dynamic lookup fell back to x=0
};

// Online per-request decision. `assign_pd` supplies the decode node for a
// newly created session (invoked at most once). Turn 1 and any session miss
// take the P path with a fresh session.
RouteDecision decide(const workload::TurnRequest& request,
                     const Digest128& conv_hash, double measured_qps,
                     RoutingPolicy& policy, SessionTable& sessions, double now,
                     const std::function<int()>& assign_pd);

}  // namespace ppd::routing
