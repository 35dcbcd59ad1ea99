#pragma once

#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace ppd::metrics {

enum class Route { P_path, D_local, R_local };
enum class Status { completed, timed_out };

const char* to_string(Route r);
const char* to_string(Status s);
Route route_from_string(const std::string& s);
Status status_from_string(const std::string& s);

struct RequestRecord {
  std::string conv_id;
  int turn_index = 1;
  double arrival = 0;
  std::optional<double> first_token;
  std::optional<double> completion;
  long output_tokens_emitted = 0;
  Route route = Route::P_path;
  Status status = Status::completed;
};

struct PerRequest {
  std::optional<double> ttft;
  std::optional<double> tpot;  // absent for < 2 emitted tokens
  std::optional<double> latency;
  bool success = false;
};

PerRequest per_request(const RequestRecord& r);

struct AggregateMetrics {
  std::optional<double> ttft_t1_mean, ttft_t1_p99;
  std::optional<double> ttft_t2_mean, ttft_t2_p99;
  std::optional<double> tpot_mean;
  std::optional<double> latency_mean;
  double tps = 0;
  double success_rate = 0;
  bool degraded = true;  // success_rate < 0.95
  long total_requests = 0;
  long completed_requests = 0;
};

// `window` is the measurement window in seconds used for tokens/sec.
AggregateMetrics aggregate(const std::vector<RequestRecord>& records,
                           double window);

// Nearest-rank percentile, p in (0, 100].
double nearest_rank_percentile(std::vector<double> values, double p);

struct ParetoPoint {
  double ttft_p99 = 0;
  double tps = 0;
  std::string label;
};

// Non-dominated subset (lower ttft_p99 better, higher tps better),
// stable-ordered by tps, duplicates collapsed.
std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint> points);

// --- winner distribution (per-category win percentages) ---

struct WinnerCell {
  std::string workload_id;
  double qps = 0;
  std::string config_label;
  std::string category;  // Replica | x=0 | 0<x<1 | x=1 | hybrid
  AggregateMetrics m;
};

struct CategoryWins {
  double ttft_pct = 0;
  double tpot_pct = 0;
  double throughput_pct = 0;
  double avg = 0;  // row mean of the three percentages
};

struct WinnerDistribution {
  // Category rows in presentation order: Replica, x=0, 0<x<1, x=1, hybrid.
  std::vector<std::pair<std::string, CategoryWins>> rows;
  double disagreement_fraction = 0;  // cells where TTFT winner != TPOT winner
  long cells = 0;
  long all_degraded_cells = 0;
  std::string render() const;
};

WinnerDistribution winner_distribution(const std::vector<WinnerCell>& inputs);

// --- record / aggregate file formats ---

// Line-delimited: first line the run manifest (JSON object with key
// "manifest"), then one JSON record per request.
void export_records(std::ostream& out, const std::string& manifest_json,
                    const std::vector<RequestRecord>& records);
struct RecordsFile {
  std::string manifest_json;
  std::vector<RequestRecord> records;
};
RecordsFile import_records(std::istream& in);

// Aggregate CSV header, fixed column order.
extern const char* kAggregateCsvHeader;
std::string aggregate_csv_row(const std::string& config,
                              const std::string& x_mode,
                              const std::string& workload_id, double qps,
                              const AggregateMetrics& m);

}  // namespace ppd::metrics
