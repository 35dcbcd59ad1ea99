#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <tuple>
#include <vector>

#include "ppd/costmodel.hpp"
#include "ppd/metrics.hpp"
#include "ppd/routing.hpp"
#include "ppd/simulator.hpp"
#include "ppd/workload.hpp"

namespace ppd::sweep {

struct ConfigSpec {
  std::string shape;   // "1P_3D", "4R", "1R_1P_2D", ...
  std::string x_mode;  // "replica", "x0", "x1", "x1/3", "x1/2", "x2/3", "dynamic"

  std::string label() const { return shape + ":" + x_mode; }
  // Reporting category: Replica | x=0 | 0<x<1 | x=1 | hybrid | dynamic.
  std::string category() const;
  double x_value() const;
};

struct SweepPlan {
  std::vector<ConfigSpec> configs;
  std::vector<workload::WorkloadSpec> workloads;
  std::vector<double> qps_levels;
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  double duration_s = 10.0;

  // 17 configs x 18 workloads x 10 QPS levels.
  static SweepPlan full_default();

  std::size_t cell_count() const {
    return configs.size() * workloads.size() * qps_levels.size() *
           seeds.size();
  }

  std::string to_json() const;
  static SweepPlan from_json(const std::string& text);
  static SweepPlan load(const std::filesystem::path& p);
  void save(const std::filesystem::path& p) const;
  std::string hash() const;
};

struct CellResult {
  std::string config_label;
  std::string shape;
  std::string x_mode;
  std::string category;
  std::string workload_id;
  double qps = 0;
  std::uint64_t seed = 0;
  bool failed = false;
  std::string error;
  metrics::AggregateMetrics m;

  std::string cell_id() const;  // stable digest of the cell coordinates
  std::string to_json() const;
  static CellResult from_json(const std::string& text);
};

struct ResultSet {
  std::vector<CellResult> cells;
  std::string plan_hash;
  std::string calibration_hash;
};

// Runs every plan cell (share-nothing, bounded worker pool). When
// manifest_dir is given, completed cells are persisted there and skipped on
// re-entry. Crashed cells are recorded as failed and the sweep continues.
// `table` backs any "dynamic" x_mode entries.
ResultSet run_sweep(const SweepPlan& plan,
                    std::shared_ptr<const cost::CalibrationTable> calib,
                    int parallelism,
                    const std::optional<std::filesystem::path>& manifest_dir =
                        std::nullopt,
                    std::shared_ptr<const routing::DecisionTable> table =
                        nullptr);

// Per-cell mean over seeds keyed by (config_label, workload_id, qps).
std::map<std::tuple<std::string, std::string, double>,
         metrics::AggregateMetrics>
mean_over_seeds(const ResultSet& results);

struct ImprovementRow {
  std::string shape;
  // Mean relative change (to - from)/from per QPS band; negative values are
  // improvements. NaN when the band has no matched cells.
  double low = 0, med = 0, high = 0;
  long low_n = 0, med_n = 0, high_n = 0;
};

// Band boundaries follow the reporting convention: low 0.5-2, med 4-8,
// high 12-20 (QPS 10 is not in any band).
int qps_band(double q);  // 0=low, 1=med, 2=high, -1=unbanded

std::vector<ImprovementRow> compare_modes(const ResultSet& results,
                                          const std::string& from_mode,
                                          const std::string& to_mode,
                                          const std::string& metric);

struct WeightSweepRow {
  double w_tpot = 0;
  double ttft_change = 0;    // T2+ TTFT change vs the x=0 baseline
  double tpot_change = 0;    // TPOT change vs the x=0 baseline
  double d_local_ratio = 0;  // fraction of Turn-2+ requests served D-locally
};

// Builds a decision table per weight setting via the Phase-1 runner and
// replays the workload under the dynamic policy.
std::vector<WeightSweepRow> weight_sweep(
    const std::string& shape, const workload::WorkloadSpec& base,
    const std::vector<double>& qps_levels,
    const std::vector<double>& w_tpot_list,
    std::shared_ptr<const cost::CalibrationTable> calib,
    const std::vector<routing::GridSpec>& grid,
    const std::vector<std::uint64_t>& seeds);

// Phase-1 benchmark runner backed by the simulator: evaluates a grid spec
// under static x on the given cluster shape and reports
// (mean T2+ TTFT, mean TPOT) across seeds.
routing::BenchmarkRunner make_sim_runner(
    const std::string& shape,
    std::shared_ptr<const cost::CalibrationTable> calib,
    const std::vector<std::uint64_t>& seeds);

// Aggregate CSV for a result set (fixed column order, one row per cell).
std::string results_csv(const ResultSet& results);

// Winner-distribution inputs from seed-averaged results, excluding dynamic
// configurations (they are an overlay, not a static category).
std::vector<metrics::WinnerCell> winner_inputs(const ResultSet& results);

}  // namespace ppd::sweep
