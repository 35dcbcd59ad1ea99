#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <memory>

#include "ppd/sweep.hpp"

using namespace ppd;
using namespace ppd::sweep;

namespace {
std::shared_ptr<const cost::CalibrationTable> defaults() {
  return std::make_shared<const cost::CalibrationTable>(
      cost::CalibrationTable::defaults());
}

SweepPlan tiny_plan() {
  SweepPlan plan;
  plan.configs = {{"1P_1D", "x0"}, {"1P_1D", "x1"}};
  workload::WorkloadSpec wl;
  wl.id = "tiny";
  wl.turn1 = {512, 64};
  wl.turn2plus = {256, 128};
  wl.num_turns = 2;
  plan.workloads = {wl};
  plan.qps_levels = {4};
  plan.seeds = {1, 2, 3};
  plan.duration_s = 5;
  return plan;
}
}  // namespace

TEST_CASE("config categories and x values") {
  CHECK(ConfigSpec{"4R", "replica"}.category() == "Replica");
  CHECK(ConfigSpec{"1P_3D", "x0"}.category() == "x=0");
  CHECK(ConfigSpec{"1P_3D", "x1"}.category() == "x=1");
  CHECK(ConfigSpec{"1P_3D", "x1/3"}.category() == "0<x<1");
  CHECK(ConfigSpec{"2P_2D", "x1/2"}.category() == "0<x<1");
  CHECK(ConfigSpec{"1R_1P_2D", "x0"}.category() == "hybrid");
  CHECK(ConfigSpec{"2R_1P_1D", "x1/2"}.category() == "hybrid");
  CHECK(ConfigSpec{"1P_3D", "dynamic"}.category() == "dynamic");
  CHECK(ConfigSpec{"1P_3D", "x1/3"}.x_value() == doctest::Approx(1.0 / 3));
  CHECK(ConfigSpec{"1P_3D", "x2/3"}.x_value() == doctest::Approx(2.0 / 3));
  CHECK(ConfigSpec{"1P_3D", "x0"}.x_value() == 0.0);
  CHECK_THROWS_AS((ConfigSpec{"1P_3D", "bogus"}.x_value()),
                  std::invalid_argument);
}

TEST_CASE("full default plan dimensions") {
  auto plan = SweepPlan::full_default();
  CHECK(plan.configs.size() == 17);
  CHECK(plan.workloads.size() == 18);
  CHECK(plan.qps_levels.size() == 10);
  CHECK(plan.seeds.size() == 3);
  CHECK(plan.configs.size() * plan.workloads.size() *
            plan.qps_levels.size() ==
        3060);
  CHECK(plan.cell_count() == 9180);

  int replica = 0, x0 = 0, x1 = 0, frac = 0, hybrid = 0;
  for (const auto& c : plan.configs) {
    auto cat = c.category();
    if (cat == "Replica") ++replica;
    if (cat == "x=0") ++x0;
    if (cat == "x=1") ++x1;
    if (cat == "0<x<1") ++frac;
    if (cat == "hybrid") ++hybrid;
  }
  CHECK(replica == 1);
  CHECK(x0 == 3);
  CHECK(x1 == 3);
  CHECK(frac == 3);
  CHECK(hybrid == 7);
}

TEST_CASE("plan serialization round trip") {
  auto plan = tiny_plan();
  auto back = SweepPlan::from_json(plan.to_json());
  CHECK(back.configs.size() == plan.configs.size());
  CHECK(back.workloads[0].turn2plus.input_tokens == 256);
  CHECK(back.seeds == plan.seeds);
  CHECK(back.hash() == plan.hash());
  auto other = plan;
  other.duration_s = 6;
  CHECK(other.hash() != plan.hash());
}

TEST_CASE("qps band assignment") {
  CHECK(qps_band(0.5) == 0);
  CHECK(qps_band(1) == 0);
  CHECK(qps_band(2) == 0);
  CHECK(qps_band(4) == 1);
  CHECK(qps_band(6) == 1);
  CHECK(qps_band(8) == 1);
  CHECK(qps_band(10) == -1);  // excluded from the banded comparison
  CHECK(qps_band(12) == 2);
  CHECK(qps_band(16) == 2);
  CHECK(qps_band(20) == 2);
}

TEST_CASE("run_sweep covers the grid and is resumable") {
  auto plan = tiny_plan();
  auto calib = defaults();
  auto dir = std::filesystem::temp_directory_path() / "ppd_sweep_resume";
  std::filesystem::remove_all(dir);

  auto first = run_sweep(plan, calib, 2, dir);
  CHECK(first.cells.size() == plan.cell_count());
  for (const auto& c : first.cells) CHECK(!c.failed);
  CHECK(first.plan_hash == plan.hash());
  CHECK(first.calibration_hash == calib->hash());

  // Re-entry consumes the manifest instead of recomputing.
  auto second = run_sweep(plan, calib, 2, dir);
  REQUIRE(second.cells.size() == first.cells.size());
  for (std::size_t i = 0; i < first.cells.size(); ++i)
    CHECK(second.cells[i].to_json() == first.cells[i].to_json());

  // x=1 improves Turn-2 TTFT on every seed of this workload.
  auto means = mean_over_seeds(first);
  auto x0 = means.at({"1P_1D:x0", "tiny", 4.0});
  auto x1 = means.at({"1P_1D:x1", "tiny", 4.0});
  REQUIRE(x0.ttft_t2_mean.has_value());
  REQUIRE(x1.ttft_t2_mean.has_value());
  CHECK(*x1.ttft_t2_mean < *x0.ttft_t2_mean);

  auto csv = results_csv(first);
  CHECK(csv.find(metrics::kAggregateCsvHeader) == 0);
  CHECK(csv.find("1P_1D:x1") != std::string::npos);

  std::filesystem::remove_all(dir);
}

TEST_CASE("failed cells are recorded, not fatal") {
  auto plan = tiny_plan();
  plan.configs.push_back({"1P_1D", "dynamic"});  // no table provided -> fails
  auto results = run_sweep(plan, defaults(), 1);
  long failed = 0, ok = 0;
  for (const auto& c : results.cells) (c.failed ? failed : ok)++;
  CHECK(failed == 3);  // one per seed
  CHECK(ok == 6);
  for (const auto& c : results.cells)
    if (c.failed) CHECK(c.error.find("decision table") != std::string::npos);
}

TEST_CASE("compare_modes on a synthetic result set") {
  ResultSet rs;
  auto add = [&](const std::string& shape, const std::string& mode, double qps,
                 double ttft) {
    CellResult c;
    c.config_label = shape + ":" + mode;
    c.shape = shape;
    c.x_mode = mode;
    c.category = mode == "x0" ? "x=0" : "x=1";
    c.workload_id = "w";
    c.qps = qps;
    c.seed = 1;
    c.m.ttft_t2_mean = ttft;
    c.m.success_rate = 1;
    c.m.degraded = false;
    rs.cells.push_back(c);
  };
  // Low band: halved; med band: -20%; high band absent.
  add("1P_3D", "x0", 1, 1.0);
  add("1P_3D", "x1", 1, 0.5);
  add("1P_3D", "x0", 2, 2.0);
  add("1P_3D", "x1", 2, 1.0);
  add("1P_3D", "x0", 6, 1.0);
  add("1P_3D", "x1", 6, 0.8);
  add("1P_3D", "x0", 10, 1.0);  // unbanded, ignored
  add("1P_3D", "x1", 10, 0.1);

  auto rows = compare_modes(rs, "x0", "x1", "ttft_t2_mean");
  REQUIRE(rows.size() == 1);
  CHECK(rows[0].shape == "1P_3D");
  CHECK(rows[0].low == doctest::Approx(-0.5));
  CHECK(rows[0].med == doctest::Approx(-0.2));
  CHECK(rows[0].low_n == 2);
  CHECK(rows[0].med_n == 1);
  CHECK(rows[0].high_n == 0);
  CHECK(std::isnan(rows[0].high));
}

TEST_CASE("winner inputs exclude dynamic overlays") {
  ResultSet rs;
  for (const char* mode : {"x0", "x1", "dynamic"}) {
    CellResult c;
    c.config_label = std::string("1P_1D:") + mode;
    c.shape = "1P_1D";
    c.x_mode = mode;
    c.category = mode;
    c.workload_id = "w";
    c.qps = 2;
    c.seed = 1;
    c.m.success_rate = 1;
    c.m.degraded = false;
    rs.cells.push_back(c);
  }
  auto cells = winner_inputs(rs);
  CHECK(cells.size() == 2);
  for (const auto& c : cells) CHECK(c.config_label.find("dynamic") ==
                                    std::string::npos);
}
