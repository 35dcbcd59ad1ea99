#include "ppd/sweep.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

#include <json.hpp>

#include "ppd/md5.hpp"
#include "ppd/util.hpp"

namespace ppd::sweep {

using nlohmann::json;

std::string ConfigSpec::category() const {
  if (x_mode == "replica") return "Replica";
  if (shape.find('R') != std::string::npos &&
      shape.find('P') != std::string::npos)
    return "hybrid";
  if (x_mode == "dynamic") return "dynamic";
  double x = x_value();
  if (x == 0.0) return "x=0";
  if (x == 1.0) return "x=1";
  return "0<x<1";
}

double ConfigSpec::x_value() const {
  if (x_mode == "replica" || x_mode == "dynamic") return 0.0;
  if (x_mode.empty() || x_mode[0] != 'x')
    throw std::invalid_argument("bad x_mode: " + x_mode);
  std::string body = x_mode.substr(1);
  auto slash = body.find('/');
  if (slash == std::string::npos) return std::stod(body);
  return std::stod(body.substr(0, slash)) / std::stod(body.substr(slash + 1));
}

SweepPlan SweepPlan::full_default() {
  SweepPlan plan;
  plan.configs = {
      {"4R", "replica"},
      {"1P_3D", "x0"},    {"2P_2D", "x0"},    {"3P_1D", "x0"},
      {"1P_3D", "x1"},    {"2P_2D", "x1"},    {"3P_1D", "x1"},
      {"1P_3D", "x1/3"},  {"1P_3D", "x2/3"},  {"2P_2D", "x1/2"},
      {"1R_1P_2D", "x0"}, {"1R_1P_2D", "x1"}, {"1R_2P_1D", "x0"},
      {"1R_2P_1D", "x1"}, {"2R_1P_1D", "x0"}, {"2R_1P_1D", "x1"},
      {"2R_1P_1D", "x1/2"},
  };
  plan.workloads = workload::default_workloads();
  plan.qps_levels.assign(routing::kQpsGrid.begin(), routing::kQpsGrid.end());
  return plan;
}

namespace {

json spec_to_json(const workload::WorkloadSpec& s) {
  return json{{"id", s.id},
              {"turn1",
               {{"input_tokens", s.turn1.input_tokens},
                {"output_tokens", s.turn1.output_tokens}}},
              {"turn2plus",
               {{"input_tokens", s.turn2plus.input_tokens},
                {"output_tokens", s.turn2plus.output_tokens}}},
              {"num_turns", s.num_turns},
              {"qps", s.qps},
              {"duration_s", s.duration_s},
              {"think_time_s", s.think_time_s},
              {"jitter_pct", s.jitter_pct}};
}

workload::WorkloadSpec spec_from_json(const json& j) {
  workload::WorkloadSpec s;
  s.id = j.at("id").get<std::string>();
  s.turn1.input_tokens = j.at("turn1").at("input_tokens").get<long>();
  s.turn1.output_tokens = j.at("turn1").at("output_tokens").get<long>();
  s.turn2plus.input_tokens = j.at("turn2plus").at("input_tokens").get<long>();
  s.turn2plus.output_tokens = j.at("turn2plus").at("output_tokens").get<long>();
  s.num_turns = j.at("num_turns").get<int>();
  s.qps = j.at("qps").get<double>();
  s.duration_s = j.at("duration_s").get<double>();
  s.think_time_s = j.value("think_time_s", 0.0);
  s.jitter_pct = j.value("jitter_pct", 0.0);
  s.category = workload::classify(s.turn2plus);
  s.validate();
  return s;
}

json agg_to_json(const metrics::AggregateMetrics& m) {
  json j{{"tps", m.tps},
         {"success_rate", m.success_rate},
         {"degraded", m.degraded},
         {"total_requests", m.total_requests},
         {"completed_requests", m.completed_requests}};
  auto put = [&](const char* k, const std::optional<double>& v) {
    if (v) j[k] = *v;
  };
  put("ttft_t1_mean", m.ttft_t1_mean);
  put("ttft_t1_p99", m.ttft_t1_p99);
  put("ttft_t2_mean", m.ttft_t2_mean);
  put("ttft_t2_p99", m.ttft_t2_p99);
  put("tpot_mean", m.tpot_mean);
  put("latency_mean", m.latency_mean);
  return j;
}

metrics::AggregateMetrics agg_from_json(const json& j) {
  metrics::AggregateMetrics m;
  m.tps = j.at("tps").get<double>();
  m.success_rate = j.at("success_rate").get<double>();
  m.degraded = j.at("degraded").get<bool>();
  m.total_requests = j.at("total_requests").get<long>();
  m.completed_requests = j.at("completed_requests").get<long>();
  auto get = [&](const char* k) -> std::optional<double> {
    if (j.contains(k)) return j[k].get<double>();
    return std::nullopt;
  };
  m.ttft_t1_mean = get("ttft_t1_mean");
  m.ttft_t1_p99 = get("ttft_t1_p99");
  m.ttft_t2_mean = get("ttft_t2_mean");
  m.ttft_t2_p99 = get("ttft_t2_p99");
  m.tpot_mean = get("tpot_mean");
  m.latency_mean = get("latency_mean");
  return m;
}

}  // namespace

std::string SweepPlan::to_json() const {
  json cfgs = json::array();
  for (const auto& c : configs)
    cfgs.push_back({{"shape", c.shape}, {"x_mode", c.x_mode}});
  json wls = json::array();
  for (const auto& w : workloads) wls.push_back(spec_to_json(w));
  json j{{"schema_version", 1}, {"configs", cfgs},     {"workloads", wls},
         {"qps_levels", qps_levels}, {"seeds", seeds}, {"duration_s", duration_s}};
  return j.dump(2);
}

SweepPlan SweepPlan::from_json(const std::string& text) {
  json j = json::parse(text);
  SweepPlan plan;
  for (const auto& c : j.at("configs"))
    plan.configs.push_back({c.at("shape").get<std::string>(),
                            c.at("x_mode").get<std::string>()});
  for (const auto& w : j.at("workloads"))
    plan.workloads.push_back(spec_from_json(w));
  plan.qps_levels = j.at("qps_levels").get<std::vector<double>>();
  plan.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
  plan.duration_s = j.at("duration_s").get<double>();
  return plan;
}

SweepPlan SweepPlan::load(const std::filesystem::path& p) {
  return from_json(read_file(p));
}

void SweepPlan::save(const std::filesystem::path& p) const {
  write_file(p, to_json() + "\n");
}

std::string SweepPlan::hash() const { return md5_hex(to_json()); }

std::string CellResult::cell_id() const {
  std::ostringstream key;
  key << config_label << '|' << workload_id << '|' << json(qps).dump() << '|'
      << seed;
  return md5_hex(key.str());
}

std::string CellResult::to_json() const {
  json j{{"config_label", config_label}, {"shape", shape},
         {"x_mode", x_mode},             {"category", category},
         {"workload_id", workload_id},   {"qps", qps},
         {"seed", seed},                 {"failed", failed}};
  if (failed)
    j["error"] = error;
  else
    j["metrics"] = agg_to_json(m);
  return j.dump();
}

CellResult CellResult::from_json(const std::string& text) {
  json j = json::parse(text);
  CellResult c;
  c.config_label = j.at("config_label").get<std::string>();
  c.shape = j.at("shape").get<std::string>();
  c.x_mode = j.at("x_mode").get<std::string>();
  c.category = j.at("category").get<std::string>();
  c.workload_id = j.at("workload_id").get<std::string>();
  c.qps = j.at("qps").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.failed = j.at("failed").get<bool>();
  if (c.failed)
    c.error = j.value("error", "");
  else
    c.m = agg_from_json(j.at("metrics"));
  return c;
}

namespace {

routing::RoutingPolicy policy_for(
    const ConfigSpec& cfg, std::shared_ptr<const routing::DecisionTable> table) {
  if (cfg.x_mode == "dynamic") {
    if (!table)
      throw std::invalid_argument(
          "dynamic config requires a decision table: " + cfg.label());
    return routing::RoutingPolicy::dynamic_policy(std::move(table));
  }
  return routing::RoutingPolicy::static_policy(cfg.x_value());
}

CellResult run_cell(const SweepPlan& plan, const ConfigSpec& cfg,
                    const workload::WorkloadSpec& wl, double qps,
                    std::uint64_t seed,
                    const std::shared_ptr<const cost::CalibrationTable>& calib,
                    const std::shared_ptr<const routing::DecisionTable>& table) {
  CellResult cell;
  cell.config_label = cfg.label();
  cell.shape = cfg.shape;
  cell.x_mode = cfg.x_mode;
  cell.category = cfg.category();
  cell.workload_id = wl.id;
  cell.qps = qps;
  cell.seed = seed;
  try {
    workload::WorkloadSpec spec = wl;
    spec.qps = qps;
    spec.duration_s = plan.duration_s;
    auto convs = workload::generate_conversations(spec, seed);
    auto cluster = sim::ClusterConfig::from_name(cfg.shape,
                                                 policy_for(cfg, table), calib);
    auto result =
        sim::run_simulation(cluster, convs, -1.0, seed, spec.think_time_s);
    double window = std::max(plan.duration_s, result.makespan);
    cell.m = metrics::aggregate(result.records, window);
  } catch (const std::exception& e) {
    cell.failed = true;
    cell.error = e.what();
  }
  return cell;
}

}  // namespace

ResultSet run_sweep(const SweepPlan& plan,
                    std::shared_ptr<const cost::CalibrationTable> calib,
                    int parallelism,
                    const std::optional<std::filesystem::path>& manifest_dir,
                    std::shared_ptr<const routing::DecisionTable> table) {
  if (parallelism < 1) parallelism = 1;
  ResultSet out;
  out.plan_hash = plan.hash();
  out.calibration_hash = calib->hash();

  struct Pending {
    const ConfigSpec* cfg;
    const workload::WorkloadSpec* wl;
    double qps;
    std::uint64_t seed;
  };
  std::vector<Pending> cells;
  for (const auto& cfg : plan.configs)
    for (const auto& wl : plan.workloads)
      for (double q : plan.qps_levels)
        for (auto seed : plan.seeds) cells.push_back({&cfg, &wl, q, seed});

  out.cells.resize(cells.size());
  std::vector<char> done(cells.size(), 0);

  if (manifest_dir) {
    std::filesystem::create_directories(*manifest_dir);
    for (std::size_t i = 0; i < cells.size(); ++i) {
      CellResult probe;
      probe.config_label = cells[i].cfg->label();
      probe.workload_id = cells[i].wl->id;
      probe.qps = cells[i].qps;
      probe.seed = cells[i].seed;
      auto path = *manifest_dir / (probe.cell_id() + ".json");
      std::error_code ec;
      if (std::filesystem::exists(path, ec)) {
        out.cells[i] = CellResult::from_json(read_file(path));
        done[i] = 1;
      }
    }
  }

  std::atomic<std::size_t> next{0};
  auto worker = [&]() {
    for (;;) {
      std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      if (done[i]) continue;
      const auto& p = cells[i];
      out.cells[i] =
          run_cell(plan, *p.cfg, *p.wl, p.qps, p.seed, calib, table);
      if (manifest_dir)
        write_file(*manifest_dir / (out.cells[i].cell_id() + ".json"),
                         out.cells[i].to_json() + "\n");
    }
  };
  std::vector<std::thread> pool;
  int n = std::min<int>(parallelism, int(cells.size()));
  for (int t = 1; t < n; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return out;
}

std::map<std::tuple<std::string, std::string, double>,
         metrics::AggregateMetrics>
mean_over_seeds(const ResultSet& results) {
  struct Acc {
    std::vector<metrics::AggregateMetrics> seeds;
  };
  std::map<std::tuple<std::string, std::string, double>, Acc> groups;
  for (const auto& c : results.cells) {
    if (c.failed) continue;
    groups[{c.config_label, c.workload_id, c.qps}].seeds.push_back(c.m);
  }
  std::map<std::tuple<std::string, std::string, double>,
           metrics::AggregateMetrics>
      out;
  for (auto& [key, acc] : groups) {
    metrics::AggregateMetrics m;
    auto avg_opt = [&](auto field) -> std::optional<double> {
      double s = 0;
      long n = 0;
      for (const auto& a : acc.seeds)
        if (auto v = field(a)) {
          s += *v;
          ++n;
        }
      if (n == 0) return std::nullopt;
      return s / double(n);
    };
    m.ttft_t1_mean = avg_opt([](const auto& a) { return a.ttft_t1_mean; });
    m.ttft_t1_p99 = avg_opt([](const auto& a) { return a.ttft_t1_p99; });
    m.ttft_t2_mean = avg_opt([](const auto& a) { return a.ttft_t2_mean; });
    m.ttft_t2_p99 = avg_opt([](const auto& a) { return a.ttft_t2_p99; });
    m.tpot_mean = avg_opt([](const auto& a) { return a.tpot_mean; });
    m.latency_mean = avg_opt([](const auto& a) { return a.latency_mean; });
    for (const auto& a : acc.seeds) {
      m.tps += a.tps;
      m.success_rate += a.success_rate;
      m.total_requests += a.total_requests;
      m.completed_requests += a.completed_requests;
    }
    m.tps /= double(acc.seeds.size());
    m.success_rate /= double(acc.seeds.size());
    m.degraded = m.success_rate < 0.95;
    out[key] = m;
  }
  return out;
}

int qps_band(double q) {
  if (q >= 0.5 && q <= 2) return 0;
  if (q >= 4 && q <= 8) return 1;
  if (q >= 12 && q <= 20) return 2;
  return -1;
}

namespace {
std::optional<double> metric_value(const metrics::AggregateMetrics& m,
                                   const std::string& metric) {
  if (metric == "ttft_t1_mean") return m.ttft_t1_mean;
  if (metric == "ttft_t2_mean") return m.ttft_t2_mean;
  if (metric == "ttft_t2_p99") return m.ttft_t2_p99;
  if (metric == "tpot_mean") return m.tpot_mean;
  if (metric == "latency_mean") return m.latency_mean;
  if (metric == "tps") return m.tps;
  throw std::invalid_argument("unknown metric: " + metric);
}
}  // namespace

std::vector<ImprovementRow> compare_modes(const ResultSet& results,
                                          const std::string& from_mode,
                                          const std::string& to_mode,
                                          const std::string& metric) {
  auto means = mean_over_seeds(results);
  std::vector<std::string> shapes;
  for (const auto& c : results.cells)
    if (c.x_mode == from_mode &&
        std::find(shapes.begin(), shapes.end(), c.shape) == shapes.end())
      shapes.push_back(c.shape);

  std::vector<ImprovementRow> rows;
  for (const auto& shape : shapes) {
    ImprovementRow row;
    row.shape = shape;
    double sum[3] = {0, 0, 0};
    long n[3] = {0, 0, 0};
    for (const auto& [key, from_m] : means) {
      const auto& [label, wl, qps] = key;
      if (label != shape + ":" + from_mode) continue;
      int band = qps_band(qps);
      if (band < 0) continue;
      auto it = means.find({shape + ":" + to_mode, wl, qps});
      if (it == means.end()) continue;
      auto a = metric_value(from_m, metric);
      auto b = metric_value(it->second, metric);
      if (!a || !b || *a <= 0) continue;
      sum[band] += (*b - *a) / *a;
      ++n[band];
    }
    row.low = n[0] ? sum[0] / double(n[0]) : std::nan("");
    row.med = n[1] ? sum[1] / double(n[1]) : std::nan("");
    row.high = n[2] ? sum[2] / double(n[2]) : std::nan("");
    row.low_n = n[0];
    row.med_n = n[1];
    row.high_n = n[2];
    if (n[0] + n[1] + n[2] > 0) rows.push_back(row);
  }
  return rows;
}

routing::BenchmarkRunner make_sim_runner(
    const std::string& shape,
    std::shared_ptr<const cost::CalibrationTable> calib,
    const std::vector<std::uint64_t>& seeds) {
  return [shape, calib, seeds](const routing::GridSpec& grid, int x)
             -> std::optional<std::pair<double, double>> {
    try {
      double ttft_sum = 0, tpot_sum = 0;
      long ttft_n = 0, tpot_n = 0;
      for (auto seed : seeds) {
        auto convs = workload::generate_conversations(grid.spec, seed);
        auto cluster = sim::ClusterConfig::from_name(
            shape, routing::RoutingPolicy::static_policy(double(x)), calib);
        auto result = sim::run_simulation(cluster, convs, -1.0, seed,
                                          grid.spec.think_time_s);
        double window = std::max(grid.spec.duration_s, result.makespan);
        auto agg = metrics::aggregate(result.records, window);
        if (agg.ttft_t2_mean) {
          ttft_sum += *agg.ttft_t2_mean;
          ++ttft_n;
        }
        if (agg.tpot_mean) {
          tpot_sum += *agg.tpot_mean;
          ++tpot_n;
        }
      }
      if (ttft_n == 0 || tpot_n == 0) return std::nullopt;
      return std::pair{ttft_sum / double(ttft_n), tpot_sum / double(tpot_n)};
    } catch (const std::exception&) {
      return std::nullopt;
    }
  };
}

std::vector<WeightSweepRow> weight_sweep(
    const std::string& shape, const workload::WorkloadSpec& base,
    const std::vector<double>& qps_levels,
    const std::vector<double>& w_tpot_list,
    std::shared_ptr<const cost::CalibrationTable> calib,
    const std::vector<routing::GridSpec>& grid,
    const std::vector<std::uint64_t>& seeds) {
  auto inner = make_sim_runner(shape, calib, seeds);
  // The benchmark side of Phase 1 does not depend on the weights; memoize it
  // so each weight setting reuses the same measurements.
  auto cache = std::make_shared<
      std::map<std::pair<std::string, int>,
               std::optional<std::pair<double, double>>>>();
  routing::BenchmarkRunner runner =
      [inner, cache](const routing::GridSpec& g,
                     int x) -> std::optional<std::pair<double, double>> {
    auto key = std::pair{g.key.str(), x};
    auto it = cache->find(key);
    if (it != cache->end()) return it->second;
    auto v = inner(g, x);
    (*cache)[key] = v;
    return v;
  };

  // x=0 baseline replays, shared across weights.
  struct Baseline {
    double ttft_t2 = 0, tpot = 0;
    bool ok = false;
  };
  std::map<std::pair<double, std::uint64_t>, Baseline> baselines;
  for (double q : qps_levels)
    for (auto seed : seeds) {
      workload::WorkloadSpec spec = base;
      spec.qps = q;
      auto convs = workload::generate_conversations(spec, seed);
      auto cluster = sim::ClusterConfig::from_name(
          shape, routing::RoutingPolicy::static_policy(0.0), calib);
      auto result =
          sim::run_simulation(cluster, convs, -1.0, seed, spec.think_time_s);
      auto agg = metrics::aggregate(
          result.records, std::max(spec.duration_s, result.makespan));
      Baseline b;
      if (agg.ttft_t2_mean && agg.tpot_mean) {
        b.ttft_t2 = *agg.ttft_t2_mean;
        b.tpot = *agg.tpot_mean;
        b.ok = true;
      }
      baselines[{q, seed}] = b;
    }

  std::vector<WeightSweepRow> rows;
  for (double w_tpot : w_tpot_list) {
    routing::SLOWeights weights{1.0, w_tpot};
    auto table = std::make_shared<routing::DecisionTable>(
        routing::build_decision_table(grid, weights, runner, calib->hash()));

    WeightSweepRow row;
    row.w_tpot = w_tpot;
    double ttft_sum = 0, tpot_sum = 0;
    long n = 0;
    long d_local = 0, t2_total = 0;
    for (double q : qps_levels)
      for (auto seed : seeds) {
        const auto& b = baselines.at({q, seed});
        workload::WorkloadSpec spec = base;
        spec.qps = q;
        auto convs = workload::generate_conversations(spec, seed);
        auto cluster = sim::ClusterConfig::from_name(
            shape, routing::RoutingPolicy::dynamic_policy(table), calib);
        auto result =
            sim::run_simulation(cluster, convs, -1.0, seed, spec.think_time_s);
        auto agg = metrics::aggregate(
            result.records, std::max(spec.duration_s, result.makespan));
        for (const auto& r : result.records)
          if (r.turn_index >= 2) {
            ++t2_total;
            if (r.route == metrics::Route::D_local) ++d_local;
          }
        if (b.ok && agg.ttft_t2_mean && agg.tpot_mean && b.ttft_t2 > 0 &&
            b.tpot > 0) {
          ttft_sum += (*agg.ttft_t2_mean - b.ttft_t2) / b.ttft_t2;
          tpot_sum += (*agg.tpot_mean - b.tpot) / b.tpot;
          ++n;
        }
      }
    row.ttft_change = n ? ttft_sum / double(n) : std::nan("");
    row.tpot_change = n ? tpot_sum / double(n) : std::nan("");
    row.d_local_ratio = t2_total ? double(d_local) / double(t2_total) : 0;
    rows.push_back(row);
  }
  return rows;
}

std::string results_csv(const ResultSet& results) {
  std::ostringstream out;
  out << metrics::kAggregateCsvHeader << "\n";
  for (const auto& c : results.cells) {
    if (c.failed) continue;
    out << metrics::aggregate_csv_row(c.config_label, c.x_mode, c.workload_id,
                                      c.qps, c.m)
        << "\n";
  }
  return out.str();
}

std::vector<metrics::WinnerCell> winner_inputs(const ResultSet& results) {
  auto means = mean_over_seeds(results);
  std::map<std::string, std::pair<std::string, std::string>> meta;
  for (const auto& c : results.cells)
    meta[c.config_label] = {c.category, c.x_mode};
  std::vector<metrics::WinnerCell> cells;
  for (const auto& [key, m] : means) {
    const auto& [label, wl, qps] = key;
    const auto& [category, x_mode] = meta.at(label);
    if (x_mode == "dynamic") continue;
    metrics::WinnerCell cell;
    cell.workload_id = wl;
    cell.qps = qps;
    cell.config_label = label;
    cell.category = category;
    cell.m = m;
    cells.push_back(cell);
  }
  return cells;
}

}  // namespace ppd::sweep
