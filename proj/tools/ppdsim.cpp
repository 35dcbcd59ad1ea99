#include <algorithm>
#include <atomic>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ppd/costmodel.hpp"
#include "ppd/gateway.hpp"
#include "ppd/metrics.hpp"
#include "ppd/routing.hpp"
#include "ppd/simulator.hpp"
#include "ppd/sweep.hpp"
#include "ppd/util.hpp"
#include "ppd/workload.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 2;
constexpr int kExitPartialSweep = 3;
constexpr int kExitDegenerate = 4;

std::string g_command_line;

std::string make_manifest(std::uint64_t seed,
                          const std::string& calibration_hash) {
  json j{{"command_line", g_command_line},
         {"seed", seed},
         {"calibration_hash", calibration_hash}};
  return j.dump();
}

std::shared_ptr<const ppd::cost::CalibrationTable> load_calibration(
    const std::string& path) {
  if (path.empty())
    return std::make_shared<const ppd::cost::CalibrationTable>(
        ppd::cost::CalibrationTable::defaults());
  return std::make_shared<const ppd::cost::CalibrationTable>(
      ppd::cost::CalibrationTable::load(path));
}

ppd::workload::WorkloadSpec resolve_workload(const std::string& name) {
  if (auto w = ppd::workload::find_workload(name)) return *w;
  if (fs::exists(name)) return ppd::workload::load_spec_file(name);
  throw std::invalid_argument("unknown workload id or missing file: " + name);
}

std::vector<double> parse_doubles(const std::string& csv) {
  std::vector<double> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(std::stod(tok));
  return out;
}

std::vector<std::uint64_t> parse_seeds(const std::string& csv) {
  std::vector<std::uint64_t> out;
  std::stringstream ss(csv);
  std::string tok;
  while (std::getline(ss, tok, ','))
    if (!tok.empty()) out.push_back(std::stoull(tok));
  if (out.empty()) throw std::invalid_argument("empty seed list");
  return out;
}

ppd::sweep::ResultSet load_results_dir(const fs::path& dir) {
  ppd::sweep::ResultSet rs;
  fs::path cells = fs::exists(dir / "cells") ? dir / "cells" : dir;
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(cells))
    if (e.path().extension() == ".json" &&
        e.path().filename() != "manifest.json" &&
        e.path().filename() != "plan.json")
      files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files)
    rs.cells.push_back(
        ppd::sweep::CellResult::from_json(ppd::read_file(f)));
  if (rs.cells.empty())
    throw std::invalid_argument("no result cells found under " +
                                dir.string());
  return rs;
}

std::atomic<bool> g_stop{false};
void handle_signal(int) { g_stop.store(true); }

int cmd_simulate(const std::string& config, double x,
                 const std::string& table_path, const std::string& workload,
                 double qps, double duration_s, std::uint64_t seed,
                 const std::string& calibration, const std::string& out,
                 const std::string& csv_out) {
  auto calib = load_calibration(calibration);
  ppd::routing::RoutingPolicy policy;
  if (!table_path.empty()) {
    auto table = std::make_shared<ppd::routing::DecisionTable>(
        ppd::routing::DecisionTable::load(table_path));
    policy = ppd::routing::RoutingPolicy::dynamic_policy(std::move(table));
  } else {
    policy = ppd::routing::RoutingPolicy::static_policy(x);
  }
  auto cluster = ppd::sim::ClusterConfig::from_name(config, policy, calib);

  auto spec = resolve_workload(workload);
  if (qps > 0) spec.qps = qps;
  if (duration_s > 0) spec.duration_s = duration_s;
  spec.validate();

  auto convs = ppd::workload::generate_conversations(spec, seed);
  auto result =
      ppd::sim::run_simulation(cluster, convs, -1.0, seed,
                               spec.think_time_s);
  double window = std::max(spec.duration_s, result.makespan);
  auto agg = ppd::metrics::aggregate(result.records, window);

  std::string manifest = make_manifest(seed, calib->hash());
  if (!out.empty()) {
    std::ostringstream buf;
    ppd::metrics::export_records(buf, manifest, result.records);
    ppd::write_file(out, buf.str());
  }
  if (!csv_out.empty()) {
    std::ostringstream buf;
    buf << ppd::metrics::kAggregateCsvHeader << "\n"
        << ppd::metrics::aggregate_csv_row(
               config, table_path.empty() ? "static" : "dynamic", spec.id,
               spec.qps, agg)
        << "\n";
    ppd::write_file(csv_out, buf.str());
    ppd::write_file(csv_out + ".manifest.json", manifest + "\n");
  }
  std::cout << "requests=" << agg.total_requests
            << " completed=" << agg.completed_requests << " tps=" << agg.tps
            << " success_rate=" << agg.success_rate << "\n";
  if (agg.ttft_t1_mean) std::cout << "ttft_t1_mean=" << *agg.ttft_t1_mean << "\n";
  if (agg.ttft_t2_mean) std::cout << "ttft_t2_mean=" << *agg.ttft_t2_mean << "\n";
  if (agg.tpot_mean) std::cout << "tpot_mean=" << *agg.tpot_mean << "\n";
  std::cout << "link_transfers=" << result.link_transfers
            << " link_bytes=" << result.link_bytes << "\n";
  return kExitOk;
}

int cmd_build_table(const std::string& weights_csv, const std::string& grid,
                    const std::string& shape, const std::string& seeds_csv,
                    double grid_duration_s, const std::string& calibration,
                    const std::string& out) {
  auto calib = load_calibration(calibration);
  auto w = parse_doubles(weights_csv);
  if (w.size() != 2)
    throw std::invalid_argument("--weights expects w_ttft,w_tpot");
  ppd::routing::SLOWeights weights{w[0], w[1]};
  weights.validate();
  if (grid != "default")
    throw std::invalid_argument("unknown grid: " + grid);
  auto grid_specs = ppd::routing::default_grid();
  if (grid_duration_s > 0)
    for (auto& g : grid_specs) g.spec.duration_s = grid_duration_s;
  auto runner =
      ppd::sweep::make_sim_runner(shape, calib, parse_seeds(seeds_csv));
  auto table = ppd::routing::build_decision_table(grid_specs, weights, runner,
                                                  calib->hash());
  table.save(out);
  long unavailable = 0;
  for (const auto& [k, e] : table.entries)
    if (!e.available) ++unavailable;
  std::cout << "entries=" << table.entries.size()
            << " unavailable=" << unavailable << " -> " << out << "\n";
  return kExitOk;
}

int cmd_sweep(const std::string& plan_arg, const std::string& out_dir,
              int parallelism, bool resume, const std::string& table_path,
              const std::string& calibration) {
  auto calib = load_calibration(calibration);
  ppd::sweep::SweepPlan plan = plan_arg == "default"
                                   ? ppd::sweep::SweepPlan::full_default()
                                   : ppd::sweep::SweepPlan::load(plan_arg);
  std::shared_ptr<const ppd::routing::DecisionTable> table;
  if (!table_path.empty())
    table = std::make_shared<ppd::routing::DecisionTable>(
        ppd::routing::DecisionTable::load(table_path));

  fs::path dir(out_dir);
  fs::path cells = dir / "cells";
  if (!resume && fs::exists(cells)) fs::remove_all(cells);
  fs::create_directories(dir);
  plan.save(dir / "plan.json");

  auto results = ppd::sweep::run_sweep(plan, calib, parallelism, cells, table);
  ppd::write_file(dir / "results.csv",
                        ppd::sweep::results_csv(results));

  long failed = 0, degraded = 0, ok = 0;
  json failures = json::array();
  for (const auto& c : results.cells) {
    if (c.failed) {
      ++failed;
      failures.push_back({{"cell", c.cell_id()}, {"error", c.error}});
    } else {
      ++ok;
      if (c.m.degraded) ++degraded;
    }
  }
  json manifest{{"command_line", g_command_line},
                {"plan_hash", results.plan_hash},
                {"calibration_hash", results.calibration_hash},
                {"cells", long(results.cells.size())},
                {"failed", failed},
                {"degraded", degraded},
                {"failures", failures}};
  ppd::write_file(dir / "manifest.json", manifest.dump(2) + "\n");
  std::cout << "cells=" << results.cells.size() << " failed=" << failed
            << " degraded=" << degraded << " -> " << dir.string() << "\n";
  if (failed > 0) return kExitPartialSweep;
  if (ok > 0 && degraded == ok) return kExitDegenerate;
  return kExitOk;
}

int cmd_analyze(const std::string& results_dir, bool winners,
                const std::string& improvement, const std::string& pareto,
                const std::string& out) {
  auto results = load_results_dir(results_dir);
  std::ostringstream report;

  if (winners) {
    auto dist =
        ppd::metrics::winner_distribution(ppd::sweep::winner_inputs(results));
    report << dist.render();
  }
  if (!improvement.empty()) {
    // from_mode:to_mode:metric, e.g. x0:x1:ttft_t2_mean
    auto p1 = improvement.find(':');
    auto p2 = improvement.rfind(':');
    if (p1 == std::string::npos || p2 == p1)
      throw std::invalid_argument("--improvement expects from:to:metric");
    std::string from = improvement.substr(0, p1);
    std::string to = improvement.substr(p1 + 1, p2 - p1 - 1);
    std::string metric = improvement.substr(p2 + 1);
    auto rows = ppd::sweep::compare_modes(results, from, to, metric);
    report << "shape\tlow\tmed\thigh\t(" << metric << ", " << from << "->"
           << to << ")\n";
    char buf[160];
    for (const auto& r : rows) {
      std::snprintf(buf, sizeof(buf), "%s\t%+.1f%%\t%+.1f%%\t%+.1f%%\n",
                    r.shape.c_str(), 100 * r.low, 100 * r.med, 100 * r.high);
      report << buf;
    }
  }
  if (!pareto.empty()) {
    // workload_id:qps
    auto p = pareto.find(':');
    if (p == std::string::npos)
      throw std::invalid_argument("--pareto expects workload_id:qps");
    std::string wl = pareto.substr(0, p);
    double qps = std::stod(pareto.substr(p + 1));
    auto means = ppd::sweep::mean_over_seeds(results);
    std::vector<ppd::metrics::ParetoPoint> points;
    for (const auto& [key, m] : means) {
      const auto& [label, cell_wl, cell_qps] = key;
      if (cell_wl != wl || cell_qps != qps) continue;
      if (!m.ttft_t2_p99) continue;
      points.push_back({*m.ttft_t2_p99, m.tps, label});
    }
    if (points.empty())
      throw std::invalid_argument("no cells match " + pareto);
    report << "pareto frontier (" << wl << " @ qps " << qps << "):\n";
    for (const auto& pt : ppd::metrics::pareto_frontier(points))
      report << "  " << pt.label << " ttft_t2_p99=" << pt.ttft_p99
             << " tps=" << pt.tps << "\n";
  }

  std::cout << report.str();
  if (!out.empty()) ppd::write_file(out, report.str());
  return kExitOk;
}

int cmd_weight_sweep(const std::string& shape, const std::string& workload,
                     const std::string& qps_csv, const std::string& weights_csv,
                     const std::string& seeds_csv, double grid_duration_s,
                     const std::string& calibration, const std::string& out) {
  auto calib = load_calibration(calibration);
  auto spec = resolve_workload(workload);
  auto grid = ppd::routing::default_grid();
  if (grid_duration_s > 0)
    for (auto& g : grid) g.spec.duration_s = grid_duration_s;
  auto rows = ppd::sweep::weight_sweep(
      shape, spec, parse_doubles(qps_csv), parse_doubles(weights_csv), calib,
      grid, parse_seeds(seeds_csv));
  std::ostringstream report;
  report << "w_tpot\tttft_change\ttpot_change\td_local_ratio\n";
  char buf[160];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%g\t%+.1f%%\t%+.1f%%\t%.1f%%\n", r.w_tpot,
                  100 * r.ttft_change, 100 * r.tpot_change,
                  100 * r.d_local_ratio);
    report << buf;
  }
  std::cout << report.str();
  if (!out.empty()) {
    ppd::write_file(out, report.str());
    ppd::write_file(out + ".manifest.json",
                          make_manifest(0, calib->hash()) + "\n");
  }
  return kExitOk;
}

int cmd_serve(int port, double x, const std::string& table_path,
              double ttl_s) {
  ppd::routing::RoutingPolicy policy;
  if (!table_path.empty()) {
    auto table = std::make_shared<ppd::routing::DecisionTable>(
        ppd::routing::DecisionTable::load(table_path));
    policy = ppd::routing::RoutingPolicy::dynamic_policy(std::move(table));
  } else {
    policy = ppd::routing::RoutingPolicy::static_policy(x);
  }
  ppd::gateway::Gateway gw(policy);
  gw.session_ttl_s = ttl_s;
  std::signal(SIGINT, handle_signal);
  std::signal(SIGTERM, handle_signal);
  std::cout << "listening on 127.0.0.1:" << port << "\n";
  int rc = ppd::gateway::serve_tcp(gw, port, g_stop);
  return rc == 0 ? kExitOk : kExitValidation;
}

int cmd_ingest(const std::string& in, const std::string& out, int min_turns,
               double min_ratio, long sample, std::uint64_t sample_seed) {
  std::ifstream fin(in);
  if (!fin) throw std::invalid_argument("cannot open trace: " + in);
  ppd::workload::TraceFilter filter;
  filter.min_turns = min_turns;
  filter.min_turn2_input_output_ratio = min_ratio;
  if (sample > 0) filter.sample_size = std::size_t(sample);
  filter.sample_seed = sample_seed;
  auto convs = ppd::workload::ingest_trace(fin, filter);
  std::ostringstream buf;
  ppd::workload::export_trace(buf, convs);
  ppd::write_file(out, buf.str());
  std::cout << "conversations=" << convs.size() << " -> " << out << "\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  std::ostringstream cmdline;
  for (int i = 0; i < argc; ++i) cmdline << (i ? " " : "") << argv[i];
  g_command_line = cmdline.str();

  CLI::App app{"prefill/decode disaggregation simulator and router"};
  app.require_subcommand(1);

  // simulate
  auto* sim = app.add_subcommand("simulate", "run one cluster/workload cell");
  std::string s_config = "1P_3D", s_table, s_workload = "balanced_small";
  std::string s_calib, s_out, s_csv;
  double s_x = 0, s_qps = 0, s_duration = 0;
  std::uint64_t s_seed = 1;
  sim->add_option("--config", s_config, "cluster shape, e.g. 1P_3D or 4R");
  sim->add_option("--x", s_x, "static AP-to-D fraction in [0,1]");
  sim->add_option("--table", s_table, "decision table file (dynamic mode)");
  sim->add_option("--workload", s_workload, "workload id or spec file");
  sim->add_option("--qps", s_qps, "override workload QPS");
  sim->add_option("--duration", s_duration, "override duration (seconds)");
  sim->add_option("--seed", s_seed, "RNG seed");
  sim->add_option("--calibration", s_calib, "calibration file");
  sim->add_option("--out", s_out, "records output file");
  sim->add_option("--csv", s_csv, "aggregate CSV output file");

  // build-table
  auto* bt = app.add_subcommand("build-table", "offline decision table");
  std::string b_weights = "1,1", b_grid = "default", b_shape = "1P_3D";
  std::string b_seeds = "1", b_calib, b_out = "decision_table.json";
  double b_grid_duration = 0;
  bt->add_option("--weights", b_weights, "w_ttft,w_tpot");
  bt->add_option("--grid", b_grid, "benchmark grid name");
  bt->add_option("--shape", b_shape, "cluster shape benchmarked");
  bt->add_option("--seeds", b_seeds, "comma-separated seeds");
  bt->add_option("--grid-duration-s", b_grid_duration,
                 "override per-key benchmark duration");
  bt->add_option("--calibration", b_calib, "calibration file");
  bt->add_option("--out", b_out, "table output file");

  // sweep
  auto* sw = app.add_subcommand("sweep", "run the experiment grid");
  std::string w_plan = "default", w_out = "results", w_table, w_calib;
  int w_parallelism = int(std::thread::hardware_concurrency());
  bool w_resume = false;
  sw->add_option("--plan", w_plan, "plan file or 'default'");
  sw->add_option("--out-dir", w_out, "results directory");
  sw->add_option("--parallelism", w_parallelism, "worker pool size");
  sw->add_flag("--resume", w_resume, "reuse completed cells in out-dir");
  sw->add_option("--table", w_table, "decision table for dynamic configs");
  sw->add_option("--calibration", w_calib, "calibration file");

  // analyze
  auto* an = app.add_subcommand("analyze", "tables from existing results");
  std::string a_results = "results", a_improvement, a_pareto, a_out;
  bool a_winners = false;
  an->add_option("--results", a_results, "results directory");
  an->add_flag("--winners", a_winners, "winner-distribution table");
  an->add_option("--improvement", a_improvement, "from:to:metric");
  an->add_option("--pareto", a_pareto, "workload_id:qps");
  an->add_option("--out", a_out, "write the report to a file");

  // weight-sweep
  auto* ws = app.add_subcommand("weight-sweep", "SLO-weight trade-off table");
  std::string ws_shape = "3P_1D", ws_workload = "ph1_short";
  std::string ws_qps = "2,4", ws_weights = "0,0.5,1,2,6", ws_seeds = "1";
  std::string ws_calib, ws_out;
  double ws_grid_duration = 0;
  ws->add_option("--shape", ws_shape, "cluster shape");
  ws->add_option("--workload", ws_workload, "workload id or spec file");
  ws->add_option("--qps", ws_qps, "comma-separated QPS levels");
  ws->add_option("--weights", ws_weights, "comma-separated w_tpot values");
  ws->add_option("--seeds", ws_seeds, "comma-separated seeds");
  ws->add_option("--grid-duration-s", ws_grid_duration,
                 "override per-key benchmark duration");
  ws->add_option("--calibration", ws_calib, "calibration file");
  ws->add_option("--out", ws_out, "write the table to a file");

  // serve
  auto* sv = app.add_subcommand("serve", "run the routing gateway");
  int v_port = 8700;
  double v_x = 0, v_ttl = 3600;
  std::string v_table;
  sv->add_option("--port", v_port, "TCP port (loopback)");
  sv->add_option("--x", v_x, "static AP-to-D fraction");
  sv->add_option("--table", v_table, "decision table file (dynamic mode)");
  sv->add_option("--ttl-s", v_ttl, "session idle TTL in seconds");

  // ingest
  auto* in = app.add_subcommand("ingest", "normalize a trace file");
  std::string i_in, i_out = "trace_normalized.jsonl";
  int i_min_turns = 2;
  double i_min_ratio = 0;
  long i_sample = 0;
  std::uint64_t i_sample_seed = 0;
  in->add_option("--in", i_in, "trace file (JSONL)")->required();
  in->add_option("--out", i_out, "normalized output file");
  in->add_option("--min-turns", i_min_turns, "drop shorter conversations");
  in->add_option("--min-ratio", i_min_ratio,
                 "minimum Turn-2+ input/output ratio");
  in->add_option("--sample", i_sample, "deterministic subsample size");
  in->add_option("--sample-seed", i_sample_seed, "subsample seed");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitValidation;
  }

  try {
    if (sim->parsed())
      return cmd_simulate(s_config, s_x, s_table, s_workload, s_qps,
                          s_duration, s_seed, s_calib, s_out, s_csv);
    if (bt->parsed())
      return cmd_build_table(b_weights, b_grid, b_shape, b_seeds,
                             b_grid_duration, b_calib, b_out);
    if (sw->parsed())
      return cmd_sweep(w_plan, w_out, w_parallelism, w_resume, w_table,
                       w_calib);
    if (an->parsed())
      return cmd_analyze(a_results, a_winners, a_improvement, a_pareto, a_out);
    if (ws->parsed())
      return cmd_weight_sweep(ws_shape, ws_workload, ws_qps, ws_weights,
                              ws_seeds, ws_grid_duration, ws_calib, ws_out);
    if (sv->parsed()) return cmd_serve(v_port, v_x, v_table, v_ttl);
    if (in->parsed())
      return cmd_ingest(i_in, i_out, i_min_turns, i_min_ratio, i_sample,
                        i_sample_seed);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  }
  return kExitValidation;
}
