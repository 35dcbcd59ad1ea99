#include "ppd/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <istream>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace ppd::metrics {

using nlohmann::json;

const char* to_string(Route r) {
  switch (r) {
    case Route::P_path: return "P_path";
    case Route::D_local: return "D_local";
    case Route::R_local: return "R_local";
  }
  return "?";
}

const char* to_string(Status s) {
  return s == Status::completed ? "completed" : "timed_out";
}

Route route_from_string(const std::string& s) {
  if (s == "P_path") return Route::P_path;
  if (s == "D_local") return Route::D_local;
  if (s == "R_local") return Route::R_local;
  throw std::invalid_argument("unknown route: " + s);
}

Status status_from_string(const std::string& s) {
  if (s == "completed") return Status::completed;
  if (s == "timed_out") return Status::timed_out;
  throw std::invalid_argument("unknown status: " + s);
}

PerRequest per_request(const RequestRecord& r) {
  PerRequest out;
  if (r.status == Status::timed_out) {
    out.success = false;
    return out;  // latency metrics reported absent
  }
  if (!r.first_token || !r.completion || *r.completion < *r.first_token)
    throw std::invalid_argument("completed record missing/inverted timestamps");
  out.success = true;
  out.ttft = *r.first_token - r.arrival;
  out.latency = *r.completion - r.arrival;
  if (r.output_tokens_emitted >= 2)
    out.tpot = (*r.completion - *r.first_token) /
               double(r.output_tokens_emitted - 1);
  return out;
}

double nearest_rank_percentile(std::vector<double> values, double p) {
  if (values.empty())
    throw std::invalid_argument("percentile of empty sample");
  if (p <= 0 || p > 100) throw std::invalid_argument("p must be in (0, 100]");
  std::sort(values.begin(), values.end());
  std::size_t rank = std::size_t(std::ceil(p / 100.0 * double(values.size())));
  rank = std::max<std::size_t>(1, std::min(rank, values.size()));
  return values[rank - 1];
}

namespace {
std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0;
  for (double x : v) s += x;
  return s / double(v.size());
}
}  // namespace

AggregateMetrics aggregate(const std::vector<RequestRecord>& records,
                           double window) {
  AggregateMetrics agg;
  agg.total_requests = long(records.size());
  std::vector<double> ttft_t1, ttft_t2, tpots, latencies;
  long tokens = 0;
  for (const auto& r : records) {
    auto pr = per_request(r);
    if (!pr.success) continue;
    agg.completed_requests += 1;
    tokens += r.output_tokens_emitted;
    if (pr.ttft) (r.turn_index == 1 ? ttft_t1 : ttft_t2).push_back(*pr.ttft);
    if (pr.tpot) tpots.push_back(*pr.tpot);
    if (pr.latency) latencies.push_back(*pr.latency);
  }
  agg.ttft_t1_mean = mean_of(ttft_t1);
  agg.ttft_t2_mean = mean_of(ttft_t2);
  if (!ttft_t1.empty()) agg.ttft_t1_p99 = nearest_rank_percentile(ttft_t1, 99);
  if (!ttft_t2.empty()) agg.ttft_t2_p99 = nearest_rank_percentile(ttft_t2, 99);
  agg.tpot_mean = mean_of(tpots);
  agg.latency_mean = mean_of(latencies);
  agg.tps = window > 0 ? double(tokens) / window : 0;
  agg.success_rate = agg.total_requests > 0
                         ? double(agg.completed_requests) /
                               double(agg.total_requests)
                         : 0;
  agg.degraded = agg.success_rate < 0.95;
  return agg;
}

std::vector<ParetoPoint> pareto_frontier(std::vector<ParetoPoint> points) {
  if (points.empty()) throw std::invalid_argument("pareto_frontier: no points");
  std::stable_sort(points.begin(), points.end(),
                   [](const ParetoPoint& a, const ParetoPoint& b) {
                     if (a.tps != b.tps) return a.tps < b.tps;
                     return a.ttft_p99 < b.ttft_p99;
                   });
  auto dominates = [](const ParetoPoint& a, const ParetoPoint& b) {
    bool better = a.ttft_p99 < b.ttft_p99 || a.tps > b.tps;
    bool not_worse = a.ttft_p99 <= b.ttft_p99 && a.tps >= b.tps;
    return better && not_worse;
  };
  std::vector<ParetoPoint> frontier;
  for (const auto& p : points) {
    bool dominated = false;
    for (const auto& q : points)
      if (dominates(q, p)) dominated = true;
    bool dup = false;
    for (const auto& f : frontier)
      if (f.ttft_p99 == p.ttft_p99 && f.tps == p.tps) dup = true;
    if (!dominated && !dup) frontier.push_back(p);
  }
  return frontier;
}

WinnerDistribution winner_distribution(const std::vector<WinnerCell>& inputs) {
  std::map<std::pair<std::string, double>, std::vector<const WinnerCell*>>
      cells;
  for (const auto& c : inputs) cells[{c.workload_id, c.qps}].push_back(&c);

  struct Tally {
    long ttft = 0, tpot = 0, thpt = 0;
  };
  std::map<std::string, Tally> tallies;
  long counted = 0, all_degraded = 0, disagreements = 0, both_defined = 0;

  for (auto& [key, configs] : cells) {
    if (configs.size() < 2)
      throw std::invalid_argument(
          "winner_distribution: each (workload, qps) cell needs >= 2 configs");
    std::vector<const WinnerCell*> ok;
    for (auto* c : configs)
      if (!c->m.degraded) ok.push_back(c);
    if (ok.empty()) {
      ++all_degraded;
      continue;
    }
    ++counted;
    // Tie-break: lexicographically smallest config label wins.
    auto pick = [&](auto value, bool maximize) -> const WinnerCell* {
      const WinnerCell* best = nullptr;
      std::optional<double> best_v;
      for (auto* c : ok) {
        auto v = value(c);
        if (!v) continue;
        bool better =
            !best || (maximize ? *v > *best_v : *v < *best_v) ||
            (*v == *best_v && c->config_label < best->config_label);
        if (better) {
          best = c;
          best_v = v;
        }
      }
      return best;
    };
    auto* w_ttft = pick(
        [](const WinnerCell* c) { return c->m.ttft_t2_mean; }, false);
    auto* w_tpot =
        pick([](const WinnerCell* c) { return c->m.tpot_mean; }, false);
    auto* w_thpt = pick(
        [](const WinnerCell* c) -> std::optional<double> { return c->m.tps; },
        true);
    if (w_ttft) tallies[w_ttft->category].ttft++;
    if (w_tpot) tallies[w_tpot->category].tpot++;
    if (w_thpt) tallies[w_thpt->category].thpt++;
    if (w_ttft && w_tpot) {
      ++both_defined;
      if (w_ttft->config_label != w_tpot->config_label) ++disagreements;
    }
  }

  WinnerDistribution dist;
  dist.cells = counted;
  dist.all_degraded_cells = all_degraded;
  dist.disagreement_fraction =
      both_defined > 0 ? double(disagreements) / double(both_defined) : 0;
  const char* order[] = {"Replica", "x=0", "0<x<1", "x=1", "hybrid"};
  for (const char* cat : order) {
    CategoryWins w;
    auto it = tallies.find(cat);
    if (it != tallies.end() && counted > 0) {
      w.ttft_pct = 100.0 * double(it->second.ttft) / double(counted);
      w.tpot_pct = 100.0 * double(it->second.tpot) / double(counted);
      w.throughput_pct = 100.0 * double(it->second.thpt) / double(counted);
    }
    w.avg = (w.ttft_pct + w.tpot_pct + w.throughput_pct) / 3.0;
    dist.rows.emplace_back(cat, w);
  }
  return dist;
}

std::string WinnerDistribution::render() const {
  std::ostringstream out;
  char buf[160];
  out << "Mode        TTFT     TPOT     Thpt     Avg\n";
  for (const auto& [cat, w] : rows) {
    std::snprintf(buf, sizeof(buf), "%-10s %6.1f%% %7.1f%% %7.1f%% %6.1f%%\n",
                  cat.c_str(), w.ttft_pct, w.tpot_pct, w.throughput_pct,
                  w.avg);
    out << buf;
  }
  std::snprintf(buf, sizeof(buf),
                "cells=%ld all_degraded=%ld ttft_vs_tpot_disagreement=%.1f%%\n",
                cells, all_degraded_cells, 100.0 * disagreement_fraction);
  out << buf;
  return out.str();
}

namespace {
json record_to_json(const RequestRecord& r) {
  json j{{"conv_id", r.conv_id},
         {"turn_index", r.turn_index},
         {"arrival", r.arrival},
         {"output_tokens_emitted", r.output_tokens_emitted},
         {"route", to_string(r.route)},
         {"status", to_string(r.status)}};
  if (r.first_token) j["first_token"] = *r.first_token;
  if (r.completion) j["completion"] = *r.completion;
  return j;
}

RequestRecord record_from_json(const json& j) {
  RequestRecord r;
  r.conv_id = j.at("conv_id").get<std::string>();
  r.turn_index = j.at("turn_index").get<int>();
  r.arrival = j.at("arrival").get<double>();
  r.output_tokens_emitted = j.at("output_tokens_emitted").get<long>();
  r.route = route_from_string(j.at("route").get<std::string>());
  r.status = status_from_string(j.at("status").get<std::string>());
  if (j.contains("first_token")) r.first_token = j["first_token"].get<double>();
  if (j.contains("completion")) r.completion = j["completion"].get<double>();
  return r;
}
}  // namespace

void export_records(std::ostream& out, const std::string& manifest_json,
                    const std::vector<RequestRecord>& records) {
  json m{{"manifest", json::parse(manifest_json)}};
  out << m.dump() << "\n";
  for (const auto& r : records) out << record_to_json(r).dump() << "\n";
}

RecordsFile import_records(std::istream& in) {
  RecordsFile f;
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("records file is empty");
  json m = json::parse(line);
  f.manifest_json = m.at("manifest").dump();
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    f.records.push_back(record_from_json(json::parse(line)));
  }
  return f;
}

const char* kAggregateCsvHeader =
    "config,x_mode,workload_id,qps,ttft_t1_mean,ttft_t1_p99,ttft_t2_mean,"
    "ttft_t2_p99,tpot_mean,latency_mean,tps,success_rate,degraded";

namespace {
std::string num(double v) {
  json j = v;
  return j.dump();
}
std::string opt(const std::optional<double>& v) {
  return v ? num(*v) : std::string();
}
}  // namespace

std::string aggregate_csv_row(const std::string& config,
                              const std::string& x_mode,
                              const std::string& workload_id, double qps,
                              const AggregateMetrics& m) {
  std::ostringstream out;
  out << config << ',' << x_mode << ',' << workload_id << ',' << num(qps)
      << ',' << opt(m.ttft_t1_mean) << ',' << opt(m.ttft_t1_p99) << ','
      << opt(m.ttft_t2_mean) << ',' << opt(m.ttft_t2_p99) << ','
      << opt(m.tpot_mean) << ',' << opt(m.latency_mean) << ',' << num(m.tps)
      << ',' << num(m.success_rate) << ','
      << (m.degraded ? "true" : "false");
  return out.str();
}

}  // namespace ppd::metrics
