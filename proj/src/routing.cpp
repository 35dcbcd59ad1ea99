#include "ppd/routing.hpp"

#include <cmath>
#include <mutex>
#include <stdexcept>

#include <json.hpp>

#include "ppd/util.hpp"

namespace ppd::routing {

using nlohmann::json;

void SLOWeights::validate() const {
  if (w_ttft < 0 || w_tpot < 0)
    throw std::invalid_argument("SLO weights must be non-negative");
  if (w_ttft == 0 && w_tpot == 0)
    throw std::invalid_argument("SLO weights must not both be zero");
}

const char* to_string(ContextClass c) {
  switch (c) {
    case ContextClass::small: return "small";
    case ContextClass::medium: return "medium";
    case ContextClass::large: return "large";
  }
  return "?";
}

ContextClass context_class_from_string(const std::string& s) {
  if (s == "small") return ContextClass::small;
  if (s == "medium") return ContextClass::medium;
  if (s == "large") return ContextClass::large;
  throw std::invalid_argument("unknown context class: " + s);
}

double nearest_qps_bin(double q) {
  double best = kQpsGrid[0];
  double best_d = std::abs(q - best);
  for (double b : kQpsGrid) {
    double d = std::abs(q - b);
    // strict < keeps the lower bin on ties
    if (d < best_d) {
      best = b;
      best_d = d;
    }
  }
  return best;
}

namespace {
std::string qps_str(double q) {
  if (q == std::floor(q)) return std::to_string(long(q));
  json j = q;
  return j.dump();
}
}  // namespace

std::string WorkloadKey::str() const {
  return std::string(to_string(context_class)) + "|" +
         workload::to_string(workload_type) + "|" + qps_str(qps_bin);
}

WorkloadKey WorkloadKey::parse(const std::string& s) {
  auto p1 = s.find('|');
  auto p2 = s.find('|', p1 + 1);
  if (p1 == std::string::npos || p2 == std::string::npos)
    throw std::invalid_argument("bad workload key: " + s);
  WorkloadKey k;
  k.context_class = context_class_from_string(s.substr(0, p1));
  k.workload_type =
      workload::category_from_string(s.substr(p1 + 1, p2 - p1 - 1));
  k.qps_bin = std::stod(s.substr(p2 + 1));
  return k;
}

WorkloadKey discretize(int turn, long n_in, long n_out, long n_ctx, double q) {
  if (turn < 2)
    throw std::invalid_argument("discretize: Turn 1 never reaches the table");
  WorkloadKey k;
  if (n_ctx < 4096)
    k.context_class = ContextClass::small;
  else if (n_ctx < 16384)
    k.context_class = ContextClass::medium;
  else
    k.context_class = ContextClass::large;
  if (n_out == 0) {
    k.workload_type = workload::Category::prefill_heavy;
  } else {
    k.workload_type = workload::classify({n_in, n_out});
  }
  k.qps_bin = nearest_qps_bin(q);
  return k;
}

DecisionEntry make_entry(const WorkloadKey& key, double ttft_x0,
                         double ttft_x1, double tpot_x0, double tpot_x1,
                         const SLOWeights& w) {
  w.validate();
  if (!(ttft_x0 > 0) || !(tpot_x0 > 0))
    throw std::invalid_argument("make_entry: baseline measurements must be > 0");
  DecisionEntry e;
  e.key = key;
  e.ttft_x0 = ttft_x0;
  e.ttft_x1 = ttft_x1;
  e.tpot_x0 = tpot_x0;
  e.tpot_x1 = tpot_x1;
  e.delta_ttft = (ttft_x0 - ttft_x1) / ttft_x0;
  e.delta_tpot = (tpot_x1 - tpot_x0) / tpot_x0;
  e.score = w.w_ttft * e.delta_ttft - w.w_tpot * e.delta_tpot;
  e.x_star = e.score > 0 ? 1 : 0;
  e.available = true;
  return e;
}

std::optional<DecisionEntry> DecisionTable::lookup(
    const WorkloadKey& key) const {
  auto it = entries.find(key.str());
  if (it == entries.end()) return std::nullopt;
  return it->second;
}

void DecisionTable::insert(const DecisionEntry& e) {
  entries[e.key.str()] = e;
}

std::string DecisionTable::to_json() const {
  json ents = json::object();
  for (const auto& [k, e] : entries) {
    ents[k] = {{"ttft_x0", e.ttft_x0},   {"ttft_x1", e.ttft_x1},
               {"tpot_x0", e.tpot_x0},   {"tpot_x1", e.tpot_x1},
               {"delta_ttft", e.delta_ttft}, {"delta_tpot", e.delta_tpot},
               {"score", e.score},       {"x_star", e.x_star},
               {"available", e.available}};
  }
  json j{{"header",
          {{"weights", {{"w_ttft", weights.w_ttft}, {"w_tpot", weights.w_tpot}}},
           {"calibration_hash", calibration_hash},
           {"built_at", built_at}}},
         {"entries", ents}};
  return j.dump(2) + "\n";
}

DecisionTable DecisionTable::from_json(const std::string& text) {
  json j = json::parse(text);
  DecisionTable t;
  const auto& h = j.at("header");
  t.weights.w_ttft = h.at("weights").at("w_ttft").get<double>();
  t.weights.w_tpot = h.at("weights").at("w_tpot").get<double>();
  t.calibration_hash = h.at("calibration_hash").get<std::string>();
  t.built_at = h.at("built_at").get<std::string>();
  for (auto it = j.at("entries").begin(); it != j.at("entries").end(); ++it) {
    DecisionEntry e;
    e.key = WorkloadKey::parse(it.key());
    const auto& v = it.value();
    e.ttft_x0 = v.at("ttft_x0").get<double>();
    e.ttft_x1 = v.at("ttft_x1").get<double>();
    e.tpot_x0 = v.at("tpot_x0").get<double>();
    e.tpot_x1 = v.at("tpot_x1").get<double>();
    e.delta_ttft = v.at("delta_ttft").get<double>();
    e.delta_tpot = v.at("delta_tpot").get<double>();
    e.score = v.at("score").get<double>();
    e.x_star = v.at("x_star").get<int>();
    e.available = v.value("available", true);
    t.entries[it.key()] = e;
  }
  return t;
}

DecisionTable DecisionTable::load(const std::filesystem::path& p) {
  return from_json(read_file(p));
}

void DecisionTable::save(const std::filesystem::path& p) const {
  write_file(p, to_json());
}

std::vector<GridSpec> default_grid() {
  struct CtxRep {
    ContextClass cls;
    workload::TurnProfile turn1;
  };
  // Turn-1 profiles chosen so the Turn-2 cached context lands mid-class.
  const CtxRep ctxs[] = {
      {ContextClass::small, {1500, 500}},    // ctx 2000
      {ContextClass::medium, {7500, 500}},   // ctx 8000
      {ContextClass::large, {19500, 500}},   // ctx 20000
  };
  struct TypeRep {
    workload::Category cat;
    workload::TurnProfile turn2plus;
  };
  const TypeRep types[] = {
      {workload::Category::decode_heavy, {128, 512}},
      {workload::Category::balanced, {256, 256}},
      {workload::Category::prefill_heavy, {1024, 128}},
  };

  std::vector<GridSpec> grid;
  for (const auto& c : ctxs) {
    for (const auto& t : types) {
      for (double q : kQpsGrid) {
        GridSpec g;
        g.key = WorkloadKey{c.cls, t.cat, q};
        g.spec.id = "grid_" + g.key.str();
        g.spec.turn1 = c.turn1;
        g.spec.turn2plus = t.turn2plus;
        g.spec.num_turns = 2;
        g.spec.qps = q;
        g.spec.duration_s = 10.0;
        g.spec.category = t.cat;
        grid.push_back(std::move(g));
      }
    }
  }
  return grid;
}

DecisionTable build_decision_table(const std::vector<GridSpec>& grid,
                                   const SLOWeights& weights,
                                   const BenchmarkRunner& runner,
                                   const std::string& calibration_hash) {
  weights.validate();
  DecisionTable table;
  table.weights = weights;
  table.calibration_hash = calibration_hash;
  table.built_at = iso_timestamp_now();
  for (const auto& g : grid) {
    auto m0 = runner(g, 0);
    auto m1 = runner(g, 1);
    DecisionEntry e;
    if (m0 && m1 && m0->first > 0 && m0->second > 0) {
      e = make_entry(g.key, m0->first, m1->first, m0->second, m1->second,
                     weights);
    } else {
      e.key = g.key;
      e.available = false;  // online lookups fall back to x=0
      e.x_star = 0;
    }
    table.insert(e);
  }
  return table;
}

SessionEntry SessionTable::update(const Digest128& conv_hash, double now,
                                  std::optional<int> assigned_pd) {
  std::unique_lock lock(mu_);
  auto key = digest_hex(conv_hash);
  auto it = map_.find(key);
  if (it == map_.end()) {
    SessionEntry e;
    e.conv_hash = conv_hash;
    e.turn_count = 1;
    e.assigned_pd = assigned_pd.value_or(-1);
    e.last_access = now;
    map_[key] = e;
    return e;
  }
  it->second.turn_count += 1;
  it->second.last_access = now;
  if (assigned_pd) it->second.assigned_pd = *assigned_pd;
  return it->second;
}

std::optional<SessionEntry> SessionTable::find(
    const Digest128& conv_hash) const {
  std::shared_lock lock(mu_);
  auto it = map_.find(digest_hex(conv_hash));
  if (it == map_.end()) return std::nullopt;
  return it->second;
}

std::size_t SessionTable::erase(const Digest128& conv_hash) {
  std::unique_lock lock(mu_);
  return map_.erase(digest_hex(conv_hash));
}

std::size_t SessionTable::evict_expired(double now, double ttl_s) {
  std::unique_lock lock(mu_);
  std::size_t evicted = 0;
  for (auto it = map_.begin(); it != map_.end();) {
    if (now - it->second.last_access > ttl_s) {
      it = map_.erase(it);
      ++evicted;
    } else {
      ++it;
    }
  }
  return evicted;
}

std::size_t SessionTable::invalidate_backend(int assigned_pd) {
  std::unique_lock lock(mu_);
  std::size_t dropped = 0;
  for (auto it = map_.begin(); it != map_.end();) {
    if (it->second.assigned_pd == assigned_pd) {
      it = map_.erase(it);
      ++dropped;
    } else {
      ++it;
    }
  }
  return dropped;
}

std::size_t SessionTable::size() const {
  std::shared_lock lock(mu_);
  return map_.size();
}

void RoutingPolicy::validate() const {
  if (mode == Mode::static_x) {
    if (x < 0 || x > 1)
      throw std::invalid_argument("static x must be in [0, 1]");
  } else if (!table) {
    throw std::invalid_argument("dynamic policy requires a loaded table");
  }
  weights.validate();
}

RoutingPolicy RoutingPolicy::static_policy(double x) {
  RoutingPolicy p;
  p.mode = Mode::static_x;
  p.x = x;
  p.validate();
  return p;
}

RoutingPolicy RoutingPolicy::dynamic_policy(
    std::shared_ptr<const DecisionTable> t) {
  RoutingPolicy p;
  p.mode = Mode::dynamic;
  p.table = std::move(t);
  p.weights = p.table->weights;
  p.validate();
  return p;
}

RouteDecision decide(const workload::TurnRequest& request,
                     const Digest128& conv_hash, double measured_qps,
                     RoutingPolicy& policy, SessionTable& sessions, double now,
                     const std::function<int()>& assign_pd) {
  RouteDecision d;
  auto session = sessions.find(conv_hash);
  bool first_turn = request.turn_index == 1;
  if (!first_turn && !session) {
    // Evicted session: the history KV is gone, so this turn is handled
    // like a Turn 1 (full prefill, fresh session).
    d.session_missing = true;
  }
  if (first_turn || d.session_missing) {
    sessions.update(conv_hash, now, assign_pd ? assign_pd() : -1);
    d.target = RouteDecision::Target::P_path;
    d.x_used = 0;
    return d;
  }

  sessions.update(conv_hash, now);
  if (policy.mode == RoutingPolicy::Mode::static_x) {
    policy.stride_acc += policy.x;
    if (policy.stride_acc >= 1.0 - 1e-9) {
      policy.stride_acc -= 1.0;
      d.target = RouteDecision::Target::D_local;
      d.x_used = 1;
    } else {
      d.target = RouteDecision::Target::P_path;
      d.x_used = 0;
    }
    return d;
  }

  auto key = discretize(request.turn_index, request.new_input_tokens,
                        request.target_output_tokens,
                        request.cached_context_tokens, measured_qps);
  auto entry = policy.table->lookup(key);
  if (!entry || !entry->available) {
    d.table_miss = true;
    d.target = RouteDecision::Target::P_path;
    d.x_used = 0;
    return d;
  }
  d.x_used = entry->x_star;
  d.target = entry->x_star == 1 ? RouteDecision::Target::D_local
                                : RouteDecision::Target::P_path;
  return d;
}

}  // namespace ppd::routing
