#include "ppd/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <queue>
#include <sstream>
#include <stdexcept>
#include <unordered_map>

#include "ppd/util.hpp"

namespace ppd::sim {

namespace {

bool pure_replica(const ClusterConfig& c) {
  return c.p_nodes == 0 && c.d_nodes == 0 && c.r_nodes > 0;
}

}  // namespace

void ClusterConfig::validate() const {
  if (p_nodes < 0 || d_nodes < 0 || r_nodes < 0)
    throw std::invalid_argument("node counts must be >= 0");
  if (p_nodes + d_nodes + r_nodes < 1)
    throw std::invalid_argument("cluster needs at least one node");
  if (!calib) throw std::invalid_argument("cluster needs a calibration table");
  if (max_decode_batch < 1)
    throw std::invalid_argument("max_decode_batch must be >= 1");
  if (request_timeout_s <= 0)
    throw std::invalid_argument("request_timeout_s must be > 0");
  policy.validate();
  if (!pure_replica(*this)) {
    // Disaggregated (or hybrid) clusters need both sides of the P->D path.
    if (p_nodes < 1 || d_nodes < 1)
      throw std::invalid_argument(
          "config '" + name + "': disaggregated cluster requires p >= 1 and d >= 1");
  }
}

ClusterConfig ClusterConfig::from_name(
    const std::string& name, routing::RoutingPolicy policy,
    std::shared_ptr<const cost::CalibrationTable> calib) {
  ClusterConfig c;
  c.name = name;
  c.policy = std::move(policy);
  c.calib = std::move(calib);
  std::stringstream ss(name);
  std::string part;
  while (std::getline(ss, part, '_')) {
    if (part.size() < 2) throw std::invalid_argument("bad config name: " + name);
    char role = part.back();
    int count = 0;
    try {
      count = std::stoi(part.substr(0, part.size() - 1));
    } catch (...) {
      throw std::invalid_argument("bad config name: " + name);
    }
    switch (role) {
      case 'P': c.p_nodes += count; break;
      case 'D': c.d_nodes += count; break;
      case 'R': c.r_nodes += count; break;
      default:
        throw std::invalid_argument("unknown role in config name: " + name);
    }
  }
  c.validate();
  return c;
}

namespace {

enum class EventKind { issue_turn, prefill_done, transfer_done, iter_done,
                       timeout };

struct Event {
  double time;
  std::uint64_t seq;
  EventKind kind;
  int a = 0;  // conv / node / request id
  int b = 0;  // turn index
};

struct EventOrder {
  bool operator()(const Event& l, const Event& r) const {
    if (l.time != r.time) return l.time > r.time;
    return l.seq > r.seq;
  }
};

struct Request {
  int conv = 0;
  int turn = 0;  // 0-based into conversation turns
  double arrival = 0;
  long new_input = 0;
  long ctx = 0;
  long target_output = 0;
  long emitted = 0;
  double first_token = -1;
  metrics::Route route = metrics::Route::P_path;
  bool terminal = false;
  bool timed_out = false;
  double completion = -1;
  int decode_node = -1;
};

struct PrefillJob {
  cost::PrefillKind kind = cost::PrefillKind::full;
  long tokens = 0;  // tokens processed by this job
  long ctx = 0;     // cached context attended by an append job
  int req = -1;
  double enqueued = 0;
};

struct Node {
  char role = '?';
  std::deque<PrefillJob> prefill_q;
  bool prefill_active = false;
  PrefillJob active_job;
  std::vector<int> batch;
  std::deque<int> admit_q;
  bool iter_active = false;
  std::unordered_map<int, long> prefix_cache;  // conv -> cached tokens
  double prefill_busy = 0;
  double decode_busy = 0;
};

class Simulation {
 public:
  Simulation(const ClusterConfig& config,
             const std::vector<workload::Conversation>& convs,
             double qps_replay, std::uint64_t seed, double think_time_s)
      : cfg_(config), convs_(convs), policy_(config.policy), rng_(seed),
        think_time_(think_time_s) {
    cfg_.validate();
    link_.bandwidth = cfg_.calib->link_bandwidth;
    for (int i = 0; i < cfg_.p_nodes; ++i) nodes_.push_back({.role = 'P'});
    for (int i = 0; i < cfg_.d_nodes; ++i) nodes_.push_back({.role = 'D'});
    for (int i = 0; i < cfg_.r_nodes; ++i) nodes_.push_back({.role = 'R'});
    schedule_turn1_arrivals(qps_replay, seed);
  }

  SimResult run() {
    while (!events_.empty()) {
      Event e = events_.top();
      events_.pop();
      now_ = e.time;
      makespan_ = std::max(makespan_, now_);
      dispatch(e);
    }
    return finish();
  }

 private:
  void schedule_turn1_arrivals(double qps_replay, std::uint64_t seed) {
    if (qps_replay > 0) {
      Rng arr(seed ^ 0x7265706c6179ull);
      double t = 0;
      for (std::size_t i = 0; i < convs_.size(); ++i) {
        t += arr.exponential(qps_replay);
        push(t, EventKind::issue_turn, int(i), 0);
      }
    } else {
      for (std::size_t i = 0; i < convs_.size(); ++i) {
        if (convs_[i].turns.empty()) continue;
        double t = convs_[i].turns.front().arrival_time;
        if (t < 0)
          throw std::invalid_argument(
              "conversation lacks a Turn-1 arrival and no qps_replay given");
        push(t, EventKind::issue_turn, int(i), 0);
      }
    }
  }

  void push(double time, EventKind kind, int a, int b = 0) {
    events_.push(Event{time, seq_++, kind, a, b});
  }

  void dispatch(const Event& e) {
    switch (e.kind) {
      case EventKind::issue_turn: on_issue_turn(e.a, e.b); break;
      case EventKind::prefill_done: on_prefill_done(e.a); break;
      case EventKind::transfer_done: on_transfer_done(e.a); break;
      case EventKind::iter_done: on_iter_done(e.a); break;
      case EventKind::timeout: on_timeout(e.a); break;
    }
  }

  // ---- routing helpers ----

  double measured_qps() {
    while (!arrival_window_.empty() && arrival_window_.front() < now_ - 10.0)
      arrival_window_.pop_front();
    return double(arrival_window_.size()) / 10.0;
  }

  int least_loaded(char role, bool decode_load) const {
    int best = -1;
    std::size_t best_depth = 0;
    for (int i = 0; i < int(nodes_.size()); ++i) {
      const Node& n = nodes_[i];
      if (n.role != role) continue;
      std::size_t depth = decode_load
                              ? n.batch.size() + n.admit_q.size()
                              : n.prefill_q.size() + (n.prefill_active ? 1 : 0);
      if (best < 0 || depth < best_depth) {
        best = i;
        best_depth = depth;
      }
    }
    return best;
  }

  // ---- request lifecycle ----

  void on_issue_turn(int conv, int turn) {
    const auto& wl_turn = convs_[conv].turns[turn];
    int rid = int(requests_.size());
    Request r;
    r.conv = conv;
    r.turn = turn;
    r.arrival = now_;
    r.new_input = wl_turn.new_input_tokens;
    r.ctx = wl_turn.cached_context_tokens;
    r.target_output = wl_turn.target_output_tokens;
    requests_.push_back(r);
    push(now_ + cfg_.request_timeout_s, EventKind::timeout, rid);

    if (turn == 0) arrival_window_.push_back(now_);
    const Digest128& digest = convs_[conv].first_message_digest;

    auto session = sessions_.find(digest);
    if (session && session->assigned_pd >= 0 &&
        nodes_[session->assigned_pd].role == 'R' && turn > 0) {
      // Replica-pinned conversation: Turn 2+ is always a local
      // append-prefill; the routing parameter does not apply to R nodes.
      sessions_.update(digest, now_);
      requests_[rid].route = metrics::Route::R_local;
      requests_[rid].decode_node = session->assigned_pd;
      enqueue_prefill(session->assigned_pd,
                      PrefillJob{cost::PrefillKind::append, r.new_input, r.ctx,
                                 rid, now_});
      return;
    }

    // Lazily pick the serving nodes for a fresh session.
    int chosen_prefill = -1, chosen_decode = -1;
    auto assign_pd = [&]() {
      int p = least_loaded('P', false);
      int rr = least_loaded('R', false);
      bool use_r;
      if (p < 0) {
        use_r = true;
      } else if (rr < 0) {
        use_r = false;
      } else {
        std::size_t pd = nodes_[p].prefill_q.size() +
                         (nodes_[p].prefill_active ? 1 : 0);
        std::size_t rd = nodes_[rr].prefill_q.size() +
                         (nodes_[rr].prefill_active ? 1 : 0);
        use_r = rd < pd;  // tie goes to the disaggregated path
      }
      if (use_r) {
        chosen_prefill = rr;
        chosen_decode = rr;
      } else {
        chosen_prefill = p;
        chosen_decode = least_loaded('D', true);
      }
      return chosen_decode;
    };

    workload::TurnRequest treq = wl_turn;
    treq.arrival_time = now_;
    auto decision = routing::decide(treq, digest, measured_qps(), policy_,
                                    sessions_, now_, assign_pd);
    if (decision.session_missing) ++session_miss_fallbacks_;

    Request& req = requests_[rid];
    if (decision.target == routing::RouteDecision::Target::D_local) {
      int dnode = sessions_.find(digest)->assigned_pd;
      req.route = metrics::Route::D_local;
      req.decode_node = dnode;
      enqueue_prefill(dnode, PrefillJob{cost::PrefillKind::append,
                                        req.new_input, req.ctx, rid, now_});
      return;
    }

    // P path (Turn 1, static/dynamic x=0 choice, or session fallback).
    int dnode, pnode;
    if (chosen_decode >= 0) {
      dnode = chosen_decode;
      pnode = chosen_prefill;
    } else {
      dnode = sessions_.find(digest)->assigned_pd;
      pnode = least_loaded('P', false);
    }
    req.decode_node = dnode;
    if (nodes_[dnode].role == 'R') {
      // Fresh conversation placed on a replica: full prefill runs locally.
      req.route = metrics::Route::R_local;
      enqueue_prefill(dnode, PrefillJob{cost::PrefillKind::full,
                                        req.ctx + req.new_input, 0, rid, now_});
      return;
    }
    req.route = metrics::Route::P_path;
    // The P node recomputes KV for the entire history it must attend.
    enqueue_prefill(pnode, PrefillJob{cost::PrefillKind::full,
                                      req.ctx + req.new_input, 0, rid, now_});
  }

  void enqueue_prefill(int node, PrefillJob job) {
    nodes_[node].prefill_q.push_back(job);
    try_start_prefill(node);
  }

  void try_start_prefill(int node_id) {
    Node& n = nodes_[node_id];
    if (n.prefill_active) return;
    while (!n.prefill_q.empty()) {
      PrefillJob job = n.prefill_q.front();
      n.prefill_q.pop_front();
      if (requests_[job.req].terminal) continue;  // timed out while queued
      double dur = (job.kind == cost::PrefillKind::full)
                       ? cost::full_prefill_time(job.tokens, *cfg_.calib)
                       : cost::append_prefill_time(job.tokens, job.ctx,
                                                   *cfg_.calib);
      if (cfg_.calib->prefill_service_distribution == "exponential")
        dur *= rng_.exponential(1.0);
      prefill_waits_.push_back(now_ - job.enqueued);
      n.prefill_active = true;
      n.active_job = job;
      n.prefill_busy += dur;
      push(now_ + dur, EventKind::prefill_done, node_id);
      return;
    }
  }

  void on_prefill_done(int node_id) {
    Node& n = nodes_[node_id];
    PrefillJob job = n.active_job;
    n.prefill_active = false;
    Request& req = requests_[job.req];
    if (!req.terminal) {
      if (n.role == 'P') {
        // KV produced on P; ship the part the decode node is missing.
        Node& d = nodes_[req.decode_node];
        long have = 0;
        if (auto it = d.prefix_cache.find(req.conv); it != d.prefix_cache.end())
          have = it->second;
        long need = std::max<long>(1, req.ctx + req.new_input - have);
        double dt = cost::kv_transfer_time(need, *cfg_.calib, link_, now_);
        transfer_tokens_[job.req] = need;
        push(now_ + dt, EventKind::transfer_done, job.req);
      } else {
        // Local prefill on D or R: cache covers the full history now.
        n.prefix_cache[req.conv] = req.ctx + req.new_input;
        n.admit_q.push_back(job.req);
        try_start_iter(node_id);
      }
    }
    try_start_prefill(node_id);
  }

  void on_transfer_done(int rid) {
    Request& req = requests_[rid];
    if (req.terminal) return;
    Node& d = nodes_[req.decode_node];
    d.prefix_cache[req.conv] = req.ctx + req.new_input;
    d.admit_q.push_back(rid);
    try_start_iter(req.decode_node);
  }

  void try_start_iter(int node_id) {
    Node& n = nodes_[node_id];
    if (n.iter_active) return;
    while (!n.admit_q.empty() &&
           int(n.batch.size()) < cfg_.max_decode_batch) {
      int rid = n.admit_q.front();
      n.admit_q.pop_front();
      if (requests_[rid].terminal) continue;
      n.batch.push_back(rid);
    }
    if (n.batch.empty()) return;
    cost::BatchState state;
    state.decode_batch_size = int(n.batch.size());
    if (n.prefill_active) {
      state.concurrent_prefill_ops = 1;
      if (n.active_job.kind == cost::PrefillKind::full)
        state.colocated_full_prefill_tokens = n.active_job.tokens;
      else
        state.colocated_append_prefill_tokens =
            n.active_job.ctx + n.active_job.tokens;
    }
    double dur = cost::decode_step_time(state, *cfg_.calib);
    n.iter_active = true;
    n.decode_busy += dur;
    push(now_ + dur, EventKind::iter_done, node_id);
  }

  void on_iter_done(int node_id) {
    Node& n = nodes_[node_id];
    n.iter_active = false;
    std::vector<int> keep;
    keep.reserve(n.batch.size());
    for (int rid : n.batch) {
      Request& req = requests_[rid];
      if (req.terminal) continue;  // timed out mid-flight
      req.emitted += 1;
      if (req.emitted == 1) req.first_token = now_;
      if (req.emitted >= req.target_output) {
        complete_request(rid);
      } else {
        keep.push_back(rid);
      }
    }
    n.batch = std::move(keep);
    try_start_iter(node_id);
  }

  void complete_request(int rid) {
    Request& req = requests_[rid];
    req.terminal = true;
    req.completion = now_;
    // Generated tokens extend the local cache for the next turn.
    nodes_[req.decode_node].prefix_cache[req.conv] += req.target_output;
    int next_turn = req.turn + 1;
    if (next_turn < int(convs_[req.conv].turns.size())) {
      double think = think_time_;
      push(now_ + think, EventKind::issue_turn, req.conv, next_turn);
    }
  }

  void on_timeout(int rid) {
    Request& req = requests_[rid];
    if (req.terminal) return;
    req.terminal = true;
    req.timed_out = true;
    // Free the batch slot now; queued entries are dropped lazily.
    Node& n = nodes_[req.decode_node >= 0 ? req.decode_node : 0];
    if (req.decode_node >= 0)
      std::erase(n.batch, rid);
  }

  SimResult finish() {
    SimResult out;
    out.records.reserve(requests_.size());
    for (const auto& req : requests_) {
      metrics::RequestRecord rec;
      rec.conv_id = convs_[req.conv].conv_id;
      rec.turn_index = req.turn + 1;
      rec.arrival = req.arrival;
      if (req.first_token >= 0) rec.first_token = req.first_token;
      if (!req.timed_out && req.completion >= 0) rec.completion = req.completion;
      rec.output_tokens_emitted = req.emitted;
      rec.route = req.route;
      rec.status =
          req.timed_out ? metrics::Status::timed_out : metrics::Status::completed;
      if (rec.status == metrics::Status::timed_out) rec.first_token.reset();
      out.records.push_back(std::move(rec));
    }
    std::stable_sort(out.records.begin(), out.records.end(),
                     [](const metrics::RequestRecord& a,
                        const metrics::RequestRecord& b) {
                       if (a.arrival != b.arrival) return a.arrival < b.arrival;
                       if (a.conv_id != b.conv_id) return a.conv_id < b.conv_id;
                       return a.turn_index < b.turn_index;
                     });
    out.link_transfers = link_.transfers;
    out.link_bytes = link_.total_bytes;
    out.link_queue_delays = link_.queue_delays;
    for (const auto& n : nodes_)
      out.node_stats.push_back({n.role, n.prefill_busy, n.decode_busy});
    out.makespan = makespan_;
    out.prefill_wait_samples = std::move(prefill_waits_);
    out.session_miss_fallbacks = session_miss_fallbacks_;
    return out;
  }

  ClusterConfig cfg_;
  const std::vector<workload::Conversation>& convs_;
  routing::RoutingPolicy policy_;
  routing::SessionTable sessions_;
  Rng rng_;
  cost::LinkState link_;
  std::vector<Node> nodes_;
  std::vector<Request> requests_;
  std::unordered_map<int, long> transfer_tokens_;
  std::priority_queue<Event, std::vector<Event>, EventOrder> events_;
  std::deque<double> arrival_window_;
  std::vector<double> prefill_waits_;
  std::uint64_t seq_ = 0;
  double now_ = 0;
  double makespan_ = 0;
  double think_time_;
  long session_miss_fallbacks_ = 0;
};

}  // namespace

SimResult run_simulation(const ClusterConfig& config,
                         const std::vector<workload::Conversation>& convs,
                         double qps_replay, std::uint64_t seed,
                         double think_time_s) {
  Simulation sim(config, convs, qps_replay, seed, think_time_s);
  return sim.run();
}

}  // namespace ppd::sim
