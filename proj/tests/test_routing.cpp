#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <memory>

#include "ppd/md5.hpp"
#include "ppd/routing.hpp"

using namespace ppd;
using namespace ppd::routing;

TEST_CASE("qps binning snaps to the grid with ties toward the lower bin") {
  CHECK(nearest_qps_bin(0.1) == 0.5);
  CHECK(nearest_qps_bin(0.5) == 0.5);
  CHECK(nearest_qps_bin(0.75) == 0.5);  // tie 0.5 vs 1
  CHECK(nearest_qps_bin(3.0) == 2.0);   // tie 2 vs 4
  CHECK(nearest_qps_bin(5.0) == 4.0);   // tie 4 vs 6
  CHECK(nearest_qps_bin(11.0) == 10.0); // tie 10 vs 12
  CHECK(nearest_qps_bin(14.5) == 16.0);
  CHECK(nearest_qps_bin(100.0) == 20.0);
}

TEST_CASE("discretize maps to (context class, workload type, qps bin)") {
  auto k = discretize(2, 256, 256, 2000, 4.2);
  CHECK(k.context_class == ContextClass::small);
  CHECK(k.workload_type == workload::Category::balanced);
  CHECK(k.qps_bin == 4.0);

  CHECK(discretize(2, 1, 1, 4095, 1).context_class == ContextClass::small);
  CHECK(discretize(2, 1, 1, 4096, 1).context_class == ContextClass::medium);
  CHECK(discretize(2, 1, 1, 16383, 1).context_class == ContextClass::medium);
  CHECK(discretize(2, 1, 1, 16384, 1).context_class == ContextClass::large);

  CHECK(discretize(2, 100, 300, 0, 1).workload_type ==
        workload::Category::decode_heavy);
  CHECK(discretize(2, 2048, 128, 0, 1).workload_type ==
        workload::Category::prefill_heavy);
  // Zero expected output means a pure prefill request.
  CHECK(discretize(2, 100, 0, 0, 1).workload_type ==
        workload::Category::prefill_heavy);

  CHECK_THROWS_AS(discretize(1, 1, 1, 0, 1), std::invalid_argument);
}

TEST_CASE("workload key string form") {
  WorkloadKey k{ContextClass::small, workload::Category::balanced, 4.0};
  CHECK(k.str() == "small|balanced|4");
  CHECK(WorkloadKey::parse("small|balanced|4") == k);
  WorkloadKey half{ContextClass::large, workload::Category::prefill_heavy, 0.5};
  CHECK(WorkloadKey::parse(half.str()) == half);
}

TEST_CASE("decision entry equations") {
  WorkloadKey k{ContextClass::small, workload::Category::balanced, 4.0};

  SUBCASE("worked example") {
    auto e = make_entry(k, 1.0, 0.35, 1.0, 1.10, SLOWeights{1, 1});
    CHECK(e.delta_ttft == doctest::Approx(0.65));
    CHECK(e.delta_tpot == doctest::Approx(0.10));
    CHECK(e.score == doctest::Approx(0.55));
    CHECK(e.x_star == 1);
  }

  SUBCASE("zero score routes conservatively") {
    auto e = make_entry(k, 1.0, 0.8, 1.0, 1.2, SLOWeights{1, 1});
    CHECK(e.score == doctest::Approx(0.0));
    CHECK(e.x_star == 0);
  }

  SUBCASE("heavy TPOT weight flips the choice") {
    auto cheap = make_entry(k, 1.0, 0.35, 1.0, 1.10, SLOWeights{1, 6});
    CHECK(cheap.score == doctest::Approx(0.65 - 0.60));
    CHECK(cheap.x_star == 1);
    auto costly = make_entry(k, 1.0, 0.35, 1.0, 1.20, SLOWeights{1, 6});
    CHECK(costly.score == doctest::Approx(0.65 - 1.20));
    CHECK(costly.x_star == 0);
  }

  SUBCASE("raising w_tpot never flips x* from 0 to 1 when TPOT regresses") {
    for (double t1 : {0.3, 0.6, 1.0, 1.5})
      for (double p1 : {1.0, 1.1, 1.4}) {
        int prev = 1;
        for (double w : {0.0, 0.5, 1.0, 2.0, 6.0}) {
          int x = make_entry(k, 1.0, t1, 1.0, p1, SLOWeights{1, w}).x_star;
          CHECK(x <= prev);
          prev = x;
        }
      }
  }

  SUBCASE("non-positive baselines rejected") {
    CHECK_THROWS_AS(make_entry(k, 0.0, 1, 1, 1, SLOWeights{1, 1}),
                    std::invalid_argument);
    CHECK_THROWS_AS(make_entry(k, 1, 1, 0.0, 1, SLOWeights{1, 1}),
                    std::invalid_argument);
  }
}

TEST_CASE("table build, persistence, and fallback entries") {
  auto grid = default_grid();
  CHECK(grid.size() == 90);  // 3 context x 3 type x 10 qps

  // Stub runner: x=1 helps prefill-heavy keys, hurts decode-heavy ones, and
  // one key fails outright.
  BenchmarkRunner runner =
      [](const GridSpec& g, int x) -> std::optional<std::pair<double, double>> {
    if (g.key.context_class == ContextClass::large &&
        g.key.qps_bin == 20.0 &&
        g.key.workload_type == workload::Category::balanced)
      return std::nullopt;
    if (x == 0) return std::pair{1.0, 0.010};
    bool helps = g.key.workload_type == workload::Category::prefill_heavy;
    return std::pair{helps ? 0.4 : 0.9, helps ? 0.0105 : 0.013};
  };
  auto table = build_decision_table(grid, SLOWeights{1, 1}, runner, "deadbeef");
  CHECK(table.entries.size() == 90);
  CHECK(table.calibration_hash == "deadbeef");

  long unavailable = 0;
  for (const auto& [key, e] : table.entries) {
    if (!e.available) {
      ++unavailable;
      CHECK(e.x_star == 0);
      continue;
    }
    // Entries must satisfy their own defining equations.
    CHECK(e.delta_ttft ==
          doctest::Approx((e.ttft_x0 - e.ttft_x1) / e.ttft_x0));
    CHECK(e.delta_tpot ==
          doctest::Approx((e.tpot_x1 - e.tpot_x0) / e.tpot_x0));
    CHECK(e.score == doctest::Approx(table.weights.w_ttft * e.delta_ttft -
                                     table.weights.w_tpot * e.delta_tpot));
    CHECK(e.x_star == (e.score > 0 ? 1 : 0));
    if (e.key.workload_type == workload::Category::prefill_heavy)
      CHECK(e.x_star == 1);  // 0.6 - 0.05 > 0
    else
      CHECK(e.x_star == 0);  // 0.1 - 0.3 < 0
  }
  CHECK(unavailable == 1);

  auto path = std::filesystem::temp_directory_path() / "ppd_table_rt.json";
  table.save(path);
  auto back = DecisionTable::load(path);
  CHECK(back.entries.size() == table.entries.size());
  CHECK(back.weights.w_tpot == table.weights.w_tpot);
  CHECK(back.calibration_hash == table.calibration_hash);
  auto probe = WorkloadKey{ContextClass::small,
                           workload::Category::prefill_heavy, 8.0};
  REQUIRE(back.lookup(probe).has_value());
  CHECK(back.lookup(probe)->x_star == 1);
  std::filesystem::remove(path);
}

TEST_CASE("session table semantics") {
  SessionTable t;
  auto h1 = md5("conv-1");
  auto h2 = md5("conv-2");

  auto e = t.update(h1, 100.0, 7);
  CHECK(e.turn_count == 1);
  CHECK(e.assigned_pd == 7);
  e = t.update(h1, 160.0);
  CHECK(e.turn_count == 2);
  CHECK(e.assigned_pd == 7);
  CHECK(t.size() == 1);

  SUBCASE("eviction is strictly greater-than the TTL") {
    t.update(h2, 0.0, 3);
    // h2 idle since t=0; the one-hour boundary is exclusive.
    CHECK(t.evict_expired(3600.0, 3600.0) == 0);   // 60 min exactly: keep
    CHECK(t.find(h2).has_value());
    CHECK(t.evict_expired(3600.5, 3600.0) == 1);   // just past: evict
    CHECK(!t.find(h2).has_value());
    CHECK(t.find(h1).has_value());
  }

  SUBCASE("backend invalidation drops only matching sessions") {
    t.update(h2, 200.0, 9);
    CHECK(t.invalidate_backend(7) == 1);
    CHECK(!t.find(h1).has_value());
    CHECK(t.find(h2).has_value());
  }

  SUBCASE("erase") {
    CHECK(t.erase(h1) == 1);
    CHECK(t.erase(h1) == 0);
  }
}

namespace {
workload::TurnRequest turn_req(int turn, long ctx = 1000) {
  workload::TurnRequest r;
  r.conv_id = "c";
  r.turn_index = turn;
  r.new_input_tokens = 256;
  r.cached_context_tokens = turn == 1 ? 0 : ctx;
  r.target_output_tokens = 256;
  return r;
}
}  // namespace

TEST_CASE("static fractional routing follows the stride accumulator") {
  auto h = md5("conv-stride");
  SessionTable sessions;
  auto policy = RoutingPolicy::static_policy(1.0 / 3.0);
  auto d0 = decide(turn_req(1), h, 1.0, policy, sessions, 0, [] { return 2; });
  CHECK(d0.target == RouteDecision::Target::P_path);

  int d_local = 0;
  std::vector<int> pattern;
  for (int i = 0; i < 300; ++i) {
    auto d = decide(turn_req(2), h, 1.0, policy, sessions, 1.0 + i, nullptr);
    int hit = d.target == RouteDecision::Target::D_local ? 1 : 0;
    d_local += hit;
    if (i < 6) pattern.push_back(hit);
  }
  CHECK(d_local == 100);  // exactly x fraction, no randomness
  // acc: 1/3, 2/3, 1 -> fire; repeating.
  CHECK(pattern == std::vector<int>{0, 0, 1, 0, 0, 1});

  SUBCASE("x=0 and x=1 recover the pure modes") {
    auto p0 = RoutingPolicy::static_policy(0.0);
    auto p1 = RoutingPolicy::static_policy(1.0);
    SessionTable s2;
    decide(turn_req(1), h, 1, p0, s2, 0, [] { return 1; });
    for (int i = 0; i < 50; ++i) {
      CHECK(decide(turn_req(2), h, 1, p0, s2, 1, nullptr).target ==
            RouteDecision::Target::P_path);
      CHECK(decide(turn_req(2), h, 1, p1, s2, 1, nullptr).target ==
            RouteDecision::Target::D_local);
    }
  }

  SUBCASE("x outside [0,1] rejected") {
    CHECK_THROWS_AS(RoutingPolicy::static_policy(1.5), std::invalid_argument);
    CHECK_THROWS_AS(RoutingPolicy::static_policy(-0.1), std::invalid_argument);
  }
}

TEST_CASE("dynamic routing consults the table and falls back safely") {
  auto table = std::make_shared<DecisionTable>();
  table->weights = SLOWeights{1, 1};
  WorkloadKey hit{ContextClass::small, workload::Category::balanced, 1.0};
  table->insert(make_entry(hit, 1.0, 0.4, 1.0, 1.05, SLOWeights{1, 1}));
  WorkloadKey dead{ContextClass::small, workload::Category::balanced, 2.0};
  DecisionEntry un;
  un.key = dead;
  un.available = false;
  table->insert(un);

  auto policy = RoutingPolicy::dynamic_policy(table);
  SessionTable sessions;
  auto h = md5("conv-dyn");

  // Turn 1 always takes the P path.
  auto d1 = decide(turn_req(1), h, 1.0, policy, sessions, 0, [] { return 4; });
  CHECK(d1.target == RouteDecision::Target::P_path);
  CHECK(d1.x_used == 0);

  // Table hit with x*=1 goes decode-local.
  auto d2 = decide(turn_req(2), h, 1.0, policy, sessions, 1, nullptr);
  CHECK(d2.target == RouteDecision::Target::D_local);
  CHECK(d2.x_used == 1);
  CHECK(!d2.table_miss);

  // Unavailable entry falls back to x=0.
  auto d3 = decide(turn_req(2), h, 2.0, policy, sessions, 2, nullptr);
  CHECK(d3.target == RouteDecision::Target::P_path);
  CHECK(d3.table_miss);

  // Missing key (different qps bin) falls back to x=0.
  auto d4 = decide(turn_req(2), h, 16.0, policy, sessions, 3, nullptr);
  CHECK(d4.target == RouteDecision::Target::P_path);
  CHECK(d4.table_miss);

  // Evicted session: handled as a fresh Turn 1.
  sessions.erase(h);
  auto d5 = decide(turn_req(2), h, 1.0, policy, sessions, 4, [] { return 4; });
  CHECK(d5.session_missing);
  CHECK(d5.target == RouteDecision::Target::P_path);
  CHECK(sessions.find(h).has_value());
}
