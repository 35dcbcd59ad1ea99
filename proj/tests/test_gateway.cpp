#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <json.hpp>

#include "ppd/gateway.hpp"

using namespace ppd::gateway;
using nlohmann::json;

TEST_CASE("frame encoding round trips, including split delivery") {
  std::string payload = R"({"kind":"stats"})";
  auto frame = encode_frame(payload);
  CHECK(frame.size() == payload.size() + 4);
  // Big-endian length prefix.
  CHECK(std::uint8_t(frame[0]) == 0);
  CHECK(std::uint8_t(frame[3]) == payload.size());

  std::string buf = frame + encode_frame("second");
  auto first = try_decode_frame(buf);
  REQUIRE(first.has_value());
  CHECK(*first == payload);
  auto second = try_decode_frame(buf);
  REQUIRE(second.has_value());
  CHECK(*second == "second");
  CHECK(buf.empty());

  // Partial frames wait for more bytes.
  std::string partial = frame.substr(0, 7);
  CHECK(!try_decode_frame(partial).has_value());
  partial += frame.substr(7);
  CHECK(try_decode_frame(partial).has_value());

  std::string empty = encode_frame("");
  auto none = try_decode_frame(empty);
  REQUIRE(none.has_value());
  CHECK(none->empty());
}

TEST_CASE("backend registry heartbeats") {
  BackendRegistry reg;
  int p = reg.add('P', "p:1", 0.0);
  int d = reg.add('D', "d:1", 0.0);
  CHECK(reg.size() == 2);
  CHECK_THROWS_AS(reg.add('Q', "q:1", 0.0), std::invalid_argument);

  SUBCASE("staleness boundary is strictly greater than 30 s") {
    CHECK(reg.heartbeat(p, 10.0));
    // d last seen at t=0: at t=29 and t=30 it stays, just past 30 it goes.
    CHECK(reg.prune_dead(29.0).empty());
    CHECK(reg.prune_dead(30.0).empty());
    auto removed = reg.prune_dead(30.5);
    REQUIRE(removed.size() == 1);
    CHECK(removed[0] == d);
    CHECK(reg.size() == 1);
    CHECK(!reg.heartbeat(d, 31.0));  // unknown after pruning
  }

  SUBCASE("heartbeat refreshes the deadline") {
    CHECK(reg.heartbeat(d, 25.0));
    CHECK(reg.prune_dead(31.0).size() == 1);  // p (stale since 0)
    CHECK(reg.find(d).has_value());
  }
}

namespace {
RouteQuery query(const std::string& conv, int turn, long ctx = 1000) {
  RouteQuery q;
  q.conv_first_message = conv;
  q.turn_index = turn;
  q.new_input_tokens = 256;
  q.cached_context_tokens = turn == 1 ? 0 : ctx;
  q.target_output_tokens = 256;
  return q;
}
}  // namespace

TEST_CASE("gateway routing with session affinity") {
  Gateway gw(ppd::routing::RoutingPolicy::static_policy(1.0));
  int p = gw.registry().add('P', "p:1", 0.0);
  int d0 = gw.registry().add('D', "d:1", 0.0);
  int d1 = gw.registry().add('D', "d:2", 0.0);

  auto r1 = gw.route(query("conv-a", 1), 1.0);
  REQUIRE(r1.ok);
  CHECK(r1.target == "P_path");
  CHECK(r1.prefill_backend == p);
  int pinned = r1.decode_backend;
  CHECK((pinned == d0 || pinned == d1));

  // Turn 2+ under x=1 goes decode-local to the pinned backend, repeatedly.
  for (int i = 0; i < 5; ++i) {
    gw.registry().heartbeat(p, 2.0 + i);
    gw.registry().heartbeat(d0, 2.0 + i);
    gw.registry().heartbeat(d1, 2.0 + i);
    auto r = gw.route(query("conv-a", 2 + i), 2.0 + i);
    REQUIRE(r.ok);
    CHECK(r.target == "D_local");
    CHECK(r.decode_backend == pinned);
  }

  SUBCASE("a second conversation gets its own pin") {
    auto rb = gw.route(query("conv-b", 1), 8.0);
    CHECK(rb.ok);
    CHECK(rb.decode_backend != r1.decode_backend);  // round robin spreads
  }

  SUBCASE("pruned decode backend invalidates its sessions") {
    // Keep everything except the pinned D alive past the 30 s window.
    double t = 45.0;
    gw.registry().heartbeat(p, t);
    gw.registry().heartbeat(pinned == d0 ? d1 : d0, t);
    auto r = gw.route(query("conv-a", 8), t);
    REQUIRE(r.ok);
    CHECK(r.session_missing);       // session died with its backend
    CHECK(r.target == "P_path");    // handled like a fresh Turn 1
    CHECK(r.decode_backend != pinned);
  }

  SUBCASE("session TTL evicts idle conversations") {
    double t = 3700.0;  // more than an hour later
    gw.registry().heartbeat(p, t);
    gw.registry().heartbeat(d0, t);
    gw.registry().heartbeat(d1, t);
    auto r = gw.route(query("conv-a", 3), t);
    REQUIRE(r.ok);
    CHECK(r.session_missing);
    CHECK(r.target == "P_path");
  }
}

TEST_CASE("gateway capacity and replica-only deployments") {
  SUBCASE("no backends at all") {
    Gateway gw(ppd::routing::RoutingPolicy::static_policy(0.0));
    auto r = gw.route(query("c", 1), 0.0);
    CHECK(!r.ok);
    CHECK(r.error == "no_capacity");
  }

  SUBCASE("replica-only pins conversations to one R") {
    Gateway gw(ppd::routing::RoutingPolicy::static_policy(0.0));
    int r0 = gw.registry().add('R', "r:1", 0.0);
    int r1 = gw.registry().add('R', "r:2", 0.0);
    auto a1 = gw.route(query("conv-a", 1), 1.0);
    REQUIRE(a1.ok);
    CHECK(a1.target == "R_local");
    int pinned = a1.decode_backend;
    CHECK((pinned == r0 || pinned == r1));
    gw.registry().heartbeat(r0, 2.0);
    gw.registry().heartbeat(r1, 2.0);
    auto a2 = gw.route(query("conv-a", 2), 2.0);
    CHECK(a2.target == "R_local");
    CHECK(a2.decode_backend == pinned);
  }

  SUBCASE("replicas stand in for a missing side") {
    Gateway gw(ppd::routing::RoutingPolicy::static_policy(0.0));
    gw.registry().add('P', "p:1", 0.0);
    gw.registry().add('R', "r:1", 0.0);
    auto r = gw.route(query("c", 1), 0.0);
    CHECK(r.ok);  // R provides the decode side
  }
}

TEST_CASE("affinity invariant holds under churn") {
  Gateway gw(ppd::routing::RoutingPolicy::static_policy(1.0));
  std::vector<int> ds;
  int p = gw.registry().add('P', "p:1", 0.0);
  for (int i = 0; i < 4; ++i)
    ds.push_back(gw.registry().add('D', "d:" + std::to_string(i), 0.0));

  std::map<std::string, int> pin;
  unsigned rng = 99;
  auto rand = [&rng] { rng = rng * 1103515245 + 12345; return rng >> 16; };
  double t = 0;
  for (int i = 0; i < 10000; ++i) {
    t += 0.01;
    gw.registry().heartbeat(p, t);
    for (int d : ds) gw.registry().heartbeat(d, t);
    std::string conv = "conv-" + std::to_string(rand() % 64);
    int turn = pin.count(conv) ? 2 : 1;
    auto r = gw.route(query(conv, turn), t);
    REQUIRE(r.ok);
    if (turn >= 2) {
      // Every follow-up turn must land on the originally pinned backend.
      CHECK(r.decode_backend == pin[conv]);
      CHECK(r.target == "D_local");
    } else {
      pin[conv] = r.decode_backend;
    }
    // Occasionally kill and replace a backend; its sessions must re-pin.
    if (i % 2500 == 2499) {
      int victim = ds[rand() % ds.size()];
      gw.registry().remove(victim);
      gw.sessions().invalidate_backend(victim);
      for (auto it = pin.begin(); it != pin.end();)
        it = (it->second == victim) ? pin.erase(it) : ++it;
      std::erase(ds, victim);
      ds.push_back(gw.registry().add('D', "d:new" + std::to_string(i), t));
    }
  }
  auto stats = gw.stats();
  CHECK(stats.queries == 10000);
  CHECK(stats.errors == 0);
  CHECK(stats.d_local > 0);
  CHECK(stats.p_path > 0);
}

TEST_CASE("message handling over the wire format") {
  Gateway gw(ppd::routing::RoutingPolicy::static_policy(1.0));

  auto reg_p = json::parse(gw.handle_message(
      R"({"kind":"register","role":"P","address":"p:1"})", 0.0));
  auto reg_d = json::parse(gw.handle_message(
      R"({"kind":"register","role":"D","address":"d:1"})", 0.0));
  CHECK(reg_p.at("kind") == "register_reply");
  int d_id = reg_d.at("id").get<int>();

  auto hb = json::parse(gw.handle_message(
      json{{"kind", "heartbeat"}, {"id", d_id}}.dump(), 5.0));
  CHECK(hb.at("ok") == true);

  auto route = json::parse(gw.handle_message(
      json{{"kind", "route"},
           {"conv_first_message", "hello"},
           {"turn_index", 1},
           {"new_input_tokens", 128},
           {"target_output_tokens", 128}}
          .dump(),
      5.0));
  CHECK(route.at("kind") == "route_reply");
  CHECK(route.at("ok") == true);
  CHECK(route.at("target") == "P_path");

  auto stats = json::parse(gw.handle_message(R"({"kind":"stats"})", 6.0));
  CHECK(stats.at("kind") == "stats_reply");
  CHECK(stats.at("queries") == 1);
  CHECK(stats.at("p_path") == 1);
  CHECK(stats.at("backends") == 2);
  CHECK(stats.at("sessions") == 1);

  auto err = json::parse(gw.handle_message(R"({"kind":"warp"})", 0.0));
  CHECK(err.at("kind") == "error");
  auto garbled = json::parse(gw.handle_message("not json", 0.0));
  CHECK(garbled.at("kind") == "error");
}
