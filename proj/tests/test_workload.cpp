#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <sstream>

#include "ppd/md5.hpp"
#include "ppd/util.hpp"
#include "ppd/workload.hpp"

using namespace ppd;
using namespace ppd::workload;

TEST_CASE("md5 reference vectors") {
  CHECK(md5_hex("") == "d41d8cd98f00b204e9800998ecf8427e");
  CHECK(md5_hex("abc") == "900150983cd24fb0d6963f7d28e17f72");
  CHECK(md5_hex("The quick brown fox jumps over the lazy dog") ==
        "9e107d9d372bb6826bd81d3542a419d6");
}

TEST_CASE("category boundaries on the input/output ratio") {
  CHECK(classify({100, 300}) == Category::decode_heavy);  // r = 1/3
  CHECK(classify({100, 201}) == Category::decode_heavy);  // r < 0.5
  CHECK(classify({100, 200}) == Category::balanced);      // r = 0.5 inclusive
  CHECK(classify({400, 200}) == Category::balanced);      // r = 2 inclusive
  CHECK(classify({401, 200}) == Category::prefill_heavy); // r > 2
}

TEST_CASE("arrival schedule is a Poisson process") {
  const double qps = 4.0, duration = 25.0;  // expectation 100 arrivals

  SUBCASE("strictly increasing within [0, duration)") {
    auto arr = arrival_schedule(qps, duration, 42);
    for (std::size_t i = 0; i < arr.size(); ++i) {
      CHECK(arr[i] >= 0);
      CHECK(arr[i] < duration);
      if (i > 0) CHECK(arr[i] > arr[i - 1]);
    }
  }

  SUBCASE("count mean within 3 standard errors over 1000 seeds") {
    const int trials = 1000;
    double total = 0;
    for (int s = 0; s < trials; ++s)
      total += double(arrival_schedule(qps, duration, 1000 + s).size());
    double mean = total / trials;
    double expect = qps * duration;
    double se = std::sqrt(expect / trials);  // Poisson variance = mean
    CHECK(std::abs(mean - expect) < 3 * se);
  }

  SUBCASE("count variance/mean ratio near 1 (Poisson dispersion)") {
    const int trials = 500;
    std::vector<double> counts;
    for (int s = 0; s < trials; ++s)
      counts.push_back(double(arrival_schedule(qps, duration, 5000 + s).size()));
    double mean = 0;
    for (double c : counts) mean += c;
    mean /= trials;
    double var = 0;
    for (double c : counts) var += (c - mean) * (c - mean);
    var /= (trials - 1);
    CHECK(var / mean > 0.8);
    CHECK(var / mean < 1.2);
  }

  SUBCASE("gap mean matches 1/qps within 2%") {
    auto arr = arrival_schedule(8.0, 10000.0, 7);  // ~80k samples
    double sum = arr[0];
    for (std::size_t i = 1; i < arr.size(); ++i) sum += arr[i] - arr[i - 1];
    double mean_gap = sum / double(arr.size());
    CHECK(std::abs(mean_gap - 0.125) < 0.02 * 0.125);
  }
}

TEST_CASE("generated conversations carry cumulative context") {
  WorkloadSpec spec;
  spec.id = "ctx";
  spec.turn1 = {512, 256};
  spec.turn2plus = {128, 64};
  spec.num_turns = 4;
  spec.qps = 5;
  spec.duration_s = 20;
  auto convs = generate_conversations(spec, 3);
  REQUIRE(!convs.empty());
  for (const auto& c : convs) {
    REQUIRE(c.turns.size() == 4);
    CHECK(c.first_message_digest == md5(c.conv_id));
    long sum = 0;
    for (const auto& t : c.turns) {
      CHECK(t.cached_context_tokens == sum);
      sum += t.new_input_tokens + t.target_output_tokens;
    }
    CHECK(c.turns[0].arrival_time >= 0);
    for (std::size_t i = 1; i < c.turns.size(); ++i)
      CHECK(c.turns[i].arrival_time < 0);  // assigned during simulation
  }
}

TEST_CASE("token jitter does not disturb the arrival stream") {
  WorkloadSpec a;
  a.turn1 = {512, 256};
  a.turn2plus = {128, 64};
  a.qps = 5;
  a.duration_s = 20;
  WorkloadSpec b = a;
  b.jitter_pct = 20.0;
  auto ca = generate_conversations(a, 11);
  auto cb = generate_conversations(b, 11);
  REQUIRE(ca.size() == cb.size());
  for (std::size_t i = 0; i < ca.size(); ++i)
    CHECK(ca[i].turns[0].arrival_time ==
          doctest::Approx(cb[i].turns[0].arrival_time));
}

namespace {
std::string sample_trace() {
  return R"({"conv_id": "a", "turns": [{"input_tokens": 100, "output_tokens": 50}, {"input_tokens": 300, "output_tokens": 100}]}
{"conv_id": "b", "turns": [{"input_tokens": 10, "output_tokens": 5}]}
{"conv_id": "c", "turns": [{"input_tokens": 40, "output_tokens": 20}, {"input_tokens": 10, "output_tokens": 100}]}
)";
}
}  // namespace

TEST_CASE("trace ingestion") {
  SUBCASE("min_turns filter") {
    std::istringstream in(sample_trace());
    TraceFilter f;
    f.min_turns = 2;
    auto convs = ingest_trace(in, f);
    REQUIRE(convs.size() == 2);
    CHECK(convs[0].conv_id == "a");
    CHECK(convs[1].conv_id == "c");
  }

  SUBCASE("turn-2 ratio filter") {
    std::istringstream in(sample_trace());
    TraceFilter f;
    f.min_turns = 2;
    f.min_turn2_input_output_ratio = 1.0;  // keeps a (300/100=3), drops c (0.1)
    auto convs = ingest_trace(in, f);
    REQUIRE(convs.size() == 1);
    CHECK(convs[0].conv_id == "a");
  }

  SUBCASE("context sums reconstructed") {
    std::istringstream in(sample_trace());
    TraceFilter f;
    f.min_turns = 1;
    auto convs = ingest_trace(in, f);
    CHECK(convs[0].turns[0].cached_context_tokens == 0);
    CHECK(convs[0].turns[1].cached_context_tokens == 150);
  }

  SUBCASE("malformed line names the line number") {
    std::istringstream in("{\"conv_id\": \"x\"}\n");
    TraceFilter f;
    CHECK_THROWS_WITH_AS(ingest_trace(in, f),
                         doctest::Contains("line 1"), std::runtime_error);
  }

  SUBCASE("round trip is identity") {
    std::istringstream in(sample_trace());
    TraceFilter f;
    f.min_turns = 1;
    auto convs = ingest_trace(in, f);
    std::ostringstream out;
    export_trace(out, convs);
    std::istringstream in2(out.str());
    auto convs2 = ingest_trace(in2, f);
    REQUIRE(convs.size() == convs2.size());
    for (std::size_t i = 0; i < convs.size(); ++i) {
      CHECK(convs[i].conv_id == convs2[i].conv_id);
      REQUIRE(convs[i].turns.size() == convs2[i].turns.size());
      for (std::size_t t = 0; t < convs[i].turns.size(); ++t) {
        CHECK(convs[i].turns[t].new_input_tokens ==
              convs2[i].turns[t].new_input_tokens);
        CHECK(convs[i].turns[t].target_output_tokens ==
              convs2[i].turns[t].target_output_tokens);
        CHECK(convs[i].turns[t].cached_context_tokens ==
              convs2[i].turns[t].cached_context_tokens);
      }
    }
  }

  SUBCASE("deterministic subsample preserves trace order") {
    std::string big;
    for (int i = 0; i < 50; ++i)
      big += "{\"conv_id\": \"c" + std::to_string(i) +
             "\", \"turns\": [{\"input_tokens\": 10, \"output_tokens\": 10}, "
             "{\"input_tokens\": 10, \"output_tokens\": 10}]}\n";
    TraceFilter f;
    f.sample_size = 10;
    f.sample_seed = 9;
    std::istringstream in1(big), in2(big);
    auto s1 = ingest_trace(in1, f);
    auto s2 = ingest_trace(in2, f);
    REQUIRE(s1.size() == 10);
    REQUIRE(s2.size() == 10);
    int prev = -1;
    for (std::size_t i = 0; i < 10; ++i) {
      CHECK(s1[i].conv_id == s2[i].conv_id);
      int idx = std::stoi(s1[i].conv_id.substr(1));
      CHECK(idx > prev);  // original order retained
      prev = idx;
    }
  }
}

TEST_CASE("workload spec file round trip") {
  WorkloadSpec spec;
  spec.id = "roundtrip";
  spec.turn1 = {4096, 256};
  spec.turn2plus = {64, 512};
  spec.num_turns = 3;
  spec.qps = 2.5;
  spec.duration_s = 12;
  spec.think_time_s = 1.5;
  spec.jitter_pct = 10;
  spec.category = classify(spec.turn2plus);
  auto path = std::filesystem::temp_directory_path() / "ppd_spec_rt.json";
  save_spec_file(path, spec);
  auto back = load_spec_file(path);
  CHECK(back.id == spec.id);
  CHECK(back.turn1.input_tokens == 4096);
  CHECK(back.turn2plus.output_tokens == 512);
  CHECK(back.num_turns == 3);
  CHECK(back.qps == doctest::Approx(2.5));
  CHECK(back.think_time_s == doctest::Approx(1.5));
  CHECK(back.category == Category::decode_heavy);
  std::filesystem::remove(path);
}

TEST_CASE("default workload grid") {
  auto all = default_workloads();
  CHECK(all.size() == 18);
  int dh = 0, bal = 0, ph = 0;
  for (const auto& w : all) {
    CHECK(w.num_turns == 2);
    if (w.category == Category::decode_heavy) ++dh;
    if (w.category == Category::balanced) ++bal;
    if (w.category == Category::prefill_heavy) ++ph;
  }
  CHECK(dh == 8);
  CHECK(bal == 4);
  CHECK(ph == 6);
  CHECK(find_workload("bal1_short").has_value());
  CHECK(find_workload("balanced_small").has_value());  // alias
  CHECK(!find_workload("nope").has_value());
}

TEST_CASE("spec validation rejects nonsense") {
  WorkloadSpec s;
  s.qps = -1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}
