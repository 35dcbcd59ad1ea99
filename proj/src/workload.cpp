#include "ppd/workload.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ppd/util.hpp"

namespace ppd::workload {

using nlohmann::json;

const char* to_string(Category c) {
  switch (c) {
    case Category::decode_heavy: return "decode_heavy";
    case Category::balanced: return "balanced";
    case Category::prefill_heavy: return "prefill_heavy";
  }
  return "?";
}

Category category_from_string(const std::string& s) {
  if (s == "decode_heavy") return Category::decode_heavy;
  if (s == "balanced") return Category::balanced;
  if (s == "prefill_heavy") return Category::prefill_heavy;
  throw std::invalid_argument("unknown workload category: " + s);
}

Category classify(const TurnProfile& t2) {
  if (t2.output_tokens == 0) return Category::prefill_heavy;
  double r = double(t2.input_tokens) / double(t2.output_tokens);
  if (r < 0.5) return Category::decode_heavy;
  if (r > 2.0) return Category::prefill_heavy;
  return Category::balanced;
}

void WorkloadSpec::validate() const {
  if (turn1.input_tokens < 1 || turn1.output_tokens < 1 ||
      turn2plus.input_tokens < 1 || turn2plus.output_tokens < 1)
    throw std::invalid_argument("turn profile token counts must be >= 1");
  if (num_turns < 1) throw std::invalid_argument("num_turns must be >= 1");
  if (qps <= 0) throw std::invalid_argument("qps must be > 0");
  if (duration_s <= 0) throw std::invalid_argument("duration_s must be > 0");
  if (think_time_s < 0) throw std::invalid_argument("think_time_s must be >= 0");
  if (jitter_pct < 0 || jitter_pct >= 100)
    throw std::invalid_argument("jitter_pct must be in [0, 100)");
  if (classify(turn2plus) != category)
    throw std::invalid_argument(
        "category inconsistent with turn2plus input/output ratio");
}

std::vector<double> arrival_schedule(double qps, double duration_s,
                                     std::uint64_t seed) {
  if (qps <= 0) throw std::invalid_argument("qps must be > 0");
  if (duration_s < 0) throw std::invalid_argument("duration_s must be >= 0");
  Rng rng(seed);
  std::vector<double> times;
  double t = rng.exponential(qps);
  while (t < duration_s) {
    times.push_back(t);
    t += rng.exponential(qps);
  }
  return times;
}

namespace {

long jittered(long tokens, double jitter_pct, Rng& rng) {
  if (jitter_pct <= 0) return tokens;
  double f = rng.uniform(1.0 - jitter_pct / 100.0, 1.0 + jitter_pct / 100.0);
  return std::max<long>(1, std::lround(double(tokens) * f));
}

void fill_context_sums(Conversation& conv) {
  long ctx = 0;
  for (auto& t : conv.turns) {
    t.cached_context_tokens = ctx;
    ctx += t.new_input_tokens + t.target_output_tokens;
  }
}

}  // namespace

std::vector<Conversation> generate_conversations(const WorkloadSpec& spec,
                                                 std::uint64_t seed) {
  spec.validate();
  auto arrivals = arrival_schedule(spec.qps, spec.duration_s, seed);
  // Independent stream for token jitter so the arrival process is unaffected
  // by profile knobs.
  Rng jrng(seed ^ 0x746f6b656e736aull);

  std::vector<Conversation> convs;
  convs.reserve(arrivals.size());
  for (std::size_t i = 0; i < arrivals.size(); ++i) {
    Conversation c;
    c.conv_id = spec.id + "-c" + std::to_string(i);
    c.first_message_digest = md5(c.conv_id);
    for (int t = 1; t <= spec.num_turns; ++t) {
      const TurnProfile& p = (t == 1) ? spec.turn1 : spec.turn2plus;
      TurnRequest req;
      req.conv_id = c.conv_id;
      req.turn_index = t;
      req.new_input_tokens = jittered(p.input_tokens, spec.jitter_pct, jrng);
      req.target_output_tokens =
          jittered(p.output_tokens, spec.jitter_pct, jrng);
      req.arrival_time = (t == 1) ? arrivals[i] : -1.0;
      c.turns.push_back(req);
    }
    fill_context_sums(c);
    convs.push_back(std::move(c));
  }
  return convs;
}

std::vector<Conversation> ingest_trace(std::istream& in,
                                       const TraceFilter& filter) {
  std::vector<Conversation> convs;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error("trace line " + std::to_string(lineno) +
                               ": malformed JSON: " + e.what());
    }
    if (!rec.is_object() || !rec.contains("conv_id") ||
        !rec.contains("turns") || !rec["turns"].is_array() ||
        rec["turns"].empty())
      throw std::runtime_error("trace line " + std::to_string(lineno) +
                               ": record must have conv_id and nonempty turns");
    Conversation c;
    c.conv_id = rec["conv_id"].get<std::string>();
    c.first_message_digest = md5(c.conv_id);
    int idx = 0;
    for (const auto& t : rec["turns"]) {
      if (!t.contains("input_tokens") || !t.contains("output_tokens"))
        throw std::runtime_error("trace line " + std::to_string(lineno) +
                                 ": turn missing token fields");
      TurnRequest req;
      req.conv_id = c.conv_id;
      req.turn_index = ++idx;
      req.new_input_tokens = t["input_tokens"].get<long>();
      req.target_output_tokens = t["output_tokens"].get<long>();
      if (req.new_input_tokens < 1 || req.target_output_tokens < 1)
        throw std::runtime_error("trace line " + std::to_string(lineno) +
                                 ": token counts must be >= 1");
      c.turns.push_back(req);
    }
    fill_context_sums(c);

    if (int(c.turns.size()) < filter.min_turns) continue;
    if (filter.min_turn2_input_output_ratio > 0) {
      bool ok = true;
      for (std::size_t i = 1; i < c.turns.size(); ++i) {
        double r = double(c.turns[i].new_input_tokens) /
                   double(c.turns[i].target_output_tokens);
        if (r <= filter.min_turn2_input_output_ratio) {
          ok = false;
          break;
        }
      }
      if (!ok) continue;
    }
    convs.push_back(std::move(c));
  }

  if (filter.sample_size && convs.size() > *filter.sample_size) {
    // Deterministic partial Fisher-Yates, then restore trace order.
    Rng rng(filter.sample_seed);
    std::vector<std::size_t> idx(convs.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    for (std::size_t i = 0; i < *filter.sample_size; ++i) {
      std::size_t j = i + rng.next_below(idx.size() - i);
      std::swap(idx[i], idx[j]);
    }
    idx.resize(*filter.sample_size);
    std::sort(idx.begin(), idx.end());
    std::vector<Conversation> sampled;
    sampled.reserve(idx.size());
    for (auto i : idx) sampled.push_back(std::move(convs[i]));
    convs = std::move(sampled);
  }
  return convs;
}

void export_trace(std::ostream& out, const std::vector<Conversation>& convs) {
  for (const auto& c : convs) {
    json turns = json::array();
    for (const auto& t : c.turns)
      turns.push_back({{"input_tokens", t.new_input_tokens},
                       {"output_tokens", t.target_output_tokens}});
    json rec{{"conv_id", c.conv_id}, {"turns", turns}};
    out << rec.dump() << "\n";
  }
}

WorkloadSpec load_spec_file(const std::filesystem::path& p) {
  json j = json::parse(read_file(p));
  WorkloadSpec s;
  s.id = j.value("id", p.stem().string());
  s.qps = j.at("qps").get<double>();
  s.duration_s = j.at("duration_s").get<double>();
  s.num_turns = j.at("num_turns").get<int>();
  s.turn1 = {j.at("turn1").at("input").get<long>(),
             j.at("turn1").at("output").get<long>()};
  s.turn2plus = {j.at("turn2plus").at("input").get<long>(),
                 j.at("turn2plus").at("output").get<long>()};
  s.think_time_s = j.value("think_time_s", 0.0);
  s.jitter_pct = j.value("jitter_pct", 0.0);
  s.category = classify(s.turn2plus);
  s.validate();
  return s;
}

void save_spec_file(const std::filesystem::path& p, const WorkloadSpec& s) {
  json j{{"id", s.id},
         {"qps", s.qps},
         {"duration_s", s.duration_s},
         {"num_turns", s.num_turns},
         {"turn1", {{"input", s.turn1.input_tokens},
                    {"output", s.turn1.output_tokens}}},
         {"turn2plus", {{"input", s.turn2plus.input_tokens},
                        {"output", s.turn2plus.output_tokens}}},
         {"think_time_s", s.think_time_s},
         {"jitter_pct", s.jitter_pct},
         {"category", to_string(s.category)}};
  write_file(p, j.dump(2) + "\n");
}

std::vector<WorkloadSpec> default_workloads() {
  struct T2 {
    const char* tag;
    TurnProfile profile;
  };
  // 4 decode-heavy, 2 balanced, 3 prefill-heavy Turn-2 profiles.
  const T2 t2s[] = {
      {"dh1", {64, 256}},   {"dh2", {128, 512}},  {"dh3", {64, 512}},
      {"dh4", {256, 768}},  {"bal1", {256, 256}}, {"bal2", {512, 512}},
      {"ph1", {1024, 128}}, {"ph2", {2048, 256}}, {"ph3", {4096, 128}},
  };
  const struct {
    const char* tag;
    TurnProfile profile;
  } t1s[] = {{"short", {512, 256}}, {"long", {4096, 256}}};

  std::vector<WorkloadSpec> out;
  for (const auto& t1 : t1s) {
    for (const auto& t2 : t2s) {
      WorkloadSpec s;
      s.id = std::string(t2.tag) + "_" + t1.tag;
      s.turn1 = t1.profile;
      s.turn2plus = t2.profile;
      s.num_turns = 2;
      s.category = classify(s.turn2plus);
      out.push_back(s);
    }
  }
  return out;
}

std::optional<WorkloadSpec> find_workload(const std::string& id) {
  // Convenience aliases for the canonical profile of each category.
  static const std::map<std::string, std::string> aliases = {
      {"balanced_small", "bal1_short"},
      {"balanced_large", "bal1_long"},
      {"decode_heavy_small", "dh1_short"},
      {"decode_heavy_large", "dh1_long"},
      {"prefill_heavy_small", "ph1_short"},
      {"prefill_heavy_large", "ph1_long"},
  };
  auto it = aliases.find(id);
  const std::string& want = it == aliases.end() ? id : it->second;
  for (auto& w : default_workloads())
    if (w.id == want) return w;
  return std::nullopt;
}

}  // namespace ppd::workload
