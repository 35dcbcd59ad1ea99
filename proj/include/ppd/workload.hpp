#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "ppd/md5.hpp"

namespace ppd::workload {

struct TurnProfile {
  long input_tokens = 1;
  long output_tokens = 1;
};

enum class Category { decode_heavy, balanced, prefill_heavy };

const char* to_string(Category c);
Category category_from_string(const std::string& s);

// Category from the Turn-2+ input/output ratio r: r < 0.5 decode-heavy,
// 0.5 <= r <= 2 balanced, r > 2 prefill-heavy.
Category classify(const TurnProfile& turn2plus);

struct WorkloadSpec {
  std::string id = "workload";
  TurnProfile turn1;
  TurnProfile turn2plus;
  int num_turns = 2;
  double qps = 1.0;           // conversations per second
  double duration_s = 10.0;
  Category category = Category::balanced;
  double think_time_s = 0.0;
  double jitter_pct = 0.0;    // +/- uniform jitter on token counts

  void validate() const;  // throws std::invalid_argument
};

struct TurnRequest {
  std::string conv_id;
  int turn_index = 1;
  long new_input_tokens = 0;
  long cached_context_tokens = 0;
  long target_output_tokens = 0;
  // Seconds; turn-1 set by the arrival schedule, turn 2+ assigned during
  // simulation when the previous turn completes. Negative means unset.
  double arrival_time = -1.0;
};

struct Conversation {
  std::string conv_id;
  Digest128 first_message_digest{};
  std::vector<TurnRequest> turns;
};

// Strictly increasing Poisson arrival times in [0, duration).
std::vector<double> arrival_schedule(double qps, double duration_s,
                                     std::uint64_t seed);

std::vector<Conversation> generate_conversations(const WorkloadSpec& spec,
                                                 std::uint64_t seed);

struct TraceFilter {
  int min_turns = 2;
  // Retain only conversations whose every Turn-2+ input/output ratio exceeds
  // this value (0 disables the filter).
  double min_turn2_input_output_ratio = 0.0;
  std::optional<std::size_t> sample_size;
  std::uint64_t sample_seed = 0;
};

// Line-delimited trace: one conversation per line,
// {"conv_id": str, "turns": [{"input_tokens": n, "output_tokens": n}, ...]}.
// Throws std::runtime_error naming the line number on a malformed record.
std::vector<Conversation> ingest_trace(std::istream& in,
                                       const TraceFilter& filter);

void export_trace(std::ostream& out, const std::vector<Conversation>& convs);

WorkloadSpec load_spec_file(const std::filesystem::path& p);
void save_spec_file(const std::filesystem::path& p, const WorkloadSpec& spec);

// The default synthetic grid: 2 Turn-1 profiles x 9 Turn-2 profiles
// (4 decode-heavy, 2 balanced, 3 prefill-heavy).
std::vector<WorkloadSpec> default_workloads();

// Named lookup over default_workloads(); returns nullopt if unknown.
std::optional<WorkloadSpec> find_workload(const std::string& id);

}  // namespace ppd::workload
