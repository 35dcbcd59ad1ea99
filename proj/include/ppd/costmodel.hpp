#pragma once

#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace ppd::cost {

enum class PrefillKind { full, append };

const char* to_string(PrefillKind k);
PrefillKind prefill_kind_from_string(const std::string& s);

// One measured decode-slowdown point. For append-kind points,
// prefill_tokens is the total attended context (cached + new); for
// full-kind points it is the prompt length.
struct InterferencePoint {
  PrefillKind kind = PrefillKind::full;
  long prefill_tokens = 0;
  int concurrent_prefills = 1;
  int decode_batch = 1;
  double tpot_multiplier = 1.0;
};

struct BatchState {
  int decode_batch_size = 0;
  long colocated_full_prefill_tokens = 0;
  long colocated_append_prefill_tokens = 0;
  int concurrent_prefill_ops = 0;
};

// Shared FIFO transfer link between the P pool and the D pool.
struct LinkState {
  double bandwidth = 0;  // bytes/s
  double busy_until = 0;
  long transfers = 0;
  double total_bytes = 0;
  std::vector<double> queue_delays;
};

class InterferenceModel;

struct CalibrationTable {
  int schema_version = 1;
  // full prefill: a_lin * n + b_quad * n^2
  double full_a_lin = 0;
  double full_b_quad = 0;
  // append prefill: a_lin * m + b_cross * m * (n_ctx + m)
  double append_a_lin = 0;
  double append_b_cross = 0;
  // decode iteration: c_base + d_batch * batch_size
  double decode_c_base = 0;
  double decode_d_batch = 0;
  double kv_bytes_per_token = 0;
  double link_bandwidth = 0;  // bytes/s
  // "deterministic" (default) or "exponential": scales each prefill service
  // draw by an Exp(1) variate; used for queueing-validation runs.
  std::string prefill_service_distribution = "deterministic";
  std::vector<InterferencePoint> interference_points;

  void validate() const;  // throws std::invalid_argument

  // Canonical-JSON MD5, used to stamp artifacts.
  std::string hash() const;

  std::string to_json() const;
  static CalibrationTable from_json(const std::string& text);
  static CalibrationTable load(const std::filesystem::path& p);
  void save(const std::filesystem::path& p) const;

  // Defaults fitted so the measured interference anchors hold exactly and
  // the qualitative serving trends reproduce at desk scale.
  static CalibrationTable defaults();

  // Builds the interpolation structure; called by load()/defaults(), and
  // must be re-invoked after mutating interference_points by hand.
  void finalize();
  const InterferenceModel& model() const;

 private:
  std::shared_ptr<const InterferenceModel> model_;
};

double full_prefill_time(long n, const CalibrationTable& calib);
double append_prefill_time(long m, long n_ctx, const CalibrationTable& calib);

// Enqueue a transfer on the shared FIFO link at `now`; updates link stats and
// returns the total time until completion (queueing + payload/bandwidth).
double kv_transfer_time(long tokens, const CalibrationTable& calib,
                        LinkState& link, double now);

// Piecewise-(tri)linear interpolation over the anchor grid, exact at anchors,
// clamped outside the measured range. `clamped`, when given, is set when the
// query fell outside the table range.
double interference_multiplier(const BatchState& state,
                               const CalibrationTable& calib,
                               bool* clamped = nullptr);

double decode_step_time(const BatchState& state, const CalibrationTable& calib);

}  // namespace ppd::cost
