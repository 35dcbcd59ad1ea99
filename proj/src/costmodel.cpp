#include "ppd/costmodel.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "ppd/md5.hpp"
#include "ppd/util.hpp"

namespace ppd::cost {

using nlohmann::json;

const char* to_string(PrefillKind k) {
  return k == PrefillKind::full ? "full" : "append";
}

PrefillKind prefill_kind_from_string(const std::string& s) {
  if (s == "full") return PrefillKind::full;
  if (s == "append") return PrefillKind::append;
  throw std::invalid_argument("unknown prefill kind: " + s);
}

// Dense per-kind grid over the anchor coordinates with trilinear
// interpolation. Cells without a measured point are filled from the nearest
// point (normalized axis-index distance, first-wins tie-break) so the lookup
// is total while remaining exact at every anchor.
class InterferenceModel {
 public:
  explicit InterferenceModel(const std::vector<InterferencePoint>& points) {
    for (int k = 0; k < 2; ++k) build_kind(static_cast<PrefillKind>(k), points);
  }

  double query(PrefillKind kind, long tokens, int concurrent, int batch,
               bool* clamped) const {
    const Grid& g = grids_[static_cast<int>(kind)];
    if (g.tokens.empty()) return 1.0;
    double x = clamp_axis(double(tokens), g.tokens, clamped);
    double y = clamp_axis(double(concurrent), g.concurrent, clamped);
    double z = clamp_axis(double(batch), g.batch, clamped);
    auto [xi, xf] = bracket(x, g.tokens);
    auto [yi, yf] = bracket(y, g.concurrent);
    auto [zi, zf] = bracket(z, g.batch);
    double acc = 0;
    for (int dx = 0; dx < 2; ++dx)
      for (int dy = 0; dy < 2; ++dy)
        for (int dz = 0; dz < 2; ++dz) {
          double w = (dx ? xf : 1 - xf) * (dy ? yf : 1 - yf) *
                     (dz ? zf : 1 - zf);
          if (w == 0) continue;
          acc += w * g.at(std::min(xi + dx, int(g.tokens.size()) - 1),
                          std::min(yi + dy, int(g.concurrent.size()) - 1),
                          std::min(zi + dz, int(g.batch.size()) - 1));
        }
    return std::max(1.0, acc);
  }

 private:
  struct Grid {
    std::vector<double> tokens, concurrent, batch;
    std::vector<double> values;  // tokens-major, batch-minor
    double at(int i, int j, int k) const {
      return values[(std::size_t(i) * concurrent.size() + j) * batch.size() +
                    k];
    }
  };

  static double clamp_axis(double v, const std::vector<double>& axis,
                           bool* clamped) {
    if (v < axis.front() || v > axis.back()) {
      if (clamped) *clamped = true;
      return std::clamp(v, axis.front(), axis.back());
    }
    return v;
  }

  // Returns (lower index, fraction toward the next index).
  static std::pair<int, double> bracket(double v,
                                        const std::vector<double>& axis) {
    if (axis.size() == 1) return {0, 0.0};
    auto it = std::upper_bound(axis.begin(), axis.end(), v);
    int hi = std::clamp<int>(int(it - axis.begin()), 1, int(axis.size()) - 1);
    int lo = hi - 1;
    double f = (v - axis[lo]) / (axis[hi] - axis[lo]);
    return {lo, std::clamp(f, 0.0, 1.0)};
  }

  void build_kind(PrefillKind kind,
                  const std::vector<InterferencePoint>& points) {
    Grid& g = grids_[static_cast<int>(kind)];
    std::set<double> ts, cs, bs;
    std::vector<const InterferencePoint*> mine;
    for (const auto& p : points) {
      if (p.kind != kind) continue;
      mine.push_back(&p);
      ts.insert(double(p.prefill_tokens));
      cs.insert(double(p.concurrent_prefills));
      bs.insert(double(p.decode_batch));
    }
    if (mine.empty()) return;
    g.tokens.assign(ts.begin(), ts.end());
    g.concurrent.assign(cs.begin(), cs.end());
    g.batch.assign(bs.begin(), bs.end());
    g.values.assign(g.tokens.size() * g.concurrent.size() * g.batch.size(), 0);

    auto axis_index = [](const std::vector<double>& axis, double v) {
      return int(std::lower_bound(axis.begin(), axis.end(), v) - axis.begin());
    };
    std::vector<bool> have(g.values.size(), false);
    for (const auto* p : mine) {
      int i = axis_index(g.tokens, double(p->prefill_tokens));
      int j = axis_index(g.concurrent, double(p->concurrent_prefills));
      int k = axis_index(g.batch, double(p->decode_batch));
      std::size_t idx =
          (std::size_t(i) * g.concurrent.size() + j) * g.batch.size() + k;
      g.values[idx] = p->tpot_multiplier;
      have[idx] = true;
    }
    // Fill holes from the nearest measured point in index space.
    for (std::size_t i = 0; i < g.tokens.size(); ++i)
      for (std::size_t j = 0; j < g.concurrent.size(); ++j)
        for (std::size_t k = 0; k < g.batch.size(); ++k) {
          std::size_t idx = (i * g.concurrent.size() + j) * g.batch.size() + k;
          if (have[idx]) continue;
          double best = std::numeric_limits<double>::infinity();
          double val = 1.0;
          for (const auto* p : mine) {
            double di = double(axis_index(g.tokens, double(p->prefill_tokens))) -
                        double(i);
            double dj = double(axis_index(g.concurrent,
                                          double(p->concurrent_prefills))) -
                        double(j);
            double dk =
                double(axis_index(g.batch, double(p->decode_batch))) -
                double(k);
            double d = di * di + dj * dj + dk * dk;
            if (d < best) {
              best = d;
              val = p->tpot_multiplier;
            }
          }
          g.values[idx] = val;
        }
  }

  Grid grids_[2];
};

void CalibrationTable::validate() const {
  auto nonneg = [](double v, const char* name) {
    if (!(v >= 0)) throw std::invalid_argument(std::string(name) + " must be >= 0");
  };
  nonneg(full_a_lin, "full_a_lin");
  nonneg(full_b_quad, "full_b_quad");
  nonneg(append_a_lin, "append_a_lin");
  nonneg(append_b_cross, "append_b_cross");
  nonneg(decode_c_base, "decode_c_base");
  nonneg(decode_d_batch, "decode_d_batch");
  nonneg(kv_bytes_per_token, "kv_bytes_per_token");
  if (!(link_bandwidth > 0))
    throw std::invalid_argument("link_bandwidth must be > 0");
  if (prefill_service_distribution != "deterministic" &&
      prefill_service_distribution != "exponential")
    throw std::invalid_argument("unknown prefill_service_distribution: " +
                                prefill_service_distribution);
  for (const auto& p : interference_points) {
    if (p.tpot_multiplier < 1.0)
      throw std::invalid_argument("tpot_multiplier must be >= 1");
    if (p.prefill_tokens < 1 || p.concurrent_prefills < 1 ||
        p.decode_batch < 1)
      throw std::invalid_argument("interference point coordinates must be >= 1");
  }
  // The measured single- and 4-prefill anchors at batch 200 must be present
  // for both kinds.
  for (auto kind : {PrefillKind::full, PrefillKind::append}) {
    for (int conc : {1, 4}) {
      bool found = false;
      for (const auto& p : interference_points)
        if (p.kind == kind && p.prefill_tokens == 1024 &&
            p.concurrent_prefills == conc && p.decode_batch == 200)
          found = true;
      if (!found)
        throw std::invalid_argument(
            "interference_points missing required anchor (" +
            std::string(to_string(kind)) + ", 1024, " + std::to_string(conc) +
            ", 200)");
    }
  }
}

namespace {

json to_json_obj(const CalibrationTable& c) {
  json pts = json::array();
  for (const auto& p : c.interference_points)
    pts.push_back({{"kind", to_string(p.kind)},
                   {"prefill_tokens", p.prefill_tokens},
                   {"concurrent_prefills", p.concurrent_prefills},
                   {"decode_batch", p.decode_batch},
                   {"tpot_multiplier", p.tpot_multiplier}});
  return json{{"schema_version", c.schema_version},
              {"full_a_lin", c.full_a_lin},
              {"full_b_quad", c.full_b_quad},
              {"append_a_lin", c.append_a_lin},
              {"append_b_cross", c.append_b_cross},
              {"decode_c_base", c.decode_c_base},
              {"decode_d_batch", c.decode_d_batch},
              {"kv_bytes_per_token", c.kv_bytes_per_token},
              {"link_bandwidth", c.link_bandwidth},
              {"prefill_service_distribution", c.prefill_service_distribution},
              {"interference_points", pts}};
}

}  // namespace

std::string CalibrationTable::to_json() const {
  return to_json_obj(*this).dump(2) + "\n";
}

std::string CalibrationTable::hash() const {
  return md5_hex(to_json_obj(*this).dump());
}

CalibrationTable CalibrationTable::from_json(const std::string& text) {
  json j = json::parse(text);
  static const std::set<std::string> allowed = {
      "schema_version",      "full_a_lin",
      "full_b_quad",         "append_a_lin",
      "append_b_cross",      "decode_c_base",
      "decode_d_batch",      "kv_bytes_per_token",
      "link_bandwidth",      "prefill_service_distribution",
      "interference_points"};
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw std::invalid_argument("calibration file: unknown key '" +
                                  it.key() + "'");
  CalibrationTable c;
  c.schema_version = j.at("schema_version").get<int>();
  if (c.schema_version != 1)
    throw std::invalid_argument("unsupported calibration schema_version");
  c.full_a_lin = j.at("full_a_lin").get<double>();
  c.full_b_quad = j.at("full_b_quad").get<double>();
  c.append_a_lin = j.at("append_a_lin").get<double>();
  c.append_b_cross = j.at("append_b_cross").get<double>();
  c.decode_c_base = j.at("decode_c_base").get<double>();
  c.decode_d_batch = j.at("decode_d_batch").get<double>();
  c.kv_bytes_per_token = j.at("kv_bytes_per_token").get<double>();
  c.link_bandwidth = j.at("link_bandwidth").get<double>();
  c.prefill_service_distribution =
      j.value("prefill_service_distribution", std::string("deterministic"));
  for (const auto& p : j.at("interference_points")) {
    InterferencePoint pt;
    pt.kind = prefill_kind_from_string(p.at("kind").get<std::string>());
    pt.prefill_tokens = p.at("prefill_tokens").get<long>();
    pt.concurrent_prefills = p.at("concurrent_prefills").get<int>();
    pt.decode_batch = p.at("decode_batch").get<int>();
    pt.tpot_multiplier = p.at("tpot_multiplier").get<double>();
    c.interference_points.push_back(pt);
  }
  c.finalize();
  return c;
}

CalibrationTable CalibrationTable::load(const std::filesystem::path& p) {
  return from_json(read_file(p));
}

void CalibrationTable::save(const std::filesystem::path& p) const {
  write_file(p, to_json());
}

void CalibrationTable::finalize() {
  validate();
  model_ = std::make_shared<InterferenceModel>(interference_points);
}

const InterferenceModel& CalibrationTable::model() const {
  if (!model_)
    throw std::logic_error("CalibrationTable::finalize() not called");
  return *model_;
}

CalibrationTable CalibrationTable::defaults() {
  CalibrationTable c;
  c.full_a_lin = 4e-5;
  c.full_b_quad = 5e-9;
  c.append_a_lin = 4e-5;
  c.append_b_cross = 5e-9;
  c.decode_c_base = 0.008;
  c.decode_d_batch = 2e-5;
  c.kv_bytes_per_token = 262144;  // 512 MB per 2K-token context
  c.link_bandwidth = 64e9;
  auto F = PrefillKind::full;
  auto A = PrefillKind::append;
  c.interference_points = {
      // kind, tokens, concurrent, batch, multiplier
      {F, 1024, 1, 1, 1.10},   {F, 1024, 1, 200, 1.48},
      {F, 1024, 4, 1, 1.18},   {F, 1024, 4, 200, 1.57},
      {F, 32768, 1, 1, 2.00},  {F, 32768, 1, 200, 3.50},
      {F, 32768, 4, 1, 2.20},  {F, 32768, 4, 200, 3.80},
      {F, 65536, 1, 1, 2.40},  {F, 65536, 1, 200, 4.00},
      {F, 65536, 4, 1, 2.70},  {F, 65536, 4, 200, 4.30},
      {A, 1024, 1, 1, 1.005},  {A, 1024, 1, 200, 1.02},
      {A, 1024, 4, 1, 1.03},   {A, 1024, 4, 200, 1.21},
      {A, 32768, 1, 1, 1.08},  {A, 32768, 1, 200, 1.15},
      {A, 32768, 4, 1, 1.12},  {A, 32768, 4, 200, 1.22},
      {A, 65536, 1, 1, 1.10},  {A, 65536, 1, 200, 1.20},
      {A, 65536, 4, 1, 1.15},  {A, 65536, 4, 200, 1.24},
  };
  c.finalize();
  return c;
}

double full_prefill_time(long n, const CalibrationTable& calib) {
  if (n < 1) throw std::invalid_argument("full_prefill_time: n must be >= 1");
  double nd = double(n);
  return calib.full_a_lin * nd + calib.full_b_quad * nd * nd;
}

double append_prefill_time(long m, long n_ctx, const CalibrationTable& calib) {
  if (m < 1) throw std::invalid_argument("append_prefill_time: m must be >= 1");
  if (n_ctx < 0)
    throw std::invalid_argument("append_prefill_time: n_ctx must be >= 0");
  double md = double(m);
  return calib.append_a_lin * md +
         calib.append_b_cross * md * (double(n_ctx) + md);
}

double kv_transfer_time(long tokens, const CalibrationTable& calib,
                        LinkState& link, double now) {
  if (tokens < 1) throw std::invalid_argument("kv_transfer_time: tokens >= 1");
  double bandwidth = link.bandwidth > 0 ? link.bandwidth : calib.link_bandwidth;
  double payload = double(tokens) * calib.kv_bytes_per_token;
  double start = std::max(now, link.busy_until);
  double done = start + payload / bandwidth;
  link.busy_until = done;
  link.transfers += 1;
  link.total_bytes += payload;
  link.queue_delays.push_back(start - now);
  return done - now;
}

double interference_multiplier(const BatchState& state,
                               const CalibrationTable& calib, bool* clamped) {
  if (state.decode_batch_size < 0 || state.concurrent_prefill_ops < 0 ||
      state.colocated_full_prefill_tokens < 0 ||
      state.colocated_append_prefill_tokens < 0)
    throw std::invalid_argument("interference_multiplier: negative field");
  if (state.concurrent_prefill_ops == 0 ||
      (state.colocated_full_prefill_tokens == 0 &&
       state.colocated_append_prefill_tokens == 0))
    return 1.0;
  int batch = std::max(1, state.decode_batch_size);
  double mult = 1.0;
  if (state.colocated_full_prefill_tokens > 0)
    mult = std::max(mult, calib.model().query(
                              PrefillKind::full,
                              state.colocated_full_prefill_tokens,
                              state.concurrent_prefill_ops, batch, clamped));
  if (state.colocated_append_prefill_tokens > 0)
    mult = std::max(mult, calib.model().query(
                              PrefillKind::append,
                              state.colocated_append_prefill_tokens,
                              state.concurrent_prefill_ops, batch, clamped));
  return mult;
}

double decode_step_time(const BatchState& state,
                        const CalibrationTable& calib) {
  if (state.decode_batch_size < 1)
    throw std::invalid_argument("decode_step_time: empty batch");
  double base = calib.decode_c_base +
                calib.decode_d_batch * double(state.decode_batch_size);
  return base * interference_multiplier(state, calib);
}

}  // namespace ppd::cost
