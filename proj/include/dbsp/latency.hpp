#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "dbsp/error.hpp"
#include "dbsp/mask.hpp"
#include "dbsp/mask_io.hpp"
#include "dbsp/metrics.hpp"
#include "dbsp/planner.hpp"

namespace dbsp {

// Piecewise-linear curve through profiling samples, linear extrapolation past
// either end, never below zero. Query at a knot returns the sample exactly.
struct PiecewiseLinear {
  std::vector<double> xs;  // sorted, strictly increasing
  std::vector<double> ys;

  double eval(double x) const {
    if (xs.empty()) throw contract_error("empty latency curve");
    if (xs.size() == 1) return ys[0];
    size_t hi = std::upper_bound(xs.begin(), xs.end(), x) - xs.begin();
    if (hi == 0) hi = 1;
    if (hi == xs.size()) hi = xs.size() - 1;
    const size_t lo = hi - 1;
    if (x == xs[lo]) return ys[lo];
    if (x == xs[hi]) return ys[hi];
    // Flat segments short-circuit so infinite sentinel costs stay infinite.
    if (ys[lo] == ys[hi]) return ys[lo];
    const double t = (x - xs[lo]) / (xs[hi] - xs[lo]);
    return std::max(0.0, ys[lo] + t * (ys[hi] - ys[lo]));
  }
};

// Fitted machine primitives behind the latency predictor. Communication
// curves are keyed by group degree and evaluated at per-GPU payload bytes.
struct MachineProfile {
  std::map<uint32_t, PiecewiseLinear> all2all;  // Ulysses degree -> curve
  std::map<uint32_t, PiecewiseLinear> p2p;      // ring degree -> curve
  double dense_attn_seconds = 0.0;  // full dense problem, one device
  double launch_seconds = 0.0;      // per kernel launch
  double exchange_overlap = 1.0;    // fraction of exchange cost hidden
  double replan_seconds = 0.0;      // charged per head-level replan
  double bytes_per_token_per_head = 256.0;

  double all2all_at(uint32_t degree, double payload_bytes) const {
    const auto it = all2all.find(degree);
    if (it == all2all.end())
      throw config_error("profile missing all2all degree " + std::to_string(degree));
    return it->second.eval(payload_bytes);
  }

  double p2p_at(uint32_t degree, double payload_bytes) const {
    const auto it = p2p.find(degree);
    if (it == p2p.end())
      throw config_error("profile missing p2p degree " + std::to_string(degree));
    return it->second.eval(payload_bytes);
  }
};

// One offline profiling measurement. primitive is "all2all", "p2p" (x =
// per-GPU payload bytes) or "dense" (x = mask density, degree ignored).
struct ProfileSample {
  std::string primitive;
  uint32_t degree = 1;
  double x = 0.0;
  double seconds = 0.0;
};

struct FitOptions {
  double exchange_overlap = 1.0;
  double replan_seconds = 0.0;
  double bytes_per_token_per_head = 256.0;
};

namespace detail {

inline PiecewiseLinear fit_curve(std::vector<std::pair<double, double>> points,
                                 const std::string& what) {
  std::sort(points.begin(), points.end());
  PiecewiseLinear curve;
  for (const auto& [x, y] : points) {
    if (!curve.xs.empty() && x == curve.xs.back()) {
      // Repeated payloads collapse to their mean.
      curve.ys.back() = (curve.ys.back() + y) / 2.0;
      continue;
    }
    curve.xs.push_back(x);
    curve.ys.push_back(y);
  }
  if (curve.xs.size() < 2)
    throw config_error(what + " needs at least 2 samples at distinct payloads");
  for (size_t i = 0; i < curve.ys.size(); ++i) {
    if (curve.ys[i] < 0.0) throw config_error(what + " has a negative latency sample");
    if (i > 0 && curve.ys[i] < curve.ys[i - 1])
      throw config_error(what + " is not monotone non-decreasing in payload");
  }
  return curve;
}

}  // namespace detail

// Builds a profile from offline samples: interpolants per (primitive, degree)
// and a least-squares line through the dense samples, whose intercept is the
// launch cost and slope the full dense-attention cost.
inline MachineProfile fit_profile(const std::vector<ProfileSample>& samples,
                                  const FitOptions& options = {}) {
  if (!(options.exchange_overlap >= 0.0 && options.exchange_overlap <= 1.0))
    throw config_error("exchange_overlap must be in [0, 1]");
  if (options.replan_seconds < 0.0 || options.bytes_per_token_per_head <= 0.0)
    throw config_error("replan_seconds must be >= 0 and bytes_per_token_per_head > 0");

  std::map<uint32_t, std::vector<std::pair<double, double>>> a2a_points, p2p_points;
  std::vector<std::pair<double, double>> dense_points;
  for (const ProfileSample& s : samples) {
    if (s.primitive == "all2all")
      a2a_points[s.degree].emplace_back(s.x, s.seconds);
    else if (s.primitive == "p2p")
      p2p_points[s.degree].emplace_back(s.x, s.seconds);
    else if (s.primitive == "dense")
      dense_points.emplace_back(s.x, s.seconds);
    else
      throw config_error("unknown profile primitive '" + s.primitive + "'");
  }

  MachineProfile profile;
  for (auto& [degree, points] : a2a_points)
    profile.all2all[degree] =
        detail::fit_curve(std::move(points), "all2all degree " + std::to_string(degree));
  for (auto& [degree, points] : p2p_points)
    profile.p2p[degree] =
        detail::fit_curve(std::move(points), "p2p degree " + std::to_string(degree));

  {
    std::sort(dense_points.begin(), dense_points.end());
    double distinct = 0;
    for (size_t i = 0; i < dense_points.size(); ++i)
      if (i == 0 || dense_points[i].first != dense_points[i - 1].first) ++distinct;
    if (distinct < 2)
      throw config_error("dense needs at least 2 samples at distinct densities");
    double sum_x = 0, sum_y = 0, sum_xx = 0, sum_xy = 0;
    const double n = static_cast<double>(dense_points.size());
    for (const auto& [d, s] : dense_points) {
      sum_x += d;
      sum_y += s;
      sum_xx += d * d;
      sum_xy += d * s;
    }
    const double slope = (n * sum_xy - sum_x * sum_y) / (n * sum_xx - sum_x * sum_x);
    if (!(slope >= 0.0))
      throw config_error("dense samples imply a negative cost slope");
    profile.dense_attn_seconds = slope;
    // Noise can push the intercept slightly below zero; a launch cost cannot be.
    profile.launch_seconds = std::max(0.0, (sum_y - slope * sum_x) / n);
  }

  profile.exchange_overlap = options.exchange_overlap;
  profile.replan_seconds = options.replan_seconds;
  profile.bytes_per_token_per_head = options.bytes_per_token_per_head;
  return profile;
}

// Additive cost decomposition of one multi-GPU attention call.
struct LatencyBreakdown {
  double all2all_s = 0.0;            // Ulysses input/output reorganization
  double attn_compute_s = 0.0;       // pure compute across ring iterations
  double ring_p2p_exposed_s = 0.0;   // p2p cost not hidden under compute
  double imbalance_penalty_s = 0.0;  // extra time from workload imbalance
  double exchange_s = 0.0;           // exposed balancing data exchange
  double replan_s = 0.0;             // head-level replanning, when charged
  double total_s = 0.0;

  double attn_seconds() const {
    return attn_compute_s + ring_p2p_exposed_s + imbalance_penalty_s;
  }
};

struct MaskShape {
  uint32_t heads = 1;
  uint32_t q_blocks = 1;
  uint32_t kv_blocks = 1;
  uint32_t block_size = 1;
};

inline MaskShape mask_shape(const AttentionMaskSet& set) {
  return {set.num_heads(), set.num_q_blocks(), set.num_kv_blocks(), set.block_size()};
}

// Scalar summary of a call, sufficient for the cost model: the sparse pattern
// only enters through density, imbalance ratio, and exchange volume.
struct CallInputs {
  MaskShape shape;
  ParallelStrategy strategy;
  double density = 0.0;
  double rho = 1.0;
  ExchangeVolume exchange;
  bool charge_replan = false;
};

// Modeled bytes behind an exchange volume: moved tokens times the heads each
// GPU holds times bytes per token per head.
inline double exchange_payload_bytes(const MaskShape& shape, ParallelStrategy strategy,
                                     const ExchangeVolume& volume,
                                     const MachineProfile& profile) {
  return static_cast<double>(volume.token_payload) *
         (static_cast<double>(shape.heads) / strategy.ulysses) *
         profile.bytes_per_token_per_head;
}

// Cost model for one attention call:
//   per-iteration compute = dense_cost * density / (|G| * y) + launch
//   ring body             = max(compute, p2p) * (y-1) + compute   (y > 1)
//   attention             = ring body * rho
//   total = all2all (x > 1) + attention + exposed exchange + replan (if charged)
// Summing the y iteration terms keeps total compute at dense*density/|G|
// plus one launch per iteration, so FLOP-time is conserved across strategies.
inline LatencyBreakdown predict_from_inputs(const CallInputs& in,
                                            const MachineProfile& profile) {
  const uint32_t x = in.strategy.ulysses, y = in.strategy.ring;
  if (x < 1 || y < 1) throw config_error("parallel degrees must be >= 1");
  if (!(in.rho >= 1.0)) throw contract_error("imbalance ratio must be >= 1");
  if (!(in.density >= 0.0 && in.density <= 1.0))
    throw contract_error("density must be in [0, 1]");
  const double gpus = static_cast<double>(x) * y;
  const double q_tokens = static_cast<double>(in.shape.q_blocks) * in.shape.block_size;
  const double kv_tokens = static_cast<double>(in.shape.kv_blocks) * in.shape.block_size;
  const double heads = static_cast<double>(in.shape.heads);
  const double bpt = profile.bytes_per_token_per_head;

  LatencyBreakdown out;
  const double compute_iter =
      profile.dense_attn_seconds * in.density / (gpus * y) + profile.launch_seconds;

  if (x > 1) {
    const double qkv_bytes = (q_tokens + 2.0 * kv_tokens) * heads * bpt;
    out.all2all_s = profile.all2all_at(x, qkv_bytes / gpus);
  }

  double exposed_iter = 0.0;
  if (y > 1) {
    const double kv_bytes = 2.0 * (kv_tokens / y) * (heads / x) * bpt;
    const double p2p_iter = profile.p2p_at(y, kv_bytes);
    exposed_iter = std::max(0.0, p2p_iter - compute_iter);
  }
  out.attn_compute_s = compute_iter * y;
  out.ring_p2p_exposed_s = exposed_iter * (y - 1);
  const double ring_body = out.attn_compute_s + out.ring_p2p_exposed_s;
  out.imbalance_penalty_s = in.rho > 1.0 ? ring_body * (in.rho - 1.0) : 0.0;

  if (in.exchange.token_payload > 0 && profile.exchange_overlap < 1.0) {
    const double bytes = exchange_payload_bytes(in.shape, in.strategy, in.exchange, profile);
    out.exchange_s =
        (1.0 - profile.exchange_overlap) * profile.all2all_at(y, bytes / y);
  }
  if (in.charge_replan) out.replan_s = profile.replan_seconds;

  out.total_s = out.all2all_s + out.attn_compute_s + out.ring_p2p_exposed_s +
                out.imbalance_penalty_s + out.exchange_s + out.replan_s;
  return out;
}

inline LatencyBreakdown predict_latency(const AttentionMaskSet& set,
                                        ParallelStrategy strategy,
                                        const PartitionPlan& plan,
                                        const MachineProfile& profile,
                                        bool charge_replan = false) {
  CallInputs in;
  in.shape = mask_shape(set);
  in.strategy = strategy;
  in.density = density(set);
  in.rho = imbalance_ratio(workload_table(set, strategy, plan));
  in.exchange = exchange_volume(set, strategy, plan);
  in.charge_replan = charge_replan;
  return predict_from_inputs(in, profile);
}

struct StrategyPrediction {
  ParallelStrategy strategy;
  PlanOutcome outcome;
  LatencyBreakdown latency;
};

// Plans and predicts every pre-built strategy feasible for the mask set's
// dimensions (x <= heads, y <= min(Nq, Nk)), in enumeration order. Previous
// plans, when supplied per strategy, feed the reuse check. Replan cost is not
// charged here: predictions compare steady states.
inline std::vector<StrategyPrediction> predict_all(
    const AttentionMaskSet& set, const MachineProfile& profile, uint32_t total_gpus,
    const PlannerConfig& config,
    const std::map<ParallelStrategy, PartitionPlan>& prev_plans = {}) {
  std::vector<StrategyPrediction> out;
  for (ParallelStrategy strategy : enumerate_strategies(total_gpus)) {
    if (strategy.ulysses > set.num_heads()) continue;
    if (strategy.ring > std::min(set.num_q_blocks(), set.num_kv_blocks())) continue;
    const auto it = prev_plans.find(strategy);
    StrategyPrediction pred;
    pred.strategy = strategy;
    pred.outcome =
        plan_dual(set, strategy, config, it != prev_plans.end() ? &it->second : nullptr);
    pred.latency = predict_latency(set, strategy, pred.outcome.plan, profile);
    out.push_back(std::move(pred));
  }
  if (out.empty())
    throw config_error("no feasible strategy for " + std::to_string(total_gpus) +
                       " GPUs on this mask shape");
  return out;
}

// ---------------------------------------------------------------------------
// Profile JSON: {all2all: [{degree, payload_bytes, seconds}...], p2p: [...],
// dense: [{density, seconds}...], exchange_overlap, replan_seconds,
// bytes_per_token_per_head}. Stored as samples; loading re-fits them.

inline nlohmann::json profile_to_json(const MachineProfile& profile) {
  nlohmann::json j;
  auto curves = [](const std::map<uint32_t, PiecewiseLinear>& table) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [degree, curve] : table)
      for (size_t i = 0; i < curve.xs.size(); ++i)
        arr.push_back({{"degree", degree},
                       {"payload_bytes", curve.xs[i]},
                       {"seconds", curve.ys[i]}});
    return arr;
  };
  j["all2all"] = curves(profile.all2all);
  j["p2p"] = curves(profile.p2p);
  j["dense"] = {{{"density", 0.0}, {"seconds", profile.launch_seconds}},
                {{"density", 1.0},
                 {"seconds", profile.launch_seconds + profile.dense_attn_seconds}}};
  j["exchange_overlap"] = profile.exchange_overlap;
  j["replan_seconds"] = profile.replan_seconds;
  j["bytes_per_token_per_head"] = profile.bytes_per_token_per_head;
  return j;
}

inline MachineProfile profile_from_json(const nlohmann::json& j,
                                        const std::string& origin = "profile") {
  try {
    std::vector<ProfileSample> samples;
    for (const char* primitive : {"all2all", "p2p"})
      if (j.contains(primitive))
        for (const auto& e : j.at(primitive))
          samples.push_back({primitive, e.at("degree").get<uint32_t>(),
                             e.at("payload_bytes").get<double>(),
                             e.at("seconds").get<double>()});
    for (const auto& e : j.at("dense"))
      samples.push_back(
          {"dense", 1, e.at("density").get<double>(), e.at("seconds").get<double>()});
    FitOptions options;
    options.exchange_overlap = j.value("exchange_overlap", 1.0);
    options.replan_seconds = j.value("replan_seconds", 0.0);
    options.bytes_per_token_per_head = j.value("bytes_per_token_per_head", 256.0);
    return fit_profile(samples, options);
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(origin + ": invalid profile JSON: " + e.what());
  }
}

inline MachineProfile load_profile(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(detail::read_file(path));
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(path.string() + ": invalid JSON: " + e.what());
  }
  return profile_from_json(j, path.string());
}

inline void save_profile(const MachineProfile& profile, const std::filesystem::path& path) {
  detail::write_file_atomic(path, profile_to_json(profile).dump(2) + "\n");
}

}  // namespace dbsp
