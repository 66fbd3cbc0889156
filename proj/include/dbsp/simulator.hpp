#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include <json.hpp>

#include "dbsp/error.hpp"
#include "dbsp/latency.hpp"
#include "dbsp/mask.hpp"
#include "dbsp/mask_io.hpp"
#include "dbsp/metrics.hpp"
#include "dbsp/parallel.hpp"
#include "dbsp/planner.hpp"
#include "dbsp/selector.hpp"

namespace dbsp {

// Mask chain generated on the fly: step 0 comes from the base spec (layer
// substreams keep layers distinct), later steps flip bits at flip_rate.
// flip_rate 0 models static masks, > 0 models dynamic ones.
struct ChainSource {
  GeneratorSpec base;
  double flip_rate = 0.0;
};

// Masks loaded from step####_layer####.mask files.
struct DirectorySource {
  std::filesystem::path dir;
};

struct ScheduleSpec {
  uint32_t steps = 1;
  uint32_t layers = 1;
  std::variant<ChainSource, DirectorySource> source = ChainSource{};
};

inline std::string mask_filename(uint32_t step, uint32_t layer) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "step%04u_layer%04u.mask", step, layer);
  return buf;
}

// Fully materialized schedule; immutable afterwards, so concurrent
// simulation cells can share one instance.
class ScheduleMasks {
 public:
  static ScheduleMasks build(const ScheduleSpec& spec) {
    if (spec.steps < 1 || spec.layers < 1)
      throw config_error("schedule needs at least 1 step and 1 layer");
    ScheduleMasks out;
    out.steps_ = spec.steps;
    out.layers_ = spec.layers;
    out.sets_.reserve(static_cast<size_t>(spec.steps) * spec.layers);

    if (const auto* chain = std::get_if<ChainSource>(&spec.source)) {
      if (!(chain->flip_rate >= 0.0 && chain->flip_rate <= 1.0))
        throw config_error("flip rate must be in [0, 1]");
      std::vector<AttentionMaskSet> current;
      current.reserve(spec.layers);
      for (uint32_t layer = 0; layer < spec.layers; ++layer) {
        GeneratorSpec layer_spec = chain->base;
        layer_spec.seed = mix_seed(chain->base.seed, layer);
        current.push_back(generate_mask_set(layer_spec));
      }
      for (uint32_t step = 0; step < spec.steps; ++step)
        for (uint32_t layer = 0; layer < spec.layers; ++layer) {
          if (step > 0)
            current[layer] = perturb_mask_set(current[layer], chain->flip_rate,
                                              mix_seed(chain->base.seed, layer, step));
          out.sets_.push_back(current[layer]);
        }
      return out;
    }

    const auto& dir = std::get<DirectorySource>(spec.source).dir;
    for (uint32_t step = 0; step < spec.steps; ++step)
      for (uint32_t layer = 0; layer < spec.layers; ++layer) {
        const std::filesystem::path path = dir / mask_filename(step, layer);
        if (!std::filesystem::exists(path))
          throw io_error("missing mask file for step " + std::to_string(step) +
                         ", layer " + std::to_string(layer) + ": " + path.string());
        out.sets_.push_back(load_mask_set(path));
        const AttentionMaskSet& first = out.sets_[layer];
        const AttentionMaskSet& cur = out.sets_.back();
        if (cur.num_heads() != first.num_heads() ||
            cur.num_q_blocks() != first.num_q_blocks() ||
            cur.num_kv_blocks() != first.num_kv_blocks() ||
            cur.block_size() != first.block_size())
          throw contract_error("mask dimensions change across steps at step " +
                               std::to_string(step) + ", layer " + std::to_string(layer));
      }
    return out;
  }

  uint32_t steps() const { return steps_; }
  uint32_t layers() const { return layers_; }

  const AttentionMaskSet& at(uint32_t step, uint32_t layer) const {
    return sets_[static_cast<size_t>(step) * layers_ + layer];
  }

 private:
  uint32_t steps_ = 0, layers_ = 0;
  std::vector<AttentionMaskSet> sets_;
};

struct Policy {
  enum class Mode { fixed, dynamic };

  Mode mode = Mode::dynamic;
  ParallelStrategy fixed_strategy{1, 1};  // used when mode == fixed
  uint32_t total_gpus = 1;                // |G|; fixed mode derives it from the strategy
  bool balancing = true;
  PlannerConfig planner;
  double nonattn_seconds_per_call = 0.0;  // optional constant for non-attention time
  double switch_penalty_seconds = 0.0;    // optional charge when dynamic switches

  uint32_t gpus() const {
    return mode == Mode::fixed ? fixed_strategy.gpus() : total_gpus;
  }

  void validate() const {
    planner.validate();
    if (mode == Mode::dynamic && !balancing)
      throw config_error("dynamic strategy selection requires balancing");
    if (nonattn_seconds_per_call < 0.0 || switch_penalty_seconds < 0.0)
      throw config_error("per-call costs must be >= 0");
  }
};

struct CallRecord {
  uint32_t step = 0;
  uint32_t layer = 0;
  ParallelStrategy strategy;
  double rho_pre = 1.0;
  double rho_post = 1.0;
  bool replanned = false;
  uint64_t exchange_bytes = 0;  // modeled payload moved by balancing
  double attn_seconds = 0.0;    // compute + exposed p2p + imbalance penalty
  double call_seconds = 0.0;    // everything charged to this call
};

struct SimReport {
  uint32_t steps = 0;
  uint32_t layers = 0;
  double total_seconds = 0.0;
  double attn_seconds = 0.0;
  uint64_t replan_count = 0;
  std::map<std::string, uint64_t> strategy_histogram;
  std::vector<CallRecord> records;
};

namespace detail {

template <typename Fn>
auto with_call_context(uint32_t step, uint32_t layer, Fn&& fn) {
  const auto context = [&](const std::string& what) {
    return "step " + std::to_string(step) + ", layer " + std::to_string(layer) + ": " +
           what;
  };
  try {
    return fn();
  } catch (const config_error& e) {
    throw config_error(context(e.what()));
  } catch (const parse_error& e) {
    throw parse_error(context(e.what()));
  } catch (const io_error& e) {
    throw io_error(context(e.what()));
  } catch (const contract_error& e) {
    throw contract_error(context(e.what()));
  }
}

}  // namespace detail

// Replays the schedule call by call: plan (or not), predict, accumulate.
// Analytic and deterministic; replan cost is charged on head replans and the
// optional switch penalty when a layer changes strategy between steps.
inline SimReport simulate(const ScheduleMasks& masks, const Policy& policy,
                          const MachineProfile& profile) {
  policy.validate();
  SimReport report;
  report.steps = masks.steps();
  report.layers = masks.layers();
  report.records.reserve(static_cast<size_t>(masks.steps()) * masks.layers());

  SelectorState state(policy.gpus());
  std::vector<std::optional<PartitionPlan>> prev_plan(masks.layers());
  std::vector<std::optional<ParallelStrategy>> last_strategy(masks.layers());

  for (uint32_t step = 0; step < masks.steps(); ++step)
    for (uint32_t layer = 0; layer < masks.layers(); ++layer)
      detail::with_call_context(step, layer, [&] {
        const AttentionMaskSet& set = masks.at(step, layer);
        CallRecord record;
        record.step = step;
        record.layer = layer;
        LatencyBreakdown breakdown;
        PlanOutcome outcome;

        if (!policy.balancing) {
          record.strategy = policy.fixed_strategy;
          outcome.plan = default_plan(set, record.strategy);
          outcome.rho_pre = outcome.rho_post =
              imbalance_ratio(workload_table(set, record.strategy, outcome.plan));
          breakdown = predict_latency(set, record.strategy, outcome.plan, profile);
        } else if (policy.mode == Policy::Mode::fixed) {
          record.strategy = policy.fixed_strategy;
          outcome = plan_dual(set, record.strategy, policy.planner,
                              prev_plan[layer] ? &*prev_plan[layer] : nullptr);
          breakdown = predict_latency(set, record.strategy, outcome.plan, profile,
                                      outcome.head_replanned);
          prev_plan[layer] = outcome.plan;
        } else {
          Selection selection = select(layer, set, profile, policy.planner, state);
          record.strategy = selection.strategy;
          outcome = std::move(selection.outcome);
          breakdown = selection.latency;
          // Selection compares steady states; the simulator owns the charge.
          if (outcome.head_replanned) {
            breakdown.replan_s = profile.replan_seconds;
            breakdown.total_s += profile.replan_seconds;
          }
        }

        double extra = policy.nonattn_seconds_per_call;
        if (policy.mode == Policy::Mode::dynamic && last_strategy[layer] &&
            *last_strategy[layer] != record.strategy)
          extra += policy.switch_penalty_seconds;
        last_strategy[layer] = record.strategy;

        record.rho_pre = outcome.rho_pre;
        record.rho_post = outcome.rho_post;
        record.replanned = outcome.head_replanned;
        const ExchangeVolume volume = exchange_volume(set, record.strategy, outcome.plan);
        record.exchange_bytes = static_cast<uint64_t>(std::llround(
            exchange_payload_bytes(mask_shape(set), record.strategy, volume, profile)));
        record.attn_seconds = breakdown.attn_seconds();
        record.call_seconds = breakdown.total_s + extra;

        report.total_seconds += record.call_seconds;
        report.attn_seconds += record.attn_seconds;
        if (record.replanned) ++report.replan_count;
        ++report.strategy_histogram[to_string(record.strategy)];
        report.records.push_back(std::move(record));
      });
  return report;
}

inline SimReport simulate(const ScheduleSpec& schedule, const Policy& policy,
                          const MachineProfile& profile) {
  return simulate(ScheduleMasks::build(schedule), policy, profile);
}

// ---------------------------------------------------------------------------
// Comparison grid: every feasible fixed strategy with and without balancing,
// plus dynamic selection; speedups are normalized to the best unbalanced cell.

struct CompareCell {
  bool dynamic = false;
  ParallelStrategy strategy;  // meaningful for fixed cells
  bool balanced = false;
  double total_seconds = 0.0;
  double attn_seconds = 0.0;
  uint64_t replan_count = 0;
  uint64_t exchange_bytes = 0;
  double speedup_total = 1.0;
  double speedup_attn = 1.0;
};

struct CompareTable {
  std::vector<CompareCell> cells;
};

inline CompareTable compare(const ScheduleMasks& masks, const MachineProfile& profile,
                            const PlannerConfig& config, uint32_t total_gpus,
                            double nonattn_seconds_per_call = 0.0) {
  uint32_t min_heads = ~0u, min_blocks = ~0u;
  for (uint32_t layer = 0; layer < masks.layers(); ++layer) {
    const AttentionMaskSet& set = masks.at(0, layer);
    min_heads = std::min(min_heads, set.num_heads());
    min_blocks = std::min({min_blocks, set.num_q_blocks(), set.num_kv_blocks()});
  }

  std::vector<Policy> policies;
  for (ParallelStrategy strategy : enumerate_strategies(total_gpus)) {
    if (strategy.ulysses > min_heads || strategy.ring > min_blocks) continue;
    for (bool balanced : {false, true}) {
      Policy p;
      p.mode = Policy::Mode::fixed;
      p.fixed_strategy = strategy;
      p.total_gpus = total_gpus;
      p.balancing = balanced;
      p.planner = config;
      p.nonattn_seconds_per_call = nonattn_seconds_per_call;
      policies.push_back(p);
    }
  }
  if (policies.empty())
    throw config_error("no feasible strategy for this schedule and GPU count");
  {
    Policy p;
    p.mode = Policy::Mode::dynamic;
    p.total_gpus = total_gpus;
    p.balancing = true;
    p.planner = config;
    p.nonattn_seconds_per_call = nonattn_seconds_per_call;
    policies.push_back(p);
  }

  std::vector<SimReport> reports(policies.size());
  parallel_for(policies.size(), [&](size_t i) {
    reports[i] = simulate(masks, policies[i], profile);
  });

  CompareTable table;
  for (size_t i = 0; i < policies.size(); ++i) {
    CompareCell cell;
    cell.dynamic = policies[i].mode == Policy::Mode::dynamic;
    cell.strategy = policies[i].fixed_strategy;
    cell.balanced = policies[i].balancing;
    cell.total_seconds = reports[i].total_seconds;
    cell.attn_seconds = reports[i].attn_seconds;
    cell.replan_count = reports[i].replan_count;
    for (const CallRecord& r : reports[i].records) cell.exchange_bytes += r.exchange_bytes;
    table.cells.push_back(cell);
  }

  // Fixed cells are normalized against their own strategy's unbalanced run;
  // the dynamic row against the best unbalanced baseline.
  double best_total = 0.0, best_attn = 0.0;
  std::map<ParallelStrategy, std::pair<double, double>> unbalanced_base;
  for (const CompareCell& cell : table.cells)
    if (!cell.balanced && !cell.dynamic) {
      unbalanced_base[cell.strategy] = {cell.total_seconds, cell.attn_seconds};
      if (best_total == 0.0 || cell.total_seconds < best_total) {
        best_total = cell.total_seconds;
        best_attn = cell.attn_seconds;
      }
    }
  for (CompareCell& cell : table.cells) {
    const auto [base_total, base_attn] =
        cell.dynamic ? std::pair{best_total, best_attn} : unbalanced_base[cell.strategy];
    cell.speedup_total = cell.total_seconds > 0.0 ? base_total / cell.total_seconds : 1.0;
    cell.speedup_attn = cell.attn_seconds > 0.0 ? base_attn / cell.attn_seconds : 1.0;
  }
  return table;
}

inline CompareTable compare(const ScheduleSpec& schedule, const MachineProfile& profile,
                            const PlannerConfig& config, uint32_t total_gpus,
                            double nonattn_seconds_per_call = 0.0) {
  return compare(ScheduleMasks::build(schedule), profile, config, total_gpus,
                 nonattn_seconds_per_call);
}

// ---------------------------------------------------------------------------
// Parameter sweeps over the reuse threshold or the exchange reward.

enum class SweepParam { reuse_threshold, exchange_reward };

inline const char* to_string(SweepParam p) {
  return p == SweepParam::reuse_threshold ? "Ps" : "Rb";
}

struct SweepRow {
  double value = 0.0;
  double mean_rho_post = 1.0;
  uint64_t replan_count = 0;
  uint64_t exchange_bytes = 0;
  double total_seconds = 0.0;
  double attn_seconds = 0.0;
};

inline std::vector<SweepRow> sweep(const ScheduleMasks& masks, const MachineProfile& profile,
                                   const Policy& base_policy, SweepParam param,
                                   const std::vector<double>& values) {
  if (values.empty()) throw config_error("sweep needs at least one value");
  std::vector<SweepRow> rows(values.size());
  parallel_for(values.size(), [&](size_t i) {
    Policy policy = base_policy;
    if (param == SweepParam::reuse_threshold)
      policy.planner.reuse_threshold = values[i];
    else
      policy.planner.exchange_reward = values[i];
    const SimReport report = simulate(masks, policy, profile);
    SweepRow row;
    row.value = values[i];
    double rho_sum = 0.0;
    for (const CallRecord& r : report.records) {
      rho_sum += r.rho_post;
      row.exchange_bytes += r.exchange_bytes;
    }
    row.mean_rho_post = report.records.empty() ? 1.0 : rho_sum / report.records.size();
    row.replan_count = report.replan_count;
    row.total_seconds = report.total_seconds;
    row.attn_seconds = report.attn_seconds;
    rows[i] = row;
  });
  return rows;
}

inline std::vector<SweepRow> sweep(const ScheduleSpec& schedule,
                                   const MachineProfile& profile, const Policy& base_policy,
                                   SweepParam param, const std::vector<double>& values) {
  return sweep(ScheduleMasks::build(schedule), profile, base_policy, param, values);
}

// ---------------------------------------------------------------------------
// Machine-readable outputs. Doubles are printed with %.17g so files are
// byte-identical across runs.

namespace detail {

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline nlohmann::json report_to_json(const SimReport& report) {
  nlohmann::json j;
  j["steps"] = report.steps;
  j["layers"] = report.layers;
  j["total_seconds"] = report.total_seconds;
  j["attn_seconds"] = report.attn_seconds;
  j["replan_count"] = report.replan_count;
  j["strategy_histogram"] = report.strategy_histogram;
  nlohmann::json records = nlohmann::json::array();
  for (const CallRecord& r : report.records)
    records.push_back({{"step", r.step},
                       {"layer", r.layer},
                       {"strategy", to_string(r.strategy)},
                       {"rho_pre", r.rho_pre},
                       {"rho_post", r.rho_post},
                       {"replanned", r.replanned},
                       {"exchange_bytes", r.exchange_bytes},
                       {"attn_seconds", r.attn_seconds},
                       {"call_seconds", r.call_seconds}});
  j["records"] = std::move(records);
  return j;
}

inline std::string trace_to_csv(const SimReport& report) {
  std::string out = "step,layer,strategy,rho_pre,rho_post,replanned,exchange_bytes,call_seconds\n";
  for (const CallRecord& r : report.records) {
    out += std::to_string(r.step) + ',' + std::to_string(r.layer) + ',' +
           to_string(r.strategy) + ',' + detail::fmt_double(r.rho_pre) + ',' +
           detail::fmt_double(r.rho_post) + ',' + (r.replanned ? "1" : "0") + ',' +
           std::to_string(r.exchange_bytes) + ',' + detail::fmt_double(r.call_seconds) +
           '\n';
  }
  return out;
}

// Selection trace as JSON lines, one object per call.
inline std::string trace_to_jsonl(const SimReport& report) {
  std::string out;
  for (const CallRecord& r : report.records) {
    nlohmann::json j{{"step", r.step},
                     {"layer", r.layer},
                     {"chosen", to_string(r.strategy)},
                     {"predicted_ms", r.call_seconds * 1e3},
                     {"rho_post", r.rho_post},
                     {"head_replanned", r.replanned}};
    out += j.dump() + '\n';
  }
  return out;
}

inline std::string compare_to_csv(const CompareTable& table) {
  std::string out =
      "mode,strategy,balanced,total_seconds,attn_seconds,replan_count,exchange_bytes,"
      "speedup_total,speedup_attn\n";
  for (const CompareCell& c : table.cells) {
    out += std::string(c.dynamic ? "dynamic" : "fixed") + ',' +
           (c.dynamic ? "-" : to_string(c.strategy)) + ',' + (c.balanced ? "1" : "0") +
           ',' + detail::fmt_double(c.total_seconds) + ',' +
           detail::fmt_double(c.attn_seconds) + ',' + std::to_string(c.replan_count) +
           ',' + std::to_string(c.exchange_bytes) + ',' +
           detail::fmt_double(c.speedup_total) + ',' + detail::fmt_double(c.speedup_attn) +
           '\n';
  }
  return out;
}

inline nlohmann::json compare_to_json(const CompareTable& table) {
  nlohmann::json arr = nlohmann::json::array();
  for (const CompareCell& c : table.cells)
    arr.push_back({{"mode", c.dynamic ? "dynamic" : "fixed"},
                   {"strategy", c.dynamic ? "-" : to_string(c.strategy)},
                   {"balanced", c.balanced},
                   {"total_seconds", c.total_seconds},
                   {"attn_seconds", c.attn_seconds},
                   {"replan_count", c.replan_count},
                   {"exchange_bytes", c.exchange_bytes},
                   {"speedup_total", c.speedup_total},
                   {"speedup_attn", c.speedup_attn}});
  return arr;
}

inline std::string sweep_to_csv(SweepParam param, const std::vector<SweepRow>& rows) {
  std::string out =
      "param,value,mean_rho_post,replan_count,exchange_bytes,total_seconds,attn_seconds\n";
  for (const SweepRow& r : rows) {
    out += std::string(to_string(param)) + ',' + detail::fmt_double(r.value) + ',' +
           detail::fmt_double(r.mean_rho_post) + ',' + std::to_string(r.replan_count) +
           ',' + std::to_string(r.exchange_bytes) + ',' +
           detail::fmt_double(r.total_seconds) + ',' + detail::fmt_double(r.attn_seconds) +
           '\n';
  }
  return out;
}

inline nlohmann::json sweep_to_json(SweepParam param, const std::vector<SweepRow>& rows) {
  nlohmann::json arr = nlohmann::json::array();
  for (const SweepRow& r : rows)
    // JSON has no infinity; the sentinel reward becomes the string "inf".
    arr.push_back({{"param", to_string(param)},
                   {"value", std::isinf(r.value) ? nlohmann::json("inf")
                                                 : nlohmann::json(r.value)},
                   {"mean_rho_post", r.mean_rho_post},
                   {"replan_count", r.replan_count},
                   {"exchange_bytes", r.exchange_bytes},
                   {"total_seconds", r.total_seconds},
                   {"attn_seconds", r.attn_seconds}});
  return arr;
}

}  // namespace dbsp
