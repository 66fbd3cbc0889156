// dbsp: planner and execution simulator for sequence-parallel block-sparse
// attention. Subcommands: gen, plan, eval, fit, simulate, compare, sweep.
// Summaries go to stdout; machine-readable artifacts go to files.

#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "dbsp/latency.hpp"
#include "dbsp/mask.hpp"
#include "dbsp/mask_io.hpp"
#include "dbsp/metrics.hpp"
#include "dbsp/planner.hpp"
#include "dbsp/selector.hpp"
#include "dbsp/simulator.hpp"

namespace fs = std::filesystem;

namespace {

double parse_value_or_inf(const std::string& text) {
  if (text == "inf" || text == "INF" || text == "infinite")
    return std::numeric_limits<double>::infinity();
  try {
    size_t used = 0;
    const double v = std::stod(text, &used);
    if (used != text.size()) throw std::invalid_argument(text);
    return v;
  } catch (const std::exception&) {
    throw dbsp::config_error("cannot parse numeric value '" + text + "'");
  }
}

std::vector<double> parse_value_list(const std::string& text) {
  std::vector<double> values;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) values.push_back(parse_value_or_inf(item));
  if (values.empty()) throw dbsp::config_error("empty value list '" + text + "'");
  return values;
}

void write_text(const fs::path& path, const std::string& content) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  dbsp::detail::write_file_atomic(path, content);
}

std::vector<dbsp::ProfileSample> read_samples_csv(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw dbsp::io_error("cannot open '" + path.string() + "'");
  std::vector<dbsp::ProfileSample> samples;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    if (lineno == 1 && line.rfind("primitive", 0) == 0) continue;  // header
    std::stringstream ss(line);
    std::string primitive, degree, x, seconds;
    if (!std::getline(ss, primitive, ',') || !std::getline(ss, degree, ',') ||
        !std::getline(ss, x, ',') || !std::getline(ss, seconds))
      throw dbsp::parse_error(path.string() + ":" + std::to_string(lineno) +
                              ": expected primitive,degree,payload,seconds");
    dbsp::ProfileSample s;
    s.primitive = primitive;
    try {
      s.degree = static_cast<uint32_t>(std::stoul(degree));
      s.x = std::stod(x);
      s.seconds = std::stod(seconds);
    } catch (const std::exception&) {
      throw dbsp::parse_error(path.string() + ":" + std::to_string(lineno) +
                              ": malformed number");
    }
    samples.push_back(std::move(s));
  }
  return samples;
}

// Shared schedule/generator flags for gen, simulate, compare and sweep.
struct ScheduleFlags {
  uint32_t heads = 8, q_blocks = 16, kv_blocks = 16, block_size = 64;
  std::string pattern = "random";
  double dmin = 0.5, dmax = 0.5, skew = 1.0;
  uint32_t steps = 1, layers = 1;
  double flip = 0.0;
  std::string masks_dir;  // when set, load instead of generating

  void add_generator_options(CLI::App* cmd) {
    cmd->add_option("--heads", heads, "attention heads");
    cmd->add_option("--qblocks", q_blocks, "Q blocks per head");
    cmd->add_option("--kvblocks", kv_blocks, "KV blocks per head");
    cmd->add_option("--block-size", block_size, "tokens per block");
    cmd->add_option("--pattern", pattern, "random|banded|clustered");
    cmd->add_option("--dmin", dmin, "minimum per-head density");
    cmd->add_option("--dmax", dmax, "maximum per-head density");
    cmd->add_option("--skew", skew, "density ramp exponent");
    cmd->add_option("--steps", steps, "denoising steps");
    cmd->add_option("--layers", layers, "transformer layers");
    cmd->add_option("--flip", flip, "per-step bit flip rate");
  }

  dbsp::GeneratorSpec generator_spec(uint64_t seed) const {
    dbsp::GeneratorSpec spec;
    spec.num_heads = heads;
    spec.num_q_blocks = q_blocks;
    spec.num_kv_blocks = kv_blocks;
    spec.block_size = block_size;
    spec.pattern = dbsp::parse_pattern(pattern);
    spec.min_density = dmin;
    spec.max_density = dmax;
    spec.skew = skew;
    spec.seed = seed;
    return spec;
  }

  dbsp::ScheduleSpec schedule_spec(uint64_t seed) const {
    dbsp::ScheduleSpec spec;
    spec.steps = steps;
    spec.layers = layers;
    if (!masks_dir.empty())
      spec.source = dbsp::DirectorySource{masks_dir};
    else
      spec.source = dbsp::ChainSource{generator_spec(seed), flip};
    return spec;
  }
};

struct PolicyFlags {
  std::string policy = "dynamic";
  std::string strategy;  // UxRy, required for fixed
  bool no_balance = false;
  double ps = 1.10;
  std::string rb = "0";
  double nonattn = 0.0;
  double switch_penalty = 0.0;

  void add_options(CLI::App* cmd, bool with_policy = true) {
    if (with_policy) {
      cmd->add_option("--policy", policy, "fixed|dynamic");
      cmd->add_option("--strategy", strategy, "UxRy strategy for fixed policy");
      cmd->add_flag("--no-balance", no_balance, "disable dual balancing");
    }
    cmd->add_option("--ps", ps, "head plan reuse threshold P_s");
    cmd->add_option("--rb", rb, "block exchange reward R_b (number or inf)");
    cmd->add_option("--nonattn-seconds", nonattn, "non-attention seconds per call");
    cmd->add_option("--switch-penalty", switch_penalty,
                    "seconds charged when the dynamic policy switches strategy");
  }

  dbsp::Policy make_policy(uint32_t gpus) const {
    dbsp::Policy p;
    if (policy == "fixed") {
      if (strategy.empty())
        throw dbsp::config_error("--policy fixed requires --strategy UxRy");
      p.mode = dbsp::Policy::Mode::fixed;
      p.fixed_strategy = dbsp::parse_strategy(strategy);
      p.total_gpus = p.fixed_strategy.gpus();
    } else if (policy == "dynamic") {
      p.mode = dbsp::Policy::Mode::dynamic;
      p.total_gpus = gpus;
    } else {
      throw dbsp::config_error("unknown policy '" + policy + "' (fixed|dynamic)");
    }
    p.balancing = !no_balance;
    p.planner.reuse_threshold = ps;
    p.planner.exchange_reward = parse_value_or_inf(rb);
    p.nonattn_seconds_per_call = nonattn;
    p.switch_penalty_seconds = switch_penalty;
    return p;
  }
};

int run(int argc, char** argv) {
  CLI::App app{"planner and execution simulator for sequence-parallel "
               "block-sparse attention"};
  app.require_subcommand(1);

  uint64_t seed = 0;
  uint32_t gpus = 8;
  std::string format = "csv";
  std::string out_dir;
  app.add_option("--seed", seed, "global random seed")->capture_default_str();
  app.add_option("--gpus", gpus, "total GPU count (power of two)")->capture_default_str();
  app.add_option("--format", format, "table output format: csv|json")
      ->capture_default_str();
  app.add_option("--out-dir", out_dir, "directory that relative output paths resolve under");
  const auto resolve = [&out_dir](const std::string& path) -> fs::path {
    if (out_dir.empty() || fs::path(path).is_absolute()) return path;
    return fs::path(out_dir) / path;
  };

  // gen -----------------------------------------------------------------
  auto* gen = app.add_subcommand("gen", "generate a chain of mask files");
  ScheduleFlags gen_flags;
  gen_flags.add_generator_options(gen);
  std::string gen_out = "masks";
  gen->add_option("--out", gen_out, "output directory")->capture_default_str();

  // plan ----------------------------------------------------------------
  auto* plan_cmd = app.add_subcommand("plan", "produce a dual-balanced partition plan");
  std::string plan_mask, plan_strategy, plan_prev, plan_out = "plan.json";
  PolicyFlags plan_policy;
  plan_cmd->add_option("--mask", plan_mask, "mask file")->required();
  plan_cmd->add_option("--strategy", plan_strategy, "UxRy strategy")->required();
  plan_cmd->add_option("--prev", plan_prev, "previous plan JSON for reuse");
  plan_cmd->add_option("--out", plan_out, "output plan JSON")->capture_default_str();
  plan_policy.add_options(plan_cmd, /*with_policy=*/false);

  // eval ----------------------------------------------------------------
  auto* eval_cmd = app.add_subcommand("eval", "evaluate imbalance of a mask under a plan");
  std::string eval_mask, eval_strategy, eval_plan, eval_out = "workload.json";
  eval_cmd->add_option("--mask", eval_mask, "mask file")->required();
  eval_cmd->add_option("--strategy", eval_strategy, "UxRy strategy")->required();
  eval_cmd->add_option("--plan", eval_plan, "plan JSON (default: contiguous split)");
  eval_cmd->add_option("--out", eval_out, "output workload JSON")->capture_default_str();

  // fit -----------------------------------------------------------------
  auto* fit_cmd = app.add_subcommand("fit", "fit a machine profile from samples");
  std::string fit_samples, fit_out = "profile.json";
  double fit_overlap = 1.0, fit_replan = 0.0, fit_bpt = 256.0;
  fit_cmd->add_option("--samples", fit_samples, "CSV: primitive,degree,payload,seconds")
      ->required();
  fit_cmd->add_option("--overlap", fit_overlap, "exchange overlap fraction")
      ->capture_default_str();
  fit_cmd->add_option("--replan-seconds", fit_replan, "seconds per head replan")
      ->capture_default_str();
  fit_cmd->add_option("--bytes-per-token-head", fit_bpt, "payload bytes per token per head")
      ->capture_default_str();
  fit_cmd->add_option("--out", fit_out, "output profile JSON")->capture_default_str();

  // simulate --------------------------------------------------------------
  auto* sim_cmd = app.add_subcommand("simulate", "replay a denoising schedule");
  ScheduleFlags sim_flags;
  PolicyFlags sim_policy;
  std::string sim_profile, sim_out = "report.json", sim_trace, sim_jsonl;
  sim_flags.add_generator_options(sim_cmd);
  sim_cmd->add_option("--masks", sim_flags.masks_dir, "mask directory (overrides generator)");
  sim_cmd->add_option("--profile", sim_profile, "machine profile JSON")->required();
  sim_policy.add_options(sim_cmd);
  sim_cmd->add_option("--out", sim_out, "output report JSON")->capture_default_str();
  sim_cmd->add_option("--trace", sim_trace, "optional per-call CSV trace");
  sim_cmd->add_option("--jsonl", sim_jsonl, "optional selection trace as JSON lines");

  // compare ---------------------------------------------------------------
  auto* cmp_cmd = app.add_subcommand("compare", "compare strategies and balancing");
  ScheduleFlags cmp_flags;
  PolicyFlags cmp_policy;
  std::string cmp_profile, cmp_out = "compare.csv";
  cmp_flags.add_generator_options(cmp_cmd);
  cmp_cmd->add_option("--masks", cmp_flags.masks_dir, "mask directory (overrides generator)");
  cmp_cmd->add_option("--profile", cmp_profile, "machine profile JSON")->required();
  cmp_policy.add_options(cmp_cmd, /*with_policy=*/false);
  cmp_cmd->add_option("--out", cmp_out, "output table")->capture_default_str();

  // sweep -----------------------------------------------------------------
  auto* sweep_cmd = app.add_subcommand("sweep", "sweep P_s or R_b over a schedule");
  ScheduleFlags sweep_flags;
  PolicyFlags sweep_policy;
  std::string sweep_profile, sweep_param, sweep_values, sweep_out = "sweep.csv";
  sweep_flags.add_generator_options(sweep_cmd);
  sweep_cmd->add_option("--masks", sweep_flags.masks_dir,
                        "mask directory (overrides generator)");
  sweep_cmd->add_option("--profile", sweep_profile, "machine profile JSON")->required();
  sweep_cmd->add_option("--param", sweep_param, "Ps|Rb")->required();
  sweep_cmd->add_option("--values", sweep_values, "comma-separated values (inf allowed)")
      ->required();
  sweep_policy.add_options(sweep_cmd);
  sweep_cmd->add_option("--out", sweep_out, "output table")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    // Help and version exit 0 through CLI11; bad flags are configuration errors.
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  if (gen->parsed()) {
    dbsp::ScheduleSpec spec = gen_flags.schedule_spec(seed);
    const dbsp::ScheduleMasks masks = dbsp::ScheduleMasks::build(spec);
    const fs::path gen_dir = resolve(gen_out);
    fs::create_directories(gen_dir);
    for (uint32_t step = 0; step < masks.steps(); ++step) {
      double density_sum = 0.0;
      for (uint32_t layer = 0; layer < masks.layers(); ++layer) {
        const dbsp::AttentionMaskSet& set = masks.at(step, layer);
        dbsp::save_mask_set(set, gen_dir / dbsp::mask_filename(step, layer));
        density_sum += dbsp::density(set);
      }
      std::printf("step %u: mean density %.4f over %u layer(s)\n", step,
                  density_sum / masks.layers(), masks.layers());
    }
    std::printf("wrote %u mask file(s) to %s\n", masks.steps() * masks.layers(),
                gen_dir.string().c_str());
    return 0;
  }

  if (plan_cmd->parsed()) {
    const dbsp::AttentionMaskSet set = dbsp::load_mask_set(plan_mask);
    const dbsp::ParallelStrategy strategy = dbsp::parse_strategy(plan_strategy);
    dbsp::PlannerConfig config;
    config.reuse_threshold = plan_policy.ps;
    config.exchange_reward = parse_value_or_inf(plan_policy.rb);
    std::optional<dbsp::PartitionPlan> prev;
    if (!plan_prev.empty()) {
      const auto j = nlohmann::json::parse(dbsp::detail::read_file(plan_prev), nullptr,
                                           /*allow_exceptions=*/true);
      dbsp::ParallelStrategy prev_strategy;
      prev = dbsp::plan_from_json(j, &prev_strategy);
      if (!(prev_strategy == strategy))
        throw dbsp::contract_error("previous plan was made for " +
                                   dbsp::to_string(prev_strategy) + ", not " +
                                   dbsp::to_string(strategy));
    }
    const dbsp::PlanOutcome outcome =
        dbsp::plan_dual(set, strategy, config, prev ? &*prev : nullptr);
    nlohmann::json j = dbsp::plan_to_json(strategy, outcome.plan);
    j["head_replanned"] = outcome.head_replanned;
    j["rho_pre"] = outcome.rho_pre;
    j["rho_post"] = outcome.rho_post;
    write_text(resolve(plan_out), j.dump(2) + "\n");
    std::printf("%s: rho_pre %.6f -> rho_post %.6f (head_replanned=%s)\n",
                dbsp::to_string(strategy).c_str(), outcome.rho_pre, outcome.rho_post,
                outcome.head_replanned ? "true" : "false");
    return 0;
  }

  if (eval_cmd->parsed()) {
    const dbsp::AttentionMaskSet set = dbsp::load_mask_set(eval_mask);
    const dbsp::ParallelStrategy strategy = dbsp::parse_strategy(eval_strategy);
    dbsp::PartitionPlan plan;
    if (!eval_plan.empty()) {
      const auto j = nlohmann::json::parse(dbsp::detail::read_file(eval_plan));
      dbsp::ParallelStrategy plan_strategy;
      plan = dbsp::plan_from_json(j, &plan_strategy);
      if (!(plan_strategy == strategy))
        throw dbsp::contract_error("plan was made for " + dbsp::to_string(plan_strategy) +
                                   ", not " + dbsp::to_string(strategy));
    } else {
      plan = dbsp::default_plan(set, strategy);
    }
    const dbsp::WorkloadTable table = dbsp::workload_table(set, strategy, plan);
    write_text(resolve(eval_out), dbsp::workload_to_json(table).dump(2) + "\n");
    std::printf("%s: rho_s %.6f over %u period(s) x %u GPU(s)\n",
                dbsp::to_string(strategy).c_str(), dbsp::imbalance_ratio(table),
                table.periods(), table.gpus);
    return 0;
  }

  if (fit_cmd->parsed()) {
    dbsp::FitOptions options;
    options.exchange_overlap = fit_overlap;
    options.replan_seconds = fit_replan;
    options.bytes_per_token_per_head = fit_bpt;
    const dbsp::MachineProfile profile =
        dbsp::fit_profile(read_samples_csv(fit_samples), options);
    const fs::path fit_path = resolve(fit_out);
    write_text(fit_path, dbsp::profile_to_json(profile).dump(2) + "\n");
    std::printf("fitted profile: dense %.6g s, launch %.6g s, %zu all2all curve(s), "
                "%zu p2p curve(s) -> %s\n",
                profile.dense_attn_seconds, profile.launch_seconds,
                profile.all2all.size(), profile.p2p.size(), fit_path.string().c_str());
    return 0;
  }

  if (sim_cmd->parsed()) {
    const dbsp::MachineProfile profile = dbsp::load_profile(sim_profile);
    const dbsp::Policy policy = sim_policy.make_policy(gpus);
    const dbsp::SimReport report =
        dbsp::simulate(sim_flags.schedule_spec(seed), policy, profile);
    write_text(resolve(sim_out), dbsp::report_to_json(report).dump(2) + "\n");
    if (!sim_trace.empty()) write_text(resolve(sim_trace), dbsp::trace_to_csv(report));
    if (!sim_jsonl.empty()) write_text(resolve(sim_jsonl), dbsp::trace_to_jsonl(report));
    std::printf("simulated %u step(s) x %u layer(s): total %.6f s, attention %.6f s, "
                "%" PRIu64 " replan(s)\n",
                report.steps, report.layers, report.total_seconds, report.attn_seconds,
                report.replan_count);
    for (const auto& [name, count] : report.strategy_histogram)
      std::printf("  %s: %" PRIu64 " call(s)\n", name.c_str(), count);
    return 0;
  }

  if (cmp_cmd->parsed()) {
    const dbsp::MachineProfile profile = dbsp::load_profile(cmp_profile);
    dbsp::PlannerConfig config;
    config.reuse_threshold = cmp_policy.ps;
    config.exchange_reward = parse_value_or_inf(cmp_policy.rb);
    const dbsp::CompareTable table = dbsp::compare(
        cmp_flags.schedule_spec(seed), profile, config, gpus, cmp_policy.nonattn);
    write_text(resolve(cmp_out), format == "json" ? dbsp::compare_to_json(table).dump(2) + "\n"
                                         : dbsp::compare_to_csv(table));
    for (const dbsp::CompareCell& c : table.cells)
      std::printf("%-8s %-6s balanced=%d total %.6f s (x%.3f)\n",
                  c.dynamic ? "dynamic" : "fixed",
                  c.dynamic ? "-" : dbsp::to_string(c.strategy).c_str(), c.balanced,
                  c.total_seconds, c.speedup_total);
    return 0;
  }

  if (sweep_cmd->parsed()) {
    dbsp::SweepParam param;
    if (sweep_param == "Ps" || sweep_param == "ps")
      param = dbsp::SweepParam::reuse_threshold;
    else if (sweep_param == "Rb" || sweep_param == "rb")
      param = dbsp::SweepParam::exchange_reward;
    else
      throw dbsp::config_error("unknown sweep parameter '" + sweep_param + "' (Ps|Rb)");
    const dbsp::MachineProfile profile = dbsp::load_profile(sweep_profile);
    const dbsp::Policy policy = sweep_policy.make_policy(gpus);
    const std::vector<dbsp::SweepRow> rows = dbsp::sweep(
        sweep_flags.schedule_spec(seed), profile, policy, param, parse_value_list(sweep_values));
    write_text(resolve(sweep_out), format == "json" ? dbsp::sweep_to_json(param, rows).dump(2) + "\n"
                                           : dbsp::sweep_to_csv(param, rows));
    for (const dbsp::SweepRow& r : rows)
      std::printf("%s=%-8g mean rho_post %.4f, %" PRIu64 " replan(s), %" PRIu64
                  " exchange byte(s)\n",
                  dbsp::to_string(param), r.value, r.mean_rho_post, r.replan_count,
                  r.exchange_bytes);
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const dbsp::config_error& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return 2;
  } catch (const dbsp::io_error& e) {
    std::fprintf(stderr, "i/o error: %s\n", e.what());
    return 3;
  } catch (const dbsp::contract_error& e) {
    std::fprintf(stderr, "contract violation: %s\n", e.what());
    return 4;
  } catch (const nlohmann::json::exception& e) {
    std::fprintf(stderr, "parse error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}
