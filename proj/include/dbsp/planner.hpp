#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <vector>

#include "dbsp/error.hpp"
#include "dbsp/mask.hpp"
#include "dbsp/metrics.hpp"

namespace dbsp {

// Sentinel reward that pins every block to its contiguous home rank, trading
// all balance for zero inter-GPU exchange.
inline constexpr double kInfiniteReward = std::numeric_limits<double>::infinity();

struct PlannerConfig {
  // Reuse the previous step's head plan while its imbalance ratio on the
  // current mask stays at or below this threshold.
  double reuse_threshold = 1.10;  // P_s
  // Bias subtracted from a block's home rank load during the greedy scan,
  // scaled by the block's own weight; kInfiniteReward keeps everything home.
  double exchange_reward = 0.0;  // R_b

  void validate() const {
    if (!(reuse_threshold >= 1.0))
      throw config_error("reuse threshold must be >= 1");
    if (std::isnan(exchange_reward) || exchange_reward < 0.0)
      throw config_error("exchange reward must be >= 0 or infinite");
  }
};

struct PlanOutcome {
  PartitionPlan plan;
  bool head_replanned = false;
  double rho_pre = 1.0;   // imbalance of the reused-or-default plan on this mask
  double rho_post = 1.0;  // imbalance of the emitted plan
};

// Head-summed dense block grid S[q * Nk + k] = number of heads whose mask has
// bit (q, k). Block-level planning works on this grid: head balance is the
// head partitioner's job, so heads are eliminated by summation.
inline std::vector<uint64_t> summed_grid(const AttentionMaskSet& set) {
  const uint32_t nq = set.num_q_blocks(), nk = set.num_kv_blocks();
  std::vector<uint64_t> grid(static_cast<size_t>(nq) * nk, 0);
  for (const BlockMask& mask : set.masks())
    for (uint32_t q = 0; q < nq; ++q)
      for (size_t w = 0; w < mask.words_per_row(); ++w) {
        uint64_t word = mask.row_word(q, w);
        while (word) {
          const uint32_t k = static_cast<uint32_t>(w * 64 + std::countr_zero(word));
          ++grid[static_cast<size_t>(q) * nk + k];
          word &= word - 1;
        }
      }
  return grid;
}

// Imbalance of head weights grouped by Ulysses rank alone (one period): the
// quantity the reuse threshold is checked against.
inline double head_level_imbalance(const std::vector<uint64_t>& weights,
                                   const std::vector<uint32_t>& assignment, uint32_t x) {
  std::vector<uint64_t> loads(x, 0);
  uint64_t total = 0;
  for (size_t h = 0; h < weights.size(); ++h) {
    loads[assignment[h]] += weights[h];
    total += weights[h];
  }
  if (total == 0) return 1.0;
  const uint64_t max_load = *std::max_element(loads.begin(), loads.end());
  return static_cast<double>(max_load) * x / static_cast<double>(total);
}

namespace detail {

// Indices ordered by descending weight; equal weights stay in index order so
// plans are reproducible.
inline std::vector<uint32_t> descending_order(const std::vector<uint64_t>& weights) {
  std::vector<uint32_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0u);
  std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
    if (weights[a] != weights[b]) return weights[a] > weights[b];
    return a < b;
  });
  return order;
}

}  // namespace detail

// Longest-processing-time greedy: heaviest head first, always onto the rank
// with the least accumulated blocks (ties to the lowest rank index).
inline std::vector<uint32_t> partition_heads(const AttentionMaskSet& set, uint32_t x) {
  const uint32_t heads = set.num_heads();
  if (x < 1 || x > heads)
    throw config_error("Ulysses degree " + std::to_string(x) +
                       " must be in [1, " + std::to_string(heads) + "]");
  const std::vector<uint64_t> weights = blocks_per_head(set);
  std::vector<uint32_t> assignment(heads, 0);
  std::vector<uint64_t> loads(x, 0);
  for (uint32_t h : detail::descending_order(weights)) {
    uint32_t best = 0;
    for (uint32_t r = 1; r < x; ++r)
      if (loads[r] < loads[best]) best = r;
    assignment[h] = best;
    loads[best] += weights[h];
  }
  return assignment;
}

namespace detail {

// Greedy with a home-rank bias: when considering block i, its home rank's
// accumulated load is viewed as reduced by reward * weight[i]. The bias only
// affects the choice; true loads grow by the plain weight.
inline std::vector<uint32_t> biased_greedy(const std::vector<uint64_t>& weights, uint32_t y,
                                           double reward) {
  const size_t n = weights.size();
  std::vector<uint32_t> assignment(n, 0);
  if (std::isinf(reward)) {
    for (size_t i = 0; i < n; ++i)
      assignment[i] = static_cast<uint32_t>(i * y / n);
    return assignment;
  }
  std::vector<uint64_t> loads(y, 0);
  for (uint32_t i : descending_order(weights)) {
    const uint32_t home = static_cast<uint32_t>(static_cast<uint64_t>(i) * y / n);
    const double bias = reward * static_cast<double>(weights[i]);
    uint32_t best = 0;
    double best_load = static_cast<double>(loads[0]) - (home == 0 ? bias : 0.0);
    for (uint32_t r = 1; r < y; ++r) {
      const double load = static_cast<double>(loads[r]) - (home == r ? bias : 0.0);
      if (load < best_load) {
        best = r;
        best_load = load;
      }
    }
    assignment[i] = best;
    loads[best] += weights[i];
  }
  return assignment;
}

}  // namespace detail

// Block-level partitioning: Q blocks across ring ranks and KV blocks across
// ring iterations, both by the biased greedy over the head-summed grid.
inline std::pair<std::vector<uint32_t>, std::vector<uint32_t>> partition_blocks(
    const AttentionMaskSet& set, uint32_t y, double reward) {
  const uint32_t nq = set.num_q_blocks(), nk = set.num_kv_blocks();
  if (y < 1 || y > std::min(nq, nk))
    throw config_error("ring degree " + std::to_string(y) + " must be in [1, " +
                       std::to_string(std::min(nq, nk)) + "]");
  if (std::isnan(reward) || reward < 0.0)
    throw config_error("exchange reward must be >= 0 or infinite");

  const std::vector<uint64_t> grid = summed_grid(set);
  std::vector<uint64_t> q_weights(nq, 0), kv_weights(nk, 0);
  for (uint32_t q = 0; q < nq; ++q)
    for (uint32_t k = 0; k < nk; ++k) {
      const uint64_t s = grid[static_cast<size_t>(q) * nk + k];
      q_weights[q] += s;
      kv_weights[k] += s;
    }
  return {detail::biased_greedy(q_weights, y, reward),
          detail::biased_greedy(kv_weights, y, reward)};
}

// Dual-balancing decomposition: decide head reuse vs. replan against the
// reuse threshold, then always recompute the block level on the current mask
// (block planning is cheap, only the head branch is gated).
inline PlanOutcome plan_dual(const AttentionMaskSet& set, ParallelStrategy strategy,
                             const PlannerConfig& config,
                             const PartitionPlan* prev = nullptr) {
  config.validate();
  const uint32_t x = strategy.ulysses, y = strategy.ring;
  if (prev) validate_plan(set, strategy, *prev);

  PlanOutcome out;
  {
    const PartitionPlan& pre = prev ? *prev : default_plan(set, strategy);
    out.rho_pre = imbalance_ratio(workload_table(set, strategy, pre));
  }

  if (x > 1) {
    bool reuse = false;
    if (prev) {
      const std::vector<uint64_t> weights = blocks_per_head(set);
      reuse = head_level_imbalance(weights, prev->head_assignment, x) <=
              config.reuse_threshold;
    }
    if (reuse) {
      out.plan.head_assignment = prev->head_assignment;
    } else {
      out.plan.head_assignment = partition_heads(set, x);
      out.head_replanned = true;
    }
  } else {
    out.plan.head_assignment.assign(set.num_heads(), 0);
  }

  if (y > 1) {
    auto [q_assignment, kv_assignment] =
        partition_blocks(set, y, config.exchange_reward);
    out.plan.q_assignment = std::move(q_assignment);
    out.plan.kv_assignment = std::move(kv_assignment);
  } else {
    out.plan.q_assignment.assign(set.num_q_blocks(), 0);
    out.plan.kv_assignment.assign(set.num_kv_blocks(), 0);
  }

  out.rho_post = imbalance_ratio(workload_table(set, strategy, out.plan));
  return out;
}

// ---------------------------------------------------------------------------
// Exhaustive oracles. Test-grade tools: they refuse search spaces past the
// guard rather than run for hours.

namespace detail {

inline uint64_t checked_power(uint64_t base, uint64_t exponent, uint64_t cap) {
  uint64_t value = 1;
  for (uint64_t i = 0; i < exponent; ++i) {
    if (value > cap / base) return cap + 1;
    value *= base;
  }
  return value;
}

// Lexicographic odometer over assignment vectors (last element fastest).
inline bool next_assignment(std::vector<uint32_t>& a, uint32_t radix) {
  for (size_t i = a.size(); i-- > 0;) {
    if (++a[i] < radix) return true;
    a[i] = 0;
  }
  return false;
}

constexpr uint64_t kSearchSpaceGuard = 10'000'000;

}  // namespace detail

// Minimizes the maximum per-rank head load by full enumeration; first optimum
// in lexicographic assignment order wins.
inline std::vector<uint32_t> brute_force_heads(const AttentionMaskSet& set, uint32_t x) {
  const uint32_t heads = set.num_heads();
  if (x < 1 || x > heads)
    throw config_error("Ulysses degree " + std::to_string(x) +
                       " must be in [1, " + std::to_string(heads) + "]");
  if (detail::checked_power(x, heads, detail::kSearchSpaceGuard) >
      detail::kSearchSpaceGuard)
    throw search_space_error("head search space exceeds " +
                             std::to_string(detail::kSearchSpaceGuard) + " assignments");
  const std::vector<uint64_t> weights = blocks_per_head(set);
  std::vector<uint32_t> assignment(heads, 0), best_assignment(heads, 0);
  uint64_t best_max = std::numeric_limits<uint64_t>::max();
  std::vector<uint64_t> loads(x);
  do {
    std::fill(loads.begin(), loads.end(), 0);
    for (uint32_t h = 0; h < heads; ++h) loads[assignment[h]] += weights[h];
    const uint64_t max_load = *std::max_element(loads.begin(), loads.end());
    if (max_load < best_max) {
      best_max = max_load;
      best_assignment = assignment;
    }
  } while (detail::next_assignment(assignment, x));
  return best_assignment;
}

struct BlockOracleResult {
  std::vector<uint32_t> q_assignment;
  std::vector<uint32_t> kv_assignment;
  double rho = 1.0;
};

// Joint enumeration of Q and KV assignments on a head-summed grid, minimizing
// the ring imbalance ratio. grid is row-major Nq x Nk.
inline BlockOracleResult brute_force_blocks(const std::vector<uint64_t>& grid, uint32_t nq,
                                            uint32_t nk, uint32_t y) {
  if (grid.size() != static_cast<size_t>(nq) * nk)
    throw contract_error("summed grid size does not match its dimensions");
  if (y < 1 || y > std::min(nq, nk))
    throw config_error("ring degree out of range for the grid");
  const uint64_t q_space = detail::checked_power(y, nq, detail::kSearchSpaceGuard);
  const uint64_t k_space = detail::checked_power(y, nk, detail::kSearchSpaceGuard);
  if (q_space > detail::kSearchSpaceGuard || k_space > detail::kSearchSpaceGuard ||
      q_space > detail::kSearchSpaceGuard / k_space)
    throw search_space_error("block search space exceeds " +
                             std::to_string(detail::kSearchSpaceGuard) + " assignments");

  uint64_t total = 0;
  for (uint64_t s : grid) total += s;

  BlockOracleResult best;
  best.q_assignment.assign(nq, 0);
  best.kv_assignment.assign(nk, 0);
  best.rho = std::numeric_limits<double>::infinity();
  if (total == 0) {
    best.rho = 1.0;
    return best;
  }

  std::vector<uint32_t> qa(nq, 0);
  std::vector<uint64_t> cell(static_cast<size_t>(y) * y);
  do {
    std::vector<uint32_t> ka(nk, 0);
    do {
      std::fill(cell.begin(), cell.end(), 0);
      for (uint32_t q = 0; q < nq; ++q) {
        const uint32_t r = qa[q];
        for (uint32_t k = 0; k < nk; ++k) {
          const uint64_t s = grid[static_cast<size_t>(q) * nk + k];
          if (!s) continue;
          const uint32_t period = (ka[k] + y - r) % y;
          cell[static_cast<size_t>(period) * y + r] += s;
        }
      }
      uint64_t sum_max = 0;
      for (uint32_t i = 0; i < y; ++i) {
        uint64_t mx = 0;
        for (uint32_t r = 0; r < y; ++r)
          mx = std::max(mx, cell[static_cast<size_t>(i) * y + r]);
        sum_max += mx;
      }
      const double rho = static_cast<double>(sum_max) * y / static_cast<double>(total);
      if (rho < best.rho) {
        best.rho = rho;
        best.q_assignment = qa;
        best.kv_assignment = ka;
      }
    } while (detail::next_assignment(ka, y));
  } while (detail::next_assignment(qa, y));
  return best;
}

}  // namespace dbsp
