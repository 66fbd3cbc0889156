#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dbsp/error.hpp"
#include "dbsp/mask.hpp"

namespace dbsp {

// Hybrid sequence-parallel strategy UxRy: every x GPUs form a Ulysses group
// (head parallelism), every y GPUs a ring group (sequence parallelism);
// x * y GPUs total. U|G|R1 is pure Ulysses, U1R|G| pure ring attention.
struct ParallelStrategy {
  uint32_t ulysses = 1;  // x
  uint32_t ring = 1;     // y

  uint32_t gpus() const { return ulysses * ring; }
  auto operator<=>(const ParallelStrategy&) const = default;
};

inline std::string to_string(ParallelStrategy s) {
  return "U" + std::to_string(s.ulysses) + "R" + std::to_string(s.ring);
}

inline ParallelStrategy parse_strategy(std::string_view text) {
  const auto fail = [&] {
    throw config_error("invalid strategy '" + std::string(text) + "' (expected UxRy)");
  };
  if (text.size() < 4 || text[0] != 'U') fail();
  const size_t r = text.find('R', 1);
  if (r == std::string_view::npos || r == 1 || r + 1 >= text.size()) fail();
  ParallelStrategy s;
  try {
    size_t used = 0;
    s.ulysses = static_cast<uint32_t>(std::stoul(std::string(text.substr(1, r - 1)), &used));
    if (used != r - 1) fail();
    s.ring = static_cast<uint32_t>(std::stoul(std::string(text.substr(r + 1)), &used));
    if (used != text.size() - r - 1) fail();
  } catch (const std::exception&) {
    fail();
  }
  if (s.ulysses < 1 || s.ring < 1) fail();
  return s;
}

// All strategies with power-of-two degrees for a power-of-two GPU count,
// ordered by descending Ulysses degree: log2(|G|)+1 in total. These are the
// communication groups built ahead of time so switching costs nothing.
inline std::vector<ParallelStrategy> enumerate_strategies(uint32_t total_gpus) {
  if (total_gpus < 1 || !std::has_single_bit(total_gpus))
    throw config_error("GPU count must be a power of two >= 1, got " +
                       std::to_string(total_gpus));
  std::vector<ParallelStrategy> out;
  for (uint32_t x = total_gpus;; x /= 2) {
    out.push_back({x, total_gpus / x});
    if (x == 1) break;
  }
  return out;
}

// Total, disjoint assignment of heads to Ulysses ranks, Q blocks to ring
// ranks, and KV blocks to ring groups.
struct PartitionPlan {
  std::vector<uint32_t> head_assignment;  // head -> ulysses rank in [0, x)
  std::vector<uint32_t> q_assignment;     // Q block -> ring rank in [0, y)
  std::vector<uint32_t> kv_assignment;    // KV block -> ring group in [0, y)

  bool operator==(const PartitionPlan&) const = default;
};

inline void validate_plan(const AttentionMaskSet& set, ParallelStrategy strategy,
                          const PartitionPlan& plan) {
  if (plan.head_assignment.size() != set.num_heads() ||
      plan.q_assignment.size() != set.num_q_blocks() ||
      plan.kv_assignment.size() != set.num_kv_blocks())
    throw contract_error("plan dimensions do not match the mask set");
  for (uint32_t r : plan.head_assignment)
    if (r >= strategy.ulysses) throw contract_error("head assigned past the Ulysses degree");
  for (uint32_t r : plan.q_assignment)
    if (r >= strategy.ring) throw contract_error("Q block assigned past the ring degree");
  for (uint32_t r : plan.kv_assignment)
    if (r >= strategy.ring) throw contract_error("KV block assigned past the ring degree");
}

// Contiguous near-equal split used by plain sequence parallelism: the state a
// balancing plan starts from, and the baseline it is compared against.
inline PartitionPlan default_plan(const AttentionMaskSet& set, ParallelStrategy strategy) {
  if (strategy.ulysses < 1 || strategy.ring < 1)
    throw config_error("parallel degrees must be >= 1");
  if (strategy.ulysses > set.num_heads())
    throw config_error("Ulysses degree " + std::to_string(strategy.ulysses) +
                       " exceeds head count " + std::to_string(set.num_heads()));
  PartitionPlan plan;
  const uint64_t x = strategy.ulysses, y = strategy.ring;
  const uint64_t heads = set.num_heads(), nq = set.num_q_blocks(), nk = set.num_kv_blocks();
  plan.head_assignment.resize(heads);
  for (uint64_t h = 0; h < heads; ++h)
    plan.head_assignment[h] = static_cast<uint32_t>(h * x / heads);
  plan.q_assignment.resize(nq);
  for (uint64_t q = 0; q < nq; ++q)
    plan.q_assignment[q] = static_cast<uint32_t>(q * y / nq);
  plan.kv_assignment.resize(nk);
  for (uint64_t k = 0; k < nk; ++k)
    plan.kv_assignment[k] = static_cast<uint32_t>(k * y / nk);
  return plan;
}

// Dense block counts per synchronization period and GPU. One period for pure
// Ulysses; one per ring iteration otherwise. GPU flat index is u*y + r.
struct WorkloadTable {
  uint32_t gpus = 1;
  std::vector<std::vector<uint64_t>> counts;  // periods x gpus

  uint32_t periods() const { return static_cast<uint32_t>(counts.size()); }

  uint64_t total() const {
    uint64_t sum = 0;
    for (const auto& row : counts)
      for (uint64_t c : row) sum += c;
    return sum;
  }
};

// Ring schedule: the GPU with ring rank r processes KV group (r + i) mod y at
// iteration i, so a block in KV group g lands in period (g - r) mod y.
inline WorkloadTable workload_table(const AttentionMaskSet& set, ParallelStrategy strategy,
                                    const PartitionPlan& plan) {
  validate_plan(set, strategy, plan);
  const uint32_t x = strategy.ulysses, y = strategy.ring;
  WorkloadTable table;
  table.gpus = x * y;

  if (y == 1) {
    table.counts.assign(1, std::vector<uint64_t>(table.gpus, 0));
    for (uint32_t h = 0; h < set.num_heads(); ++h)
      table.counts[0][plan.head_assignment[h]] += set.head(h).popcount();
    return table;
  }

  table.counts.assign(y, std::vector<uint64_t>(table.gpus, 0));
  const size_t wpr = set.head(0).words_per_row();
  std::vector<std::vector<uint64_t>> group_bits(y, std::vector<uint64_t>(wpr, 0));
  for (uint32_t k = 0; k < set.num_kv_blocks(); ++k)
    group_bits[plan.kv_assignment[k]][k / 64] |= 1ull << (k % 64);

  for (uint32_t h = 0; h < set.num_heads(); ++h) {
    const uint32_t u = plan.head_assignment[h];
    const BlockMask& mask = set.head(h);
    for (uint32_t q = 0; q < set.num_q_blocks(); ++q) {
      const uint32_t r = plan.q_assignment[q];
      const uint32_t gpu = u * y + r;
      for (uint32_t g = 0; g < y; ++g) {
        uint64_t c = 0;
        for (size_t w = 0; w < wpr; ++w)
          c += std::popcount(mask.row_word(q, w) & group_bits[g][w]);
        if (c) table.counts[(g + y - r) % y][gpu] += c;
      }
    }
  }
  return table;
}

// Sparse imbalance ratio: per-period maxima over the ideal balanced share.
// 1.0 is perfect balance; an all-zero table is defined as 1.0 (an empty
// workload costs nothing either way).
inline double imbalance_ratio(const WorkloadTable& table) {
  uint64_t total = 0, sum_max = 0;
  for (const auto& row : table.counts) {
    uint64_t mx = 0;
    for (uint64_t c : row) {
      mx = std::max(mx, c);
      total += c;
    }
    sum_max += mx;
  }
  if (total == 0) return 1.0;
  return static_cast<double>(sum_max) * static_cast<double>(table.gpus) /
         static_cast<double>(total);
}

// Blocks that balancing pulls away from their contiguous home rank, and the
// token payload that has to move between GPUs (K and V both travel).
struct ExchangeVolume {
  uint64_t q_blocks_moved = 0;
  uint64_t kv_blocks_moved = 0;
  uint64_t token_payload = 0;

  bool operator==(const ExchangeVolume&) const = default;
};

inline ExchangeVolume exchange_volume(const AttentionMaskSet& set, ParallelStrategy strategy,
                                      const PartitionPlan& plan) {
  validate_plan(set, strategy, plan);
  ExchangeVolume volume;
  const uint64_t y = strategy.ring;
  const uint64_t nq = set.num_q_blocks(), nk = set.num_kv_blocks();
  for (uint64_t q = 0; q < nq; ++q)
    if (plan.q_assignment[q] != static_cast<uint32_t>(q * y / nq)) ++volume.q_blocks_moved;
  for (uint64_t k = 0; k < nk; ++k)
    if (plan.kv_assignment[k] != static_cast<uint32_t>(k * y / nk)) ++volume.kv_blocks_moved;
  volume.token_payload =
      (volume.q_blocks_moved + 2 * volume.kv_blocks_moved) * set.block_size();
  return volume;
}

inline nlohmann::json workload_to_json(const WorkloadTable& table) {
  nlohmann::json j;
  j["periods"] = table.periods();
  j["gpus"] = table.gpus;
  j["counts"] = table.counts;
  j["rho_s"] = imbalance_ratio(table);
  return j;
}

inline nlohmann::json plan_to_json(ParallelStrategy strategy, const PartitionPlan& plan) {
  nlohmann::json j;
  j["strategy"] = {{"x", strategy.ulysses}, {"y", strategy.ring}};
  j["head_assignment"] = plan.head_assignment;
  j["q_assignment"] = plan.q_assignment;
  j["kv_assignment"] = plan.kv_assignment;
  return j;
}

inline PartitionPlan plan_from_json(const nlohmann::json& j,
                                    ParallelStrategy* strategy_out = nullptr) {
  try {
    if (strategy_out) {
      strategy_out->ulysses = j.at("strategy").at("x").get<uint32_t>();
      strategy_out->ring = j.at("strategy").at("y").get<uint32_t>();
    }
    PartitionPlan plan;
    plan.head_assignment = j.at("head_assignment").get<std::vector<uint32_t>>();
    plan.q_assignment = j.at("q_assignment").get<std::vector<uint32_t>>();
    plan.kv_assignment = j.at("kv_assignment").get<std::vector<uint32_t>>();
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw parse_error(std::string("invalid plan JSON: ") + e.what());
  }
}

}  // namespace dbsp
