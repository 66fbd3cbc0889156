#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "dbsp/error.hpp"
#include "dbsp/rng.hpp"

namespace dbsp {

// One attention head's block-wise sparse mask. Bit (q, k) set means the tile
// between Q block q and KV block k is computed. Rows are Q-major and packed
// into 64-bit words; padding bits past num_kv_blocks are kept zero so word
// popcounts and equality are exact.
class BlockMask {
 public:
  BlockMask(uint32_t num_q_blocks, uint32_t num_kv_blocks)
      : nq_(num_q_blocks),
        nk_(num_kv_blocks),
        words_per_row_((static_cast<size_t>(num_kv_blocks) + 63) / 64),
        words_(static_cast<size_t>(num_q_blocks) * words_per_row_, 0) {
    if (nq_ == 0 || nk_ == 0)
      throw config_error("BlockMask dimensions must be positive");
  }

  uint32_t num_q_blocks() const { return nq_; }
  uint32_t num_kv_blocks() const { return nk_; }
  size_t words_per_row() const { return words_per_row_; }

  bool get(uint32_t q, uint32_t k) const {
    return (words_[word_index(q, k)] >> (k % 64)) & 1ull;
  }

  void set(uint32_t q, uint32_t k, bool value) {
    uint64_t& w = words_[word_index(q, k)];
    const uint64_t bit = 1ull << (k % 64);
    w = value ? (w | bit) : (w & ~bit);
  }

  void flip(uint32_t q, uint32_t k) { words_[word_index(q, k)] ^= 1ull << (k % 64); }

  uint64_t row_word(uint32_t q, size_t w) const {
    return words_[static_cast<size_t>(q) * words_per_row_ + w];
  }

  uint64_t row_popcount(uint32_t q) const {
    uint64_t sum = 0;
    for (size_t w = 0; w < words_per_row_; ++w)
      sum += std::popcount(row_word(q, w));
    return sum;
  }

  // Number of dense blocks; the unit of attention workload.
  uint64_t popcount() const {
    uint64_t sum = 0;
    for (uint64_t w : words_) sum += std::popcount(w);
    return sum;
  }

  bool operator==(const BlockMask&) const = default;

 private:
  size_t word_index(uint32_t q, uint32_t k) const {
    return static_cast<size_t>(q) * words_per_row_ + k / 64;
  }

  uint32_t nq_;
  uint32_t nk_;
  size_t words_per_row_;
  std::vector<uint64_t> words_;
};

// Per-head masks for one attention invocation. All heads share the same grid
// dimensions. block_size (tokens per block) is metadata used only for payload
// volume computations; the planner never looks inside a block.
class AttentionMaskSet {
 public:
  AttentionMaskSet(std::vector<BlockMask> masks, uint32_t block_size)
      : masks_(std::move(masks)), block_size_(block_size) {
    if (masks_.empty()) throw config_error("mask set needs at least one head");
    if (block_size_ == 0) throw config_error("block_size must be positive");
    for (const BlockMask& m : masks_) {
      if (m.num_q_blocks() != masks_[0].num_q_blocks() ||
          m.num_kv_blocks() != masks_[0].num_kv_blocks())
        throw config_error("all heads must share identical grid dimensions");
    }
  }

  uint32_t num_heads() const { return static_cast<uint32_t>(masks_.size()); }
  uint32_t num_q_blocks() const { return masks_[0].num_q_blocks(); }
  uint32_t num_kv_blocks() const { return masks_[0].num_kv_blocks(); }
  uint32_t block_size() const { return block_size_; }

  const BlockMask& head(uint32_t j) const { return masks_[j]; }
  const std::vector<BlockMask>& masks() const { return masks_; }

  uint64_t grid_cells() const {
    return static_cast<uint64_t>(num_heads()) * num_q_blocks() * num_kv_blocks();
  }

  bool operator==(const AttentionMaskSet&) const = default;

 private:
  std::vector<BlockMask> masks_;
  uint32_t block_size_;
};

enum class MaskPattern { uniform_random, banded_diagonal, clustered };

inline const char* to_string(MaskPattern p) {
  switch (p) {
    case MaskPattern::uniform_random: return "random";
    case MaskPattern::banded_diagonal: return "banded";
    case MaskPattern::clustered: return "clustered";
  }
  return "?";
}

inline MaskPattern parse_pattern(std::string_view s) {
  if (s == "random" || s == "uniform-random") return MaskPattern::uniform_random;
  if (s == "banded" || s == "banded-diagonal") return MaskPattern::banded_diagonal;
  if (s == "clustered") return MaskPattern::clustered;
  throw config_error("unknown mask pattern '" + std::string(s) +
                     "' (expected random|banded|clustered)");
}

// Synthesizes mask sets shaped like block-sparse attention outputs. Head h's
// target density ramps from min_density to max_density with the skew exponent,
// which creates controlled head-level imbalance.
struct GeneratorSpec {
  uint32_t num_heads = 1;
  uint32_t num_q_blocks = 1;
  uint32_t num_kv_blocks = 1;
  uint32_t block_size = 64;
  MaskPattern pattern = MaskPattern::uniform_random;
  double min_density = 0.5;
  double max_density = 0.5;
  double skew = 1.0;
  uint64_t seed = 0;

  void validate() const {
    if (num_heads == 0 || num_q_blocks == 0 || num_kv_blocks == 0 || block_size == 0)
      throw config_error("generator dimensions must be positive");
    if (!(min_density >= 0.0) || !(max_density <= 1.0) || !(min_density <= max_density))
      throw config_error("density law requires 0 <= min_density <= max_density <= 1");
    if (!(skew > 0.0)) throw config_error("skew exponent must be > 0");
  }

  // For a single head the ramp position is taken as 0, i.e. min_density.
  double head_density(uint32_t h) const {
    const double t =
        num_heads > 1 ? std::pow(static_cast<double>(h) / (num_heads - 1), skew) : 0.0;
    return min_density + (max_density - min_density) * t;
  }
};

namespace detail {

inline BlockMask generate_uniform_head(uint32_t nq, uint32_t nk, double density, Rng& rng) {
  BlockMask m(nq, nk);
  for (uint32_t q = 0; q < nq; ++q)
    for (uint32_t k = 0; k < nk; ++k)
      if (rng.bernoulli(density)) m.set(q, k, true);
  return m;
}

// Smallest band around the q = k*Nq/Nk diagonal that realizes the target
// count; ties at the cutoff distance resolved by linear cell index.
inline BlockMask generate_banded_head(uint32_t nq, uint32_t nk, double density) {
  BlockMask m(nq, nk);
  const uint64_t cells = static_cast<uint64_t>(nq) * nk;
  const uint64_t target = static_cast<uint64_t>(std::llround(density * static_cast<double>(cells)));
  if (target == 0) return m;
  std::vector<std::pair<double, uint64_t>> order;
  order.reserve(cells);
  for (uint32_t q = 0; q < nq; ++q)
    for (uint32_t k = 0; k < nk; ++k) {
      const double dist = std::abs(static_cast<double>(q) -
                                   static_cast<double>(k) * nq / nk);
      order.emplace_back(dist, static_cast<uint64_t>(q) * nk + k);
    }
  std::sort(order.begin(), order.end());
  for (uint64_t i = 0; i < target; ++i) {
    const uint64_t cell = order[i].second;
    m.set(static_cast<uint32_t>(cell / nk), static_cast<uint32_t>(cell % nk), true);
  }
  return m;
}

// Random rectangles until the target count is reached; an overshooting
// rectangle is clipped in row-major order. If rectangles stop covering new
// cells, the remainder is filled by a row-major scan.
inline BlockMask generate_clustered_head(uint32_t nq, uint32_t nk, double density, Rng& rng) {
  BlockMask m(nq, nk);
  const uint64_t cells = static_cast<uint64_t>(nq) * nk;
  const uint64_t target = static_cast<uint64_t>(std::llround(density * static_cast<double>(cells)));
  uint64_t count = 0;
  int stalled = 0;
  while (count < target && stalled < 256) {
    const uint32_t h = 1 + static_cast<uint32_t>(rng.next_below(std::max(1u, nq / 4)));
    const uint32_t w = 1 + static_cast<uint32_t>(rng.next_below(std::max(1u, nk / 4)));
    const uint32_t q0 = static_cast<uint32_t>(rng.next_below(nq - h + 1));
    const uint32_t k0 = static_cast<uint32_t>(rng.next_below(nk - w + 1));
    uint64_t added = 0;
    for (uint32_t q = q0; q < q0 + h && count < target; ++q)
      for (uint32_t k = k0; k < k0 + w && count < target; ++k)
        if (!m.get(q, k)) {
          m.set(q, k, true);
          ++count;
          ++added;
        }
    stalled = added == 0 ? stalled + 1 : 0;
  }
  for (uint32_t q = 0; q < nq && count < target; ++q)
    for (uint32_t k = 0; k < nk && count < target; ++k)
      if (!m.get(q, k)) {
        m.set(q, k, true);
        ++count;
      }
  return m;
}

}  // namespace detail

// Deterministic for a fixed spec: each head draws from its own substream.
inline AttentionMaskSet generate_mask_set(const GeneratorSpec& spec) {
  spec.validate();
  std::vector<BlockMask> masks;
  masks.reserve(spec.num_heads);
  for (uint32_t h = 0; h < spec.num_heads; ++h) {
    const double density = spec.head_density(h);
    Rng rng(mix_seed(spec.seed, h));
    switch (spec.pattern) {
      case MaskPattern::uniform_random:
        masks.push_back(detail::generate_uniform_head(spec.num_q_blocks,
                                                      spec.num_kv_blocks, density, rng));
        break;
      case MaskPattern::banded_diagonal:
        masks.push_back(detail::generate_banded_head(spec.num_q_blocks,
                                                     spec.num_kv_blocks, density));
        break;
      case MaskPattern::clustered:
        masks.push_back(detail::generate_clustered_head(spec.num_q_blocks,
                                                        spec.num_kv_blocks, density, rng));
        break;
    }
  }
  return AttentionMaskSet(std::move(masks), spec.block_size);
}

// Flips each bit independently with probability flip_rate; models mask
// evolution between adjacent denoising steps.
inline AttentionMaskSet perturb_mask_set(const AttentionMaskSet& set, double flip_rate,
                                         uint64_t seed) {
  if (!(flip_rate >= 0.0) || !(flip_rate <= 1.0))
    throw config_error("flip_rate must be in [0, 1]");
  if (flip_rate == 0.0) return set;
  std::vector<BlockMask> masks = set.masks();
  for (uint32_t h = 0; h < set.num_heads(); ++h) {
    Rng rng(mix_seed(seed, h));
    for (uint32_t q = 0; q < set.num_q_blocks(); ++q)
      for (uint32_t k = 0; k < set.num_kv_blocks(); ++k)
        if (rng.bernoulli(flip_rate)) masks[h].flip(q, k);
  }
  return AttentionMaskSet(std::move(masks), set.block_size());
}

inline uint64_t total_blocks(const AttentionMaskSet& set) {
  uint64_t sum = 0;
  for (const BlockMask& m : set.masks()) sum += m.popcount();
  return sum;
}

// Fraction of dense blocks over all heads.
inline double density(const AttentionMaskSet& set) {
  return static_cast<double>(total_blocks(set)) / static_cast<double>(set.grid_cells());
}

// Element j is the dense block count of head j's mask.
inline std::vector<uint64_t> blocks_per_head(const AttentionMaskSet& set) {
  std::vector<uint64_t> counts;
  counts.reserve(set.num_heads());
  for (const BlockMask& m : set.masks()) counts.push_back(m.popcount());
  return counts;
}

}  // namespace dbsp
