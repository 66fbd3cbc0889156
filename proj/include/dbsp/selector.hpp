#pragma once

#include <cstdint>
#include <map>
#include <mutex>
#include <optional>
#include <utility>

#include "dbsp/latency.hpp"
#include "dbsp/metrics.hpp"
#include "dbsp/planner.hpp"

namespace dbsp {

// Per-layer memory of the last chosen strategy and its plan. Plans are only
// reusable by the same strategy (assignments are dimensioned per UxRy), so
// the stored pair is keyed by layer and invalidated by a switch.
class SelectorState {
 public:
  explicit SelectorState(uint32_t total_gpus)
      : total_gpus_(total_gpus), prebuilt_(enumerate_strategies(total_gpus)) {}

  uint32_t total_gpus() const { return total_gpus_; }
  const std::vector<ParallelStrategy>& prebuilt_groups() const { return prebuilt_; }

  std::optional<std::pair<ParallelStrategy, PartitionPlan>> stored(int64_t layer) const {
    std::lock_guard<std::mutex> lock(mutex_);
    const auto it = previous_.find(layer);
    if (it == previous_.end()) return std::nullopt;
    return it->second;
  }

  void store(int64_t layer, ParallelStrategy strategy, PartitionPlan plan) {
    std::lock_guard<std::mutex> lock(mutex_);
    previous_[layer] = {strategy, std::move(plan)};
  }

 private:
  uint32_t total_gpus_;
  std::vector<ParallelStrategy> prebuilt_;
  mutable std::mutex mutex_;
  std::map<int64_t, std::pair<ParallelStrategy, PartitionPlan>> previous_;
};

struct Selection {
  ParallelStrategy strategy;
  PlanOutcome outcome;
  LatencyBreakdown latency;
};

// Predicts every feasible pre-built strategy for this call and returns the
// cheapest. Ties go to the larger Ulysses degree (fewer exposed
// synchronization points); the stored plan feeds the reuse check only when
// the layer stayed on the same strategy.
inline Selection select(int64_t layer_id, const AttentionMaskSet& set,
                        const MachineProfile& profile, const PlannerConfig& config,
                        SelectorState& state) {
  std::map<ParallelStrategy, PartitionPlan> prev_plans;
  if (auto stored = state.stored(layer_id))
    prev_plans.emplace(stored->first, std::move(stored->second));

  const std::vector<StrategyPrediction> predictions =
      predict_all(set, profile, state.total_gpus(), config, prev_plans);

  // Enumeration is ordered by descending x, so keeping the first strict
  // minimum implements the tie-break.
  size_t best = 0;
  for (size_t i = 1; i < predictions.size(); ++i)
    if (predictions[i].latency.total_s < predictions[best].latency.total_s) best = i;

  Selection selection{predictions[best].strategy, predictions[best].outcome,
                      predictions[best].latency};
  state.store(layer_id, selection.strategy, selection.outcome.plan);
  return selection;
}

}  // namespace dbsp
