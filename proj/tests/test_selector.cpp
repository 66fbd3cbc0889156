#include <doctest.h>

#include <limits>

#include "dbsp/selector.hpp"
#include "test_util.hpp"

using namespace dbsp;

namespace {

PiecewiseLinear flat_curve(double seconds) {
  return PiecewiseLinear{{0.0, 1e12}, {seconds, seconds}};
}

MachineProfile uniform_profile(double dense, double launch, double a2a, double p2p) {
  MachineProfile profile;
  for (uint32_t degree : {2u, 4u, 8u}) {
    profile.all2all[degree] = flat_curve(a2a);
    profile.p2p[degree] = flat_curve(p2p);
  }
  profile.dense_attn_seconds = dense;
  profile.launch_seconds = launch;
  return profile;
}

}  // namespace

TEST_CASE("selection is the argmin over independently recomputed predictions") {
  Rng rng(808);
  const MachineProfile profile = uniform_profile(0.65, 1e-4, 2e-4, 3e-4);
  const PlannerConfig config;
  for (int i = 0; i < 20; ++i) {
    const AttentionMaskSet set = testing::random_set(rng, 16, 16, 16, rng.next_double());
    SelectorState state(8);
    const Selection selection = select(0, set, profile, config, state);

    double best = std::numeric_limits<double>::infinity();
    for (ParallelStrategy strategy : enumerate_strategies(8)) {
      const PlanOutcome outcome = plan_dual(set, strategy, config, nullptr);
      best = std::min(best, predict_latency(set, strategy, outcome.plan, profile).total_s);
    }
    CHECK(selection.latency.total_s == best);
  }
}

TEST_CASE("exact ties go to the larger ulysses degree") {
  // No launch, no communication: every strategy costs dense * d / |G| exactly.
  const MachineProfile profile = uniform_profile(0.64, 0.0, 0.0, 0.0);
  const AttentionMaskSet set = testing::dense_set(8, 8, 8);
  SelectorState state(8);
  const Selection selection = select(0, set, profile, PlannerConfig{}, state);
  CHECK(selection.strategy == ParallelStrategy{8, 1});
}

TEST_CASE("infinite p2p cost forces pure ulysses") {
  MachineProfile profile = uniform_profile(0.65, 1e-4, 2e-4, 0.0);
  for (uint32_t degree : {2u, 4u, 8u})
    profile.p2p[degree] = flat_curve(std::numeric_limits<double>::infinity());
  Rng rng(9);
  const AttentionMaskSet set = testing::random_set(rng, 8, 8, 8, 0.5);
  SelectorState state(8);
  CHECK(select(0, set, profile, PlannerConfig{}, state).strategy == ParallelStrategy{8, 1});
}

TEST_CASE("per-layer state reuses plans and stays isolated") {
  const MachineProfile profile = uniform_profile(0.65, 1e-4, 2e-4, 3e-4);
  Rng rng(10);
  const AttentionMaskSet set = testing::random_set(rng, 16, 16, 16, 0.5);
  const PlannerConfig config;
  SelectorState state(8);

  const Selection first = select(0, set, profile, config, state);
  const Selection second = select(0, set, profile, config, state);
  if (first.strategy.ulysses > 1) {
    CHECK(first.outcome.head_replanned);
    CHECK_FALSE(second.outcome.head_replanned);  // same mask, same layer: reuse
  }
  CHECK(second.strategy == first.strategy);

  // A different layer has no history, so it must replan.
  const Selection other_layer = select(1, set, profile, config, state);
  if (other_layer.strategy.ulysses > 1) CHECK(other_layer.outcome.head_replanned);

  const auto stored0 = state.stored(0);
  const auto stored1 = state.stored(1);
  REQUIRE(stored0.has_value());
  REQUIRE(stored1.has_value());
  CHECK(stored0->first == first.strategy);
  CHECK_FALSE(state.stored(2).has_value());
}

TEST_CASE("selected strategies respect feasibility limits") {
  const MachineProfile profile = uniform_profile(0.65, 1e-4, 2e-4, 3e-4);
  Rng rng(11);
  const AttentionMaskSet narrow = testing::random_set(rng, 4, 16, 16, 0.5);
  SelectorState state(8);
  const Selection selection = select(0, narrow, profile, PlannerConfig{}, state);
  CHECK(selection.strategy.ulysses <= 4);

  const AttentionMaskSet tiny = testing::random_set(rng, 4, 1, 1, 0.5);
  SelectorState state2(8);
  CHECK_THROWS_AS(select(0, tiny, profile, PlannerConfig{}, state2), config_error);
}
