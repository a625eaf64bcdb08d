#include <benchmark/benchmark.h>

#include "mergerl/options.hpp"
#include "mergerl/planner.hpp"
#include "mergerl/training.hpp"

using namespace mergerl;

namespace {

// Ego in lane 2 inside the merge area with n vehicles around it.
AgnosticState busy_state(std::size_t n) {
  AgnosticState st;
  st.ego_speed = 16.0;
  st.ego_lane = 2.0;
  st.distance_to_merge_m = -10.0;
  st.lanes.merge_start_ahead_m = -10.0;
  st.lanes.merge_end_ahead_m = 90.0;
  st.origin_side = Side::Left;
  st.target_side = Side::Right;
  for (std::size_t i = 0; i < n; ++i) {
    SensedVehicle v;
    v.id = static_cast<int>(i + 1);
    v.x = 3.5 * static_cast<double>(static_cast<int>(i % 3) - 1);
    v.y = 12.0 * static_cast<double>(i + 1) * (i % 2 == 0 ? 1.0 : -1.0);
    v.vy = 14.0 + static_cast<double>(i % 4);
    st.others.push_back(v);
  }
  return st;
}

void BM_Plan(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const AgnosticState st = busy_state(n);
  Desires d;
  d.speed = 17.0;
  d.lateral = 3.0;
  d.labels.assign(n, Label::GiveWay);
  const planner::PlannerConfig cfg;
  for (auto _ : state) benchmark::DoNotOptimize(planner::plan(d, st, cfg));
}
BENCHMARK(BM_Plan)->Arg(0)->Arg(4)->Arg(8);

void BM_NetForward(benchmark::State& state) {
  Rng rng(1);
  const auto p = net::NetParams::random({options::kContextInputs, {32, 32, 32}, 3}, rng);
  std::vector<double> x(options::kContextInputs, 0.25);
  for (auto _ : state) benchmark::DoNotOptimize(net::forward(p, x));
}
BENCHMARK(BM_NetForward);

void BM_Traverse(benchmark::State& state) {
  const auto g = options::OptionGraph::default_graph();
  Rng rng(2);
  const auto p = options::init_params(g, rng);
  const AgnosticState st = busy_state(8);
  for (auto _ : state) benchmark::DoNotOptimize(options::traverse(g, p, st, rng));
}
BENCHMARK(BM_Traverse);

void BM_ExpertEpisode(benchmark::State& state) {
  const learn::Environment env;
  const auto experts = learn::uniform_assignment(env, nullptr);
  std::uint64_t e = 0;
  for (auto _ : state) benchmark::DoNotOptimize(learn::run_episode(env, 1, e++, experts));
}
BENCHMARK(BM_ExpertEpisode)->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
