#include <benchmark/benchmark.h>

#include "dice/oracle.hpp"
#include "dice/schedules.hpp"

namespace {

dice::ModelConfig bench_model(int batch, int steps) {
  dice::ModelConfig m;
  m.batch = batch;
  m.num_steps = steps;
  return m;
}

void BM_ExpertForward(benchmark::State& state) {
  const dice::ModelConfig cfg;
  const auto model = dice::init_model(cfg, 1);
  const auto x = dice::initial_sample(cfg, 1).values;
  for (auto _ : state) benchmark::DoNotOptimize(dice::expert_forward(model, 0, 0, x));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(x.rows()));
}
BENCHMARK(BM_ExpertForward);

void BM_Gate(benchmark::State& state) {
  const dice::ModelConfig cfg;
  const auto model = dice::init_model(cfg, 1);
  const auto x = dice::initial_sample(cfg, 1).values;
  for (auto _ : state) benchmark::DoNotOptimize(dice::gate(model, 0, x));
}
BENCHMARK(BM_Gate);

void BM_RunSampling(benchmark::State& state) {
  const auto cfg = bench_model(static_cast<int>(state.range(1)), 10);
  const auto model = dice::init_model(cfg, 1);
  const auto x0 = dice::initial_sample(cfg, 1);
  const auto strategy = static_cast<dice::Strategy>(state.range(0));
  dice::PolicyConfig policy;
  policy.warmup = 1;
  dice::RunOptions opts;
  opts.record_timeline = false;
  for (auto _ : state) benchmark::DoNotOptimize(dice::run_sampling(model, x0, strategy, policy, {}, opts));
  state.SetLabel(dice::to_string(strategy));
}
BENCHMARK(BM_RunSampling)
    ->ArgsProduct({{0, 1, 2}, {4, 16}})
    ->Unit(benchmark::kMillisecond);

void BM_OracleRun(benchmark::State& state) {
  dice::ModelConfig cfg;
  cfg.num_layers = 4;
  cfg.num_experts = 8;
  cfg.num_tokens = 16;
  cfg.batch = 2;
  cfg.num_steps = 16;
  const auto model = dice::init_model(cfg, 1);
  const auto x0 = dice::initial_sample(cfg, 1);
  dice::PolicyConfig policy;
  policy.cond = dice::CondStrategy::LowScore;
  policy.refresh_interval = 5;
  for (auto _ : state) benchmark::DoNotOptimize(dice::oracle_run(model, x0, dice::Strategy::Displaced, policy));
}
BENCHMARK(BM_OracleRun)->Unit(benchmark::kMillisecond);

}  // namespace
BENCHMARK_MAIN();
