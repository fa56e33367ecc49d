// Serial reference vs OpenMP kernels. Arg 0 selects the serial path.
#include <benchmark/benchmark.h>

#include "mstop/inference.h"
#include "mstop/rng.h"
#include "mstop/trainer.h"

using namespace mstop;

namespace {

Exec exec_of(const benchmark::State& state) { return state.range(0) == 0 ? Exec::kSerial : Exec::kParallel; }

void BM_Gemm(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(1));
  Rng rng(1);
  std::vector<double> a(n * n), b(n * n), out(n * n);
  for (auto& x : a) x = rng.uniform(-1.0, 1.0);
  for (auto& x : b) x = rng.uniform(-1.0, 1.0);
  for (auto _ : state) {
    if (state.range(0) == 0)
      nk::gemm_serial(a, b, out, n, n, n);
    else
      nk::gemm_parallel(a, b, out, n, n, n);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * n * n));
}
BENCHMARK(BM_Gemm)->ArgsProduct({{0, 1}, {64, 128, 256}})->ArgNames({"parallel", "n"});

void BM_GreedyRollouts(benchmark::State& state) {
  Ddtm model(DdtmConfig{});
  model.init(2);
  const auto insts = generate_many({10, 2, 1.5, PrizeMode::kConstant, 3}, 64);
  for (auto _ : state) benchmark::DoNotOptimize(evaluate_greedy(model, insts, exec_of(state)));
  state.SetItemsProcessed(state.iterations() * 64);
}
BENCHMARK(BM_GreedyRollouts)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

void BM_TrainingStep(benchmark::State& state) {
  Ddtm model(DdtmConfig{});
  model.init(2);
  TrainConfig c;
  c.exec = exec_of(state);
  const Batch batch = make_batch(c, 1, 0);
  for (auto _ : state) benchmark::DoNotOptimize(compute_gradients(model, batch, c).loss);
}
BENCHMARK(BM_TrainingStep)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

void BM_ExactSolves(benchmark::State& state) {
  const auto insts = generate_many({10, 2, 1.5, PrizeMode::kConstant, 4}, 32);
  std::vector<double> obj(insts.size());
  for (auto _ : state) {
    for_each_index(insts.size(), exec_of(state), [&](std::size_t i) { obj[i] = solve_exact(insts[i]).objective; });
    benchmark::DoNotOptimize(obj.data());
  }
  state.SetItemsProcessed(state.iterations() * 32);
}
BENCHMARK(BM_ExactSolves)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

void BM_PermAugInference(benchmark::State& state) {
  Ddtm model(DdtmConfig{});
  model.init(2);
  const auto inst = generate({10, 3, 2.0, PrizeMode::kUniform, 5});
  InferConfig c;
  c.strategy = Strategy::kPermAug;
  c.exec = exec_of(state);
  for (auto _ : state) benchmark::DoNotOptimize(infer(model, inst, c).best.objective);
}
BENCHMARK(BM_PermAugInference)->Arg(0)->Arg(1)->ArgName("parallel")->Unit(benchmark::kMillisecond);

}  // namespace

BENCHMARK_MAIN();
