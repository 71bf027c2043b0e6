// Parallel kernels next to their serial references. The conv reference is the
// direct loop nest, so it is slower even on one thread.

#include <benchmark/benchmark.h>

#include <vector>

#include "modelzoo/kernels.hpp"
#include "modelzoo/mcmc.hpp"
#include "modelzoo/oracle.hpp"
#include "modelzoo/rng.hpp"

using namespace modelzoo;

namespace {

void conv_args(benchmark::internal::Benchmark* b) {
  for (long size : {16, 32, 64}) b->Arg(size);
}

void BM_Conv2d(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor x = rng.normal_tensor({n, n, 8});
  const Tensor k = rng.normal_tensor({3, 3, 8, 16});
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_forward(x, k, nullptr, 1, Padding::kSame));
}
BENCHMARK(BM_Conv2d)->Apply(conv_args);

void BM_Conv2dReference(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  Rng rng(1);
  const Tensor x = rng.normal_tensor({n, n, 8});
  const Tensor k = rng.normal_tensor({3, 3, 8, 16});
  for (auto _ : state) benchmark::DoNotOptimize(conv2d_forward_reference(x, k, nullptr, 1, Padding::kSame));
}
BENCHMARK(BM_Conv2dReference)->Apply(conv_args);

void BM_LogSumExp(benchmark::State& state) {
  Rng rng(2);
  std::vector<double> v(static_cast<std::size_t>(state.range(0)));
  for (auto& x : v) x = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(log_sum_exp(v));
}
BENCHMARK(BM_LogSumExp)->Arg(1 << 10)->Arg(1 << 20);

void BM_LogSumExpReference(benchmark::State& state) {
  Rng rng(2);
  std::vector<double> v(static_cast<std::size_t>(state.range(0)));
  for (auto& x : v) x = rng.normal();
  for (auto _ : state) benchmark::DoNotOptimize(log_sum_exp_reference(v));
}
BENCHMARK(BM_LogSumExpReference)->Arg(1 << 10)->Arg(1 << 20);

EnergyGrad quadratic(const Tensor& x) { return {0.5 * x.squared_norm(), x}; }

std::vector<Tensor> chain_inits(std::size_t n) {
  Rng rng(3);
  std::vector<Tensor> inits;
  for (std::size_t i = 0; i < n; ++i) inits.push_back(rng.normal_tensor({16}));
  return inits;
}

void BM_RunChains(benchmark::State& state) {
  const auto inits = chain_inits(static_cast<std::size_t>(state.range(0)));
  const LangevinConfig cfg{0.3, 30, true};
  for (auto _ : state) benchmark::DoNotOptimize(run_chains(inits, quadratic, cfg, Rng(4)));
}
BENCHMARK(BM_RunChains)->Arg(64)->Arg(512);

void BM_RunChainsSerial(benchmark::State& state) {
  const auto inits = chain_inits(static_cast<std::size_t>(state.range(0)));
  const LangevinConfig cfg{0.3, 30, true};
  for (auto _ : state) benchmark::DoNotOptimize(run_chains_serial(inits, quadratic, cfg, Rng(4)));
}
BENCHMARK(BM_RunChainsSerial)->Arg(64)->Arg(512);

}  // namespace

BENCHMARK_MAIN();
