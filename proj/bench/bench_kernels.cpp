#include <benchmark/benchmark.h>

#include <random>

#include "fusekd/kernels.hpp"

namespace {

fkd::Matrix<float> random_matrix(std::size_t r, std::size_t c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(-1.0f, 1.0f);
  fkd::Matrix<float> m(r, c);
  for (auto& v : m.flat()) v = u(rng);
  return m;
}

template <bool Parallel>
void BM_GemmNN(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, 256, 1), b = random_matrix(256, 128, 2);
  std::vector<float> bias(128, 0.5f);
  fkd::Matrix<float> out;
  for (auto _ : state) {
    if constexpr (Parallel) fkd::kernels::parallel::gemm_nn(a, b, std::span<const float>(bias), out);
    else fkd::kernels::serial::gemm_nn(a, b, std::span<const float>(bias), out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 256 * 128));
}

template <bool Parallel>
void BM_GemmTN(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto a = random_matrix(n, 256, 3), b = random_matrix(n, 128, 4);
  fkd::Matrix<float> out;
  for (auto _ : state) {
    if constexpr (Parallel) fkd::kernels::parallel::gemm_tn(a, b, out);
    else fkd::kernels::serial::gemm_tn(a, b, out);
    benchmark::DoNotOptimize(out.data());
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(n * 256 * 128));
}

template <bool Parallel>
void BM_Correlation(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  const auto z = random_matrix(n, 100, 5).cast<double>();
  fkd::Matrix<double> out;
  for (auto _ : state) {
    if constexpr (Parallel) out = fkd::kernels::parallel::column_correlation(z);
    else out = fkd::kernels::serial::column_correlation(z);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_GemmNN<false>)->Arg(64)->Arg(1024);
BENCHMARK(BM_GemmNN<true>)->Arg(64)->Arg(1024);
BENCHMARK(BM_GemmTN<false>)->Arg(64)->Arg(1024);
BENCHMARK(BM_GemmTN<true>)->Arg(64)->Arg(1024);
BENCHMARK(BM_Correlation<false>)->Arg(2000);
BENCHMARK(BM_Correlation<true>)->Arg(2000);

BENCHMARK_MAIN();
