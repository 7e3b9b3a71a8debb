#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "eegvlm/kernels/kernels.hpp"
#include "eegvlm/kernels/reference.hpp"

namespace k = eegvlm::kernels;

namespace {

std::vector<double> random_vector(std::size_t n, unsigned seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  std::vector<double> v(n);
  for (double& x : v) x = nd(rng);
  return v;
}

k::ConvGeometry conv_case(int channels, int size) {
  return {channels, size, size, channels, 3, 1, 1};
}

void BM_GemmReference(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_vector(std::size_t(n) * n, 1), b = random_vector(std::size_t(n) * n, 2);
  std::vector<double> c(std::size_t(n) * n);
  for (auto _ : state) {
    k::reference::gemm(false, false, n, n, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

void BM_GemmParallel(benchmark::State& state) {
  const int n = static_cast<int>(state.range(0));
  const auto a = random_vector(std::size_t(n) * n, 1), b = random_vector(std::size_t(n) * n, 2);
  std::vector<double> c(std::size_t(n) * n);
  for (auto _ : state) {
    k::gemm(false, false, n, n, n, a, b, c, false);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * 2LL * n * n * n);
}

void BM_ConvReference(benchmark::State& state) {
  const auto g = conv_case(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const auto in = random_vector(g.input_size(), 3), w = random_vector(g.weight_size(), 4);
  std::vector<double> out(g.output_size());
  for (auto _ : state) {
    k::reference::conv2d_forward(g, in, w, out);
    benchmark::DoNotOptimize(out.data());
  }
}

void BM_ConvParallel(benchmark::State& state) {
  const auto g = conv_case(static_cast<int>(state.range(0)), static_cast<int>(state.range(1)));
  const auto in = random_vector(g.input_size(), 3), w = random_vector(g.weight_size(), 4);
  std::vector<double> out(g.output_size()), scratch;
  for (auto _ : state) {
    k::conv2d_forward(g, in, w, out, scratch);
    benchmark::DoNotOptimize(out.data());
  }
}

}  // namespace

BENCHMARK(BM_GemmReference)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_GemmParallel)->Arg(64)->Arg(128)->Arg(256);
BENCHMARK(BM_ConvReference)->Args({16, 56})->Args({64, 28});
BENCHMARK(BM_ConvParallel)->Args({16, 56})->Args({64, 28});

BENCHMARK_MAIN();
