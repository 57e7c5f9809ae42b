// Parallel kernels against their serial references. Run with
// OMP_NUM_THREADS set to compare thread counts.

#include <benchmark/benchmark.h>

#include <random>
#include <vector>

#include "keyrestore/attention.hpp"
#include "keyrestore/kernels.hpp"
#include "keyrestore/reference.hpp"

using namespace keyrestore;

namespace {

std::vector<float> random_vec(std::size_t n, std::uint64_t seed = 1) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> d(-1.0f, 1.0f);
  std::vector<float> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

void BM_GemmParallel(benchmark::State& st) {
  const std::size_t n = st.range(0);
  auto a = random_vec(n * n), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : st) {
    kernels::gemm<float>(false, false, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * 2 * n * n * n);
}

void BM_GemmReference(benchmark::State& st) {
  const std::size_t n = st.range(0);
  auto a = random_vec(n * n), b = random_vec(n * n, 2);
  std::vector<float> c(n * n);
  for (auto _ : st) {
    reference::gemm<float>(false, false, n, n, n, 1.0f, a.data(), n, b.data(), n, 0.0f, c.data(), n);
    benchmark::DoNotOptimize(c.data());
  }
  st.SetItemsProcessed(st.iterations() * 2 * n * n * n);
}

// A desk-profile feature-extractor convolution: 9 frames of 64x64, 32 -> 32 channels.
kernels::ConvGeometry conv_geometry(std::size_t channels) { return {64, 64, channels, channels, 3, 1, 1}; }

void BM_ConvParallel(benchmark::State& st) {
  const auto g = conv_geometry(st.range(0));
  const std::size_t n = 9;
  auto x = random_vec(n * g.height * g.width * g.in_channels), w = random_vec(g.patch() * g.out_channels, 2);
  std::vector<float> bias(g.out_channels, 0.0f), y(n * g.out_height() * g.out_width() * g.out_channels);
  for (auto _ : st) {
    kernels::conv2d_forward(x.data(), n, g, w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_ConvReference(benchmark::State& st) {
  const auto g = conv_geometry(st.range(0));
  const std::size_t n = 9;
  auto x = random_vec(n * g.height * g.width * g.in_channels), w = random_vec(g.patch() * g.out_channels, 2);
  std::vector<float> bias(g.out_channels, 0.0f), y(n * g.out_height() * g.out_width() * g.out_channels);
  for (auto _ : st) {
    reference::conv2d(x.data(), n, g, w.data(), bias.data(), y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

// Softmax over the score rows of 9-frame windows of 4x4 tokens.
void BM_SoftmaxParallel(benchmark::State& st) {
  const std::size_t rows = st.range(0) * 144, cols = 144;
  const auto src = random_vec(rows * cols);
  std::vector<float> x(src.size());
  for (auto _ : st) {
    x = src;
    kernels::softmax_rows(x.data(), rows, cols);
    benchmark::DoNotOptimize(x.data());
  }
}

void BM_SoftmaxReference(benchmark::State& st) {
  const std::size_t rows = st.range(0) * 144, cols = 144;
  const auto src = random_vec(rows * cols);
  std::vector<float> x(src.size());
  for (auto _ : st) {
    x = src;
    reference::softmax_rows(x.data(), rows, cols);
    benchmark::DoNotOptimize(x.data());
  }
}

void BM_LayerNormParallel(benchmark::State& st) {
  const std::size_t rows = st.range(0), cols = 96;
  auto x = random_vec(rows * cols), gamma = random_vec(cols, 2), beta = random_vec(cols, 3);
  std::vector<float> y(x.size()), mean(rows), rstd(rows);
  for (auto _ : st) {
    kernels::layer_norm_forward(x.data(), rows, cols, gamma.data(), beta.data(), 1e-5f, y.data(), mean.data(),
                                rstd.data());
    benchmark::DoNotOptimize(y.data());
  }
}

void BM_LayerNormReference(benchmark::State& st) {
  const std::size_t rows = st.range(0), cols = 96;
  auto x = random_vec(rows * cols), gamma = random_vec(cols, 2), beta = random_vec(cols, 3);
  std::vector<float> y(x.size());
  for (auto _ : st) {
    reference::layer_norm(x.data(), rows, cols, gamma.data(), beta.data(), 1e-5f, y.data());
    benchmark::DoNotOptimize(y.data());
  }
}

// Full window attention on a desk-profile stage: 9 frames, 16x16, C = 96.
void BM_WindowAttention(benchmark::State& st) {
  ParameterStore<float> store;
  Initializer init(1);
  WindowAttention<float> attn(store, init, "a", 96, 3);
  Tensor<float> x({1, 9, 16, 16, 96}, 0.1f);
  const auto wb = partition_windows(x, 4);
  for (auto _ : st) benchmark::DoNotOptimize(attn.forward(wb.data, wb.data, nullptr, Mode::kInfer));
}

}  // namespace

BENCHMARK(BM_GemmParallel)->Arg(128)->Arg(384)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_GemmReference)->Arg(128)->Arg(384)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvParallel)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ConvReference)->Arg(32)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SoftmaxParallel)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_SoftmaxReference)->Arg(256)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LayerNormParallel)->Arg(36864)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_LayerNormReference)->Arg(36864)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_WindowAttention)->Unit(benchmark::kMillisecond);

BENCHMARK_MAIN();
