// Serial reference vs OpenMP kernels on shapes seen in the desk and full
// configurations.

#include <benchmark/benchmark.h>

#include <vector>

#include "hat/kernels.hpp"
#include "hat/rng.hpp"

namespace {

std::vector<float> random_vec(size_t n, uint64_t seed) {
  hat::Rng rng(seed);
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1, 1));
  return v;
}

template <bool Parallel>
void BM_GemmNN(benchmark::State& state) {
  const int64_t m = state.range(0), n = state.range(1), k = state.range(2);
  auto a = random_vec(m * k, 1), b = random_vec(k * n, 2);
  std::vector<float> c(m * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      hat::kernels::omp::gemm_nn(m, n, k, a.data(), b.data(), c.data(), 0.0f);
    else
      hat::kernels::serial::gemm_nn(m, n, k, a.data(), b.data(), c.data(), 0.0f);
    benchmark::DoNotOptimize(c.data());
  }
  state.SetItemsProcessed(state.iterations() * m * n * k);
}

template <bool Parallel>
void BM_Im2col(benchmark::State& state) {
  const int64_t batch = state.range(0), ch = state.range(1), h = state.range(2), w = state.range(3);
  auto x = random_vec(batch * ch * h * w, 3);
  std::vector<float> col(ch * 9 * batch * h * w);
  for (auto _ : state) {
    if constexpr (Parallel)
      hat::kernels::omp::im2col(x.data(), batch, ch, h, w, 3, 3, 1, 1, h, w, col.data());
    else
      hat::kernels::serial::im2col(x.data(), batch, ch, h, w, 3, 3, 1, 1, h, w, col.data());
    benchmark::DoNotOptimize(col.data());
  }
}

template <bool Parallel>
void BM_Attention(benchmark::State& state) {
  const int64_t batch = state.range(0), seq = state.range(1), heads = 8, dh = state.range(2) / heads;
  const int64_t width = heads * dh;
  auto q = random_vec(batch * seq * width, 4), k = random_vec(batch * seq * width, 5),
       v = random_vec(batch * seq * width, 6);
  std::vector<float> out(batch * seq * width), probs(batch * heads * seq * seq);
  for (auto _ : state) {
    if constexpr (Parallel)
      hat::kernels::omp::attention_forward(q.data(), k.data(), v.data(), batch, seq, heads, dh, out.data(),
                                           probs.data());
    else
      hat::kernels::serial::attention_forward(q.data(), k.data(), v.data(), batch, seq, heads, dh, out.data(),
                                              probs.data());
    benchmark::DoNotOptimize(out.data());
  }
}

template <bool Parallel>
void BM_PairwiseDist(benchmark::State& state) {
  const int64_t n = state.range(0), d = state.range(1);
  auto x = random_vec(n * d, 7);
  std::vector<float> dist(n * n);
  for (auto _ : state) {
    if constexpr (Parallel)
      hat::kernels::omp::pairwise_sq_dist(x.data(), x.data(), n, n, d, dist.data());
    else
      hat::kernels::serial::pairwise_sq_dist(x.data(), x.data(), n, n, d, dist.data());
    benchmark::DoNotOptimize(dist.data());
  }
}

}  // namespace

BENCHMARK(BM_GemmNN<false>)->Args({32, 2048, 288})->Args({256, 4096, 576});
BENCHMARK(BM_GemmNN<true>)->Args({32, 2048, 288})->Args({256, 4096, 576});
BENCHMARK(BM_Im2col<false>)->Args({64, 32, 16, 8})->Args({64, 64, 64, 32});
BENCHMARK(BM_Im2col<true>)->Args({64, 32, 16, 8})->Args({64, 64, 64, 32});
BENCHMARK(BM_Attention<false>)->Args({64, 9, 64})->Args({64, 129, 256});
BENCHMARK(BM_Attention<true>)->Args({64, 9, 64})->Args({64, 129, 256});
BENCHMARK(BM_PairwiseDist<false>)->Args({64, 96})->Args({1024, 512});
BENCHMARK(BM_PairwiseDist<true>)->Args({64, 96})->Args({1024, 512});

BENCHMARK_MAIN();
