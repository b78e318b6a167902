#include <benchmark/benchmark.h>

#include "flm/ops.hpp"
#include "flm/rng.hpp"

namespace {

flm::Tensor random_matrix(std::size_t rows, std::size_t cols, flm::Rng& rng) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal();
  return flm::Tensor({rows, cols}, std::move(v));
}

void BM_Matmul(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  flm::Rng rng(1);
  const auto a = random_matrix(n, n, rng);
  const auto b = random_matrix(n, n, rng);
  for (auto _ : state) benchmark::DoNotOptimize(flm::matmul(a, b));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(2 * n * n * n));
}
BENCHMARK(BM_Matmul)->RangeMultiplier(2)->Range(64, 512);

// Forward and backward of one matmul, the pattern every linear layer pays.
void BM_MatmulBackward(benchmark::State& state) {
  const auto n = static_cast<std::size_t>(state.range(0));
  flm::Rng rng(2);
  auto a = random_matrix(n, n, rng);
  auto b = random_matrix(n, n, rng);
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  for (auto _ : state) {
    a.zero_grad();
    b.zero_grad();
    flm::backward(flm::sum(flm::matmul(a, b)));
  }
}
BENCHMARK(BM_MatmulBackward)->RangeMultiplier(2)->Range(64, 256);

}  // namespace
