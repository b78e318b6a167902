#include <benchmark/benchmark.h>

#include <numeric>

#include "flm/tokenizer.hpp"
#include "synthetic.hpp"

namespace {

const std::vector<std::string>& corpus() {
  static const auto docs = [] {
    flm::testing::SyntheticCorpusOptions o;
    o.target_bytes = 1u << 20;
    return flm::testing::synthetic_documents(o);
  }();
  return docs;
}

std::int64_t corpus_bytes() {
  return std::accumulate(corpus().begin(), corpus().end(), std::int64_t{0},
                         [](std::int64_t n, const std::string& s) { return n + static_cast<std::int64_t>(s.size()); });
}

void BM_TrainBbpe(benchmark::State& state) {
  const auto vocab = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) benchmark::DoNotOptimize(flm::train_bbpe(corpus(), vocab));
  state.SetBytesProcessed(state.iterations() * corpus_bytes());
}
BENCHMARK(BM_TrainBbpe)->Arg(512)->Arg(2048)->Unit(benchmark::kMillisecond);

void BM_Encode(benchmark::State& state) {
  static const auto tok = flm::train_bbpe(corpus(), 2048);
  for (auto _ : state) {
    for (const auto& d : corpus()) benchmark::DoNotOptimize(tok.encode(d));
  }
  state.SetBytesProcessed(state.iterations() * corpus_bytes());
}
BENCHMARK(BM_Encode)->Unit(benchmark::kMillisecond);

}  // namespace
