#include <benchmark/benchmark.h>

#include "flm/corpus.hpp"
#include "synthetic.hpp"

namespace {

std::vector<flm::Document> documents(std::size_t bytes) {
  flm::testing::SyntheticCorpusOptions o;
  o.target_bytes = bytes;
  std::vector<flm::Document> docs;
  for (auto& text : flm::testing::synthetic_documents(o)) {
    docs.push_back({"d" + std::to_string(docs.size()), "web", std::move(text)});
  }
  return docs;
}

void BM_MinhashSignature(benchmark::State& state) {
  const auto docs = documents(256u << 10);
  const auto k = static_cast<std::size_t>(state.range(0));
  for (auto _ : state) {
    for (const auto& d : docs) benchmark::DoNotOptimize(flm::minhash_signature(d.text, k));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(docs.size()));
}
BENCHMARK(BM_MinhashSignature)->Arg(64)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

void BM_Dedup(benchmark::State& state) {
  const auto docs = documents(static_cast<std::size_t>(state.range(0)) << 10);
  flm::DedupOptions o;
  o.jobs = static_cast<std::size_t>(state.range(1));
  for (auto _ : state) benchmark::DoNotOptimize(flm::dedup(docs, o));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(docs.size()));
}
BENCHMARK(BM_Dedup)->Args({256, 1})->Args({1024, 1})->Args({1024, 4})->Unit(benchmark::kMillisecond);

}  // namespace
