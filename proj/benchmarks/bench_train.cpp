#include <benchmark/benchmark.h>

#include <numeric>

#include "flm/mup.hpp"
#include "flm/trainer.hpp"
#include "synthetic.hpp"

namespace {

// One optimizer step on 8 rows of 64 tokens at the given width.
void BM_TrainStep(benchmark::State& state) {
  static const auto setup = [] {
    flm::testing::SyntheticCorpusOptions o;
    o.target_bytes = 256u << 10;
    return flm::testing::make_toy_setup(o);
  }();
  const auto width = state.range(0);
  const auto config = flm::scale_width(setup.base_config, width);
  const auto hp = flm::testing::toy_base_hyperparams();
  flm::Rng rng(0);
  flm::TrainState train(flm::build(config, hp, rng));
  const auto schedule = flm::Schedule::from(hp);
  std::vector<std::size_t> rows(8);
  std::iota(rows.begin(), rows.end(), 0);
  const auto batch = flm::slice_rows(setup.train, rows);
  for (auto _ : state) benchmark::DoNotOptimize(flm::train_step(train, batch, schedule));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(batch.rows * batch.seq));
}
BENCHMARK(BM_TrainStep)->Arg(64)->Arg(128)->Arg(256)->Unit(benchmark::kMillisecond);

}  // namespace
