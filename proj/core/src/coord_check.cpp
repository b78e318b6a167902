#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <mutex>
#include <thread>

#include "flm/error.hpp"
#include "flm/mup.hpp"
#include "flm/trainer.hpp"

namespace flm {

double CoordWidthResult::max_pre_logit_rms() const {
  double m = 0.0;
  for (const auto& s : steps) {
    if (!std::isfinite(s.pre_logit_rms)) return std::numeric_limits<double>::infinity();
    m = std::max(m, s.pre_logit_rms);
  }
  return m;
}

double CoordWidthResult::final_smoothed_loss(double alpha) const {
  if (steps.empty()) return std::numeric_limits<double>::quiet_NaN();
  double ema = steps.front().loss;
  for (std::size_t i = 1; i < steps.size(); ++i) ema = (1.0 - alpha) * ema + alpha * steps[i].loss;
  return ema;
}

std::vector<CoordWidthResult> coordinate_check(const ModelConfig& base_config,
                                               const HyperParams& hp,
                                               const std::vector<std::int64_t>& widths,
                                               std::int64_t steps, const PackedBatch& data,
                                               const CoordCheckOptions& options) {
  if (widths.empty()) throw InvalidArgument("coordinate_check: no widths given");
  if (steps < 1) throw InvalidArgument("coordinate_check: steps must be positive");
  validate(base_config, true);
  validate(hp);

  std::vector<std::int64_t> sorted = widths;
  std::sort(sorted.begin(), sorted.end());
  sorted.erase(std::unique(sorted.begin(), sorted.end()), sorted.end());

  std::vector<CoordWidthResult> results(sorted.size());
  // Configs and transfers are resolved up front so bad widths fail early.
  std::vector<ModelConfig> configs;
  for (std::size_t i = 0; i < sorted.size(); ++i) {
    configs.push_back(scale_width(base_config, sorted[i]));
    results[i].width = sorted[i];
    results[i].hp = sorted[i] == base_config.hidden_size
                        ? hp
                        : options.transfer_rule(hp, {base_config.hidden_size, sorted[i]});
  }

  auto run_one = [&](std::size_t i) {
    auto& res = results[i];
    ModelConfig mc = configs[i];
    mc.rope_theta = res.hp.rope_theta;
    Rng rng(options.seed);
    TrainState state(build(mc, res.hp, rng));
    const Schedule schedule = Schedule::from(res.hp);
    RowSampler sampler(data, options.rows_per_batch, options.seed);
    for (std::int64_t s = 0; s < steps; ++s) {
      ForwardTrace trace;
      RunLogRow row = train_step(state, sampler.next(), schedule, &trace);
      CoordStep cs;
      cs.step = s;
      cs.loss = row.loss;
      cs.pre_logit_rms = trace.pre_logit_rms;
      cs.logits_rms = trace.logits_rms;
      cs.block_output_rms = std::move(trace.block_output_rms);
      res.steps.push_back(std::move(cs));
      if (!std::isfinite(row.loss) || row.skipped) {
        res.diverged = true;
        res.diverged_at = s;
        break;
      }
    }
  };

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < results.size(); i = next++) {
      try {
        run_one(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, results.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return results;
}

void write_coord_csv(std::ostream& out, const std::vector<CoordWidthResult>& results) {
  out << "width,step,metric,value\n";
  out.precision(17);
  for (const auto& r : results) {
    for (const auto& s : r.steps) {
      out << r.width << ',' << s.step << ",loss," << s.loss << '\n';
      out << r.width << ',' << s.step << ",pre_logit_rms," << s.pre_logit_rms << '\n';
      out << r.width << ',' << s.step << ",logits_rms," << s.logits_rms << '\n';
      for (std::size_t l = 0; l < s.block_output_rms.size(); ++l) {
        out << r.width << ',' << s.step << ",block" << l << "_rms," << s.block_output_rms[l] << '\n';
      }
    }
  }
}

}  // namespace flm
