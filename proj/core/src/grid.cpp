#include <algorithm>
#include <atomic>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <mutex>
#include <thread>

#include "flm/error.hpp"
#include "flm/trainer.hpp"

namespace flm {

namespace {

std::string_view status_name(RunStatus s) {
  switch (s) {
    case RunStatus::ok: return "ok";
    case RunStatus::diverged: return "diverged";
    case RunStatus::aborted: return "aborted";
  }
  return "unknown";
}

// Least-squares slope of y against its index.
double slope(std::span<const double> y) {
  const double n = static_cast<double>(y.size());
  if (y.size() < 2) return 0.0;
  const double mx = (n - 1.0) / 2.0;
  double my = 0.0;
  for (double v : y) my += v;
  my /= n;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const double dx = static_cast<double>(i) - mx;
    sxy += dx * (y[i] - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

}  // namespace

CurveScore score_curve(const std::vector<RunLogRow>& rows, const GridScoreWeights& w,
                       double smoothing) {
  CurveScore s;
  if (rows.empty()) throw InvalidArgument("score_curve: empty log");
  if (!(smoothing > 0.0 && smoothing <= 1.0)) {
    throw InvalidArgument("score_curve: smoothing must be in (0, 1]");
  }
  double ema = rows.front().loss;
  double start = ema;
  double rise = 0.0;
  for (std::size_t i = 1; i < rows.size(); ++i) {
    const double next = (1.0 - smoothing) * ema + smoothing * rows[i].loss;
    rise += std::max(0.0, next - ema);
    ema = next;
  }
  s.final_smoothed_loss = ema;
  s.non_monotonicity = start != 0.0 ? rise / std::abs(start) : rise;

  // Relative growth of the gradient norm over the second half of the run.
  std::vector<double> tail;
  for (std::size_t i = rows.size() / 2; i < rows.size(); ++i) tail.push_back(rows[i].grad_norm);
  double mean = 0.0;
  for (double g : tail) mean += g;
  mean /= static_cast<double>(tail.size());
  const double rel = mean > 0.0 ? slope(tail) * static_cast<double>(tail.size()) / mean : 0.0;
  s.grad_norm_trend = std::max(0.0, rel);

  s.score = w.final_loss * s.final_smoothed_loss + w.non_monotonicity * s.non_monotonicity +
            w.grad_norm_trend * s.grad_norm_trend;
  if (!std::isfinite(s.score)) s.score = std::numeric_limits<double>::infinity();
  return s;
}

nlohmann::json GridReport::to_json() const {
  nlohmann::json runs = nlohmann::json::array();
  for (std::size_t i = 0; i < ranked.size(); ++i) {
    const auto& r = ranked[i];
    nlohmann::json j = {
        {"rank", i + 1},
        {"input_index", r.input_index},
        {"status", status_name(r.status)},
        {"config", r.hp},
        {"steps", r.log.rows.size()},
        {"curve_path", r.curve_path},
    };
    auto num = [](double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); };
    j["score"] = num(r.score);
    j["final_smoothed_loss"] = num(r.final_smoothed_loss);
    j["non_monotonicity"] = num(r.non_monotonicity);
    j["grad_norm_trend"] = num(r.grad_norm_trend);
    runs.push_back(std::move(j));
  }
  return {
      {"weights",
       {{"final_loss", weights.final_loss},
        {"non_monotonicity", weights.non_monotonicity},
        {"grad_norm_trend", weights.grad_norm_trend}}},
      {"all_failed", all_failed},
      {"runs", runs},
  };
}

GridReport run_grid(const std::vector<HyperParams>& configs, const ModelConfig& base_config,
                    const PackedBatch& data, const GridOptions& options) {
  if (configs.empty()) throw InvalidArgument("run_grid: at least one configuration is required");
  for (const auto& hp : configs) validate(hp);
  validate(base_config, true);

  std::vector<GridRun> runs(configs.size());
  auto run_one = [&](std::size_t idx) {
    GridRun& r = runs[idx];
    r.input_index = idx;
    r.hp = configs[idx];
    ModelConfig mc = base_config;
    mc.rope_theta = r.hp.rope_theta;
    Rng rng(options.train.seed);
    TrainState state(build(mc, r.hp, rng), options.train.adam);
    TrainResult tr = train(state, data, Schedule::from(r.hp), options.train);
    r.log = std::move(tr.log);
    r.status = tr.diverged ? RunStatus::diverged
               : tr.aborted ? RunStatus::aborted
                            : RunStatus::ok;
    const CurveScore cs = score_curve(r.log.rows, options.weights, options.smoothing);
    r.score = cs.score;
    r.final_smoothed_loss = cs.final_smoothed_loss;
    r.non_monotonicity = cs.non_monotonicity;
    r.grad_norm_trend = cs.grad_norm_trend;
    if (r.status == RunStatus::ok && !std::isfinite(r.score)) r.status = RunStatus::diverged;
  };

  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        run_one(i);
      } catch (...) {
        std::lock_guard lock(failure_mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, runs.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);

  if (!options.curve_dir.empty()) {
    std::filesystem::create_directories(options.curve_dir);
    for (auto& r : runs) {
      const auto path = std::filesystem::path(options.curve_dir) /
                        ("run_" + std::to_string(r.input_index) + ".csv");
      std::ofstream out(path);
      if (!out) throw Error("cannot write " + path.string());
      r.log.write_csv(out);
      r.curve_path = path.string();
    }
  }

  // Failed runs last; ties broken by the serialized configuration so the
  // order of `configs` never matters.
  std::vector<std::string> keys(runs.size());
  for (std::size_t i = 0; i < runs.size(); ++i) keys[i] = nlohmann::json(runs[i].hp).dump();
  std::vector<std::size_t> order(runs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    const bool fa = runs[a].status != RunStatus::ok;
    const bool fb = runs[b].status != RunStatus::ok;
    if (fa != fb) return !fa;
    if (!fa && runs[a].score != runs[b].score) return runs[a].score < runs[b].score;
    return keys[a] < keys[b];
  });

  GridReport report;
  report.weights = options.weights;
  for (auto i : order) report.ranked.push_back(std::move(runs[i]));
  report.all_failed = std::none_of(report.ranked.begin(), report.ranked.end(),
                                   [](const GridRun& r) { return r.status == RunStatus::ok; });
  return report;
}

}  // namespace flm
