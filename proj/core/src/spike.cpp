#include <algorithm>
#include <cmath>

#include "flm/trainer.hpp"

namespace flm {

namespace {

constexpr double kMadToSigma = 1.4826;

struct Band {
  double median = 0.0;
  double upper = 0.0;
  bool valid = false;
};

double median_of(std::vector<double> v) {
  const std::size_t n = v.size();
  auto mid = v.begin() + static_cast<std::ptrdiff_t>(n / 2);
  std::nth_element(v.begin(), mid, v.end());
  double m = *mid;
  if (n % 2 == 0) m = 0.5 * (m + *std::max_element(v.begin(), mid));
  return m;
}

Band band_of(const std::vector<double>& values, std::size_t end, std::size_t length,
             const SpikeOptions& o) {
  std::vector<double> trailing;
  trailing.reserve(length);
  for (std::size_t k = end - length; k < end; ++k) {
    if (std::isfinite(values[k])) trailing.push_back(values[k]);
  }
  Band b;
  if (trailing.size() * 2 < length || trailing.empty()) return b;
  b.median = median_of(trailing);
  for (double& x : trailing) x = std::abs(x - b.median);
  const double mad = median_of(trailing);
  b.upper = b.median + std::max(o.mad_multiplier * kMadToSigma * mad,
                                o.min_relative_jump * std::abs(b.median));
  b.valid = true;
  return b;
}

bool above(double x, const Band& b) { return !std::isfinite(x) || x > b.upper; }

// Length of the strictly increasing run ending at index i.
std::size_t rising_run(const std::vector<double>& v, std::size_t i) {
  std::size_t n = 0;
  while (i > n && std::isfinite(v[i - n]) && std::isfinite(v[i - n - 1]) && v[i - n] > v[i - n - 1]) {
    ++n;
  }
  return n;
}

}  // namespace

std::vector<SpikeEvent> scan_spikes(const std::vector<RunLogRow>& window, const SpikeOptions& o) {
  std::vector<SpikeEvent> events;
  const std::size_t n = window.size();
  const std::size_t base = std::max<std::size_t>(o.baseline, 1);
  const std::size_t recovery = std::max<std::size_t>(o.recovery_window, 1);
  if (n <= base) return events;

  std::vector<double> loss(n), gnorm(n);
  for (std::size_t i = 0; i < n; ++i) {
    loss[i] = window[i].loss;
    gnorm[i] = window[i].grad_norm;
  }

  std::size_t i = base;
  while (i < n) {
    const Band lb = band_of(loss, i, base, o);
    const Band gb = band_of(gnorm, i, base, o);

    // Steady climbs stay inside a trailing band, so they are caught by trend.
    const std::size_t loss_rise = rising_run(loss, i);
    const std::size_t grad_rise = rising_run(gnorm, i);
    if (loss_rise >= recovery || grad_rise >= recovery) {
      const bool by_loss = loss_rise >= recovery;
      const std::size_t run = by_loss ? loss_rise : grad_rise;
      const std::size_t start = i - run;
      SpikeEvent e;
      e.step = window[start].step;
      e.kind = SpikeKind::sustained;
      e.loss_delta = loss[i] - loss[start];
      e.duration = run + 1;
      e.grad_norm_at_spike = gnorm[i];
      e.grad_norm_median = gb.valid ? gb.median : 0.0;
      e.grad_norm_normal = gb.valid && !above(gnorm[i], gb);
      e.abort_recommended = true;
      e.reason = by_loss ? "loss increased for " + std::to_string(run) + " consecutive steps"
                         : "gradient norm increased for " + std::to_string(run) +
                               " consecutive steps";
      events.push_back(std::move(e));
      // Skip the rest of this climb.
      const std::vector<double>& v = by_loss ? loss : gnorm;
      ++i;
      while (i < n && std::isfinite(v[i]) && v[i] > v[i - 1]) ++i;
      continue;
    }

    // Noisy climbs break strict monotonicity and drag the band along with
    // them; compare the recent median against the band that preceded it.
    if (i + 1 >= recovery + base) {
      const std::size_t first = i + 1 - recovery;
      const Band before = band_of(loss, first, base, o);
      std::vector<double> recent(loss.begin() + static_cast<std::ptrdiff_t>(first),
                                 loss.begin() + static_cast<std::ptrdiff_t>(i + 1));
      std::size_t finite = 0;
      for (double& x : recent) {
        if (std::isfinite(x)) {
          ++finite;
        } else {
          x = INFINITY;
        }
      }
      if (before.valid && finite > 0 && median_of(recent) > before.upper) {
        SpikeEvent e;
        e.step = window[first].step;
        e.kind = SpikeKind::sustained;
        e.loss_delta = median_of(recent) - before.median;
        e.duration = recovery;
        e.grad_norm_at_spike = gnorm[i];
        e.grad_norm_median = gb.valid ? gb.median : 0.0;
        e.grad_norm_normal = gb.valid && !above(gnorm[i], gb);
        e.abort_recommended = true;
        e.reason = "median loss of the last " + std::to_string(recovery) + " steps rose above the band";
        events.push_back(std::move(e));
        i += recovery;
        continue;
      }
    }

    if (!lb.valid || !above(loss[i], lb)) {
      ++i;
      continue;
    }

    std::size_t j = i;
    double peak = loss[i];
    double gpeak = gnorm[i];
    while (j < n && above(loss[j], lb)) {
      if (!std::isfinite(loss[j]) || loss[j] > peak) peak = loss[j];
      if (!std::isfinite(gnorm[j]) || gnorm[j] > gpeak) gpeak = gnorm[j];
      ++j;
    }
    SpikeEvent e;
    e.step = window[i].step;
    e.duration = j - i;
    e.loss_delta = peak - lb.median;
    e.grad_norm_at_spike = gpeak;
    e.grad_norm_median = gb.valid ? gb.median : 0.0;
    e.grad_norm_normal = gb.valid && !above(gpeak, gb);
    if (e.duration >= recovery) {
      e.kind = SpikeKind::sustained;
      e.abort_recommended = true;
      e.reason = "loss above band for " + std::to_string(e.duration) + " steps";
    } else {
      e.kind = SpikeKind::transient;
      e.reason = j < n ? "recovered after " + std::to_string(e.duration) + " steps"
                       : "not yet recovered";
      if (!e.grad_norm_normal) e.reason += "; gradient norm outside its band";
    }
    events.push_back(std::move(e));
    i = j;
  }
  return events;
}

std::optional<SpikeEvent> detect_spike(const std::vector<RunLogRow>& window,
                                       const SpikeOptions& options) {
  if (window.size() < 20) return std::nullopt;
  auto events = scan_spikes(window, options);
  if (events.empty()) return std::nullopt;
  for (const auto& e : events) {
    if (e.kind == SpikeKind::sustained) return e;
  }
  return events.back();
}

}  // namespace flm
