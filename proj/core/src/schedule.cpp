#include <algorithm>
#include <cmath>
#include <numbers>

#include "flm/error.hpp"
#include "flm/trainer.hpp"

namespace flm {

Schedule Schedule::from(const HyperParams& hp) {
  Schedule s;
  s.vector_peak_lr = hp.vector_lr;
  s.matrix_peak_lr = hp.matrix_lr;
  s.min_lr = hp.min_lr;
  s.warmup_steps = hp.warmup_steps;
  s.total_schedule_tokens = hp.schedule_tokens;
  s.batch_tokens = hp.batch_tokens;
  s.clip_norm = hp.clip_grad;
  s.weight_decay = hp.weight_decay;
  return s;
}

void validate(const Schedule& s) {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("schedule: ") + what);
  };
  require(s.vector_peak_lr >= 0.0 && s.matrix_peak_lr >= 0.0, "peak learning rates must be >= 0");
  require(s.min_lr >= 0.0, "min_lr must be >= 0");
  require(s.warmup_steps >= 0, "warmup_steps must be >= 0");
  require(s.batch_tokens > 0, "batch_tokens must be > 0");
  require(s.total_schedule_tokens > s.warmup_tokens(),
          "total schedule tokens must exceed the warmup tokens");
  require(s.clip_norm > 0.0, "clip_norm must be > 0");
  require(s.weight_decay >= 0.0, "weight_decay must be >= 0");
}

double lr_at(const Schedule& s, ParamClass cls, double tokens_seen) {
  const double peak = cls == ParamClass::matrix_like ? s.matrix_peak_lr : s.vector_peak_lr;
  const double floor = std::min(s.min_lr, peak);
  const double t = std::max(tokens_seen, 0.0);
  const double warm = s.warmup_tokens();
  if (warm > 0.0 && t <= warm) return peak * (t / warm);
  if (t >= s.total_schedule_tokens) return floor;
  const double progress = (t - warm) / (s.total_schedule_tokens - warm);
  return floor + (peak - floor) * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

ClipResult clip_gradients(std::vector<Tensor>& params, double clip_norm) {
  if (!(clip_norm > 0.0)) throw InvalidArgument("clip_gradients: clip_norm must be positive");
  double sq = 0.0;
  for (const auto& p : params) {
    for (double g : p.grad()) {
      if (!std::isfinite(g)) throw NonFiniteGradient("non-finite gradient entry");
      sq += g * g;
    }
  }
  ClipResult r;
  r.global_norm = std::sqrt(sq);
  if (!std::isfinite(r.global_norm)) throw NonFiniteGradient("gradient norm overflow");
  if (r.global_norm > clip_norm) {
    const double factor = clip_norm / r.global_norm;
    for (auto& p : params) {
      if (!p.has_grad()) continue;
      for (double& g : p.mutable_grad()) g *= factor;
    }
    r.clipped = true;
  }
  return r;
}

}  // namespace flm
