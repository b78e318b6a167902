#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <optional>

#include "flm/error.hpp"
#include "flm/trainer.hpp"

namespace flm {

TrainState::TrainState(Model m, AdamConfig adam_config) : model(std::move(m)), adam(adam_config) {
  for (const auto& p : model.parameters()) {
    classes.push_back(classify(p.role, p.tensor.shape(), model.config()));
    slots.push_back({std::vector<double>(p.tensor.numel(), 0.0),
                     std::vector<double>(p.tensor.numel(), 0.0)});
  }
}

namespace {

void write_number(std::ostream& out, double v) {
  if (std::isfinite(v)) {
    out << v;
  } else {
    out << (std::isnan(v) ? "nan" : (v > 0 ? "inf" : "-inf"));
  }
}

}  // namespace

void RunLog::write_csv(std::ostream& out) const {
  out << "step,tokens,loss,grad_norm,lr_vector,lr_matrix,wall_ms\n";
  out << std::setprecision(17);
  for (const auto& r : rows) {
    out << r.step << ',' << std::fixed << std::setprecision(0) << r.tokens
        << std::defaultfloat << std::setprecision(17) << ',';
    write_number(out, r.loss);
    out << ',';
    write_number(out, r.grad_norm);
    out << ',' << r.lr_vector << ',' << r.lr_matrix << ',' << std::setprecision(6) << r.wall_ms
        << std::setprecision(17) << '\n';
  }
}

void RunLog::write_validation_csv(std::ostream& out) const {
  out << "tokens_seen,domain,loss,bpb\n" << std::setprecision(17);
  for (const auto& v : validation) {
    out << std::fixed << std::setprecision(0) << v.tokens << std::defaultfloat
        << std::setprecision(17) << ',' << v.domain << ',' << v.loss << ',' << v.bpb << '\n';
  }
}

RunLogRow train_step(TrainState& state, const PackedBatch& batch, const Schedule& schedule,
                     ForwardTrace* trace) {
  validate(schedule);
  const auto start = std::chrono::steady_clock::now();
  auto params = state.model.parameters();
  state.model.zero_grad();

  RunLogRow row;
  row.step = state.step + 1;
  row.tokens = schedule.accounting == TokenAccounting::fixed_batch
                   ? static_cast<double>(row.step) * static_cast<double>(schedule.batch_tokens)
                   : state.tokens_seen + static_cast<double>(batch.non_pad_tokens());
  row.lr_vector = lr_at(schedule, ParamClass::vector_like, row.tokens);
  row.lr_matrix = lr_at(schedule, ParamClass::matrix_like, row.tokens);

  std::optional<Rng> dropout_rng;
  if (state.model.config().dropout > 0.0) dropout_rng = Rng(state.dropout_seed).fork(static_cast<std::uint64_t>(row.step));
  Tensor l = loss(state.model, batch, trace, dropout_rng ? &*dropout_rng : nullptr);
  row.loss = l.item();
  state.step = row.step;
  state.tokens_seen = row.tokens;

  if (!std::isfinite(row.loss)) {
    row.skipped = true;
    row.grad_norm = std::numeric_limits<double>::quiet_NaN();
  } else {
    backward(l);
    std::vector<Tensor> tensors;
    tensors.reserve(params.size());
    for (auto& p : params) tensors.push_back(p.tensor);
    try {
      row.grad_norm = clip_gradients(tensors, schedule.clip_norm).global_norm;
    } catch (const NonFiniteGradient&) {
      row.skipped = true;
      row.grad_norm = std::numeric_limits<double>::quiet_NaN();
    }
  }

  if (!row.skipped) {
    ++state.updates;
    const auto& a = state.adam;
    const double t = static_cast<double>(state.updates);
    const double bc1 = 1.0 - std::pow(a.beta1, t);
    const double bc2 = 1.0 - std::pow(a.beta2, t);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].tensor;
      if (!p.has_grad()) continue;
      const double lr =
          state.classes[i] == ParamClass::matrix_like ? row.lr_matrix : row.lr_vector;
      auto w = p.data();
      auto g = p.grad();
      auto& m = state.slots[i].m;
      auto& v = state.slots[i].v;
      for (std::size_t j = 0; j < w.size(); ++j) {
        m[j] = a.beta1 * m[j] + (1.0 - a.beta1) * g[j];
        v[j] = a.beta2 * v[j] + (1.0 - a.beta2) * g[j] * g[j];
        const double update = (m[j] / bc1) / (std::sqrt(v[j] / bc2) + a.eps);
        w[j] -= lr * (update + schedule.weight_decay * w[j]);
      }
    }
  }
  row.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
  return row;
}

PackedBatch slice_rows(const PackedBatch& data, std::span<const std::size_t> rows) {
  PackedBatch out;
  out.rows = rows.size();
  out.seq = data.seq;
  auto take = [&](const std::vector<std::int32_t>& src, std::vector<std::int32_t>& dst) {
    if (src.empty()) return;
    dst.reserve(rows.size() * data.seq);
    for (auto r : rows) {
      if (r >= data.rows) throw InvalidArgument("slice_rows: row index out of range");
      auto first = src.begin() + static_cast<std::ptrdiff_t>(r * data.seq);
      dst.insert(dst.end(), first, first + static_cast<std::ptrdiff_t>(data.seq));
    }
  };
  take(data.tokens, out.tokens);
  take(data.targets, out.targets);
  take(data.segments, out.segments);
  take(data.positions, out.positions);
  return out;
}

RowSampler::RowSampler(const PackedBatch& data, std::size_t rows_per_batch, std::uint64_t seed)
    : data_(&data), rows_per_batch_(rows_per_batch), seed_(seed) {
  if (data.rows == 0) throw InvalidArgument("RowSampler: no rows to sample");
  if (rows_per_batch == 0) throw InvalidArgument("RowSampler: rows_per_batch must be positive");
  reshuffle();
}

void RowSampler::reshuffle() {
  order_.resize(data_->rows);
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  Rng rng = Rng(seed_).fork(epoch_);
  for (std::size_t i = order_.size(); i > 1; --i) {
    std::swap(order_[i - 1], order_[rng.below(i)]);
  }
  cursor_ = 0;
}

PackedBatch RowSampler::next() {
  std::vector<std::size_t> picked;
  picked.reserve(rows_per_batch_);
  while (picked.size() < rows_per_batch_) {
    if (cursor_ == order_.size()) {
      ++epoch_;
      reshuffle();
    }
    picked.push_back(order_[cursor_++]);
  }
  return slice_rows(*data_, picked);
}

TrainResult train(TrainState& state, const PackedBatch& data, const Schedule& schedule,
                  const TrainOptions& options) {
  validate(schedule);
  RowSampler sampler(data, options.rows_per_batch, options.seed);
  state.dropout_seed = options.seed;
  TrainResult result;
  const std::size_t watch = options.spikes.baseline + 2 * options.spikes.recovery_window;
  std::size_t consecutive_skips = 0;
  for (std::int64_t s = 0; s < options.steps; ++s) {
    RunLogRow row = train_step(state, sampler.next(), schedule);
    result.log.rows.push_back(row);
    if (options.on_step) options.on_step(state, row);
    if (!std::isfinite(row.loss)) result.diverged = true;
    consecutive_skips = row.skipped ? consecutive_skips + 1 : 0;
    if (consecutive_skips >= 10) break;
    if (options.stop_on_sustained_spike && result.log.rows.size() >= 20) {
      const auto& rows = result.log.rows;
      const std::size_t from = rows.size() > watch ? rows.size() - watch : 0;
      std::vector<RunLogRow> window(rows.begin() + static_cast<std::ptrdiff_t>(from), rows.end());
      auto ev = detect_spike(window, options.spikes);
      if (ev && ev->kind == SpikeKind::sustained) {
        result.aborted = true;
        break;
      }
    }
  }
  result.spikes = scan_spikes(result.log.rows, options.spikes);
  if (result.aborted) {
    bool have_sustained = std::any_of(result.spikes.begin(), result.spikes.end(),
                                      [](const SpikeEvent& e) { return e.kind == SpikeKind::sustained; });
    if (!have_sustained) {
      // The full-log scan can use a longer baseline than the online window;
      // keep the event that triggered the abort.
      const auto& rows = result.log.rows;
      const std::size_t from = rows.size() > watch ? rows.size() - watch : 0;
      std::vector<RunLogRow> window(rows.begin() + static_cast<std::ptrdiff_t>(from), rows.end());
      if (auto ev = detect_spike(window, options.spikes)) result.spikes.push_back(*ev);
    }
  }
  return result;
}

}  // namespace flm
