#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flm/batch.hpp"
#include "flm/hyperparams.hpp"
#include "flm/model.hpp"
#include "flm/mup.hpp"

namespace flm {

// ---------------------------------------------------------------------------
// Learning-rate schedule

enum class TokenAccounting {
  fixed_batch,  // tokens_seen = step * batch_tokens
  non_pad,      // tokens_seen = sum of non-pad tokens actually consumed
};

struct Schedule {
  double vector_peak_lr = 1.5e-4;
  double matrix_peak_lr = 1.5e-4;
  double min_lr = 1.5e-5;
  std::int64_t warmup_steps = 2000;
  double total_schedule_tokens = 2.5e12;
  std::int64_t batch_tokens = 5'505'024;
  double clip_norm = 1.0;
  double weight_decay = 0.0;
  TokenAccounting accounting = TokenAccounting::fixed_batch;

  static Schedule from(const HyperParams& hp);
  double warmup_tokens() const {
    return static_cast<double>(warmup_steps) * static_cast<double>(batch_tokens);
  }
};

void validate(const Schedule& s);

// Linear warmup from 0 to the class peak over warmup_steps * batch_tokens
// tokens, then cosine decay to min_lr at total_schedule_tokens, flat after.
// The floor for a class is min(min_lr, class peak).
double lr_at(const Schedule& s, ParamClass cls, double tokens_seen);

// ---------------------------------------------------------------------------
// Optimizer

struct ClipResult {
  double global_norm = 0.0;
  bool clipped = false;
};

// Global L2 norm over all gradients; if it exceeds clip_norm every gradient
// is scaled by clip_norm / norm. Throws NonFiniteGradient (and leaves the
// gradients untouched) when any entry is NaN or infinite.
ClipResult clip_gradients(std::vector<Tensor>& params, double clip_norm);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
};

struct AdamSlot {
  std::vector<double> m;
  std::vector<double> v;
};

struct TrainState {
  Model model;
  std::vector<ParamClass> classes;  // parallel to model.parameters()
  std::vector<AdamSlot> slots;
  AdamConfig adam;
  std::int64_t step = 0;
  std::int64_t updates = 0;  // applied optimizer updates (bias correction)
  double tokens_seen = 0.0;
  std::uint64_t dropout_seed = 0;  // masks for step s come from fork(s)

  explicit TrainState(Model m, AdamConfig adam = {});
};

// ---------------------------------------------------------------------------
// Run log

struct RunLogRow {
  std::int64_t step = 0;
  double tokens = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double lr_vector = 0.0;
  double lr_matrix = 0.0;
  double wall_ms = 0.0;
  bool skipped = false;  // non-finite loss or gradient; no update applied
};

struct ValidationRow {
  std::int64_t step = 0;
  double tokens = 0.0;
  std::string domain;
  double loss = 0.0;
  double bpb = 0.0;
};

struct RunLog {
  std::vector<RunLogRow> rows;
  std::vector<ValidationRow> validation;

  // Columns: step,tokens,loss,grad_norm,lr_vector,lr_matrix,wall_ms
  void write_csv(std::ostream& out) const;
  void write_validation_csv(std::ostream& out) const;
};

// One optimizer step: forward, loss, backward, clip, Adam update with the
// per-class learning rate for the tokens seen after this batch. Non-finite
// loss or gradients skip the update and are reported in the row.
RunLogRow train_step(TrainState& state, const PackedBatch& batch, const Schedule& schedule,
                     ForwardTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Loss-spike monitoring

enum class SpikeKind { transient, sustained };

struct SpikeOptions {
  // Band half-width in robust standard deviations (1.4826 * MAD).
  double mad_multiplier = 4.0;
  // A spike must also exceed the trailing median by this fraction of it.
  double min_relative_jump = 0.03;
  std::size_t baseline = 20;         // trailing steps for median/MAD
  std::size_t recovery_window = 20;  // steps above band before "sustained"
};

struct SpikeEvent {
  std::int64_t step = 0;
  SpikeKind kind = SpikeKind::transient;
  double loss_delta = 0.0;  // peak loss minus trailing median
  std::size_t duration = 0;
  bool grad_norm_normal = true;  // grad norm stayed inside its own band
  double grad_norm_at_spike = 0.0;
  double grad_norm_median = 0.0;
  bool abort_recommended = false;
  std::string reason;
};

// All spike events in a log window, in order.
std::vector<SpikeEvent> scan_spikes(const std::vector<RunLogRow>& window,
                                    const SpikeOptions& options = {});

// The most severe event of a window of at least 20 steps: the first
// sustained event if any, else the latest transient. Windows shorter than
// 20 steps yield nothing.
std::optional<SpikeEvent> detect_spike(const std::vector<RunLogRow>& window,
                                       const SpikeOptions& options = {});

// ---------------------------------------------------------------------------
// Training driver

// Cycles deterministically through the rows of a packed corpus: each epoch
// visits every row once in a seeded shuffled order.
class RowSampler {
 public:
  RowSampler(const PackedBatch& data, std::size_t rows_per_batch, std::uint64_t seed);
  PackedBatch next();

 private:
  void reshuffle();

  const PackedBatch* data_;
  std::size_t rows_per_batch_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

PackedBatch slice_rows(const PackedBatch& data, std::span<const std::size_t> rows);

struct TrainOptions {
  std::int64_t steps = 100;
  std::size_t rows_per_batch = 8;
  std::uint64_t seed = 0;
  AdamConfig adam;
  SpikeOptions spikes;
  bool stop_on_sustained_spike = false;
  // Called after every step with the updated state and row.
  std::function<void(const TrainState&, const RunLogRow&)> on_step;
};

struct TrainResult {
  RunLog log;
  std::vector<SpikeEvent> spikes;
  bool aborted = false;  // stopped on a sustained spike
  bool diverged = false;  // non-finite loss seen
};

TrainResult train(TrainState& state, const PackedBatch& data, const Schedule& schedule,
                  const TrainOptions& options);

// ---------------------------------------------------------------------------
// Grid search

struct GridScoreWeights {
  double final_loss = 1.0;
  double non_monotonicity = 0.25;
  double grad_norm_trend = 0.25;
};

enum class RunStatus { ok, diverged, aborted };

struct GridRun {
  std::size_t input_index = 0;
  HyperParams hp;
  RunStatus status = RunStatus::ok;
  double score = 0.0;
  double final_smoothed_loss = 0.0;
  double non_monotonicity = 0.0;
  double grad_norm_trend = 0.0;
  RunLog log;
  std::string curve_path;
};

struct GridOptions {
  TrainOptions train;
  GridScoreWeights weights;
  double smoothing = 0.1;  // EMA factor applied to the loss curve
  std::size_t jobs = 1;
  // When set, each run's RunLog CSV is written here as run_<index>.csv.
  std::string curve_dir;
};

struct GridReport {
  std::vector<GridRun> ranked;  // best first; diverged and aborted runs last
  GridScoreWeights weights;
  bool all_failed = false;

  nlohmann::json to_json() const;
};

// Scores one completed log (lower is better).
struct CurveScore {
  double final_smoothed_loss = 0.0;
  double non_monotonicity = 0.0;
  double grad_norm_trend = 0.0;
  double score = 0.0;
};
CurveScore score_curve(const std::vector<RunLogRow>& rows, const GridScoreWeights& weights,
                       double smoothing);

// Trains every configuration on the same data order from the same seed and
// ranks them. The ranking does not depend on the order of `configs`.
GridReport run_grid(const std::vector<HyperParams>& configs, const ModelConfig& base_config,
                    const PackedBatch& data, const GridOptions& options);

}  // namespace flm
