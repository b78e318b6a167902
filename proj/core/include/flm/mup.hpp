#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include "flm/batch.hpp"
#include "flm/hyperparams.hpp"
#include "flm/model.hpp"

namespace flm {

// muP weight classes. Matrix-like weights have two width-scaling
// dimensions; vector-like weights have at most one.
enum class ParamClass { matrix_like, vector_like };

std::string_view class_name(ParamClass c);

// Classifies a parameter by its role. The shape must be the one `config`
// gives that role; unknown roles or mismatched shapes throw
// ClassificationError.
ParamClass classify(std::string_view param_role, const Shape& shape, const ModelConfig& config);
ParamClass classify(ParamRole role, const Shape& shape, const ModelConfig& config);

struct WidthPair {
  std::int64_t base_width = 0;
  std::int64_t target_width = 0;

  double ratio() const { return static_cast<double>(target_width) / static_cast<double>(base_width); }
};

// muP transfer from base to target width (ratio r = target / base >= 1):
//   matrix_lr  /= r      min_lr     /= r
//   matrix_std /= sqrt(r) output_mult /= r
// vector_lr, vector_std, input_mult and the fixed schedule fields pass
// through. Transfers compose exactly: the result is always recomputed from
// the anchor recorded on the first transfer.
HyperParams transfer(const HyperParams& base, WidthPair widths);

// A config at `width` that differs from `base` only in hidden size, FFN
// size and head count (head dimension held fixed).
ModelConfig scale_width(const ModelConfig& base, std::int64_t width);

// Per-step activation statistics for one width.
struct CoordStep {
  std::int64_t step = 0;
  double loss = 0.0;
  double pre_logit_rms = 0.0;
  double logits_rms = 0.0;
  std::vector<double> block_output_rms;
};

struct CoordWidthResult {
  std::int64_t width = 0;
  HyperParams hp;
  std::vector<CoordStep> steps;
  bool diverged = false;
  std::int64_t diverged_at = -1;

  double max_pre_logit_rms() const;
  // Exponential moving average of the training loss at the last step.
  double final_smoothed_loss(double alpha = 0.1) const;
};

using TransferRule = std::function<HyperParams(const HyperParams&, WidthPair)>;

struct CoordCheckOptions {
  std::size_t rows_per_batch = 8;
  std::uint64_t seed = 0;
  // Concurrent widths; results are always ordered by width.
  std::size_t jobs = 1;
  TransferRule transfer_rule = transfer;
};

// Trains every width for `steps` steps on the same batch sequence drawn from
// `data`, recording activation RMS before each update (step 0 is the
// initialization). `hp` applies at the width of `base_config`.
std::vector<CoordWidthResult> coordinate_check(const ModelConfig& base_config,
                                               const HyperParams& hp,
                                               const std::vector<std::int64_t>& widths,
                                               std::int64_t steps, const PackedBatch& data,
                                               const CoordCheckOptions& options = {});

// CSV rows "width,step,metric,value".
void write_coord_csv(std::ostream& out, const std::vector<CoordWidthResult>& results);

}  // namespace flm
