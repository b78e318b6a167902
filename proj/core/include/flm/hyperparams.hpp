#pragma once

#include <cstdint>
#include <optional>
#include <string>

#include <nlohmann/json.hpp>

namespace flm {

// Values a width transfer derives from. Kept in memory only, so chained
// transfers recompute from the original search width instead of compounding
// rounding error.
struct TransferAnchor {
  double matrix_lr = 0.0;
  double min_lr = 0.0;
  double matrix_std = 0.0;
  double output_mult = 0.0;
  // Cumulative width ratio (current / anchor) as a reduced fraction.
  std::uint64_t ratio_num = 1;
  std::uint64_t ratio_den = 1;

  bool operator==(const TransferAnchor&) const = default;
};

// The seven searched hyperparameters plus the fixed schedule values.
// Defaults are the published 52B training values.
struct HyperParams {
  double vector_lr = 1.5e-4;
  double matrix_lr = 1.5e-4;
  double min_lr = 1.5e-5;
  double vector_std = 4e-3;
  double matrix_std = 4.242e-3;
  double input_mult = 1.0;
  double output_mult = 3.125e-2;

  std::string schedule_type = "cosine";
  double schedule_tokens = 2.5e12;
  std::int64_t warmup_steps = 2000;
  double clip_grad = 1.0;
  double weight_decay = 0.0;
  std::int64_t batch_tokens = 5'505'024;
  double rope_theta = 10'000.0;

  std::optional<TransferAnchor> anchor;

  // Field-wise equality of the serialized values; the anchor is ignored.
  bool same_values(const HyperParams& other) const;
};

// Throws ConfigError when an invariant is violated.
void validate(const HyperParams& hp);

void to_json(nlohmann::json& j, const HyperParams& hp);
void from_json(const nlohmann::json& j, HyperParams& hp);

HyperParams load_hyperparams(const std::string& path);
void save_hyperparams(const HyperParams& hp, const std::string& path);

}  // namespace flm
