#include "flm/hyperparams.hpp"

#include <cmath>
#include <fstream>

#include "flm/error.hpp"

namespace flm {

namespace {

void require(bool ok, const std::string& what) {
  if (!ok) throw ConfigError("hyperparameters: " + what);
}

bool positive_finite(double v) { return v > 0.0 && std::isfinite(v); }
bool non_negative_finite(double v) { return v >= 0.0 && std::isfinite(v); }

}  // namespace

bool HyperParams::same_values(const HyperParams& o) const {
  return vector_lr == o.vector_lr && matrix_lr == o.matrix_lr && min_lr == o.min_lr &&
         vector_std == o.vector_std && matrix_std == o.matrix_std &&
         input_mult == o.input_mult && output_mult == o.output_mult &&
         schedule_type == o.schedule_type && schedule_tokens == o.schedule_tokens &&
         warmup_steps == o.warmup_steps && clip_grad == o.clip_grad &&
         weight_decay == o.weight_decay && batch_tokens == o.batch_tokens &&
         rope_theta == o.rope_theta;
}

void validate(const HyperParams& hp) {
  // Zero rates are allowed: a frozen run is a useful baseline.
  require(non_negative_finite(hp.vector_lr), "learning_rate must be >= 0");
  require(non_negative_finite(hp.matrix_lr), "matrix_learning_rate must be >= 0");
  require(non_negative_finite(hp.min_lr), "minimum_learning_rate must be >= 0");
  require(hp.min_lr <= std::max(hp.vector_lr, hp.matrix_lr),
          "minimum_learning_rate exceeds both peak learning rates");
  require(positive_finite(hp.vector_std), "standard_deviation must be > 0");
  require(positive_finite(hp.matrix_std), "matrix_standard_deviation must be > 0");
  require(positive_finite(hp.input_mult), "input_mult must be > 0");
  require(positive_finite(hp.output_mult), "output_mult must be > 0");
  require(hp.schedule_type == "cosine", "lr_schedule_type must be \"cosine\"");
  require(positive_finite(hp.schedule_tokens), "lr_schedule_tokens must be > 0");
  require(hp.warmup_steps >= 0, "warmup_step must be >= 0");
  require(positive_finite(hp.clip_grad), "clip_grad must be > 0");
  require(hp.weight_decay >= 0.0 && std::isfinite(hp.weight_decay), "weight_decay must be >= 0");
  require(hp.batch_tokens > 0, "batch_size_tokens must be > 0");
  require(static_cast<double>(hp.warmup_steps) * static_cast<double>(hp.batch_tokens) <
              hp.schedule_tokens,
          "warmup covers the whole schedule");
  require(positive_finite(hp.rope_theta), "rope_theta must be > 0");
}

void to_json(nlohmann::json& j, const HyperParams& hp) {
  j = nlohmann::json{
      {"learning_rate", hp.vector_lr},
      {"matrix_learning_rate", hp.matrix_lr},
      {"minimum_learning_rate", hp.min_lr},
      {"standard_deviation", hp.vector_std},
      {"matrix_standard_deviation", hp.matrix_std},
      {"input_mult", hp.input_mult},
      {"output_mult", hp.output_mult},
      {"lr_schedule_type", hp.schedule_type},
      {"lr_schedule_tokens", hp.schedule_tokens},
      {"warmup_step", hp.warmup_steps},
      {"clip_grad", hp.clip_grad},
      {"weight_decay", hp.weight_decay},
      {"batch_size_tokens", hp.batch_tokens},
      {"rope_theta", hp.rope_theta},
  };
}

void from_json(const nlohmann::json& j, HyperParams& hp) {
  if (!j.is_object()) throw ConfigError("hyperparameters: expected a JSON object");
  static const char* kKeys[] = {"learning_rate",      "matrix_learning_rate",
                                "minimum_learning_rate", "standard_deviation",
                                "matrix_standard_deviation", "input_mult",
                                "output_mult",        "lr_schedule_type",
                                "lr_schedule_tokens", "warmup_step",
                                "clip_grad",          "weight_decay",
                                "batch_size_tokens",  "rope_theta"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    bool known = false;
    for (const char* k : kKeys) known = known || it.key() == k;
    if (!known) throw ConfigError("hyperparameters: unknown field \"" + it.key() + "\"");
  }
  HyperParams out;
  try {
    out.vector_lr = j.value("learning_rate", out.vector_lr);
    out.matrix_lr = j.value("matrix_learning_rate", out.matrix_lr);
    out.min_lr = j.value("minimum_learning_rate", out.min_lr);
    out.vector_std = j.value("standard_deviation", out.vector_std);
    out.matrix_std = j.value("matrix_standard_deviation", out.matrix_std);
    out.input_mult = j.value("input_mult", out.input_mult);
    out.output_mult = j.value("output_mult", out.output_mult);
    out.schedule_type = j.value("lr_schedule_type", out.schedule_type);
    out.schedule_tokens = j.value("lr_schedule_tokens", out.schedule_tokens);
    out.warmup_steps = j.value("warmup_step", out.warmup_steps);
    out.clip_grad = j.value("clip_grad", out.clip_grad);
    out.weight_decay = j.value("weight_decay", out.weight_decay);
    out.batch_tokens = j.value("batch_size_tokens", out.batch_tokens);
    out.rope_theta = j.value("rope_theta", out.rope_theta);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("hyperparameters: ") + e.what());
  }
  hp = std::move(out);
}

HyperParams load_hyperparams(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open hyperparameter file " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  HyperParams hp = j.get<HyperParams>();
  validate(hp);
  return hp;
}

void save_hyperparams(const HyperParams& hp, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << nlohmann::json(hp).dump(2) << '\n';
}

}  // namespace flm
