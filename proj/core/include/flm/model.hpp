#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "flm/batch.hpp"
#include "flm/hyperparams.hpp"
#include "flm/rng.hpp"
#include "flm/tensor.hpp"

namespace flm {

enum class AttentionScale {
  inverse_head_dim,       // 1/d_head, the muP convention
  inverse_sqrt_head_dim,  // 1/sqrt(d_head)
};

struct ModelConfig {
  std::int64_t layer_num = 64;
  std::int64_t attention_heads = 64;
  std::int64_t hidden_size = 8192;
  std::int64_t ffn_hidden_size = 21824;
  std::int64_t vocab_size = 80000;
  std::int64_t context_length = 4096;
  double rope_theta = 10'000.0;
  double rmsnorm_eps = 1e-5;
  AttentionScale attention_scale = AttentionScale::inverse_head_dim;
  // Residual-branch dropout, training only. Off by default.
  double dropout = 0.0;

  std::int64_t head_dim() const { return hidden_size / attention_heads; }
  bool operator==(const ModelConfig&) const = default;
};

// Published architectures.
ModelConfig flm_52b();
ModelConfig flm_mup_base();

// Throws ConfigError. `for_build` additionally requires an even head
// dimension, which RoPE needs.
void validate(const ModelConfig& config, bool for_build = false);

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);
ModelConfig load_model_config(const std::string& path);

// Exact parameter count without allocating:
//   2*V*d + L*(4*d^2 + 3*d*f + 2*d) + 2*d
std::uint64_t count_params(const ModelConfig& config);

struct Multipliers {
  double input_mult = 1.0;
  double output_mult = 1.0;
};

// Where a parameter sits in the network. Names are stable and are used by
// checkpoints and by muP classification.
enum class ParamRole {
  embedding,
  attn_norm_gain,
  attn_q,
  attn_k,
  attn_v,
  attn_o,
  ffn_norm_gain,
  ffn_gate,
  ffn_up,
  ffn_down,
  final_norm_gain,
  final_norm_bias,
  lm_head,
};

std::string_view role_name(ParamRole role);
// Throws ClassificationError for unknown names.
ParamRole role_from_name(std::string_view name);

struct TransformerLayer {
  Tensor attn_norm_gain;
  Tensor wq, wk, wv, wo;
  Tensor ffn_norm_gain;
  Tensor w_gate, w_up, w_down;
};

struct NamedParam {
  std::string name;
  ParamRole role;
  Tensor tensor;  // shares storage with the model
};

// Decoder-only transformer: pre-norm RMSNorm blocks with RoPE attention and
// SwiGLU FFN, no linear biases, final LayerNorm, untied embedding and head.
//
// Copies share parameter storage; clone() makes a deep copy.
class Model {
 public:
  Model() = default;
  Model(ModelConfig config, Multipliers multipliers);

  const ModelConfig& config() const noexcept { return config_; }
  Multipliers& multipliers() noexcept { return multipliers_; }
  const Multipliers& multipliers() const noexcept { return multipliers_; }

  Tensor embedding;
  std::vector<TransformerLayer> layers;
  Tensor final_norm_gain;
  Tensor final_norm_bias;
  Tensor lm_head;

  // Stable order: embedding, layers in order, final norm, lm_head.
  std::vector<NamedParam> parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();
  Model clone() const;

 private:
  ModelConfig config_;
  Multipliers multipliers_;
};

// Matrix-like weights ~ trunc_normal(0, hp.matrix_std); embedding and
// lm_head ~ trunc_normal(0, hp.vector_std); norm gains 1, biases 0.
Model build(const ModelConfig& config, const HyperParams& hp, Rng& rng);

// Activation magnitudes recorded during a forward pass.
struct ForwardTrace {
  std::vector<double> block_output_rms;  // residual stream after each layer
  double pre_logit_rms = 0.0;            // residual stream entering the final LayerNorm
  double logits_rms = 0.0;
};

// Logits of shape [rows x seq x vocab]. Passing `dropout_rng` applies the
// config's dropout; evaluation leaves it null.
Tensor forward(const Model& model, const PackedBatch& batch, ForwardTrace* trace = nullptr);
// Same values flattened to [rows*seq x vocab].
Tensor forward_flat(const Model& model, const PackedBatch& batch, ForwardTrace* trace = nullptr,
                    Rng* dropout_rng = nullptr);

// Mean next-token cross entropy (nats) over positions with a target.
Tensor loss(const Model& model, const PackedBatch& batch, ForwardTrace* trace = nullptr,
            Rng* dropout_rng = nullptr);

// Plain rows with targets = tokens shifted by one; the last position of each
// row has no target.
PackedBatch make_lm_batch(const std::vector<std::vector<std::int32_t>>& rows);

}  // namespace flm
