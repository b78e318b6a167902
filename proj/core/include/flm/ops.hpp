#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "flm/rng.hpp"
#include "flm/tensor.hpp"

namespace flm {

inline constexpr std::int32_t kIgnoreTarget = -1;

Tensor reshape(const Tensor& x, Shape shape);
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);
Tensor sum(const Tensor& x);
// Inverted dropout: zeroes each element with probability p and scales the
// survivors by 1/(1-p). p = 0 returns x unchanged.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// [m x k] . [k x n] -> [m x n]
Tensor matmul(const Tensor& a, const Tensor& b);

// Rows of `weight` ([vocab x d]) gathered by id -> [ids.size() x d].
Tensor embedding(const Tensor& weight, std::span<const std::int32_t> ids);

// Per row over the last dimension: gain_i * x_i / sqrt(mean(x^2) + eps).
Tensor rms_norm(const Tensor& x, const Tensor& gain, double eps);
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

// swish(gate) * up, elementwise.
Tensor swiglu(const Tensor& gate, const Tensor& up);
// (swish(x w_gate) * (x w_up)) w_down; x is [... x d] and keeps its leading dims.
Tensor swiglu_ffn(const Tensor& x, const Tensor& w_gate, const Tensor& w_up,
                  const Tensor& w_down);

// x is [... x heads x d_head]; positions has one entry per leading index
// (numel / (heads * d_head)). Pair (2i, 2i+1) at position m rotates by
// m * theta^(-2i / d_head).
Tensor rope_rotate(const Tensor& x, std::span<const std::int32_t> positions, double theta);

struct AttentionLayout {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t heads = 1;
  double scale = 1.0;
  // One id per token (batch * seq). Tokens attend only to earlier tokens of
  // the same segment; a negative id marks padding, which attends to itself.
  // Empty means one segment per row.
  std::span<const std::int32_t> segments;
};

// Multi-head causal attention over q, k, v of shape [batch*seq x d].
Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        const AttentionLayout& layout);

// Mean of -log softmax(logits)[target] over rows whose target is not
// kIgnoreTarget. Returns a scalar tensor.
Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets);

struct CrossEntropySum {
  double total_nats = 0.0;
  std::size_t count = 0;
};

// Same quantity without the tape, as a (sum, count) pair so callers can
// aggregate across batches.
CrossEntropySum cross_entropy_sum(const Tensor& logits, std::span<const std::int32_t> targets);

}  // namespace flm
