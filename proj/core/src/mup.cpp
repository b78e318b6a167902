#include "flm/mup.hpp"

#include <cmath>
#include <numeric>

#include "flm/error.hpp"

namespace flm {

std::string_view class_name(ParamClass c) {
  return c == ParamClass::matrix_like ? "matrix-like" : "vector-like";
}

namespace {

enum class Axis { vocab, hidden, ffn };

std::vector<Axis> axes_of(ParamRole role) {
  switch (role) {
    case ParamRole::embedding: return {Axis::vocab, Axis::hidden};
    case ParamRole::lm_head: return {Axis::hidden, Axis::vocab};
    case ParamRole::attn_q:
    case ParamRole::attn_k:
    case ParamRole::attn_v:
    case ParamRole::attn_o: return {Axis::hidden, Axis::hidden};
    case ParamRole::ffn_gate:
    case ParamRole::ffn_up: return {Axis::hidden, Axis::ffn};
    case ParamRole::ffn_down: return {Axis::ffn, Axis::hidden};
    case ParamRole::attn_norm_gain:
    case ParamRole::ffn_norm_gain:
    case ParamRole::final_norm_gain:
    case ParamRole::final_norm_bias: return {Axis::hidden};
  }
  throw ClassificationError("unhandled parameter role");
}

std::size_t axis_size(Axis a, const ModelConfig& c) {
  switch (a) {
    case Axis::vocab: return static_cast<std::size_t>(c.vocab_size);
    case Axis::hidden: return static_cast<std::size_t>(c.hidden_size);
    case Axis::ffn: return static_cast<std::size_t>(c.ffn_hidden_size);
  }
  return 0;
}

std::uint64_t checked_mul(std::uint64_t a, std::uint64_t b) {
  std::uint64_t out = 0;
  if (__builtin_mul_overflow(a, b, &out)) {
    throw InvalidArgument("transfer: cumulative width ratio overflows");
  }
  return out;
}

struct Scaled {
  double matrix_lr, min_lr, matrix_std, output_mult;
};

Scaled apply(const TransferAnchor& a, std::uint64_t num, std::uint64_t den) {
  const double r = static_cast<double>(num) / static_cast<double>(den);
  return {a.matrix_lr / r, a.min_lr / r, a.matrix_std / std::sqrt(r), a.output_mult / r};
}

}  // namespace

ParamClass classify(ParamRole role, const Shape& shape, const ModelConfig& config) {
  const auto axes = axes_of(role);
  if (shape.size() != axes.size()) {
    throw ClassificationError(std::string(role_name(role)) + ": unexpected shape " +
                              to_string(shape));
  }
  int width_dims = 0;
  for (std::size_t i = 0; i < axes.size(); ++i) {
    if (shape[i] != axis_size(axes[i], config)) {
      throw ClassificationError(std::string(role_name(role)) + ": shape " + to_string(shape) +
                                " does not match the model config");
    }
    width_dims += axes[i] == Axis::vocab ? 0 : 1;
  }
  return width_dims == 2 ? ParamClass::matrix_like : ParamClass::vector_like;
}

ParamClass classify(std::string_view param_role, const Shape& shape, const ModelConfig& config) {
  return classify(role_from_name(param_role), shape, config);
}

HyperParams transfer(const HyperParams& base, WidthPair widths) {
  if (widths.base_width <= 0 || widths.target_width <= 0) {
    throw InvalidArgument("transfer: widths must be positive");
  }
  if (widths.target_width < widths.base_width) {
    throw InvalidArgument("transfer: target width must not be smaller than the base width");
  }

  TransferAnchor anchor{base.matrix_lr, base.min_lr, base.matrix_std, base.output_mult, 1, 1};
  if (base.anchor) {
    // Reuse the anchor only if `base` still holds the values it implies.
    const Scaled s = apply(*base.anchor, base.anchor->ratio_num, base.anchor->ratio_den);
    if (s.matrix_lr == base.matrix_lr && s.min_lr == base.min_lr &&
        s.matrix_std == base.matrix_std && s.output_mult == base.output_mult) {
      anchor = *base.anchor;
    }
  }

  std::uint64_t num = checked_mul(anchor.ratio_num, static_cast<std::uint64_t>(widths.target_width));
  std::uint64_t den = checked_mul(anchor.ratio_den, static_cast<std::uint64_t>(widths.base_width));
  const std::uint64_t g = std::gcd(num, den);
  num /= g;
  den /= g;

  HyperParams out = base;
  const Scaled s = apply(anchor, num, den);
  out.matrix_lr = s.matrix_lr;
  out.min_lr = s.min_lr;
  out.matrix_std = s.matrix_std;
  out.output_mult = s.output_mult;
  anchor.ratio_num = num;
  anchor.ratio_den = den;
  out.anchor = anchor;
  return out;
}

ModelConfig scale_width(const ModelConfig& base, std::int64_t width) {
  validate(base);
  if (width <= 0) throw ConfigError("scale_width: width must be positive");
  const std::int64_t head_dim = base.head_dim();
  if (width % head_dim != 0) {
    throw ConfigError("scale_width: width " + std::to_string(width) +
                      " is not a multiple of the head dimension " + std::to_string(head_dim));
  }
  if ((base.ffn_hidden_size * width) % base.hidden_size != 0) {
    throw ConfigError("scale_width: FFN size does not scale to an integer at width " +
                      std::to_string(width));
  }
  ModelConfig c = base;
  c.hidden_size = width;
  c.attention_heads = width / head_dim;
  c.ffn_hidden_size = base.ffn_hidden_size * width / base.hidden_size;
  return c;
}

}  // namespace flm
