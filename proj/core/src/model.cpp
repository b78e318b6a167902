#include "flm/model.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "flm/error.hpp"
#include "flm/ops.hpp"

namespace flm {

ModelConfig flm_52b() { return ModelConfig{}; }

ModelConfig flm_mup_base() {
  ModelConfig c;
  c.attention_heads = 4;
  c.hidden_size = 512;
  c.ffn_hidden_size = 1344;
  return c;
}

void validate(const ModelConfig& c, bool for_build) {
  auto require = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("model config: " + what);
  };
  require(c.layer_num >= 0, "layer_num must be >= 0");
  require(c.attention_heads >= 1, "attention_heads must be >= 1");
  require(c.hidden_size >= 1, "hidden_size must be >= 1");
  require(c.ffn_hidden_size >= 1, "ffn_hidden_size must be >= 1");
  require(c.vocab_size >= 1, "vocab_size must be >= 1");
  require(c.context_length >= 1, "context_length must be >= 1");
  require(c.hidden_size % c.attention_heads == 0,
          "hidden_size must be divisible by attention_heads");
  require(c.rope_theta > 0.0 && std::isfinite(c.rope_theta), "rope_theta must be > 0");
  require(c.rmsnorm_eps >= 0.0 && std::isfinite(c.rmsnorm_eps), "rmsnorm_eps must be >= 0");
  require(c.dropout >= 0.0 && c.dropout < 1.0, "dropout must be in [0, 1)");
  if (for_build) {
    require(c.head_dim() % 2 == 0, "head dimension must be even for rotary embeddings");
  }
}

namespace {

const char* scale_name(AttentionScale s) {
  return s == AttentionScale::inverse_head_dim ? "inverse_head_dim" : "inverse_sqrt_head_dim";
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{
      {"layer_num", c.layer_num},
      {"attention_heads", c.attention_heads},
      {"hidden_size", c.hidden_size},
      {"ffn_hidden_size", c.ffn_hidden_size},
      {"vocab_size", c.vocab_size},
      {"context_length", c.context_length},
      {"rope_theta", c.rope_theta},
      {"rmsnorm_eps", c.rmsnorm_eps},
      {"attention_scale", scale_name(c.attention_scale)},
      {"dropout", c.dropout},
  };
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (!j.is_object()) throw ConfigError("model config: expected a JSON object");
  ModelConfig out;
  try {
    out.layer_num = j.at("layer_num").get<std::int64_t>();
    out.attention_heads = j.at("attention_heads").get<std::int64_t>();
    out.hidden_size = j.at("hidden_size").get<std::int64_t>();
    out.ffn_hidden_size = j.at("ffn_hidden_size").get<std::int64_t>();
    out.vocab_size = j.at("vocab_size").get<std::int64_t>();
    out.context_length = j.at("context_length").get<std::int64_t>();
    out.rope_theta = j.value("rope_theta", out.rope_theta);
    out.rmsnorm_eps = j.value("rmsnorm_eps", out.rmsnorm_eps);
    out.dropout = j.value("dropout", out.dropout);
    const std::string scale = j.value("attention_scale", std::string(scale_name(out.attention_scale)));
    if (scale == "inverse_head_dim") {
      out.attention_scale = AttentionScale::inverse_head_dim;
    } else if (scale == "inverse_sqrt_head_dim") {
      out.attention_scale = AttentionScale::inverse_sqrt_head_dim;
    } else {
      throw ConfigError("model config: unknown attention_scale \"" + scale + "\"");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  c = out;
}

ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open model config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
  ModelConfig c = j.get<ModelConfig>();
  validate(c);
  return c;
}

std::uint64_t count_params(const ModelConfig& c) {
  validate(c);
  const auto V = static_cast<std::uint64_t>(c.vocab_size);
  const auto d = static_cast<std::uint64_t>(c.hidden_size);
  const auto f = static_cast<std::uint64_t>(c.ffn_hidden_size);
  const auto L = static_cast<std::uint64_t>(c.layer_num);
  return 2 * V * d + L * (4 * d * d + 3 * d * f + 2 * d) + 2 * d;
}

std::string_view role_name(ParamRole role) {
  switch (role) {
    case ParamRole::embedding: return "embedding";
    case ParamRole::attn_norm_gain: return "attn_norm_gain";
    case ParamRole::attn_q: return "attn_q";
    case ParamRole::attn_k: return "attn_k";
    case ParamRole::attn_v: return "attn_v";
    case ParamRole::attn_o: return "attn_o";
    case ParamRole::ffn_norm_gain: return "ffn_norm_gain";
    case ParamRole::ffn_gate: return "ffn_gate";
    case ParamRole::ffn_up: return "ffn_up";
    case ParamRole::ffn_down: return "ffn_down";
    case ParamRole::final_norm_gain: return "final_norm_gain";
    case ParamRole::final_norm_bias: return "final_norm_bias";
    case ParamRole::lm_head: return "lm_head";
  }
  return "unknown";
}

ParamRole role_from_name(std::string_view name) {
  for (int r = 0; r <= static_cast<int>(ParamRole::lm_head); ++r) {
    const auto role = static_cast<ParamRole>(r);
    if (role_name(role) == name) return role;
  }
  throw ClassificationError("unknown parameter role \"" + std::string(name) + "\"");
}

Model::Model(ModelConfig config, Multipliers multipliers)
    : config_(std::move(config)), multipliers_(multipliers) {}

std::vector<NamedParam> Model::parameters() const {
  std::vector<NamedParam> out;
  out.push_back({"embedding", ParamRole::embedding, embedding});
  for (std::size_t i = 0; i < layers.size(); ++i) {
    const auto& l = layers[i];
    const std::string p = "layers." + std::to_string(i) + ".";
    out.push_back({p + "attn_norm_gain", ParamRole::attn_norm_gain, l.attn_norm_gain});
    out.push_back({p + "attn_q", ParamRole::attn_q, l.wq});
    out.push_back({p + "attn_k", ParamRole::attn_k, l.wk});
    out.push_back({p + "attn_v", ParamRole::attn_v, l.wv});
    out.push_back({p + "attn_o", ParamRole::attn_o, l.wo});
    out.push_back({p + "ffn_norm_gain", ParamRole::ffn_norm_gain, l.ffn_norm_gain});
    out.push_back({p + "ffn_gate", ParamRole::ffn_gate, l.w_gate});
    out.push_back({p + "ffn_up", ParamRole::ffn_up, l.w_up});
    out.push_back({p + "ffn_down", ParamRole::ffn_down, l.w_down});
  }
  out.push_back({"final_norm_gain", ParamRole::final_norm_gain, final_norm_gain});
  out.push_back({"final_norm_bias", ParamRole::final_norm_bias, final_norm_bias});
  out.push_back({"lm_head", ParamRole::lm_head, lm_head});
  return out;
}

std::size_t Model::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void Model::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

Model Model::clone() const {
  Model m(config_, multipliers_);
  auto copy = [](const Tensor& t) {
    Tensor c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
  };
  m.embedding = copy(embedding);
  for (const auto& l : layers) {
    m.layers.push_back({copy(l.attn_norm_gain), copy(l.wq), copy(l.wk), copy(l.wv), copy(l.wo),
                        copy(l.ffn_norm_gain), copy(l.w_gate), copy(l.w_up), copy(l.w_down)});
  }
  m.final_norm_gain = copy(final_norm_gain);
  m.final_norm_bias = copy(final_norm_bias);
  m.lm_head = copy(lm_head);
  return m;
}

Model build(const ModelConfig& config, const HyperParams& hp, Rng& rng) {
  validate(config, true);
  validate(hp);
  const auto V = static_cast<std::size_t>(config.vocab_size);
  const auto d = static_cast<std::size_t>(config.hidden_size);
  const auto f = static_cast<std::size_t>(config.ffn_hidden_size);

  Model m(config, Multipliers{hp.input_mult, hp.output_mult});
  auto param = [](Tensor t) {
    t.set_requires_grad(true);
    return t;
  };
  auto ones = [&](std::size_t n) { return param(Tensor({n}, std::vector<double>(n, 1.0))); };
  auto matrix = [&](std::size_t r, std::size_t c) {
    return param(trunc_normal({r, c}, 0.0, hp.matrix_std, rng));
  };

  m.embedding = param(trunc_normal({V, d}, 0.0, hp.vector_std, rng));
  for (std::int64_t i = 0; i < config.layer_num; ++i) {
    TransformerLayer l;
    l.attn_norm_gain = ones(d);
    l.wq = matrix(d, d);
    l.wk = matrix(d, d);
    l.wv = matrix(d, d);
    l.wo = matrix(d, d);
    l.ffn_norm_gain = ones(d);
    l.w_gate = matrix(d, f);
    l.w_up = matrix(d, f);
    l.w_down = matrix(f, d);
    m.layers.push_back(std::move(l));
  }
  m.final_norm_gain = ones(d);
  m.final_norm_bias = param(Tensor({d}));
  m.lm_head = param(trunc_normal({d, V}, 0.0, hp.vector_std, rng));
  return m;
}

PackedBatch make_lm_batch(const std::vector<std::vector<std::int32_t>>& rows) {
  if (rows.empty() || rows.front().empty()) throw InvalidArgument("make_lm_batch: empty batch");
  PackedBatch b;
  b.rows = rows.size();
  b.seq = rows.front().size();
  for (const auto& r : rows) {
    if (r.size() != b.seq) throw ShapeError("make_lm_batch: rows differ in length");
    b.tokens.insert(b.tokens.end(), r.begin(), r.end());
    for (std::size_t t = 0; t < b.seq; ++t) b.targets.push_back(t + 1 < b.seq ? r[t + 1] : -1);
  }
  return b;
}

namespace {

double rms(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x * x;
  return std::sqrt(s / static_cast<double>(v.size()));
}

void check_batch(const Model& model, const PackedBatch& batch) {
  const auto& c = model.config();
  if (batch.rows == 0 || batch.seq == 0) throw InvalidArgument("forward: empty batch");
  if (batch.seq > static_cast<std::size_t>(c.context_length)) {
    throw InvalidArgument("forward: sequence length " + std::to_string(batch.seq) +
                          " exceeds context length " + std::to_string(c.context_length));
  }
  const std::size_t n = batch.size();
  if (batch.tokens.size() != n) throw ShapeError("forward: token count does not match rows*seq");
  if (!batch.targets.empty() && batch.targets.size() != n) {
    throw ShapeError("forward: target count does not match rows*seq");
  }
  if (!batch.segments.empty() && batch.segments.size() != n) {
    throw ShapeError("forward: segment count does not match rows*seq");
  }
  if (!batch.positions.empty() && batch.positions.size() != n) {
    throw ShapeError("forward: position count does not match rows*seq");
  }
  for (auto t : batch.tokens) {
    if (t < 0 || t >= c.vocab_size) {
      throw InvalidArgument("forward: token id " + std::to_string(t) + " out of range for vocab " +
                            std::to_string(c.vocab_size));
    }
  }
}

}  // namespace

Tensor forward_flat(const Model& model, const PackedBatch& batch, ForwardTrace* trace, Rng* dropout_rng) {
  check_batch(model, batch);
  const auto& c = model.config();
  const auto d = static_cast<std::size_t>(c.hidden_size);
  const auto heads = static_cast<std::size_t>(c.attention_heads);
  const std::size_t dh = d / heads;
  const std::size_t n = batch.size();

  std::vector<std::int32_t> positions = batch.positions;
  if (positions.empty()) {
    positions.resize(n);
    for (std::size_t i = 0; i < n; ++i) positions[i] = static_cast<std::int32_t>(i % batch.seq);
  }
  AttentionLayout layout;
  layout.batch = batch.rows;
  layout.seq = batch.seq;
  layout.heads = heads;
  layout.scale = c.attention_scale == AttentionScale::inverse_head_dim
                     ? 1.0 / static_cast<double>(dh)
                     : 1.0 / std::sqrt(static_cast<double>(dh));
  layout.segments = batch.segments;

  if (trace) trace->block_output_rms.clear();
  Tensor h = scale(embedding(model.embedding, batch.tokens), model.multipliers().input_mult);
  auto rotate = [&](const Tensor& t) {
    return reshape(rope_rotate(reshape(t, {n, heads, dh}), positions, c.rope_theta), {n, d});
  };
  auto drop = [&](const Tensor& t) { return dropout_rng ? dropout(t, c.dropout, *dropout_rng) : t; };
  for (const auto& layer : model.layers) {
    Tensor a = rms_norm(h, layer.attn_norm_gain, c.rmsnorm_eps);
    Tensor q = rotate(matmul(a, layer.wq));
    Tensor k = rotate(matmul(a, layer.wk));
    Tensor v = matmul(a, layer.wv);
    h = add(h, drop(matmul(causal_attention(q, k, v, layout), layer.wo)));
    Tensor f = rms_norm(h, layer.ffn_norm_gain, c.rmsnorm_eps);
    h = add(h, drop(swiglu_ffn(f, layer.w_gate, layer.w_up, layer.w_down)));
    if (trace) trace->block_output_rms.push_back(rms(h.data()));
  }
  if (trace) trace->pre_logit_rms = rms(h.data());
  Tensor normed = layer_norm(h, model.final_norm_gain, model.final_norm_bias, c.rmsnorm_eps);
  Tensor logits = scale(matmul(normed, model.lm_head), model.multipliers().output_mult);
  if (trace) trace->logits_rms = rms(logits.data());
  return logits;
}

Tensor forward(const Model& model, const PackedBatch& batch, ForwardTrace* trace) {
  Tensor flat = forward_flat(model, batch, trace);
  return reshape(flat, {batch.rows, batch.seq, static_cast<std::size_t>(model.config().vocab_size)});
}

Tensor loss(const Model& model, const PackedBatch& batch, ForwardTrace* trace, Rng* dropout_rng) {
  if (batch.targets.size() != batch.size()) throw ShapeError("loss: batch has no targets");
  for (auto t : batch.targets) {
    if (t >= model.config().vocab_size) {
      throw InvalidArgument("loss: target id " + std::to_string(t) + " out of range");
    }
  }
  Tensor logits = forward_flat(model, batch, trace, dropout_rng);
  return softmax_cross_entropy(logits, batch.targets);
}

}  // namespace flm
