#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "flm/checkpoint.hpp"
#include "flm/error.hpp"
#include "flm/model.hpp"
#include "flm/ops.hpp"
#include "oracles.hpp"

using namespace flm;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.layer_num = 2;
  c.attention_heads = 2;
  c.hidden_size = 8;
  c.ffn_hidden_size = 12;
  c.vocab_size = 11;
  c.context_length = 6;
  return c;
}

HyperParams tiny_hp() {
  HyperParams hp;
  hp.vector_std = 0.5;
  hp.matrix_std = 0.4;
  hp.input_mult = 1.3;
  hp.output_mult = 0.7;
  return hp;
}

PackedBatch tiny_batch() {
  PackedBatch b;
  b.rows = 2;
  b.seq = 6;
  b.tokens = {1, 4, 2, 9, 3, 3, 7, 0, 5, 10, 2, 0};
  b.targets = {4, 2, -1, 3, 3, -1, 0, 5, 10, 2, -1, -1};
  b.segments = {0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, -1};
  b.positions = {0, 1, 2, 0, 1, 2, 0, 1, 2, 3, 4, 0};
  return b;
}

}  // namespace

TEST_SUITE("model") {
  TEST_CASE("published parameter counts") {
    CHECK(count_params(flm_52b()) == 52'817'838'080ULL);
    CHECK(count_params(flm_mup_base()) == 281'216'000ULL);
    Rng rng(0);
    const ModelConfig c = tiny_config();
    const Model m = build(c, tiny_hp(), rng);
    CHECK(m.parameter_count() == count_params(c));
  }

  TEST_CASE("config validation") {
    ModelConfig c = tiny_config();
    c.attention_heads = 3;
    CHECK_THROWS_AS(validate(c), ConfigError);
    c = tiny_config();
    c.hidden_size = 6;
    c.attention_heads = 2;  // head dim 3 is odd
    CHECK_NOTHROW(validate(c));
    CHECK_THROWS_AS(validate(c, true), ConfigError);
    nlohmann::json j = tiny_config();
    CHECK(j.get<ModelConfig>() == tiny_config());
  }

  TEST_CASE("forward shapes and trace") {
    Rng rng(1);
    const Model m = build(tiny_config(), tiny_hp(), rng);
    ForwardTrace trace;
    const Tensor logits = forward(m, tiny_batch(), &trace);
    CHECK(logits.shape() == Shape{2, 6, 11});
    CHECK(trace.block_output_rms.size() == 2);
    CHECK(trace.pre_logit_rms > 0.0);
    CHECK(trace.logits_rms > 0.0);
    CHECK(std::isfinite(loss(m, tiny_batch()).item()));
  }

  TEST_CASE("documents in one row do not see each other") {
    Rng rng(2);
    const Model m = build(tiny_config(), tiny_hp(), rng);
    PackedBatch a = tiny_batch();
    PackedBatch b = a;
    b.tokens[1] = 8;  // inside the first segment of row 0
    const Tensor la = forward_flat(m, a), lb = forward_flat(m, b);
    const std::size_t V = 11;
    for (std::size_t t = 3; t < 6; ++t) {
      for (std::size_t v = 0; v < V; ++v) CHECK(la.data()[t * V + v] == lb.data()[t * V + v]);
    }
  }

  TEST_CASE("full model gradient check") {
    Rng rng(3);
    const Model m = build(tiny_config(), tiny_hp(), rng);
    REQUIRE(m.parameter_count() <= 10'000);
    std::vector<Tensor> params;
    std::vector<std::string> names;
    for (const auto& p : m.parameters()) {
      params.push_back(p.tensor);
      names.push_back(p.name);
    }
    const PackedBatch batch = tiny_batch();
    const auto r = flm::testing::check_gradients([&] { return loss(m, batch); }, params, names);
    INFO("worst input: " << r.worst_input);
    CHECK(r.max_relative_error < 1e-5);
  }

  TEST_CASE("clone is deep, copies share storage") {
    Rng rng(4);
    Model m = build(tiny_config(), tiny_hp(), rng);
    Model shared = m;
    Model deep = m.clone();
    m.lm_head.data()[0] += 1.0;
    CHECK(shared.lm_head.data()[0] == m.lm_head.data()[0]);
    CHECK(deep.lm_head.data()[0] != m.lm_head.data()[0]);
  }

  TEST_CASE("checkpoint round trip is bit exact") {
    Rng rng(5);
    const Model m = build(tiny_config(), tiny_hp(), rng);
    const auto path = std::filesystem::temp_directory_path() / "flm_test_ckpt.bin";
    save_checkpoint(m, path.string(), {{"step", 17}});
    const auto loaded = load_checkpoint(path.string());
    CHECK(loaded.metadata.at("step") == 17);
    CHECK(loaded.model.config() == m.config());
    CHECK(loaded.model.multipliers().output_mult == m.multipliers().output_mult);
    const auto a = m.parameters(), b = loaded.model.parameters();
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
      CHECK(a[i].name == b[i].name);
      REQUIRE(a[i].tensor.shape() == b[i].tensor.shape());
      for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) {
        CHECK(a[i].tensor.data()[j] == b[i].tensor.data()[j]);
      }
    }
    CHECK(forward_flat(loaded.model, tiny_batch()).data()[5] == forward_flat(m, tiny_batch()).data()[5]);
    std::filesystem::remove(path);
    CHECK_THROWS(load_checkpoint(path.string()));
  }

  TEST_CASE("role names round trip") {
    for (ParamRole r : {ParamRole::embedding, ParamRole::attn_q, ParamRole::ffn_down, ParamRole::lm_head,
                        ParamRole::final_norm_bias}) {
      CHECK(role_from_name(role_name(r)) == r);
    }
    CHECK_THROWS_AS(role_from_name("conv_kernel"), ClassificationError);
  }
}
