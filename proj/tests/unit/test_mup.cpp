#include <doctest.h>

#include <cmath>

#include "flm/error.hpp"
#include "flm/model.hpp"
#include "flm/mup.hpp"

using namespace flm;

TEST_SUITE("mup") {
  TEST_CASE("transfer to the 52B width reproduces the published values exactly") {
    HyperParams base;
    base.output_mult = 0.5;
    base.matrix_lr = 2.4e-3;
    base.min_lr = 2.4e-4;
    const HyperParams t = transfer(base, {512, 8192});
    CHECK(t.output_mult == 3.125e-2);
    CHECK(t.matrix_lr == 1.5e-4);
    CHECK(t.min_lr == 1.5e-5);
    CHECK(t.vector_lr == base.vector_lr);
    CHECK(t.vector_std == base.vector_std);
    CHECK(t.input_mult == base.input_mult);
    CHECK(t.matrix_std == base.matrix_std / 4.0);
  }

  TEST_CASE("identity at ratio 1 and exact composition") {
    HyperParams base;
    base.output_mult = 0.37;
    base.matrix_lr = 3.3e-3;
    base.matrix_std = 0.021;
    CHECK(transfer(base, {256, 256}).same_values(base));
    for (auto [a, b, c] : {std::tuple{64, 128, 256}, {512, 1536, 8192}, {3, 7, 49}}) {
      const HyperParams two = transfer(transfer(base, {a, b}), {b, c});
      const HyperParams one = transfer(base, {a, c});
      CHECK(two.same_values(one));
    }
    CHECK_THROWS_AS(transfer(base, {128, 64}), InvalidArgument);
  }

  TEST_CASE("classification by role and shape") {
    const ModelConfig c = flm_mup_base();
    const std::size_t d = 512, f = 1344, V = 80000;
    CHECK(classify("attn_q", {d, d}, c) == ParamClass::matrix_like);
    CHECK(classify("ffn_gate", {d, f}, c) == ParamClass::matrix_like);
    CHECK(classify("ffn_down", {f, d}, c) == ParamClass::matrix_like);
    CHECK(classify("embedding", {V, d}, c) == ParamClass::vector_like);
    CHECK(classify("lm_head", {d, V}, c) == ParamClass::vector_like);
    CHECK(classify("final_norm_bias", {d}, c) == ParamClass::vector_like);
    CHECK_THROWS_AS(classify("attn_q", {d, d + 1}, c), ClassificationError);
    CHECK_THROWS_AS(classify("mystery", {d, d}, c), ClassificationError);
    CHECK(class_name(ParamClass::matrix_like) == "matrix-like");
  }

  TEST_CASE("scale_width keeps depth and head dimension") {
    const ModelConfig base = flm_mup_base();
    const ModelConfig wide = scale_width(base, 8192);
    CHECK(wide.hidden_size == 8192);
    CHECK(wide.head_dim() == base.head_dim());
    CHECK(wide.layer_num == base.layer_num);
    CHECK(wide.vocab_size == base.vocab_size);
    CHECK(wide.ffn_hidden_size == base.ffn_hidden_size * 16);
    CHECK(scale_width(base, 512) == base);
  }
}
