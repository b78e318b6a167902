#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>

#include "flm/corpus.hpp"
#include "flm/error.hpp"
#include "flm/trainer.hpp"
#include "synthetic.hpp"

using namespace flm;

namespace {

constexpr std::size_t kCtx = 16;

struct Tiny {
  Tokenizer tok;
  PackedBatch data;
  ModelConfig config;
};

const Tiny& tiny() {
  static const Tiny t = [] {
    flm::testing::SyntheticCorpusOptions o;
    o.target_bytes = 12'000;
    o.vocab_words = 40;
    o.min_doc_words = 20;
    o.max_doc_words = 60;
    const auto docs = flm::testing::synthetic_documents(o);
    Tiny t;
    t.tok = train_bbpe(docs, 320, {{"<pad>", "<bos>"}});
    std::vector<std::vector<TokenId>> ids;
    for (std::size_t i = 0; i < std::min<std::size_t>(docs.size(), 50); ++i) ids.push_back(t.tok.encode(docs[i]));
    PackOptions po;
    po.context_length = kCtx;
    po.pad_id = t.tok.special_id("<pad>");
    po.bos_id = t.tok.special_id("<bos>");
    t.data = pack(ids, po);
    t.config.layer_num = 1;
    t.config.attention_heads = 2;
    t.config.hidden_size = 32;
    t.config.ffn_hidden_size = 64;
    t.config.vocab_size = static_cast<std::int64_t>(t.tok.vocab_size());
    t.config.context_length = kCtx;
    return t;
  }();
  return t;
}

HyperParams tiny_hp() {
  HyperParams hp;
  hp.vector_lr = 1e-2;
  hp.matrix_lr = 1e-2;
  hp.min_lr = 1e-3;
  hp.vector_std = 0.02;
  hp.matrix_std = 0.1;
  hp.output_mult = 2.0;
  hp.warmup_steps = 10;
  hp.batch_tokens = 4 * kCtx;
  hp.schedule_tokens = 200.0 * static_cast<double>(hp.batch_tokens);
  return hp;
}

TrainState fresh_state(const HyperParams& hp, std::uint64_t seed = 1) {
  Rng rng(seed);
  return TrainState(build(tiny().config, hp, rng));
}

}  // namespace

TEST_SUITE("trainer") {
  TEST_CASE("published schedule endpoints") {
    const Schedule s = Schedule::from(HyperParams{});
    const double warm = s.warmup_tokens();
    CHECK(warm == 2000.0 * 5'505'024.0);
    CHECK(lr_at(s, ParamClass::matrix_like, warm) == 1.5e-4);
    CHECK(lr_at(s, ParamClass::matrix_like, 2.5e12) == 1.5e-5);
    CHECK(lr_at(s, ParamClass::vector_like, 3e12) == 1.5e-5);
    CHECK(lr_at(s, ParamClass::matrix_like, 0.0) == 0.0);
    CHECK(lr_at(s, ParamClass::matrix_like, warm / 2) == doctest::Approx(7.5e-5).epsilon(1e-15));
    const double mid = warm + (2.5e12 - warm) / 2;
    CHECK(lr_at(s, ParamClass::matrix_like, mid) == doctest::Approx(8.25e-5).epsilon(1e-12));
    CHECK(5'505'024 / 4096 == 1344);
  }

  TEST_CASE("schedule is monotone after warmup and floors per class") {
    Schedule s = Schedule::from(tiny_hp());
    s.vector_peak_lr = 5e-4;  // below min_lr: floor becomes the peak
    double prev = 1.0;
    for (double t = s.warmup_tokens(); t <= s.total_schedule_tokens * 1.1; t += 100) {
      const double lr = lr_at(s, ParamClass::matrix_like, t);
      CHECK(lr <= prev);
      prev = lr;
    }
    CHECK(lr_at(s, ParamClass::vector_like, s.total_schedule_tokens) == 5e-4);
    s.total_schedule_tokens = s.warmup_tokens();
    CHECK_THROWS_AS(validate(s), ConfigError);
  }

  TEST_CASE("global norm clipping") {
    Tensor a({1}, {3.0}, true), b({1}, {4.0}, true);
    a.mutable_grad()[0] = 3.0;
    b.mutable_grad()[0] = 4.0;
    std::vector<Tensor> ps{a, b};
    auto r = clip_gradients(ps, 1.0);
    CHECK(r.global_norm == 5.0);
    CHECK(r.clipped);
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    CHECK(b.grad()[0] == doctest::Approx(0.8));
    r = clip_gradients(ps, 10.0);
    CHECK_FALSE(r.clipped);
    CHECK(a.grad()[0] == doctest::Approx(0.6));
    a.mutable_grad()[0] = std::nan("");
    CHECK_THROWS_AS(clip_gradients(ps, 1.0), NonFiniteGradient);
    CHECK(b.grad()[0] == doctest::Approx(0.8));
  }

  TEST_CASE("zero learning rate leaves parameters bit identical") {
    HyperParams hp = tiny_hp();
    TrainState st = fresh_state(hp);
    const Model before = st.model.clone();
    Schedule s = Schedule::from(hp);
    s.vector_peak_lr = s.matrix_peak_lr = s.min_lr = 0.0;
    RowSampler sampler(tiny().data, 4, 0);
    for (int i = 0; i < 5; ++i) train_step(st, sampler.next(), s);
    const auto a = before.parameters(), b = st.model.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) REQUIRE(a[i].tensor.data()[j] == b[i].tensor.data()[j]);
    }
    CHECK(st.updates == 5);
  }

  TEST_CASE("training is deterministic") {
    const HyperParams hp = tiny_hp();
    TrainOptions o;
    o.steps = 15;
    o.rows_per_batch = 4;
    o.seed = 3;
    TrainState a = fresh_state(hp), b = fresh_state(hp);
    const auto ra = train(a, tiny().data, Schedule::from(hp), o);
    const auto rb = train(b, tiny().data, Schedule::from(hp), o);
    REQUIRE(ra.log.rows.size() == 15);
    for (std::size_t i = 0; i < 15; ++i) {
      CHECK(ra.log.rows[i].loss == rb.log.rows[i].loss);
      CHECK(ra.log.rows[i].grad_norm == rb.log.rows[i].grad_norm);
    }
  }

  TEST_CASE("dropout applies in training only and is reproducible") {
    HyperParams hp = tiny_hp();
    Rng rng(1);
    ModelConfig c = tiny().config;
    c.dropout = 0.3;
    const Model dropped = build(c, hp, rng);
    Rng rng0(1);
    const Model plain = build(tiny().config, hp, rng0);
    std::vector<std::size_t> rows{0, 1};
    const auto batch = slice_rows(tiny().data, rows);
    // Evaluation ignores the rate.
    CHECK(loss(dropped, batch).item() == loss(plain, batch).item());
    Rng mask(5);
    CHECK(loss(dropped, batch, nullptr, &mask).item() != loss(plain, batch).item());

    TrainOptions o;
    o.steps = 6;
    o.rows_per_batch = 4;
    o.seed = 4;
    TrainState a(dropped.clone()), b(dropped.clone());
    const auto ra = train(a, tiny().data, Schedule::from(hp), o);
    const auto rb = train(b, tiny().data, Schedule::from(hp), o);
    for (std::size_t i = 0; i < 6; ++i) CHECK(ra.log.rows[i].loss == rb.log.rows[i].loss);

    c.dropout = 1.0;
    CHECK_THROWS_AS(validate(c), ConfigError);
  }

  TEST_CASE("a small corpus is learned") {
    const HyperParams hp = tiny_hp();
    TrainOptions o;
    o.steps = 200;
    o.rows_per_batch = 4;
    TrainState st = fresh_state(hp);
    const auto r = train(st, tiny().data, Schedule::from(hp), o);
    CHECK_FALSE(r.diverged);
    const double lnV = std::log(static_cast<double>(tiny().config.vocab_size));
    CHECK(r.log.rows.front().loss == doctest::Approx(lnV).epsilon(0.1));
    double tail = 0.0;
    for (std::size_t i = 180; i < 200; ++i) tail += r.log.rows[i].loss;
    CHECK(tail / 20 < 0.6 * lnV);
  }

  TEST_CASE("token accounting") {
    const HyperParams hp = tiny_hp();
    TrainState st = fresh_state(hp);
    Schedule s = Schedule::from(hp);
    RowSampler sampler(tiny().data, 4, 0);
    const auto r1 = train_step(st, sampler.next(), s);
    const auto r2 = train_step(st, sampler.next(), s);
    CHECK(r1.tokens == 64.0);
    CHECK(r2.tokens == 128.0);
    CHECK(r1.lr_matrix == doctest::Approx(hp.matrix_lr / 10));

    TrainState st2 = fresh_state(hp);
    s.accounting = TokenAccounting::non_pad;
    PackedBatch padded = slice_rows(tiny().data, std::vector<std::size_t>{0});
    for (std::size_t j = 10; j < kCtx; ++j) {
      padded.tokens[j] = 0;
      padded.targets[j] = -1;
      padded.segments[j] = -1;
      padded.positions[j] = 0;
    }
    const auto r3 = train_step(st2, padded, s);
    CHECK(r3.tokens == 10.0);
    CHECK(st2.tokens_seen == 10.0);
  }

  TEST_CASE("non-finite loss skips the update") {
    HyperParams hp = tiny_hp();
    TrainState st = fresh_state(hp);
    st.model.lm_head.data()[0] = std::numeric_limits<double>::infinity();
    const Model before = st.model.clone();
    RowSampler sampler(tiny().data, 4, 0);
    const auto row = train_step(st, sampler.next(), Schedule::from(hp));
    CHECK(row.skipped);
    CHECK(st.updates == 0);
    CHECK(st.step == 1);
    const auto a = before.parameters(), b = st.model.parameters();
    for (std::size_t i = 0; i < a.size(); ++i) {
      for (std::size_t j = 0; j < a[i].tensor.numel(); ++j) REQUIRE(a[i].tensor.data()[j] == b[i].tensor.data()[j]);
    }
  }

  TEST_CASE("row sampler visits every row once per epoch") {
    const PackedBatch& data = tiny().data;
    RowSampler sampler(data, 1, 7);
    std::multiset<std::int32_t> first_tokens, expected;
    for (std::size_t r = 0; r < data.rows; ++r) expected.insert(data.tokens[r * data.seq + 1]);
    for (std::size_t r = 0; r < data.rows; ++r) first_tokens.insert(sampler.next().tokens[1]);
    CHECK(first_tokens == expected);
  }

  TEST_CASE("run log csv") {
    RunLog log;
    log.rows.push_back({1, 64, 2.5, 0.5, 1e-3, 2e-3, 1.0, false});
    log.rows.push_back({2, 128, std::nan(""), std::nan(""), 1e-3, 2e-3, 1.0, true});
    std::ostringstream out;
    log.write_csv(out);
    const std::string s = out.str();
    CHECK(s.rfind("step,tokens,loss,grad_norm,lr_vector,lr_matrix,wall_ms\n", 0) == 0);
    CHECK(s.find("nan") != std::string::npos);
  }

  TEST_CASE("curve scoring") {
    std::vector<RunLogRow> flat, bumpy;
    for (int i = 0; i < 40; ++i) {
      flat.push_back({i + 1, 0, 3.0 - 0.01 * i, 1.0, 0, 0, 0, false});
      bumpy.push_back({i + 1, 0, 3.0 - 0.01 * i + (i % 2 ? 0.3 : 0.0), 1.0 + 0.05 * i, 0, 0, 0, false});
    }
    const GridScoreWeights w;
    const auto a = score_curve(flat, w, 0.1), b = score_curve(bumpy, w, 0.1);
    CHECK(a.non_monotonicity == 0.0);
    CHECK(a.grad_norm_trend == 0.0);
    CHECK(b.non_monotonicity > 0.0);
    CHECK(b.grad_norm_trend > 0.0);
    CHECK(a.score < b.score);
  }

  TEST_CASE("grid ranking is independent of input order") {
    HyperParams good = tiny_hp(), slow = tiny_hp(), wild = tiny_hp();
    slow.vector_lr = slow.matrix_lr = 1e-4;
    slow.min_lr = 1e-5;
    wild.vector_lr = wild.matrix_lr = 1e3;
    GridOptions o;
    o.train.steps = 30;
    o.train.rows_per_batch = 4;
    o.jobs = 3;
    const auto dir = std::filesystem::temp_directory_path() / "flm_test_grid";
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    o.curve_dir = dir.string();
    const auto r1 = run_grid({good, slow, wild}, tiny().config, tiny().data, o);
    o.curve_dir.clear();
    const auto r2 = run_grid({wild, good, slow}, tiny().config, tiny().data, o);
    REQUIRE(r1.ranked.size() == 3);
    CHECK(r1.ranked[0].hp.same_values(good));
    CHECK(r1.ranked[1].hp.same_values(slow));
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(r1.ranked[i].hp.same_values(r2.ranked[i].hp));
      CHECK(r1.ranked[i].score == r2.ranked[i].score);
    }
    CHECK(std::filesystem::exists(dir / "run_0.csv"));
    CHECK(r1.to_json().at("runs").size() == 3);
    CHECK_FALSE(r1.all_failed);
    std::filesystem::remove_all(dir);
  }
}
