// Acceptance run: one PASS/FAIL line per criterion, non-zero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <numbers>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "flm/corpus.hpp"
#include "flm/eval.hpp"
#include "flm/hyperparams.hpp"
#include "flm/model.hpp"
#include "flm/mup.hpp"
#include "flm/ops.hpp"
#include "flm/tokenizer.hpp"
#include "flm/trainer.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"

using namespace flm;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double round3(double x) { return std::round(x * 1000.0) / 1000.0; }

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numel(shape));
  for (double& x : v) x = scale * rng.normal();
  return Tensor(std::move(shape), std::move(v));
}

Tensor project(const Tensor& out, std::uint64_t seed) {
  Rng rng(seed);
  return sum(mul(out, random_tensor(out.shape(), rng)));
}

// ---------------------------------------------------------------------------

Outcome param_counts() {
  const double big = static_cast<double>(count_params(flm_52b())) / 1e6;
  const double small = static_cast<double>(count_params(flm_mup_base())) / 1e6;
  const double e_big = std::abs(big - 52850.0) / 52850.0;
  const double e_small = std::abs(small - 283.0) / 283.0;
  return {e_big <= 0.005 && e_small <= 0.02,
          fmt("52B: %.1fM (%.3f%% off 52850M), muP base: %.1fM (%.2f%% off 283M)", big, 100 * e_big, small,
              100 * e_small)};
}

Outcome bpb_aggregates() {
  const std::vector<std::string> en{"WebText", "Github", "Wikipedia", "Book", "ArXiv", "StackExchange"};
  const std::vector<std::string> zh{"WebText", "Code", "Book", "WorldKnowledge", "QA", "ClassicalChinese",
                                    "Professional"};
  auto weights = [](const WeightProfile& p, const std::vector<std::string>& names) {
    std::vector<double> w;
    for (const auto& n : names) w.push_back(p.weights.at(n));
    return w;
  };
  struct Case {
    const char* what;
    double got;
    double want;
  };
  const std::vector<double> flm_en{0.562, 0.164, 0.570, 0.700, 0.567, 0.531};
  const std::vector<double> llama_en{0.615, 0.286, 0.595, 0.710, 0.590, 0.570};
  const std::vector<double> flm_zh{0.643, 0.478, 0.741, 0.619, 0.831, 0.949, 0.290};
  const std::vector<double> llama_zh{1.325, 0.744, 1.503, 1.161, 1.528, 2.280, 0.919};
  const auto lp = weights(english_llama_proportion(), en);
  const auto fp = weights(english_training_proportion(), en);
  const auto zp = weights(chinese_training_proportion(), zh);
  const std::vector<Case> cases{
      {"52B en L-Prop", weighted_sum(flm_en, lp), 0.550},
      {"52B en F-Prop", weighted_sum(flm_en, fp), 0.516},
      {"65B baseline en L-Prop", weighted_sum(llama_en, lp), 0.602},
      {"65B baseline en F-Prop", weighted_sum(llama_en, fp), 0.574},
      {"52B zh average", direct_average(flm_zh), 0.650},
      {"52B zh weighted", weighted_sum(flm_zh, zp), 0.646},
      {"65B baseline zh average", direct_average(llama_zh), 1.351},
      {"65B baseline zh weighted", weighted_sum(llama_zh, zp), 1.326},
  };
  Outcome o{true, ""};
  for (const auto& c : cases) {
    const bool ok = std::abs(round3(c.got) - c.want) < 1e-9;
    o.pass = o.pass && ok;
    if (!o.detail.empty()) o.detail += "; ";
    o.detail += fmt("%s %.4f%s", c.what, c.got, ok ? "" : fmt(" (want %.3f)", c.want).c_str());
  }
  return o;
}

Outcome mup_transfer() {
  HyperParams base;
  base.output_mult = 0.5;
  base.matrix_lr = 2.4e-3;
  base.min_lr = 2.4e-4;
  const HyperParams t = transfer(base, {512, 8192});
  const bool exact = t.output_mult == 3.125e-2 && t.matrix_lr == 1.5e-4 && t.min_lr == 1.5e-5;
  const bool identity = transfer(base, {512, 512}).same_values(base);
  bool compose = true;
  for (auto [a, b, c] : {std::tuple{512, 1024, 8192}, {512, 2048, 8192}, {64, 192, 576}, {3, 7, 49}}) {
    compose = compose && transfer(transfer(base, {a, b}), {b, c}).same_values(transfer(base, {a, c}));
  }
  return {exact && identity && compose,
          fmt("output_mult %.6g, matrix_lr %.6g, min_lr %.6g at ratio 16; identity %s; composition %s", t.output_mult,
              t.matrix_lr, t.min_lr, identity ? "exact" : "BROKEN", compose ? "exact" : "BROKEN")};
}

// Criteria 4 and 5 share one set of runs.
struct WidthRuns {
  HyperParams winner;
  std::vector<CoordWidthResult> transferred;
  std::vector<CoordWidthResult> control;
  double seconds = 0.0;
};

WidthRuns width_runs() {
  const auto t0 = std::chrono::steady_clock::now();
  constexpr std::int64_t kSteps = 500;
  const auto setup = flm::testing::make_toy_setup();
  const HyperParams base = flm::testing::toy_base_hyperparams();

  std::vector<HyperParams> grid;
  for (double lr : {1e-3, 3e-3, 1e-2}) {
    for (double om : {2.0, 4.0, 8.0}) {
      HyperParams hp = base;
      hp.vector_lr = hp.matrix_lr = lr;
      hp.min_lr = lr / 10;
      hp.output_mult = om;
      grid.push_back(hp);
    }
  }
  GridOptions go;
  go.train.steps = kSteps;
  go.train.rows_per_batch = 8;
  go.train.seed = 0;
  const GridReport report = run_grid(grid, setup.base_config, setup.train, go);
  std::printf("  width-64 grid (%zu configs, %lld steps):\n", grid.size(), static_cast<long long>(kSteps));
  for (const auto& r : report.ranked) {
    std::printf("    lr %-6g output_mult %-3g  score %.4f  final loss %.4f  %s\n", r.hp.matrix_lr, r.hp.output_mult,
                r.score, r.final_smoothed_loss, r.status == RunStatus::ok ? "" : "failed");
  }

  WidthRuns out;
  out.winner = report.ranked.front().hp;
  CoordCheckOptions co;
  co.rows_per_batch = 8;
  co.seed = 0;
  out.transferred = coordinate_check(setup.base_config, out.winner, {64, 128, 256}, kSteps, setup.train, co);
  co.transfer_rule = [](const HyperParams& hp, WidthPair) { return hp; };
  out.control = coordinate_check(setup.base_config, out.winner, {64, 128, 256}, kSteps, setup.train, co);
  out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return out;
}

const WidthRuns& shared_width_runs() {
  static const WidthRuns runs = width_runs();
  return runs;
}

Outcome wider_is_better() {
  const auto& runs = shared_width_runs();
  Outcome o{true, fmt("winner lr %g output_mult %g;", runs.winner.matrix_lr, runs.winner.output_mult)};
  for (std::size_t i = 0; i < runs.transferred.size(); ++i) {
    const auto& r = runs.transferred[i];
    const double loss = r.final_smoothed_loss();
    o.detail += fmt(" width %lld: %.4f", static_cast<long long>(r.width), loss);
    if (r.diverged) o.pass = false;
    if (i > 0 && !(loss <= runs.transferred[i - 1].final_smoothed_loss() * 1.02)) o.pass = false;
  }
  o.detail += fmt("; shared runs took %.0fs", runs.seconds);
  o.pass = o.pass && runs.seconds <= 1800.0;
  return o;
}

double rms_spread(const std::vector<CoordWidthResult>& results, std::string& detail) {
  double lo = INFINITY, hi = 0.0;
  for (const auto& r : results) {
    const double m = r.max_pre_logit_rms();
    detail += fmt(" %lld:%.3g", static_cast<long long>(r.width), m);
    lo = std::min(lo, m);
    hi = std::max(hi, m);
  }
  return hi / lo;
}

Outcome coordinate_check_spread() {
  const auto& runs = shared_width_runs();
  std::string d1 = "transferred max pre-logit RMS", d2 = "untransferred control";
  const double spread = rms_spread(runs.transferred, d1);
  const double control = rms_spread(runs.control, d2);
  return {spread < 3.0 && control > 3.0,
          d1 + fmt(" (spread %.2fx); ", spread) + d2 + fmt(" (spread %.2fx)", control)};
}

Outcome gradient_checks() {
  using flm::testing::check_gradients;
  Rng rng(6);
  std::vector<std::pair<std::string, double>> errs;
  auto run = [&](const std::string& name, const std::function<Tensor()>& f, std::vector<Tensor> in) {
    errs.emplace_back(name, check_gradients(f, std::move(in)).max_relative_error);
  };
  Tensor a = random_tensor({3, 4}, rng), b = random_tensor({3, 4}, rng);
  run("add", [&] { return project(add(a, b), 1); }, {a, b});
  run("mul", [&] { return project(mul(a, b), 2); }, {a, b});
  run("scale", [&] { return project(scale(a, 0.7), 3); }, {a});
  run("reshape", [&] { return project(reshape(a, {2, 6}), 4); }, {a});
  run("sum", [&] { return sum(mul(a, a)); }, {a});
  Tensor m1 = random_tensor({4, 5}, rng), m2 = random_tensor({5, 3}, rng);
  run("matmul", [&] { return project(matmul(m1, m2), 5); }, {m1, m2});
  Tensor table = random_tensor({7, 4}, rng);
  const std::vector<std::int32_t> ids{0, 3, 3, 6};
  run("embedding", [&] { return project(embedding(table, ids), 6); }, {table});
  Tensor g = random_tensor({4}, rng), bias = random_tensor({4}, rng);
  run("rms_norm", [&] { return project(rms_norm(a, g, 1e-5), 7); }, {a, g});
  run("layer_norm", [&] { return project(layer_norm(a, g, bias, 1e-5), 8); }, {a, g, bias});
  run("swiglu", [&] { return project(swiglu(a, b), 9); }, {a, b});
  Tensor wg = random_tensor({4, 6}, rng), wu = random_tensor({4, 6}, rng), wd = random_tensor({6, 4}, rng);
  run("swiglu_ffn", [&] { return project(swiglu_ffn(a, wg, wu, wd), 10); }, {a, wg, wu, wd});
  Tensor x = random_tensor({3, 2, 4}, rng);
  const std::vector<std::int32_t> pos{0, 3, 9};
  run("rope", [&] { return project(rope_rotate(x, pos, 10000.0), 11); }, {x});
  Tensor q = random_tensor({8, 6}, rng), k = random_tensor({8, 6}, rng), v = random_tensor({8, 6}, rng);
  const std::vector<std::int32_t> seg{0, 0, 1, 1, 0, 0, 0, -1};
  const AttentionLayout layout{2, 4, 2, 1.0 / 3.0, seg};
  run("attention", [&] { return project(causal_attention(q, k, v, layout), 12); }, {q, k, v});
  Tensor logits = random_tensor({5, 9}, rng, 2.0);
  const std::vector<std::int32_t> targets{1, -1, 8, 0, 4};
  run("cross_entropy", [&] { return softmax_cross_entropy(logits, targets); }, {logits});

  ModelConfig c;
  c.layer_num = 2;
  c.attention_heads = 2;
  c.hidden_size = 8;
  c.ffn_hidden_size = 12;
  c.vocab_size = 11;
  c.context_length = 6;
  HyperParams hp;
  hp.vector_std = 0.5;
  hp.matrix_std = 0.4;
  hp.output_mult = 0.7;
  Rng mrng(3);
  const Model model = build(c, hp, mrng);
  PackedBatch batch;
  batch.rows = 2;
  batch.seq = 6;
  batch.tokens = {1, 4, 2, 9, 3, 3, 7, 0, 5, 10, 2, 0};
  batch.targets = {4, 2, -1, 3, 3, -1, 0, 5, 10, 2, -1, -1};
  batch.segments = {0, 0, 0, 1, 1, 1, 0, 0, 0, 0, 0, -1};
  batch.positions = {0, 1, 2, 0, 1, 2, 0, 1, 2, 3, 4, 0};
  std::vector<Tensor> params;
  for (const auto& p : model.parameters()) params.push_back(p.tensor);
  run(fmt("full model (%zu params)", model.parameter_count()), [&] { return loss(model, batch); }, params);

  Outcome o{model.parameter_count() <= 10'000, ""};
  double worst = 0.0;
  std::string worst_name;
  for (const auto& [name, e] : errs) {
    if (!(e < 1e-5)) o.pass = false;
    if (e > worst) {
      worst = e;
      worst_name = name;
    }
  }
  o.detail = fmt("%zu checks, worst relative error %.2e (%s)", errs.size(), worst, worst_name.c_str());
  return o;
}

Outcome tokenizer_checks() {
  std::ifstream in(std::string(FLM_FIXTURE_DIR) + "/mixed_1mb.txt", std::ios::binary);
  std::vector<std::string> lines;
  std::string line;
  std::size_t bytes = 0;
  while (std::getline(in, line)) {
    lines.push_back(line + "\n");
    bytes += lines.back().size();
  }
  const Tokenizer tok = train_bbpe(lines, 1000);
  const auto ref = flm::testing::reference_bpe(lines, 1000);
  const bool same = tok.merges() == ref.merges;

  Rng rng(77);
  std::size_t failures = 0;
  for (int i = 0; i < 10000; ++i) {
    std::string s(rng.below(80), '\0');
    for (char& ch : s) ch = static_cast<char>(rng.below(256));
    if (tok.decode(tok.encode(s)) != s) ++failures;
  }
  const double ratio = compression_ratio(Tokenizer(), lines).ratio;
  return {same && failures == 0 && ratio == 1.0,
          fmt("%zu fixture bytes, %zu merges vs oracle %zu (%s); round-trip failures %zu/10000; merge-free ratio %.17g",
              bytes, tok.merges().size(), ref.merges.size(), same ? "identical" : "DIFFERENT", failures, ratio)};
}

Outcome schedule_endpoints() {
  const HyperParams hp;
  const Schedule s = Schedule::from(hp);
  const double at_warm = lr_at(s, ParamClass::matrix_like, s.warmup_tokens());
  const double at_end = lr_at(s, ParamClass::matrix_like, s.total_schedule_tokens);
  const auto seqs = hp.batch_tokens / 4096;
  return {at_warm == 1.5e-4 && at_end == 1.5e-5 && seqs == 1344 && hp.batch_tokens % 4096 == 0,
          fmt("lr at warmup end %.17g, at schedule end %.17g; %lld / 4096 = %lld sequences", at_warm, at_end,
              static_cast<long long>(hp.batch_tokens), static_cast<long long>(seqs))};
}

Outcome minhash_checks() {
  Rng rng(2024);
  int within = 0;
  double worst = 0.0;
  for (int i = 0; i < 100; ++i) {
    const std::uint64_t universe = 200 + rng.below(800);
    const double pa = 0.1 + 0.8 * rng.uniform(), overlap = rng.uniform(), pb = 0.1 + 0.8 * rng.uniform();
    std::vector<std::uint64_t> a, b;
    for (std::uint64_t x = 0; x < universe; ++x) {
      const std::uint64_t h = mix64(x + 1000003ULL * static_cast<std::uint64_t>(i));
      const bool in_a = rng.uniform() < pa;
      if (in_a) a.push_back(h);
      if (in_a ? rng.uniform() < overlap : rng.uniform() < pb * (1 - overlap)) b.push_back(h);
    }
    if (a.empty() || b.empty()) {
      a.push_back(1);
      b.push_back(1);
    }
    const double err = std::abs(estimated_jaccard(minhash_of_set(a, 128, 9), minhash_of_set(b, 128, 9)) -
                                flm::testing::exact_jaccard(a, b));
    worst = std::max(worst, err);
    within += err <= 0.1;
  }

  const auto docs = read_jsonl_file(std::string(FLM_FIXTURE_DIR) + "/dedup_planted.jsonl");
  const auto r = dedup(docs);
  std::set<std::string> dropped;
  for (const auto& rm : r.removals) dropped.insert(rm.dropped_id);
  std::size_t planted = 0, caught = 0, wrong = 0;
  for (const auto& d : docs) {
    const bool is_dup = d.id.rfind("dup-", 0) == 0;
    planted += is_dup;
    caught += is_dup && dropped.count(d.id);
    wrong += !is_dup && dropped.count(d.id);
  }
  std::vector<Document> kept;
  for (auto i : r.kept) kept.push_back(docs[i]);
  const bool idempotent = dedup(kept).removals.empty();
  return {within >= 95 && caught == planted && planted > 0 && wrong == 0 && idempotent,
          fmt("%d/100 pairs within 0.1 (worst %.3f); planted duplicates removed %zu/%zu, originals removed %zu; "
              "second pass removes nothing: %s",
              within, worst, caught, planted, wrong, idempotent ? "yes" : "NO")};
}

Outcome desk_scale_substitutes() {
  std::puts("  not reproduced at desk scale: the 2T-token training run, absolute per-domain loss values,");
  std::puts("  the exact compression ratios of the 80k-vocabulary tokenizer, and all downstream benchmark");
  std::puts("  scores. Covered instead by criteria 1-9 and the two checks below.");

  // Memorization of one repeated document.
  ModelConfig c;
  c.layer_num = 2;
  c.attention_heads = 2;
  c.hidden_size = 32;
  c.ffn_hidden_size = 64;
  c.vocab_size = 64;
  c.context_length = 32;
  Rng drng(11);
  std::vector<std::int32_t> doc(32);
  for (auto& t : doc) t = static_cast<std::int32_t>(drng.below(64));
  const PackedBatch batch = make_lm_batch({doc, doc, doc, doc});
  HyperParams hp;
  hp.vector_lr = hp.matrix_lr = 1e-2;
  hp.min_lr = 1e-3;
  hp.vector_std = 0.02;
  hp.matrix_std = 0.1;
  hp.output_mult = 2.0;
  hp.warmup_steps = 10;
  hp.batch_tokens = 4 * 32;
  hp.schedule_tokens = 200.0 * 128;
  Rng mrng(0);
  TrainState st(build(c, hp, mrng));
  const Schedule s = Schedule::from(hp);
  double best = INFINITY;
  std::int64_t reached = -1;
  for (int step = 0; step < 200; ++step) {
    const double l = train_step(st, batch, s).loss;
    best = std::min(best, l);
    if (reached < 0 && l < 0.1) reached = step + 1;
  }

  // Spike detector on stationary noise.
  Rng nrng(20240501);
  std::vector<RunLogRow> rows(10000);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    rows[i].step = static_cast<std::int64_t>(i + 1);
    rows[i].loss = 2.0 + 0.01 * nrng.normal();
    rows[i].grad_norm = 0.5 + 0.02 * nrng.normal();
  }
  const std::size_t events = scan_spikes(rows).size();
  return {reached > 0 && events == 0,
          fmt("memorization: loss < 0.1 at step %lld (min %.4f in 200 steps); spike events over 10000 stationary "
              "steps: %zu (95%% bound on per-step rate < 3.0e-4)",
              static_cast<long long>(reached), best, events)};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    Outcome (*fn)();
  };
  const std::vector<Criterion> all{
      {1, "parameter counts", param_counts},
      {2, "bpb aggregates", bpb_aggregates},
      {3, "muP transfer", mup_transfer},
      {4, "wider is better", wider_is_better},
      {5, "coordinate check", coordinate_check_spread},
      {6, "gradient checks", gradient_checks},
      {7, "tokenizer", tokenizer_checks},
      {8, "schedule endpoints", schedule_endpoints},
      {9, "minhash and dedup", minhash_checks},
      {10, "desk-scale substitutes", desk_scale_substitutes},
  };
  int failed = 0;
  for (const auto& c : all) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::printf("criterion %2d %-22s %s  %s [%.1fs]\n", c.id, c.name, o.pass ? "PASS" : "FAIL", o.detail.c_str(),
                secs);
    std::fflush(stdout);
    failed += !o.pass;
  }
  std::printf("%d/%zu criteria passed\n", static_cast<int>(all.size()) - failed, all.size());
  return failed == 0 ? 0 : 1;
}
