// flm: command line front end for tokenizer, corpus, training and evaluation
// workflows. Exit codes: 0 success, 1 runtime failure, 2 invalid input,
// 3 training stopped on a sustained loss spike.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "flm/batch.hpp"
#include "flm/checkpoint.hpp"
#include "flm/corpus.hpp"
#include "flm/error.hpp"
#include "flm/eval.hpp"
#include "flm/hyperparams.hpp"
#include "flm/model.hpp"
#include "flm/mup.hpp"
#include "flm/tokenizer.hpp"
#include "flm/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitRuntime = 1;
constexpr int kExitValidation = 2;
constexpr int kExitSpike = 3;

struct Global {
  std::uint64_t seed = 0;
  bool json = false;
  std::size_t jobs = 1;
  bool no_wall_time = false;
};

// Raised after partial outputs are written.
struct SpikeAbort {
  std::string reason;
};

// ---------------------------------------------------------------------------
// Small helpers

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw flm::InvalidArgument("cannot read " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  std::ostringstream ss;
  ss << std::hex << std::setw(16) << std::setfill('0') << v;
  return ss.str();
}

bool ends_with(std::string_view s, std::string_view suffix) {
  return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

// JSONL files yield their "text" fields; anything else yields its lines.
std::vector<std::string> read_texts(const std::string& path) {
  std::vector<std::string> out;
  if (ends_with(path, ".jsonl")) {
    for (auto& d : flm::read_jsonl_file(path)) out.push_back(std::move(d.text));
    return out;
  }
  std::istringstream in(slurp(path));
  std::string line;
  while (std::getline(in, line)) out.push_back(line + "\n");
  return out;
}

std::pair<std::string, std::string> split_kv(const std::string& s, const char* flag) {
  const auto eq = s.find('=');
  if (eq == std::string::npos || eq == 0 || eq + 1 == s.size()) {
    throw flm::InvalidArgument(std::string(flag) + " expects NAME=VALUE, got \"" + s + "\"");
  }
  return {s.substr(0, eq), s.substr(eq + 1)};
}

double parse_double(const std::string& s, const std::string& what) {
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw flm::InvalidArgument(what + ": not a number: " + s);
  }
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw flm::Error("cannot write " + path.string());
  out << text;
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

// Fixed layout shared by every command that writes a directory.
void make_layout(const fs::path& out) {
  for (const char* sub : {"config", "logs", "checkpoints", "reports"}) fs::create_directories(out / sub);
}

void write_snapshot(const fs::path& out, const std::vector<std::string>& argv, const Global& g) {
  write_json(out / "config" / "command.json", {{"argv", argv}, {"seed", g.seed}, {"jobs", g.jobs}});
}

void print(const Global& g, const json& j, const std::string& text) {
  if (g.json) {
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << text;
  }
}

flm::ModelConfig load_config_for_build(const std::string& path) {
  auto c = flm::load_model_config(path);
  flm::validate(c, true);
  return c;
}

flm::HyperParams load_hp(const std::string& path) {
  auto hp = flm::load_hyperparams(path);
  flm::validate(hp);
  return hp;
}

std::size_t rows_per_batch(const flm::HyperParams& hp, const flm::PackedBatch& data, std::size_t requested) {
  if (requested > 0) return requested;
  const auto seq = static_cast<std::int64_t>(data.seq);
  if (hp.batch_tokens % seq != 0) {
    throw flm::ConfigError("batch_size_tokens " + std::to_string(hp.batch_tokens) +
                           " is not a multiple of the packed sequence length " + std::to_string(seq));
  }
  return static_cast<std::size_t>(hp.batch_tokens / seq);
}

void check_data_fits(const flm::ModelConfig& c, const flm::PackedBatch& data) {
  if (data.rows == 0) throw flm::InvalidArgument("packed data has no rows");
  if (static_cast<std::int64_t>(data.seq) > c.context_length) {
    throw flm::ConfigError("packed sequence length " + std::to_string(data.seq) + " exceeds the context length " +
                           std::to_string(c.context_length));
  }
  for (auto t : data.tokens) {
    if (t < 0 || t >= c.vocab_size) {
      throw flm::InvalidArgument("packed data holds token id " + std::to_string(t) + " outside the vocabulary");
    }
  }
}

void write_run_log(const fs::path& path, flm::RunLog log, const Global& g) {
  if (g.no_wall_time) {
    for (auto& r : log.rows) r.wall_ms = 0.0;
  }
  std::ofstream out(path);
  if (!out) throw flm::Error("cannot write " + path.string());
  log.write_csv(out);
}

json spike_json(const flm::SpikeEvent& e) {
  return {{"step", e.step},
          {"kind", e.kind == flm::SpikeKind::sustained ? "sustained" : "transient"},
          {"loss_delta", e.loss_delta},
          {"duration", e.duration},
          {"grad_norm_normal", e.grad_norm_normal},
          {"grad_norm_at_spike", std::isfinite(e.grad_norm_at_spike) ? json(e.grad_norm_at_spike) : json(nullptr)},
          {"grad_norm_median", e.grad_norm_median},
          {"abort_recommended", e.abort_recommended},
          {"reason", e.reason}};
}

std::vector<flm::DomainEvalSet> load_domains(const std::vector<std::string>& specs, const flm::Tokenizer& tok) {
  std::vector<flm::DomainEvalSet> sets;
  for (const auto& s : specs) {
    auto [name, path] = split_kv(s, "--domain");
    sets.push_back(flm::make_eval_set(name, read_texts(path), tok));
  }
  return sets;
}

flm::WeightProfile builtin_or_file(const std::string& spec, std::vector<flm::WeightProfile>& extra) {
  if (spec == "l-prop") return flm::english_llama_proportion();
  if (spec == "f-prop") return flm::english_training_proportion();
  if (spec == "zh-weighted") return flm::chinese_training_proportion();
  auto loaded = flm::load_weight_profiles(spec);
  if (loaded.empty()) throw flm::InvalidArgument(spec + ": no weight profiles");
  extra.insert(extra.end(), loaded.begin() + 1, loaded.end());
  return loaded.front();
}

// ---------------------------------------------------------------------------
// Commands

struct TokTrain {
  std::vector<std::string> corpus;
  std::size_t vocab_size = 0;
  std::string out;
  std::vector<std::string> specials;
  bool no_pretokenize = false;
};

int tok_train(const TokTrain& o, const Global& g) {
  std::vector<std::string> texts;
  std::size_t bytes = 0;
  for (const auto& p : o.corpus) {
    for (auto& t : read_texts(p)) {
      bytes += t.size();
      texts.push_back(std::move(t));
    }
  }
  flm::BbpeOptions bo;
  bo.specials = o.specials;
  bo.split_whitespace = !o.no_pretokenize;
  const auto tok = flm::train_bbpe(texts, o.vocab_size, bo);
  if (auto parent = fs::path(o.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  tok.save(o.out);
  const std::string fingerprint = hex64(fnv1a(slurp(o.out)));
  const json j = {{"tokenizer", o.out},
                  {"vocab_size", tok.vocab_size()},
                  {"merges", tok.merges().size()},
                  {"corpus_bytes", bytes},
                  {"fnv1a64", fingerprint},
                  {"seed", g.seed}};
  print(g, j,
        "wrote " + o.out + ": vocab " + std::to_string(tok.vocab_size()) + ", " +
            std::to_string(tok.merges().size()) + " merges from " + std::to_string(bytes) + " bytes, fnv1a64 " +
            fingerprint + "\n");
  return 0;
}

struct TokStats {
  std::string tokenizer;
  bool merge_free = false;
  std::vector<std::string> domains;
  std::vector<std::string> weights;
  std::string out;
};

int tok_stats(const TokStats& o, const Global& g) {
  if (o.tokenizer.empty() == !o.merge_free) {
    throw flm::InvalidArgument("give exactly one of --tokenizer and --merge-free");
  }
  const flm::Tokenizer tok = o.merge_free ? flm::Tokenizer() : flm::Tokenizer::load(o.tokenizer);
  std::map<std::string, double> weight_of;
  for (const auto& w : o.weights) {
    auto [name, value] = split_kv(w, "--weight");
    weight_of[name] = parse_double(value, "--weight " + name);
  }
  std::vector<flm::CompressionRow> rows;
  std::vector<double> weights;
  for (const auto& d : o.domains) {
    auto [name, path] = split_kv(d, "--domain");
    rows.push_back(flm::compression_ratio(tok, read_texts(path), name));
    if (!weight_of.empty()) {
      auto it = weight_of.find(name);
      if (it == weight_of.end()) throw flm::InvalidArgument("--weight: no weight for domain " + name);
      weights.push_back(it->second);
      weight_of.erase(it);
    }
  }
  if (!weight_of.empty()) throw flm::InvalidArgument("--weight: unknown domain " + weight_of.begin()->first);
  if (weights.empty()) weights.assign(rows.size(), 1.0 / static_cast<double>(rows.size()));
  const auto report = flm::make_compression_report(rows, weights);

  std::ostringstream csv;
  csv << std::setprecision(6) << std::fixed;
  csv << "domain,token_count,byte_count,ratio,weight\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    csv << rows[i].domain << ',' << rows[i].token_count << ',' << rows[i].byte_count << ',' << rows[i].ratio << ','
        << weights[i] << '\n';
  }
  csv << "weighted_average,,," << report.weighted_average << ",1\n";
  if (!o.out.empty()) write_text(o.out, csv.str());
  print(g, report.to_json(), csv.str());
  return 0;
}

struct CorpusDedup {
  std::string input;
  std::string out;
  std::size_t k = 128;
  std::size_t shingle = flm::kDefaultShingle;
  double threshold = 0.8;
  bool paragraphs = false;
};

int corpus_dedup(const CorpusDedup& o, const Global& g, const std::vector<std::string>& argv) {
  auto docs = flm::read_jsonl_file(o.input);
  const fs::path out(o.out);
  make_layout(out);
  write_snapshot(out, argv, g);
  std::size_t paragraphs_removed = 0;
  if (o.paragraphs) {
    auto pr = flm::paragraph_dedup(docs);
    paragraphs_removed = pr.paragraphs_removed;
    docs = std::move(pr.docs);
  }
  flm::DedupOptions d;
  d.k = o.k;
  d.shingle_n = o.shingle;
  d.threshold = o.threshold;
  d.seed = g.seed;
  d.jobs = g.jobs;
  const auto r = flm::dedup(docs, d);
  {
    std::ofstream kept(out / "kept.jsonl");
    std::vector<flm::Document> k;
    for (auto i : r.kept) k.push_back(docs[i]);
    flm::write_jsonl(kept, k);
    std::ofstream log(out / "logs" / "removals.jsonl");
    flm::write_removals(log, r.removals);
  }
  const json j = {{"input_documents", docs.size()},
                  {"kept", r.kept.size()},
                  {"removed", r.removals.size()},
                  {"paragraphs_removed", paragraphs_removed},
                  {"bands", r.bands.bands},
                  {"rows_per_band", r.bands.rows},
                  {"threshold", o.threshold},
                  {"seed", g.seed}};
  write_json(out / "reports" / "dedup.json", j);
  print(g, j,
        "kept " + std::to_string(r.kept.size()) + " of " + std::to_string(docs.size()) + " documents, removed " +
            std::to_string(r.removals.size()) + " (LSH " + std::to_string(r.bands.bands) + "x" +
            std::to_string(r.bands.rows) + "); log in " + (out / "logs" / "removals.jsonl").string() + "\n");
  return 0;
}

struct CorpusPlan {
  std::string manifest;
  double total_tokens = 0;
  std::string out;
};

int corpus_plan(const CorpusPlan& o, const Global& g, const std::vector<std::string>& argv) {
  const auto m = flm::load_manifest(o.manifest);
  const double total = o.total_tokens > 0 ? o.total_tokens : static_cast<double>(m.total_token_budget);
  if (!(total > 0) || total > 9e18) throw flm::InvalidArgument("total token budget must be positive");
  const auto plan = flm::plan_quotas(m, static_cast<std::int64_t>(std::llround(total)));

  std::ostringstream table;
  table << "domain,languages,sampling_prop,epochs,quota,available,feasible\n";
  for (std::size_t i = 0; i < m.domains.size(); ++i) {
    const auto& d = m.domains[i];
    const auto& q = plan.quotas[i];
    std::string langs;
    for (const auto& l : d.languages) langs += (langs.empty() ? "" : " ") + l;
    std::ostringstream avail;
    if (q.available) avail << std::setprecision(6) << *q.available;
    char quota[32];
    std::snprintf(quota, sizeof quota, "%.4e", static_cast<double>(q.quota));
    table << d.name << ',' << langs << ',' << std::setprecision(6) << d.sampling_prop << ',' << d.epochs << ','
          << quota << ',' << avail.str() << ',' << (q.feasible ? "yes" : "NO") << '\n';
  }
  table << "total,,,," << plan.assigned_tokens << ",,\n";
  if (!o.out.empty()) {
    const fs::path out(o.out);
    make_layout(out);
    write_snapshot(out, argv, g);
    write_text(out / "reports" / "plan.csv", table.str());
    write_json(out / "reports" / "plan.json", plan.to_json());
  }
  print(g, plan.to_json(), table.str());
  if (!plan.infeasible.empty()) {
    flm::sample_plan(m, plan.total_tokens);  // throws PlanningError naming the domain
  }
  return 0;
}

struct CorpusPack {
  std::string tokenizer;
  std::vector<std::string> inputs;
  std::size_t context = 0;
  std::string policy = "concatenate";
  bool no_bos = false;
  bool no_mask = false;
  std::string out;
};

int corpus_pack(const CorpusPack& o, const Global& g) {
  const auto tok = flm::Tokenizer::load(o.tokenizer);
  flm::PackOptions po;
  po.context_length = o.context;
  po.policy = o.policy == "whole" ? flm::PackPolicy::whole_documents : flm::PackPolicy::concatenate;
  po.mask_across_documents = !o.no_mask;
  const auto& specials = tok.specials();
  if (std::find(specials.begin(), specials.end(), "<pad>") != specials.end()) po.pad_id = tok.special_id("<pad>");
  if (!o.no_bos) {
    if (std::find(specials.begin(), specials.end(), "<bos>") == specials.end()) {
      throw flm::InvalidArgument("tokenizer has no <bos>; pass --no-bos");
    }
    po.bos_id = tok.special_id("<bos>");
  }
  std::vector<std::vector<flm::TokenId>> docs;
  for (const auto& p : o.inputs) {
    for (const auto& t : read_texts(p)) docs.push_back(tok.encode(t));
  }
  const auto packed = flm::pack(docs, po);
  if (auto parent = fs::path(o.out).parent_path(); !parent.empty()) fs::create_directories(parent);
  flm::save_packed(packed, o.out);
  const json j = {{"out", o.out},
                  {"documents", docs.size()},
                  {"rows", packed.rows},
                  {"seq", packed.seq},
                  {"non_pad_tokens", packed.non_pad_tokens()},
                  {"predicted_tokens", packed.predicted_tokens()},
                  {"fnv1a64", hex64(fnv1a(slurp(o.out)))}};
  print(g, j,
        "packed " + std::to_string(docs.size()) + " documents into " + std::to_string(packed.rows) + " rows of " +
            std::to_string(packed.seq) + " tokens -> " + o.out + "\n");
  return 0;
}

struct Train {
  std::string model_config;
  std::string hyperparams;
  std::string data;
  std::string out;
  std::int64_t steps = 100;
  std::size_t rows = 0;
  std::string tokenizer;
  std::vector<std::string> eval_domains;
  std::int64_t eval_every = 0;
  std::int64_t checkpoint_every = 0;
  bool no_spike_stop = false;
  bool non_pad_accounting = false;
};

int train(const Train& o, const Global& g, const std::vector<std::string>& argv) {
  // Validate every input before any compute.
  const auto config = load_config_for_build(o.model_config);
  const auto hp = load_hp(o.hyperparams);
  const auto data = flm::load_packed(o.data);
  check_data_fits(config, data);
  if (o.steps <= 0) throw flm::InvalidArgument("--steps must be positive");
  const std::size_t rows = rows_per_batch(hp, data, o.rows);
  std::optional<flm::Tokenizer> tok;
  std::vector<flm::DomainEvalSet> eval_sets;
  if (!o.eval_domains.empty()) {
    if (o.tokenizer.empty()) throw flm::InvalidArgument("--domain needs --tokenizer");
    tok = flm::Tokenizer::load(o.tokenizer);
    if (static_cast<std::int64_t>(tok->vocab_size()) > config.vocab_size) {
      throw flm::ConfigError("tokenizer vocabulary exceeds the model vocabulary");
    }
    eval_sets = load_domains(o.eval_domains, *tok);
  }

  const fs::path out(o.out);
  make_layout(out);
  write_snapshot(out, argv, g);
  write_json(out / "config" / "model.json", config);
  flm::save_hyperparams(hp, (out / "config" / "hyperparams.json").string());

  flm::Rng rng(g.seed);
  flm::TrainState state(flm::build(config, hp, rng));
  flm::save_checkpoint(state.model, (out / "checkpoints" / "step_0.ckpt").string(), {{"seed", g.seed}});
  flm::Schedule schedule = flm::Schedule::from(hp);
  if (o.non_pad_accounting) schedule.accounting = flm::TokenAccounting::non_pad;

  std::vector<flm::ValidationRow> validation;
  auto evaluate = [&](const flm::TrainState& st) {
    for (const auto& set : eval_sets) {
      flm::EvalOptions eo;
      eo.context_length = data.seq;
      const auto dl = flm::domain_loss(st.model, *tok, set, eo);
      validation.push_back({st.step, st.tokens_seen, set.name, dl.loss,
                            flm::bpb(dl.loss, set.token_count, set.byte_count)});
    }
  };

  flm::TrainOptions to;
  to.steps = o.steps;
  to.rows_per_batch = rows;
  to.seed = g.seed;
  to.stop_on_sustained_spike = !o.no_spike_stop;
  to.on_step = [&](const flm::TrainState& st, const flm::RunLogRow&) {
    if (o.eval_every > 0 && st.step % o.eval_every == 0) evaluate(st);
    if (o.checkpoint_every > 0 && st.step % o.checkpoint_every == 0) {
      flm::save_checkpoint(st.model,
                           (out / "checkpoints" / ("step_" + std::to_string(st.step) + ".ckpt")).string(),
                           {{"seed", g.seed}});
    }
  };
  auto result = flm::train(state, data, schedule, to);
  if (!eval_sets.empty() && (o.eval_every <= 0 || state.step % o.eval_every != 0)) evaluate(state);
  result.log.validation = validation;

  write_run_log(out / "logs" / "train.csv", result.log, g);
  {
    std::ofstream v(out / "logs" / "validation.csv");
    result.log.write_validation_csv(v);
    std::ofstream s(out / "logs" / "spikes.jsonl");
    for (const auto& e : result.spikes) s << spike_json(e).dump() << '\n';
  }
  flm::save_checkpoint(state.model, (out / "checkpoints" / (result.aborted ? "aborted.ckpt" : "final.ckpt")).string(),
                       {{"seed", g.seed}});

  const auto& last = result.log.rows.back();
  json summary = {{"steps", state.step},
                  {"tokens_seen", state.tokens_seen},
                  {"final_loss", std::isfinite(last.loss) ? json(last.loss) : json(nullptr)},
                  {"diverged", result.diverged},
                  {"aborted", result.aborted},
                  {"spikes", result.spikes.size()},
                  {"seed", g.seed},
                  {"rows_per_batch", rows}};
  write_json(out / "reports" / "summary.json", summary);
  std::ostringstream text;
  text << "trained " << state.step << " steps (" << state.tokens_seen << " tokens), final loss " << last.loss << ", "
       << result.spikes.size() << " spike event(s); outputs in " << out.string() << "\n";
  print(g, summary, text.str());
  if (result.aborted) {
    std::string reason = "sustained loss spike";
    for (const auto& e : result.spikes) {
      if (e.kind == flm::SpikeKind::sustained) reason = e.reason + " at step " + std::to_string(e.step);
    }
    throw SpikeAbort{reason};
  }
  if (result.diverged) throw flm::Error("training diverged (non-finite loss)");
  return 0;
}

struct GridSearch {
  std::string model_config;
  std::string grid;
  std::string data;
  std::string out;
  std::int64_t steps = 100;
  std::size_t rows = 0;
  double w_loss = 1.0, w_nonmono = 0.25, w_trend = 0.25;
};

// Either an array of hyperparameter objects or {"base": {...}, "axes": {field: [values]}}.
// Axes expand as a cartesian product in key order.
std::vector<flm::HyperParams> expand_grid(const json& j) {
  std::vector<flm::HyperParams> out;
  if (j.is_array()) {
    for (const auto& e : j) out.push_back(e.get<flm::HyperParams>());
  } else if (j.is_object() && j.contains("axes")) {
    std::vector<json> configs{j.value("base", json::object())};
    for (const auto& [field, values] : j.at("axes").items()) {
      if (!values.is_array() || values.empty()) throw flm::ConfigError("grid axis " + field + " needs values");
      std::vector<json> next;
      for (const auto& c : configs) {
        for (const auto& v : values) {
          json n = c;
          // "a+b" sets several fields to the same value.
          std::size_t start = 0;
          while (true) {
            const auto plus = field.find('+', start);
            n[field.substr(start, plus - start)] = v;
            if (plus == std::string::npos) break;
            start = plus + 1;
          }
          next.push_back(std::move(n));
        }
      }
      configs = std::move(next);
    }
    for (const auto& c : configs) out.push_back(c.get<flm::HyperParams>());
  } else {
    throw flm::ConfigError("grid: expected an array of configs or an object with \"axes\"");
  }
  if (out.empty()) throw flm::ConfigError("grid: no configurations");
  for (const auto& hp : out) flm::validate(hp);
  return out;
}

int grid_search(const GridSearch& o, const Global& g, const std::vector<std::string>& argv) {
  const auto config = load_config_for_build(o.model_config);
  json gj;
  try {
    gj = json::parse(slurp(o.grid));
  } catch (const json::parse_error& e) {
    throw flm::ConfigError(o.grid + ": " + e.what());
  }
  const auto configs = expand_grid(gj);
  const auto data = flm::load_packed(o.data);
  check_data_fits(config, data);
  if (o.steps <= 0) throw flm::InvalidArgument("--steps must be positive");
  const std::size_t rows = rows_per_batch(configs.front(), data, o.rows);

  const fs::path out(o.out);
  make_layout(out);
  write_snapshot(out, argv, g);
  write_json(out / "config" / "model.json", config);
  json all = json::array();
  for (const auto& hp : configs) all.push_back(hp);
  write_json(out / "config" / "grid.json", all);

  flm::GridOptions go;
  go.train.steps = o.steps;
  go.train.rows_per_batch = rows;
  go.train.seed = g.seed;
  go.weights = {o.w_loss, o.w_nonmono, o.w_trend};
  go.jobs = g.jobs;
  auto report = flm::run_grid(configs, config, data, go);
  for (auto& r : report.ranked) {
    const auto path = out / "logs" / ("run_" + std::to_string(r.input_index) + ".csv");
    write_run_log(path, r.log, g);
    r.curve_path = fs::relative(path, out).string();
  }
  write_json(out / "reports" / "grid.json", report.to_json());
  if (!report.all_failed) {
    flm::save_hyperparams(report.ranked.front().hp, (out / "config" / "best_hyperparams.json").string());
  }

  std::ostringstream text;
  text << "rank,input,status,score,final_loss,lr,matrix_lr,output_mult,matrix_std\n";
  for (std::size_t i = 0; i < report.ranked.size(); ++i) {
    const auto& r = report.ranked[i];
    text << i + 1 << ',' << r.input_index << ','
         << (r.status == flm::RunStatus::ok ? "ok" : r.status == flm::RunStatus::diverged ? "diverged" : "aborted")
         << ',' << r.score << ',' << r.final_smoothed_loss << ',' << r.hp.vector_lr << ',' << r.hp.matrix_lr << ','
         << r.hp.output_mult << ',' << r.hp.matrix_std << '\n';
  }
  print(g, report.to_json(), text.str());
  if (report.all_failed) throw flm::Error("every grid configuration failed");
  return 0;
}

struct EvalBpb {
  std::string checkpoint;
  std::string tokenizer;
  std::vector<std::string> domains;
  std::vector<std::string> profiles;
  std::size_t context = 0;
  std::string out;
};

int eval_bpb(const EvalBpb& o, const Global& g, const std::vector<std::string>& argv) {
  const auto tok = flm::Tokenizer::load(o.tokenizer);
  const auto sets = load_domains(o.domains, tok);
  std::vector<flm::WeightProfile> profiles, extra;
  for (const auto& p : o.profiles) profiles.push_back(builtin_or_file(p, extra));
  profiles.insert(profiles.end(), extra.begin(), extra.end());
  const auto ckpt = flm::load_checkpoint(o.checkpoint);
  if (static_cast<std::int64_t>(tok.vocab_size()) > ckpt.model.config().vocab_size) {
    throw flm::ConfigError("tokenizer vocabulary exceeds the checkpoint's vocabulary");
  }
  flm::EvalOptions eo;
  eo.context_length = o.context;
  eo.jobs = g.jobs;
  const auto report = flm::build_report(ckpt.model, tok, sets, profiles, eo);
  std::ostringstream csv;
  report.write_csv(csv);
  if (!o.out.empty()) {
    const fs::path out(o.out);
    make_layout(out);
    write_snapshot(out, argv, g);
    write_text(out / "reports" / "bpb.csv", csv.str());
    write_json(out / "reports" / "bpb.json", report.to_json());
  }
  print(g, report.to_json(), csv.str());
  return 0;
}

struct CoordCheck {
  std::string model_config;
  std::string hyperparams;
  std::string data;
  std::vector<std::int64_t> widths{64, 128, 256};
  std::int64_t steps = 100;
  std::size_t rows = 0;
  std::string rule = "mup";
  std::string out;
};

int coord_check(const CoordCheck& o, const Global& g, const std::vector<std::string>& argv) {
  const auto config = load_config_for_build(o.model_config);
  const auto hp = load_hp(o.hyperparams);
  const auto data = flm::load_packed(o.data);
  check_data_fits(config, data);
  for (auto w : o.widths) flm::validate(flm::scale_width(config, w), true);
  if (o.steps <= 0) throw flm::InvalidArgument("--steps must be positive");

  const fs::path out(o.out);
  make_layout(out);
  write_snapshot(out, argv, g);
  write_json(out / "config" / "model.json", config);
  flm::save_hyperparams(hp, (out / "config" / "hyperparams.json").string());

  flm::CoordCheckOptions co;
  co.rows_per_batch = rows_per_batch(hp, data, o.rows);
  co.seed = g.seed;
  co.jobs = g.jobs;
  if (o.rule == "none") co.transfer_rule = [](const flm::HyperParams& h, flm::WidthPair) { return h; };
  const auto results = flm::coordinate_check(config, hp, o.widths, o.steps, data, co);
  {
    std::ofstream csv(out / "logs" / "coord.csv");
    flm::write_coord_csv(csv, results);
  }
  json widths = json::array();
  double lo = INFINITY, hi = 0.0;
  std::ostringstream text;
  text << "width,max_pre_logit_rms,final_smoothed_loss,diverged\n";
  for (const auto& r : results) {
    const double m = r.max_pre_logit_rms();
    lo = std::min(lo, m);
    hi = std::max(hi, m);
    widths.push_back({{"width", r.width},
                      {"max_pre_logit_rms", std::isfinite(m) ? json(m) : json(nullptr)},
                      {"final_smoothed_loss", r.final_smoothed_loss()},
                      {"diverged", r.diverged},
                      {"hyperparams", r.hp}});
    text << r.width << ',' << m << ',' << r.final_smoothed_loss() << ',' << (r.diverged ? "yes" : "no") << '\n';
  }
  const json j = {{"rule", o.rule}, {"widths", widths}, {"rms_spread", hi / lo}};
  write_json(out / "reports" / "coord.json", j);
  text << "rms spread " << hi / lo << "x\n";
  print(g, j, text.str());
  return 0;
}

// ---------------------------------------------------------------------------

int run(const std::vector<std::string>& args);

int replay(const std::string& snapshot, const std::string& new_out) {
  json j;
  try {
    j = json::parse(slurp(snapshot));
  } catch (const json::parse_error& e) {
    throw flm::ConfigError(snapshot + ": " + e.what());
  }
  auto argv = j.at("argv").get<std::vector<std::string>>();
  bool replaced = false;
  for (std::size_t i = 0; i + 1 < argv.size(); ++i) {
    if (argv[i] == "--out") {
      argv[i + 1] = new_out;
      replaced = true;
    }
  }
  if (!replaced) throw flm::ConfigError(snapshot + ": command has no --out to redirect");
  return run(argv);
}

int run(const std::vector<std::string>& args) {
  CLI::App app{"flm: tokenizer, corpus, training and evaluation workflows"};
  app.require_subcommand(1);
  app.fallthrough();
  Global g;
  app.add_option("--seed", g.seed, "Seed for every random choice")->capture_default_str();
  app.add_flag("--json", g.json, "Machine-readable output");
  app.add_option("--jobs", g.jobs, "Concurrent workers")->check(CLI::PositiveNumber)->capture_default_str();
  app.add_flag("--no-wall-time", g.no_wall_time, "Write wall_ms as 0 so logs replay bit-identically");

  TokTrain tt;
  auto* c_tt = app.add_subcommand("tok-train", "Train a byte-level BPE tokenizer");
  c_tt->add_option("--corpus", tt.corpus, "Text or JSONL files")->required()->check(CLI::ExistingFile);
  c_tt->add_option("--vocab-size", tt.vocab_size, "Vocabulary size including specials")->required();
  c_tt->add_option("--out", tt.out, "Tokenizer JSON path")->required();
  c_tt->add_option("--special", tt.specials, "Special token (repeatable)");
  c_tt->add_flag("--no-pretokenize", tt.no_pretokenize, "Merge across whitespace");

  TokStats ts;
  auto* c_ts = app.add_subcommand("tok-stats", "Compression ratio per domain");
  c_ts->add_option("--tokenizer", ts.tokenizer, "Tokenizer JSON")->check(CLI::ExistingFile);
  c_ts->add_flag("--merge-free", ts.merge_free, "Use the byte tokenizer");
  c_ts->add_option("--domain", ts.domains, "NAME=PATH (repeatable)")->required();
  c_ts->add_option("--weight", ts.weights, "NAME=WEIGHT (repeatable); weights sum to 1");
  c_ts->add_option("--out", ts.out, "CSV path");

  CorpusDedup cd;
  auto* c_cd = app.add_subcommand("corpus-dedup", "MinHash near-duplicate removal");
  c_cd->add_option("--input", cd.input, "JSONL corpus")->required()->check(CLI::ExistingFile);
  c_cd->add_option("--out", cd.out, "Output directory")->required();
  c_cd->add_option("--num-perm", cd.k, "Signature length")->capture_default_str();
  c_cd->add_option("--shingle", cd.shingle, "Words per shingle")->capture_default_str();
  c_cd->add_option("--threshold", cd.threshold, "Estimated Jaccard to drop")->capture_default_str();
  c_cd->add_flag("--paragraphs", cd.paragraphs, "Drop repeated paragraphs first");

  CorpusPlan cp;
  auto* c_cp = app.add_subcommand("corpus-plan", "Per-domain token quotas");
  c_cp->add_option("--manifest", cp.manifest, "Manifest JSON")->required()->check(CLI::ExistingFile);
  c_cp->add_option("--total-tokens", cp.total_tokens, "Token budget (default: manifest)");
  c_cp->add_option("--out", cp.out, "Output directory");

  CorpusPack pk;
  auto* c_pk = app.add_subcommand("corpus-pack", "Tokenize and pack into fixed rows");
  c_pk->add_option("--tokenizer", pk.tokenizer, "Tokenizer JSON")->required()->check(CLI::ExistingFile);
  c_pk->add_option("--input", pk.inputs, "Text or JSONL files")->required()->check(CLI::ExistingFile);
  c_pk->add_option("--context", pk.context, "Row length")->required();
  c_pk->add_option("--policy", pk.policy, "concatenate or whole")
      ->check(CLI::IsMember({"concatenate", "whole"}))
      ->capture_default_str();
  c_pk->add_flag("--no-bos", pk.no_bos, "Do not prefix documents with <bos>");
  c_pk->add_flag("--no-document-mask", pk.no_mask, "Let attention cross documents");
  c_pk->add_option("--out", pk.out, "Packed data path")->required();

  Train tr;
  auto* c_tr = app.add_subcommand("train", "Train a model");
  c_tr->add_option("--model-config", tr.model_config, "Model config JSON")->required()->check(CLI::ExistingFile);
  c_tr->add_option("--hyperparams", tr.hyperparams, "Hyperparameter JSON")->required()->check(CLI::ExistingFile);
  c_tr->add_option("--data", tr.data, "Packed data")->required()->check(CLI::ExistingFile);
  c_tr->add_option("--out", tr.out, "Output directory")->required();
  c_tr->add_option("--steps", tr.steps, "Optimizer steps")->capture_default_str();
  c_tr->add_option("--rows-per-batch", tr.rows, "Rows per step (default: batch tokens / row length)");
  c_tr->add_option("--tokenizer", tr.tokenizer, "Tokenizer for validation")->check(CLI::ExistingFile);
  c_tr->add_option("--domain", tr.eval_domains, "Validation NAME=PATH (repeatable)");
  c_tr->add_option("--eval-every", tr.eval_every, "Validation interval in steps");
  c_tr->add_option("--checkpoint-every", tr.checkpoint_every, "Checkpoint interval in steps");
  c_tr->add_flag("--no-spike-stop", tr.no_spike_stop, "Keep training through sustained spikes");
  c_tr->add_flag("--non-pad-accounting", tr.non_pad_accounting, "Count only non-pad tokens");

  GridSearch gs;
  auto* c_gs = app.add_subcommand("grid-search", "Train and rank hyperparameter configurations");
  c_gs->add_option("--model-config", gs.model_config, "Model config JSON")->required()->check(CLI::ExistingFile);
  c_gs->add_option("--grid", gs.grid, "Grid JSON")->required()->check(CLI::ExistingFile);
  c_gs->add_option("--data", gs.data, "Packed data")->required()->check(CLI::ExistingFile);
  c_gs->add_option("--out", gs.out, "Output directory")->required();
  c_gs->add_option("--steps", gs.steps, "Steps per configuration")->capture_default_str();
  c_gs->add_option("--rows-per-batch", gs.rows, "Rows per step");
  c_gs->add_option("--w-loss", gs.w_loss, "Score weight of the final loss")->capture_default_str();
  c_gs->add_option("--w-nonmono", gs.w_nonmono, "Score weight of non-monotonicity")->capture_default_str();
  c_gs->add_option("--w-trend", gs.w_trend, "Score weight of the gradient norm trend")->capture_default_str();

  EvalBpb eb;
  auto* c_eb = app.add_subcommand("eval-bpb", "Bits per byte per domain with aggregates");
  c_eb->add_option("--checkpoint", eb.checkpoint, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_eb->add_option("--tokenizer", eb.tokenizer, "Tokenizer JSON")->required()->check(CLI::ExistingFile);
  c_eb->add_option("--domain", eb.domains, "NAME=PATH (repeatable)")->required();
  c_eb->add_option("--profile", eb.profiles, "l-prop, f-prop, zh-weighted or a JSON file (repeatable)");
  c_eb->add_option("--context", eb.context, "Row length (default: model context)");
  c_eb->add_option("--out", eb.out, "Output directory");

  CoordCheck cc;
  auto* c_cc = app.add_subcommand("coord-check", "Activation RMS across widths");
  c_cc->add_option("--model-config", cc.model_config, "Base model config JSON")->required()->check(CLI::ExistingFile);
  c_cc->add_option("--hyperparams", cc.hyperparams, "Hyperparameters at the base width")
      ->required()
      ->check(CLI::ExistingFile);
  c_cc->add_option("--data", cc.data, "Packed data")->required()->check(CLI::ExistingFile);
  c_cc->add_option("--widths", cc.widths, "Widths")->delimiter(',')->capture_default_str();
  c_cc->add_option("--steps", cc.steps, "Steps per width")->capture_default_str();
  c_cc->add_option("--rows-per-batch", cc.rows, "Rows per step");
  c_cc->add_option("--rule", cc.rule, "mup or none")->check(CLI::IsMember({"mup", "none"}))->capture_default_str();
  c_cc->add_option("--out", cc.out, "Output directory")->required();

  std::string snapshot, replay_out;
  auto* c_rp = app.add_subcommand("replay", "Rerun a command from its config/command.json");
  c_rp->add_option("--snapshot", snapshot, "command.json")->required()->check(CLI::ExistingFile);
  c_rp->add_option("--out", replay_out, "New output directory")->required();

  std::vector<const char*> cargv{"flm"};
  for (const auto& a : args) cargv.push_back(a.c_str());
  try {
    app.parse(static_cast<int>(cargv.size()), cargv.data());
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitValidation;
  }

  if (c_tt->parsed()) return tok_train(tt, g);
  if (c_ts->parsed()) return tok_stats(ts, g);
  if (c_cd->parsed()) return corpus_dedup(cd, g, args);
  if (c_cp->parsed()) return corpus_plan(cp, g, args);
  if (c_pk->parsed()) return corpus_pack(pk, g);
  if (c_tr->parsed()) return train(tr, g, args);
  if (c_gs->parsed()) return grid_search(gs, g, args);
  if (c_eb->parsed()) return eval_bpb(eb, g, args);
  if (c_cc->parsed()) return coord_check(cc, g, args);
  if (c_rp->parsed()) return replay(snapshot, replay_out);
  return kExitValidation;
}

}  // namespace

int main(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  try {
    return run(args);
  } catch (const SpikeAbort& e) {
    std::cerr << "flm: training stopped: " << e.reason << " (partial logs kept)\n";
    return kExitSpike;
  } catch (const flm::ValidationError& e) {
    std::cerr << "flm: invalid input: " << e.what() << '\n';
    return kExitValidation;
  } catch (const flm::PlanningError& e) {
    std::cerr << "flm: planning error: " << e.what() << '\n';
    return kExitRuntime;
  } catch (const std::exception& e) {
    std::cerr << "flm: error: " << e.what() << '\n';
    return kExitRuntime;
  }
}
