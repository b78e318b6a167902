#include "flm/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numbers>
#include <set>
#include <thread>

#include "flm/error.hpp"
#include "flm/ops.hpp"
#include "flm/trainer.hpp"

namespace flm {

double bpb(double loss_nats, std::uint64_t token_count, std::uint64_t byte_count) {
  if (byte_count == 0) throw InvalidArgument("bpb: byte_count must be positive");
  if (token_count == 0) throw InvalidArgument("bpb: token_count must be positive");
  return loss_nats * (static_cast<double>(token_count) / static_cast<double>(byte_count)) /
         std::numbers::ln2;
}

double weighted_sum(const std::vector<double>& values, const std::vector<double>& weights) {
  if (values.empty()) throw InvalidArgument("weighted_sum: no values");
  if (values.size() != weights.size()) {
    throw InvalidArgument("weighted_sum: " + std::to_string(values.size()) + " values but " +
                          std::to_string(weights.size()) + " weights");
  }
  double wsum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw InvalidArgument("weighted_sum: negative weight");
    wsum += weights[i];
    acc += weights[i] * values[i];
  }
  if (std::abs(wsum - 1.0) > 1e-9) {
    throw InvalidArgument("weighted_sum: weights sum to " + std::to_string(wsum) + ", not 1");
  }
  return acc;
}

double direct_average(const std::vector<double>& values) {
  if (values.empty()) throw InvalidArgument("direct_average: no values");
  double acc = 0.0;
  for (double v : values) acc += v;
  return acc / static_cast<double>(values.size());
}

DomainEvalSet make_eval_set(std::string name, std::vector<std::string> texts, const Tokenizer& tok) {
  DomainEvalSet s;
  s.name = std::move(name);
  s.texts = std::move(texts);
  for (const auto& t : s.texts) {
    s.byte_count += t.size();
    s.token_count += tok.encode(t).size();
  }
  if (s.byte_count == 0 || s.token_count == 0) {
    throw InvalidArgument("eval set " + s.name + " is empty");
  }
  return s;
}

DomainEvalSet load_eval_set(std::string name, const std::string& jsonl_path, const Tokenizer& tok) {
  std::vector<std::string> texts;
  for (auto& d : read_jsonl_file(jsonl_path)) texts.push_back(std::move(d.text));
  return make_eval_set(std::move(name), std::move(texts), tok);
}

DomainLoss domain_loss(const Model& model, const Tokenizer& tok, const DomainEvalSet& set,
                       const EvalOptions& options) {
  if (set.texts.empty()) throw InvalidArgument("domain_loss: eval set " + set.name + " is empty");
  if (options.rows_per_batch == 0) throw InvalidArgument("domain_loss: rows_per_batch must be positive");
  PackOptions po;
  po.context_length = options.context_length ? options.context_length
                                             : static_cast<std::size_t>(model.config().context_length);
  po.policy = PackPolicy::whole_documents;
  const auto& specials = tok.specials();
  if (std::find(specials.begin(), specials.end(), "<bos>") != specials.end()) {
    po.bos_id = tok.special_id("<bos>");
  }
  if (std::find(specials.begin(), specials.end(), "<pad>") != specials.end()) {
    po.pad_id = tok.special_id("<pad>");
  }
  std::vector<std::vector<TokenId>> docs;
  docs.reserve(set.texts.size());
  for (const auto& t : set.texts) docs.push_back(tok.encode(t));
  const PackedBatch packed = pack(docs, po);

  NoGradGuard no_grad;
  DomainLoss out;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < packed.rows; start += options.rows_per_batch) {
    rows.clear();
    for (std::size_t r = start; r < std::min(packed.rows, start + options.rows_per_batch); ++r) {
      rows.push_back(r);
    }
    const PackedBatch batch = slice_rows(packed, rows);
    if (batch.predicted_tokens() == 0) continue;
    const Tensor logits = forward_flat(model, batch);
    const CrossEntropySum ce = cross_entropy_sum(logits, batch.targets);
    out.total_nats += ce.total_nats;
    out.predicted += ce.count;
  }
  if (out.predicted == 0) {
    throw InvalidArgument("domain_loss: eval set " + set.name + " has no predicted tokens");
  }
  out.loss = out.total_nats / static_cast<double>(out.predicted);
  return out;
}

std::vector<WeightProfile> parse_weight_profiles(const nlohmann::json& j) {
  std::vector<WeightProfile> out;
  auto one = [&](const nlohmann::json& pj) {
    try {
      WeightProfile p;
      p.name = pj.at("name").get<std::string>();
      p.weights = pj.at("weights").get<std::map<std::string, double>>();
      out.push_back(std::move(p));
    } catch (const nlohmann::json::exception& e) {
      throw InvalidArgument(std::string("weight profile: ") + e.what());
    }
  };
  if (j.is_array()) {
    for (const auto& pj : j) one(pj);
  } else {
    one(j);
  }
  return out;
}

std::vector<WeightProfile> load_weight_profiles(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read weight profiles " + path);
  try {
    return parse_weight_profiles(nlohmann::json::parse(in));
  } catch (const nlohmann::json::parse_error& e) {
    throw InvalidArgument(path + ": " + e.what());
  }
}

WeightProfile english_llama_proportion() {
  return {"L-Prop",
          {{"WebText", 0.82},
           {"Github", 0.045},
           {"Wikipedia", 0.045},
           {"Book", 0.045},
           {"ArXiv", 0.025},
           {"StackExchange", 0.02}}};
}

WeightProfile english_training_proportion() {
  return {"F-Prop",
          {{"WebText", 0.7517},
           {"Github", 0.1348},
           {"Wikipedia", 0.0356},
           {"Book", 0.0526},
           {"ArXiv", 0.0146},
           {"StackExchange", 0.0107}}};
}

WeightProfile chinese_training_proportion() {
  return {"Weighted",
          {{"WebText", 0.7660},
           {"Code", 0.0191},
           {"Book", 0.1161},
           {"WorldKnowledge", 0.0144},
           {"QA", 0.0450},
           {"ClassicalChinese", 0.0007},
           {"Professional", 0.0387}}};
}

BpbReport aggregate(std::vector<BpbRow> rows, const std::vector<WeightProfile>& profiles) {
  if (rows.empty()) throw InvalidArgument("aggregate: no rows");
  BpbReport r;
  r.rows = std::move(rows);
  std::vector<double> values;
  for (const auto& row : r.rows) values.push_back(row.bpb);
  r.direct_average = direct_average(values);
  for (const auto& p : profiles) {
    if (p.weights.size() != r.rows.size()) {
      throw InvalidArgument("weight profile " + p.name + " has " + std::to_string(p.weights.size()) +
                            " domains, the report has " + std::to_string(r.rows.size()));
    }
    std::vector<double> w;
    for (const auto& row : r.rows) {
      auto it = p.weights.find(row.domain);
      if (it == p.weights.end()) {
        throw InvalidArgument("weight profile " + p.name + " has no weight for " + row.domain);
      }
      w.push_back(it->second);
    }
    try {
      r.weighted[p.name] = weighted_sum(values, w);
    } catch (const InvalidArgument& e) {
      throw InvalidArgument("weight profile " + p.name + ": " + e.what());
    }
  }
  return r;
}

BpbReport build_report(const Model& model, const Tokenizer& tok,
                       const std::vector<DomainEvalSet>& sets,
                       const std::vector<WeightProfile>& profiles, const EvalOptions& options) {
  if (sets.empty()) throw InvalidArgument("build_report: at least one eval set is required");
  std::vector<BpbRow> rows(sets.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < sets.size(); i = next++) {
      try {
        const DomainLoss dl = domain_loss(model, tok, sets[i], options);
        auto& row = rows[i];
        row.domain = sets[i].name;
        row.loss = dl.loss;
        row.token_count = sets[i].token_count;
        row.byte_count = sets[i].byte_count;
        row.bpb = bpb(dl.loss, row.token_count, row.byte_count);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(options.jobs, 1, sets.size());
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
  return aggregate(std::move(rows), profiles);
}

nlohmann::json BpbReport::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (const auto& r : rows) {
    rj.push_back({{"domain", r.domain},
                  {"loss_nats_per_token", r.loss},
                  {"token_count", r.token_count},
                  {"byte_count", r.byte_count},
                  {"bpb", r.bpb}});
  }
  return {{"rows", rj}, {"direct_average", direct_average}, {"weighted_sum", weighted}};
}

void BpbReport::write_csv(std::ostream& out) const {
  out << "domain,loss,token_count,byte_count,bpb\n";
  const auto prec = out.precision(17);
  for (const auto& r : rows) {
    out << r.domain << ',' << r.loss << ',' << r.token_count << ',' << r.byte_count << ','
        << r.bpb << '\n';
  }
  out << "direct_average,,,," << direct_average << '\n';
  for (const auto& [name, v] : weighted) out << "weighted:" << name << ",,,," << v << '\n';
  out.precision(prec);
}

}  // namespace flm
