#pragma once

#include <cstdint>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "flm/corpus.hpp"
#include "flm/model.hpp"
#include "flm/tokenizer.hpp"

namespace flm {

// Bits per byte: loss_nats * (token_count / byte_count) / ln 2.
double bpb(double loss_nats, std::uint64_t token_count, std::uint64_t byte_count);

// Sum of w_i * v_i. Lengths must match and the weights sum to 1 within 1e-9.
double weighted_sum(const std::vector<double>& values, const std::vector<double>& weights);
double direct_average(const std::vector<double>& values);

struct DomainEvalSet {
  std::string name;
  std::vector<std::string> texts;
  std::uint64_t byte_count = 0;   // raw UTF-8 bytes
  std::uint64_t token_count = 0;  // under the tokenizer the set was built with
};

// Counts are always recomputed from the texts. Empty sets throw.
DomainEvalSet make_eval_set(std::string name, std::vector<std::string> texts, const Tokenizer& tok);
DomainEvalSet load_eval_set(std::string name, const std::string& jsonl_path, const Tokenizer& tok);

struct EvalOptions {
  std::size_t context_length = 0;  // 0: the model's context length
  std::size_t rows_per_batch = 8;
  std::size_t jobs = 1;  // concurrent domains
};

struct DomainLoss {
  double loss = 0.0;  // nats per predicted token
  double total_nats = 0.0;
  std::uint64_t predicted = 0;
};

// Documents are packed whole (no cross-document attention), each prefixed
// with the tokenizer's <bos> when it has one so that every text token is
// predicted. The mean is over predicted positions only.
DomainLoss domain_loss(const Model& model, const Tokenizer& tok, const DomainEvalSet& set,
                       const EvalOptions& options = {});

struct WeightProfile {
  std::string name;
  std::map<std::string, double> weights;  // by domain name
};

// Accepts one profile object {name, weights} or an array of them.
std::vector<WeightProfile> parse_weight_profiles(const nlohmann::json& j);
std::vector<WeightProfile> load_weight_profiles(const std::string& path);

// The weightings used for the published English and Chinese aggregates.
WeightProfile english_llama_proportion();
WeightProfile english_training_proportion();
WeightProfile chinese_training_proportion();

struct BpbRow {
  std::string domain;
  double loss = 0.0;
  std::uint64_t token_count = 0;
  std::uint64_t byte_count = 0;
  double bpb = 0.0;
};

struct BpbReport {
  std::vector<BpbRow> rows;
  double direct_average = 0.0;
  std::map<std::string, double> weighted;  // profile name -> weighted sum

  nlohmann::json to_json() const;
  // domain,loss,token_count,byte_count,bpb then one row per aggregate.
  void write_csv(std::ostream& out) const;
};

// Aggregates over existing rows. Every profile must weight exactly the
// report's domains.
BpbReport aggregate(std::vector<BpbRow> rows, const std::vector<WeightProfile>& profiles);

BpbReport build_report(const Model& model, const Tokenizer& tok,
                       const std::vector<DomainEvalSet>& sets,
                       const std::vector<WeightProfile>& profiles,
                       const EvalOptions& options = {});

}  // namespace flm
