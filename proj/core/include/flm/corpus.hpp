#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "flm/batch.hpp"
#include "flm/tokenizer.hpp"

namespace flm {

struct Document {
  std::string id;
  std::string domain;
  std::string text;
};

// One JSON object per line: {"id", "domain", "text"}. Blank lines are
// skipped; malformed lines throw InvalidArgument naming the line number.
std::vector<Document> read_jsonl(std::istream& in);
std::vector<Document> read_jsonl_file(const std::string& path);
void write_jsonl(std::ostream& out, const std::vector<Document>& docs);

// ---------------------------------------------------------------------------
// MinHash

struct MinHashSignature {
  std::uint64_t seed = 0;
  std::vector<std::uint64_t> mins;

  std::size_t k() const noexcept { return mins.size(); }
  bool operator==(const MinHashSignature&) const = default;
};

constexpr std::size_t kDefaultShingle = 5;

// Words split on Unicode whitespace.
std::vector<std::string_view> split_words(std::string_view text);

// Hashes of word n-grams. A document with fewer than n words yields one
// shingle of all its words; a document with no words throws
// EmptyShingleError.
std::vector<std::uint64_t> shingle_hashes(std::string_view text, std::size_t n = kDefaultShingle);

MinHashSignature minhash_signature(std::string_view doc, std::size_t k,
                                   std::size_t shingle_n = kDefaultShingle,
                                   std::uint64_t seed = 0);
// Signature of an explicit set of element hashes.
MinHashSignature minhash_of_set(const std::vector<std::uint64_t>& elements, std::size_t k,
                                std::uint64_t seed = 0);

// Fraction of matching minima. Signatures must share k and seed.
double estimated_jaccard(const MinHashSignature& a, const MinHashSignature& b);

struct LshBands {
  std::size_t bands = 0;
  std::size_t rows = 0;
  // Similarity at which the candidate probability crosses one half.
  double s_curve_threshold() const;
};

// Among b * r = k, the largest r whose S-curve threshold (1/b)^(1/r) does
// not exceed `threshold`. k = 128 gives 16 x 8 at 0.8 and 32 x 4 at 0.5.
LshBands choose_bands(std::size_t k, double threshold);

struct DedupOptions {
  std::size_t k = 128;
  std::size_t shingle_n = kDefaultShingle;
  double threshold = 0.8;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;  // signature computation only
};

struct Removal {
  std::string dropped_id;
  std::string matched_id;
  double est_jaccard = 0.0;
};

struct DedupResult {
  std::vector<std::size_t> kept;  // input indices, in input order
  std::vector<Removal> removals;
  LshBands bands;
};

// Greedy scan in input order: a document is dropped when an LSH candidate
// among the kept documents has estimated Jaccard >= threshold. Documents
// without words are compared by exact text.
DedupResult dedup(const std::vector<Document>& docs, const DedupOptions& options = {});

// Removal log: {"dropped_id","matched_id","est_jaccard"} per line.
void write_removals(std::ostream& out, const std::vector<Removal>& removals);

// Drops paragraphs (blank-line separated) whose normalized form (ASCII
// lowercase, collapsed whitespace) already appeared earlier in the corpus.
struct ParagraphDedupResult {
  std::vector<Document> docs;
  std::size_t paragraphs_removed = 0;
};
ParagraphDedupResult paragraph_dedup(const std::vector<Document>& docs);

// ---------------------------------------------------------------------------
// Manifest and sampling

struct DomainSpec {
  std::string name;
  std::vector<std::string> languages;
  std::string path;
  double sampling_prop = 0.0;
  double epochs = 1.0;
  std::optional<double> size_bytes;
  // Tokens available in the domain; feasibility is checked only when known.
  std::optional<double> token_estimate;
  std::optional<double> quality;
};

struct CorpusManifest {
  std::vector<DomainSpec> domains;
  std::int64_t total_token_budget = 0;
  // Allowed |sum of proportions - 1|. Tables transcribed from rounded
  // percentages need more than the default.
  double proportion_tolerance = 1e-6;
};

// Throws ConfigError: proportions must sum to 1 within the tolerance,
// epochs > 0.
void validate(const CorpusManifest& m);
void to_json(nlohmann::json& j, const CorpusManifest& m);
void from_json(const nlohmann::json& j, CorpusManifest& m);
CorpusManifest load_manifest(const std::string& path);

struct DomainQuota {
  std::string domain;
  double sampling_prop = 0.0;
  std::int64_t quota = 0;
  std::optional<double> available;  // epochs * token_estimate
  bool feasible = true;
};

struct SamplePlan {
  std::int64_t total_tokens = 0;
  std::int64_t assigned_tokens = 0;  // sum of quotas
  std::vector<DomainQuota> quotas;
  std::vector<std::string> infeasible;

  nlohmann::json to_json() const;
};

// quota_i = round(prop_i * total). A residue of at most one token per
// domain is integer rounding and goes to the domain with the largest
// proportion, so quotas sum to total exactly when the proportions sum to 1.
// A larger residue comes from the proportions themselves and is left in
// assigned_tokens. Infeasible domains are listed, not thrown.
SamplePlan plan_quotas(const CorpusManifest& m, std::int64_t total_tokens);
// As plan_quotas, but throws PlanningError naming the first infeasible domain.
SamplePlan sample_plan(const CorpusManifest& m, std::int64_t total_tokens);

// ---------------------------------------------------------------------------
// Packing

enum class PackPolicy {
  // Stream documents back to back; a document continues on the next row.
  concatenate,
  // Start a document on a fresh row unless it fits in the current one.
  whole_documents,
};

struct PackOptions {
  std::size_t context_length = 4096;
  TokenId pad_id = 0;
  PackPolicy policy = PackPolicy::concatenate;
  // Separate segments per document within a row. When off each row is one
  // segment with positions 0..seq-1; targets still stop at document ends.
  bool mask_across_documents = true;
  // Prepended to every document when set, so its first text token is
  // predicted too.
  std::optional<TokenId> bos_id;
};

// Targets are the next token of the same document (also across a row break)
// and -1 at document ends and on padding.
PackedBatch pack(const std::vector<std::vector<TokenId>>& docs, const PackOptions& options);

// ---------------------------------------------------------------------------
// Decontamination

struct Contamination {
  std::string test_id;
  std::string train_id;
  std::size_t shared_ngrams = 0;
};

// Test documents sharing at least one exact word n-gram with a training
// document.
std::vector<Contamination> find_contamination(const std::vector<Document>& test,
                                              const std::vector<Document>& train,
                                              std::size_t n = 13);

}  // namespace flm
