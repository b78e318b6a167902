#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace flm {

using TokenId = std::int32_t;

// Splits text into pre-tokens: a run of non-whitespace bytes followed by the
// whitespace that trails it ("the " is one chunk). Whitespace is Unicode
// whitespace decoded from UTF-8; invalid sequences count as non-whitespace.
// With split disabled the whole text is one chunk.
std::vector<std::string_view> pretokenize(std::string_view text, bool split = true);

// Byte-level BPE tokenizer. Ids 0..255 are raw bytes, then the special
// tokens in order, then one id per merge.
class Tokenizer {
 public:
  // The merge-free tokenizer: one token per byte.
  explicit Tokenizer(std::vector<std::string> specials = {}, bool split_whitespace = true);

  std::size_t vocab_size() const noexcept { return vocab_.size(); }
  const std::vector<std::pair<TokenId, TokenId>>& merges() const noexcept { return merges_; }
  const std::string& token_bytes(TokenId id) const;
  const std::vector<std::string>& specials() const noexcept { return specials_; }
  // Throws InvalidArgument when `name` is not a special token.
  TokenId special_id(std::string_view name) const;
  bool split_whitespace() const noexcept { return split_whitespace_; }

  // Appends a merge of two existing tokens and returns the new id.
  TokenId add_merge(TokenId left, TokenId right);

  // Never emits special tokens; their names encode as plain bytes.
  std::vector<TokenId> encode(std::string_view text) const;
  // Special tokens decode to their names. Unknown ids throw InvalidArgument.
  std::string decode(std::span<const TokenId> ids) const;

  nlohmann::json to_json() const;
  // Validates the merge order and the byte expansion of every id.
  static Tokenizer from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static Tokenizer load(const std::string& path);

 private:
  void encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const;
  static std::uint64_t key(TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  }

  std::vector<std::string> vocab_;
  std::vector<std::string> specials_;
  std::map<std::string, TokenId, std::less<>> special_ids_;
  std::vector<std::pair<TokenId, TokenId>> merges_;
  // pair -> (rank, merged id)
  std::unordered_map<std::uint64_t, std::pair<std::int32_t, TokenId>> ranks_;
  bool split_whitespace_ = true;

  struct Cache;
  std::shared_ptr<Cache> cache_;
};

struct BbpeOptions {
  std::vector<std::string> specials;
  bool split_whitespace = true;
};

// Greedy BPE from the 256-byte alphabet. Each step merges the most frequent
// adjacent pair (overlapping occurrences counted), breaking ties by the
// smallest left token bytes, then right token bytes. Stops at vocab_size
// (specials included) or when no pair occurs twice.
Tokenizer train_bbpe(const std::vector<std::string>& corpus, std::size_t vocab_size,
                     const BbpeOptions& options = {});

struct CompressionRow {
  std::string domain;
  std::uint64_t token_count = 0;
  std::uint64_t byte_count = 0;
  double ratio = 0.0;  // token_count / byte_count
};

struct CompressionReport {
  std::vector<CompressionRow> rows;
  std::vector<double> weights;
  double weighted_average = 0.0;

  nlohmann::json to_json() const;
};

// Throws InvalidArgument when the sample has no bytes.
CompressionRow compression_ratio(const Tokenizer& tok, const std::vector<std::string>& docs,
                                 std::string domain = "");

// Sum of w_i * ratio_i. Weights must be non-negative, one per row, and sum
// to 1 within 1e-9.
double weighted_compression(const std::vector<CompressionRow>& rows,
                            const std::vector<double>& weights);

CompressionReport make_compression_report(std::vector<CompressionRow> rows,
                                          std::vector<double> weights);

}  // namespace flm
