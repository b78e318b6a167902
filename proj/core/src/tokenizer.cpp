#include "flm/tokenizer.hpp"

#include <algorithm>
#include <fstream>
#include <limits>
#include <mutex>
#include <set>
#include <sstream>

#include "flm/error.hpp"

namespace flm {

namespace {

constexpr std::size_t kCacheLimit = 1 << 16;

// Decodes one UTF-8 code point at `i`; returns its length, or 0 when the
// sequence is invalid.
std::size_t utf8_decode(std::string_view s, std::size_t i, char32_t& cp) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len = 0;
  if (b0 < 0x80) {
    cp = b0;
    return 1;
  } else if ((b0 & 0xE0) == 0xC0) {
    len = 2;
    cp = b0 & 0x1F;
  } else if ((b0 & 0xF0) == 0xE0) {
    len = 3;
    cp = b0 & 0x0F;
  } else if ((b0 & 0xF8) == 0xF0) {
    len = 4;
    cp = b0 & 0x07;
  } else {
    return 0;
  }
  if (i + len > s.size()) return 0;
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b & 0xC0) != 0x80) return 0;
    cp = (cp << 6) | (b & 0x3F);
  }
  return len;
}

bool is_space(char32_t c) {
  switch (c) {
    case 0x09: case 0x0A: case 0x0B: case 0x0C: case 0x0D: case 0x20:
    case 0x85: case 0xA0: case 0x1680: case 0x2028: case 0x2029:
    case 0x202F: case 0x205F: case 0x3000:
      return true;
    default:
      return c >= 0x2000 && c <= 0x200A;
  }
}

// Byte length of the character at i and whether it is whitespace.
std::pair<std::size_t, bool> char_at(std::string_view s, std::size_t i) {
  char32_t cp = 0;
  const std::size_t len = utf8_decode(s, i, cp);
  if (len == 0) return {1, false};
  return {len, is_space(cp)};
}

std::string to_hex(std::string_view bytes) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (unsigned char c : bytes) {
    out.push_back(digits[c >> 4]);
    out.push_back(digits[c & 15]);
  }
  return out;
}

std::string from_hex(std::string_view hex) {
  if (hex.size() % 2 != 0) throw InvalidArgument("tokenizer: odd-length hex string");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw InvalidArgument("tokenizer: invalid hex digit");
  };
  std::string out;
  out.reserve(hex.size() / 2);
  for (std::size_t i = 0; i < hex.size(); i += 2) {
    out.push_back(static_cast<char>(nibble(hex[i]) * 16 + nibble(hex[i + 1])));
  }
  return out;
}

}  // namespace

std::vector<std::string_view> pretokenize(std::string_view text, bool split) {
  std::vector<std::string_view> out;
  if (text.empty()) return out;
  if (!split) {
    out.push_back(text);
    return out;
  }
  std::size_t start = 0;
  std::size_t i = 0;
  bool in_space = false;
  while (i < text.size()) {
    auto [len, space] = char_at(text, i);
    if (!space && in_space) {
      out.push_back(text.substr(start, i - start));
      start = i;
    }
    in_space = space;
    i += len;
  }
  out.push_back(text.substr(start));
  return out;
}

std::vector<std::string_view> split_words(std::string_view text) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  std::size_t start = std::string_view::npos;
  while (i < text.size()) {
    auto [len, space] = char_at(text, i);
    if (space && start != std::string_view::npos) {
      out.push_back(text.substr(start, i - start));
      start = std::string_view::npos;
    } else if (!space && start == std::string_view::npos) {
      start = i;
    }
    i += len;
  }
  if (start != std::string_view::npos) out.push_back(text.substr(start));
  return out;
}

struct Tokenizer::Cache {
  std::mutex mu;
  std::unordered_map<std::string, std::vector<TokenId>> entries;
};

Tokenizer::Tokenizer(std::vector<std::string> specials, bool split_whitespace)
    : split_whitespace_(split_whitespace), cache_(std::make_shared<Cache>()) {
  vocab_.reserve(256 + specials.size());
  for (int b = 0; b < 256; ++b) vocab_.emplace_back(1, static_cast<char>(b));
  for (auto& s : specials) {
    if (s.empty()) throw InvalidArgument("tokenizer: special token names must be non-empty");
    if (!special_ids_.emplace(s, static_cast<TokenId>(vocab_.size())).second) {
      throw InvalidArgument("tokenizer: duplicate special token " + s);
    }
    vocab_.push_back(s);
  }
  specials_ = std::move(specials);
}

const std::string& Tokenizer::token_bytes(TokenId id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= vocab_.size()) {
    throw InvalidArgument("tokenizer: unknown token id " + std::to_string(id));
  }
  return vocab_[static_cast<std::size_t>(id)];
}

TokenId Tokenizer::special_id(std::string_view name) const {
  auto it = special_ids_.find(name);
  if (it == special_ids_.end()) {
    throw InvalidArgument("tokenizer: no special token " + std::string(name));
  }
  return it->second;
}

TokenId Tokenizer::add_merge(TokenId left, TokenId right) {
  for (TokenId t : {left, right}) {
    token_bytes(t);
    if (special_ids_.size() && std::any_of(special_ids_.begin(), special_ids_.end(),
                                           [t](const auto& kv) { return kv.second == t; })) {
      throw InvalidArgument("tokenizer: special tokens cannot be merged");
    }
  }
  if (vocab_.size() >= static_cast<std::size_t>(std::numeric_limits<TokenId>::max())) {
    throw InvalidArgument("tokenizer: vocabulary too large");
  }
  const auto id = static_cast<TokenId>(vocab_.size());
  if (!ranks_.emplace(key(left, right), std::pair{static_cast<std::int32_t>(merges_.size()), id})
           .second) {
    throw InvalidArgument("tokenizer: duplicate merge");
  }
  vocab_.push_back(vocab_[static_cast<std::size_t>(left)] + vocab_[static_cast<std::size_t>(right)]);
  merges_.emplace_back(left, right);
  cache_ = std::make_shared<Cache>();
  return id;
}

void Tokenizer::encode_chunk(std::string_view chunk, std::vector<TokenId>& out) const {
  std::vector<TokenId> syms;
  syms.reserve(chunk.size());
  for (unsigned char c : chunk) syms.push_back(c);
  if (!ranks_.empty()) {
    while (syms.size() > 1) {
      std::int32_t best_rank = std::numeric_limits<std::int32_t>::max();
      TokenId best_id = -1;
      std::uint64_t best_key = 0;
      for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
        auto it = ranks_.find(key(syms[i], syms[i + 1]));
        if (it != ranks_.end() && it->second.first < best_rank) {
          best_rank = it->second.first;
          best_id = it->second.second;
          best_key = it->first;
        }
      }
      if (best_id < 0) break;
      std::size_t w = 0;
      for (std::size_t i = 0; i < syms.size();) {
        if (i + 1 < syms.size() && key(syms[i], syms[i + 1]) == best_key) {
          syms[w++] = best_id;
          i += 2;
        } else {
          syms[w++] = syms[i++];
        }
      }
      syms.resize(w);
    }
  }
  out.insert(out.end(), syms.begin(), syms.end());
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> out;
  out.reserve(text.size() / 3 + 1);
  const std::shared_ptr<Cache> cache = cache_;
  for (auto chunk : pretokenize(text, split_whitespace_)) {
    if (chunk.size() > 256) {
      encode_chunk(chunk, out);
      continue;
    }
    {
      std::lock_guard lock(cache->mu);
      auto it = cache->entries.find(std::string(chunk));
      if (it != cache->entries.end()) {
        out.insert(out.end(), it->second.begin(), it->second.end());
        continue;
      }
    }
    std::vector<TokenId> ids;
    encode_chunk(chunk, ids);
    out.insert(out.end(), ids.begin(), ids.end());
    std::lock_guard lock(cache->mu);
    if (cache->entries.size() >= kCacheLimit) cache->entries.clear();
    cache->entries.emplace(std::string(chunk), std::move(ids));
  }
  return out;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) out += token_bytes(id);
  return out;
}

nlohmann::json Tokenizer::to_json() const {
  nlohmann::json vocab = nlohmann::json::object();
  for (std::size_t i = 0; i < vocab_.size(); ++i) vocab[std::to_string(i)] = to_hex(vocab_[i]);
  nlohmann::json merges = nlohmann::json::array();
  for (auto [l, r] : merges_) merges.push_back({l, r});
  nlohmann::json specials = nlohmann::json::object();
  for (const auto& [name, id] : special_ids_) specials[name] = id;
  return {{"version", 1},
          {"vocab", vocab},
          {"merges", merges},
          {"specials", specials},
          {"pretokenizer", split_whitespace_ ? "whitespace" : "none"}};
}

Tokenizer Tokenizer::from_json(const nlohmann::json& j) {
  try {
    if (j.at("version").get<int>() != 1) throw InvalidArgument("tokenizer: unsupported version");
    bool split = true;
    if (j.contains("pretokenizer")) {
      const auto p = j.at("pretokenizer").get<std::string>();
      if (p != "whitespace" && p != "none") throw InvalidArgument("tokenizer: unknown pretokenizer " + p);
      split = p == "whitespace";
    }
    const auto& vj = j.at("vocab");
    const std::size_t n = vj.size();
    std::vector<std::string> vocab(n);
    std::vector<bool> seen(n, false);
    for (const auto& [k, v] : vj.items()) {
      std::size_t pos = 0;
      const unsigned long id = std::stoul(k, &pos);
      if (pos != k.size() || id >= n || seen[id]) {
        throw InvalidArgument("tokenizer: vocabulary ids must be dense and unique");
      }
      seen[id] = true;
      vocab[id] = from_hex(v.get<std::string>());
    }
    if (n < 256) throw InvalidArgument("tokenizer: vocabulary lacks the byte alphabet");
    for (std::size_t b = 0; b < 256; ++b) {
      if (vocab[b] != std::string(1, static_cast<char>(b))) {
        throw InvalidArgument("tokenizer: ids 0..255 must be the raw bytes");
      }
    }

    std::vector<std::pair<std::string, TokenId>> specials;
    for (const auto& [name, id] : j.at("specials").items()) {
      specials.emplace_back(name, id.get<TokenId>());
    }
    std::sort(specials.begin(), specials.end(),
              [](const auto& a, const auto& b) { return a.second < b.second; });
    std::vector<bool> is_special(n, false);
    Tokenizer tok({}, split);
    tok.vocab_.clear();
    for (const auto& [name, id] : specials) {
      if (id < 256 || static_cast<std::size_t>(id) >= n || is_special[static_cast<std::size_t>(id)]) {
        throw InvalidArgument("tokenizer: bad id for special token " + name);
      }
      is_special[static_cast<std::size_t>(id)] = true;
      tok.specials_.push_back(name);
      tok.special_ids_.emplace(name, id);
    }

    std::vector<TokenId> merged_ids;
    for (std::size_t id = 256; id < n; ++id) {
      if (!is_special[id]) merged_ids.push_back(static_cast<TokenId>(id));
    }
    const auto& mj = j.at("merges");
    if (mj.size() != merged_ids.size()) {
      throw InvalidArgument("tokenizer: merge count does not match the vocabulary");
    }
    // Operands must exist before use: a merge may only reference bytes or
    // ids produced by earlier merges.
    std::vector<bool> available(n, false);
    for (std::size_t b = 0; b < 256; ++b) available[b] = true;
    tok.vocab_ = vocab;
    for (std::size_t m = 0; m < mj.size(); ++m) {
      const auto l = mj[m].at(0).get<TokenId>();
      const auto r = mj[m].at(1).get<TokenId>();
      for (TokenId t : {l, r}) {
        if (t < 0 || static_cast<std::size_t>(t) >= n || !available[static_cast<std::size_t>(t)]) {
          throw InvalidArgument("tokenizer: merge " + std::to_string(m) +
                                " uses a token that does not exist yet");
        }
      }
      const TokenId id = merged_ids[m];
      if (vocab[static_cast<std::size_t>(id)] !=
          vocab[static_cast<std::size_t>(l)] + vocab[static_cast<std::size_t>(r)]) {
        throw InvalidArgument("tokenizer: bytes of id " + std::to_string(id) +
                              " do not match its merge");
      }
      if (!tok.ranks_.emplace(key(l, r), std::pair{static_cast<std::int32_t>(m), id}).second) {
        throw InvalidArgument("tokenizer: duplicate merge");
      }
      tok.merges_.emplace_back(l, r);
      available[static_cast<std::size_t>(id)] = true;
    }
    return tok;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("tokenizer: malformed file: ") + e.what());
  } catch (const std::logic_error& e) {
    throw InvalidArgument(std::string("tokenizer: malformed file: ") + e.what());
  }
}

void Tokenizer::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path);
  out << to_json().dump(1) << '\n';
}

Tokenizer Tokenizer::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InvalidArgument("cannot read tokenizer " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument("tokenizer " + path + ": " + e.what());
  }
  return from_json(j);
}

// ---------------------------------------------------------------------------

namespace {

struct PairEntry {
  std::int64_t count;
  TokenId left;
  TokenId right;
};

struct PairOrder {
  const std::vector<std::string>* vocab;
  bool operator()(const PairEntry& a, const PairEntry& b) const {
    if (a.count != b.count) return a.count > b.count;
    const auto& v = *vocab;
    if (a.left != b.left) {
      const int c = v[static_cast<std::size_t>(a.left)].compare(v[static_cast<std::size_t>(b.left)]);
      if (c != 0) return c < 0;
    }
    if (a.right != b.right) {
      const int c = v[static_cast<std::size_t>(a.right)].compare(v[static_cast<std::size_t>(b.right)]);
      if (c != 0) return c < 0;
    }
    if (a.left != b.left) return a.left < b.left;
    return a.right < b.right;
  }
};

}  // namespace

Tokenizer train_bbpe(const std::vector<std::string>& corpus, std::size_t vocab_size,
                     const BbpeOptions& options) {
  if (vocab_size < 257) throw InvalidArgument("train_bbpe: vocab_size must be at least 257");
  if (corpus.empty()) throw InvalidArgument("train_bbpe: corpus is empty");
  Tokenizer tok(options.specials, options.split_whitespace);
  if (tok.vocab_size() > vocab_size) {
    throw InvalidArgument("train_bbpe: vocab_size is smaller than the alphabet plus specials");
  }

  std::unordered_map<std::string_view, std::int64_t> type_counts;
  for (const auto& doc : corpus) {
    for (auto chunk : pretokenize(doc, options.split_whitespace)) ++type_counts[chunk];
  }
  // Sorted word types keep every later step independent of hash order.
  std::vector<std::pair<std::string_view, std::int64_t>> types(type_counts.begin(), type_counts.end());
  std::sort(types.begin(), types.end());

  std::vector<std::vector<TokenId>> words;
  std::vector<std::int64_t> freq;
  words.reserve(types.size());
  for (const auto& [w, c] : types) {
    std::vector<TokenId> syms;
    for (unsigned char b : w) syms.push_back(b);
    words.push_back(std::move(syms));
    freq.push_back(c);
  }

  // The byte strings of all ids, mirrored here so the ordering can see ids
  // as they are created.
  std::vector<std::string> bytes;
  for (std::size_t i = 0; i < tok.vocab_size(); ++i) bytes.push_back(tok.token_bytes(static_cast<TokenId>(i)));
  PairOrder order{&bytes};
  std::set<PairEntry, PairOrder> queue(order);
  std::unordered_map<std::uint64_t, std::int64_t> counts;
  std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> where;

  auto pkey = [](TokenId a, TokenId b) {
    return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(a)) << 32) |
           static_cast<std::uint32_t>(b);
  };
  auto adjust = [&](TokenId a, TokenId b, std::int64_t delta) {
    auto& c = counts[pkey(a, b)];
    if (c > 0) queue.erase(PairEntry{c, a, b});
    c += delta;
    if (c > 0) queue.insert(PairEntry{c, a, b});
  };
  auto add_word = [&](std::uint32_t w, std::int64_t sign) {
    const auto& s = words[w];
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      adjust(s[i], s[i + 1], sign * freq[w]);
      if (sign > 0) {
        auto& list = where[pkey(s[i], s[i + 1])];
        if (list.empty() || list.back() != w) list.push_back(w);
      }
    }
  };
  for (std::uint32_t w = 0; w < words.size(); ++w) add_word(w, +1);

  while (tok.vocab_size() < vocab_size && !queue.empty()) {
    const PairEntry best = *queue.begin();
    if (best.count < 2) break;
    const TokenId id = tok.add_merge(best.left, best.right);
    bytes.push_back(tok.token_bytes(id));

    const std::uint64_t k = pkey(best.left, best.right);
    std::vector<std::uint32_t> affected = std::move(where[k]);
    where.erase(k);
    std::sort(affected.begin(), affected.end());
    affected.erase(std::unique(affected.begin(), affected.end()), affected.end());
    for (std::uint32_t w : affected) {
      auto& s = words[w];
      bool has = false;
      for (std::size_t i = 0; i + 1 < s.size() && !has; ++i) {
        has = s[i] == best.left && s[i + 1] == best.right;
      }
      if (!has) continue;
      add_word(w, -1);
      std::size_t o = 0;
      for (std::size_t i = 0; i < s.size();) {
        if (i + 1 < s.size() && s[i] == best.left && s[i + 1] == best.right) {
          s[o++] = id;
          i += 2;
        } else {
          s[o++] = s[i++];
        }
      }
      s.resize(o);
      add_word(w, +1);
    }
  }
  return tok;
}

// ---------------------------------------------------------------------------

CompressionRow compression_ratio(const Tokenizer& tok, const std::vector<std::string>& docs,
                                 std::string domain) {
  CompressionRow row;
  row.domain = std::move(domain);
  for (const auto& d : docs) {
    row.byte_count += d.size();
    row.token_count += tok.encode(d).size();
  }
  if (row.byte_count == 0) throw InvalidArgument("compression_ratio: sample has no bytes");
  row.ratio = static_cast<double>(row.token_count) / static_cast<double>(row.byte_count);
  return row;
}

double weighted_compression(const std::vector<CompressionRow>& rows,
                            const std::vector<double>& weights) {
  if (rows.empty()) throw InvalidArgument("weighted_compression: no rows");
  if (rows.size() != weights.size()) {
    throw InvalidArgument("weighted_compression: expected one weight per row");
  }
  double sum = 0.0, acc = 0.0;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (!(weights[i] >= 0.0)) throw InvalidArgument("weighted_compression: negative weight");
    sum += weights[i];
    acc += weights[i] * rows[i].ratio;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw InvalidArgument("weighted_compression: weights must sum to 1");
  return acc;
}

CompressionReport make_compression_report(std::vector<CompressionRow> rows,
                                          std::vector<double> weights) {
  CompressionReport r;
  r.weighted_average = weighted_compression(rows, weights);
  r.rows = std::move(rows);
  r.weights = std::move(weights);
  return r;
}

nlohmann::json CompressionReport::to_json() const {
  nlohmann::json rj = nlohmann::json::array();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    rj.push_back({{"domain", r.domain},
                  {"token_count", r.token_count},
                  {"byte_count", r.byte_count},
                  {"ratio", r.ratio},
                  {"weight", i < weights.size() ? weights[i] : 0.0}});
  }
  return {{"rows", rj}, {"weighted_average", weighted_average}};
}

}  // namespace flm
