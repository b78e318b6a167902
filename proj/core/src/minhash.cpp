#include <algorithm>
#include <cmath>
#include <limits>
#include <ostream>
#include <thread>
#include <unordered_map>

#include "flm/corpus.hpp"
#include "flm/error.hpp"
#include "flm/rng.hpp"

namespace flm {

namespace {

std::uint64_t fnv1a(std::string_view s, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t salt(std::uint64_t seed, std::size_t p) {
  return mix64(mix64(seed) + 0x9E3779B97F4A7C15ULL * (p + 1));
}

}  // namespace

std::vector<std::uint64_t> shingle_hashes(std::string_view text, std::size_t n) {
  if (n == 0) throw InvalidArgument("shingle size must be positive");
  const auto words = split_words(text);
  if (words.empty()) throw EmptyShingleError("document has no words to shingle");
  const std::size_t width = std::min(n, words.size());
  std::vector<std::uint64_t> out;
  out.reserve(words.size() - width + 1);
  for (std::size_t i = 0; i + width <= words.size(); ++i) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (std::size_t k = 0; k < width; ++k) {
      h = fnv1a(words[i + k], h);
      h = fnv1a(std::string_view("\x1f", 1), h);
    }
    out.push_back(mix64(h));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

MinHashSignature minhash_of_set(const std::vector<std::uint64_t>& elements, std::size_t k,
                                std::uint64_t seed) {
  if (k == 0) throw InvalidArgument("minhash: k must be at least 1");
  if (elements.empty()) throw EmptyShingleError("minhash: empty element set");
  MinHashSignature sig;
  sig.seed = seed;
  sig.mins.assign(k, std::numeric_limits<std::uint64_t>::max());
  for (std::size_t p = 0; p < k; ++p) {
    const std::uint64_t s = salt(seed, p);
    std::uint64_t m = std::numeric_limits<std::uint64_t>::max();
    for (std::uint64_t x : elements) m = std::min(m, mix64(x ^ s));
    sig.mins[p] = m;
  }
  return sig;
}

MinHashSignature minhash_signature(std::string_view doc, std::size_t k, std::size_t shingle_n,
                                   std::uint64_t seed) {
  if (k == 0) throw InvalidArgument("minhash: k must be at least 1");
  return minhash_of_set(shingle_hashes(doc, shingle_n), k, seed);
}

double estimated_jaccard(const MinHashSignature& a, const MinHashSignature& b) {
  if (a.k() != b.k() || a.seed != b.seed) {
    throw InvalidArgument("estimated_jaccard: signatures differ in k or seed");
  }
  if (a.k() == 0) throw InvalidArgument("estimated_jaccard: empty signatures");
  std::size_t same = 0;
  for (std::size_t i = 0; i < a.k(); ++i) same += a.mins[i] == b.mins[i] ? 1 : 0;
  return static_cast<double>(same) / static_cast<double>(a.k());
}

double LshBands::s_curve_threshold() const {
  return std::pow(1.0 / static_cast<double>(bands), 1.0 / static_cast<double>(rows));
}

LshBands choose_bands(std::size_t k, double threshold) {
  if (k == 0) throw InvalidArgument("choose_bands: k must be at least 1");
  if (!(threshold > 0.0 && threshold <= 1.0)) {
    throw InvalidArgument("choose_bands: threshold must be in (0, 1]");
  }
  LshBands best{k, 1};
  for (std::size_t r = 1; r <= k; ++r) {
    if (k % r != 0) continue;
    LshBands c{k / r, r};
    if (c.s_curve_threshold() <= threshold) best = c;
  }
  return best;
}

DedupResult dedup(const std::vector<Document>& docs, const DedupOptions& o) {
  if (!(o.threshold > 0.0 && o.threshold <= 1.0)) {
    throw InvalidArgument("dedup: threshold must be in (0, 1]");
  }
  DedupResult result;
  result.bands = choose_bands(o.k, o.threshold);

  std::vector<std::optional<MinHashSignature>> sigs(docs.size());
  auto compute = [&](std::size_t from, std::size_t step) {
    for (std::size_t i = from; i < docs.size(); i += step) {
      try {
        sigs[i] = minhash_signature(docs[i].text, o.k, o.shingle_n, o.seed);
      } catch (const EmptyShingleError&) {
        sigs[i].reset();
      }
    }
  };
  const std::size_t jobs = std::clamp<std::size_t>(o.jobs, 1, std::max<std::size_t>(docs.size(), 1));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(compute, t, jobs);
  compute(0, jobs);
  for (auto& t : pool) t.join();

  const std::size_t b = result.bands.bands, r = result.bands.rows;
  std::vector<std::unordered_map<std::uint64_t, std::vector<std::size_t>>> buckets(b);
  std::unordered_map<std::string_view, std::size_t> empty_texts;

  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (!sigs[i]) {
      auto [it, fresh] = empty_texts.emplace(docs[i].text, i);
      if (fresh) {
        result.kept.push_back(i);
      } else {
        result.removals.push_back({docs[i].id, docs[it->second].id, 1.0});
      }
      continue;
    }
    const auto& sig = *sigs[i];
    std::vector<std::uint64_t> keys(b);
    std::vector<std::size_t> candidates;
    for (std::size_t band = 0; band < b; ++band) {
      std::uint64_t h = mix64(band + 1);
      for (std::size_t k = 0; k < r; ++k) h = mix64(h ^ sig.mins[band * r + k]);
      keys[band] = h;
      auto it = buckets[band].find(h);
      if (it != buckets[band].end()) {
        candidates.insert(candidates.end(), it->second.begin(), it->second.end());
      }
    }
    std::sort(candidates.begin(), candidates.end());
    candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
    std::optional<std::size_t> match;
    double best = -1.0;
    for (auto c : candidates) {
      const double est = estimated_jaccard(sig, *sigs[c]);
      if (est >= o.threshold && est > best) {
        best = est;
        match = c;
      }
    }
    if (match) {
      result.removals.push_back({docs[i].id, docs[*match].id, best});
      continue;
    }
    result.kept.push_back(i);
    for (std::size_t band = 0; band < b; ++band) buckets[band][keys[band]].push_back(i);
  }
  return result;
}

void write_removals(std::ostream& out, const std::vector<Removal>& removals) {
  for (const auto& r : removals) {
    out << nlohmann::json{{"dropped_id", r.dropped_id},
                          {"matched_id", r.matched_id},
                          {"est_jaccard", r.est_jaccard}}
               .dump()
        << '\n';
  }
}

}  // namespace flm
