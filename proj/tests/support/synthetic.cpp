#include "synthetic.hpp"

#include <algorithm>
#include <cmath>

#include "flm/corpus.hpp"
#include "flm/rng.hpp"

namespace flm::testing {

namespace {

class ZipfSampler {
 public:
  ZipfSampler(std::size_t n, double s) : cdf_(n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      acc += 1.0 / std::pow(static_cast<double>(i + 1), s);
      cdf_[i] = acc;
    }
    for (double& c : cdf_) c /= acc;
  }
  std::size_t operator()(Rng& rng) const {
    const double u = rng.uniform();
    return static_cast<std::size_t>(std::upper_bound(cdf_.begin(), cdf_.end(), u) - cdf_.begin()) %
           cdf_.size();
  }

 private:
  std::vector<double> cdf_;
};

std::vector<std::string> make_words(std::size_t n, Rng& rng) {
  static const char* onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "tr", "pl", "st"};
  static const char* vowels[] = {"a", "e", "i", "o", "u", "ai", "ou", "ea"};
  std::vector<std::string> words;
  std::vector<std::string> seen;
  while (words.size() < n) {
    // Frequent ranks get shorter words.
    const std::size_t syllables = 1 + words.size() / 60 % 4 + rng.below(2);
    std::string w;
    for (std::size_t k = 0; k < syllables; ++k) {
      w += onsets[rng.below(std::size(onsets))];
      w += vowels[rng.below(std::size(vowels))];
    }
    if (std::find(seen.begin(), seen.end(), w) != seen.end()) continue;
    seen.push_back(w);
    words.push_back(std::move(w));
  }
  return words;
}

}  // namespace

std::vector<std::string> synthetic_documents(const SyntheticCorpusOptions& o) {
  Rng rng(o.seed);
  Rng word_rng = rng.fork(1);
  const auto words = make_words(o.vocab_words, word_rng);
  const ZipfSampler unigram(o.vocab_words, o.zipf_exponent);
  const ZipfSampler local(o.candidates, o.zipf_exponent);

  std::vector<std::string> docs;
  std::size_t bytes = 0;
  Rng text_rng = rng.fork(2);
  while (bytes < o.target_bytes) {
    const std::size_t n_words =
        o.min_doc_words + text_rng.below(o.max_doc_words - o.min_doc_words + 1);
    std::string doc;
    std::size_t prev2 = unigram(text_rng), prev1 = unigram(text_rng);
    std::size_t sentence = 0;
    for (std::size_t i = 0; i < n_words; ++i) {
      std::size_t next;
      if (text_rng.uniform() < o.unigram_mix) {
        next = unigram(text_rng);
      } else {
        const std::uint64_t state = mix64(prev2 * 1000003ULL + prev1);
        const std::size_t slot = local(text_rng);
        // Candidate list of the state: Zipf-distributed word ranks.
        Rng cand(state);
        Rng pick = cand.fork(slot);
        next = unigram(pick);
      }
      if (!doc.empty()) doc += ' ';
      doc += words[next];
      if (++sentence >= 6 && next % 7 == 0) {
        doc += next % 2 ? "." : ",";
        if (next % 3 == 0) doc += "\n";
        sentence = 0;
      }
      prev2 = prev1;
      prev1 = next;
    }
    doc += '.';
    bytes += doc.size();
    docs.push_back(std::move(doc));
  }
  return docs;
}

ToySetup make_toy_setup(const SyntheticCorpusOptions& options) {
  auto docs = synthetic_documents(options);
  const std::size_t n_val = std::max<std::size_t>(1, docs.size() / 50);
  std::vector<std::string> train_docs(docs.begin(), docs.end() - static_cast<std::ptrdiff_t>(n_val));
  std::vector<std::string> val_docs(docs.end() - static_cast<std::ptrdiff_t>(n_val), docs.end());

  std::vector<std::string> tok_sample;
  std::size_t sample_bytes = 0;
  for (const auto& d : train_docs) {
    if (sample_bytes > (1u << 20)) break;
    tok_sample.push_back(d);
    sample_bytes += d.size();
  }
  BbpeOptions bo;
  bo.specials = {"<pad>", "<bos>", "<eos>"};
  ToySetup s{train_bbpe(tok_sample, kToyVocab, bo), {}, {}, {}};

  PackOptions po;
  po.context_length = kToyContext;
  po.pad_id = s.tokenizer.special_id("<pad>");
  po.bos_id = s.tokenizer.special_id("<bos>");
  auto encode_all = [&](const std::vector<std::string>& texts) {
    std::vector<std::vector<TokenId>> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(s.tokenizer.encode(t));
    return out;
  };
  s.train = pack(encode_all(train_docs), po);
  po.policy = PackPolicy::whole_documents;
  s.validation = pack(encode_all(val_docs), po);

  s.base_config.layer_num = 2;
  s.base_config.hidden_size = 64;
  s.base_config.attention_heads = 4;
  s.base_config.ffn_hidden_size = 168;
  s.base_config.vocab_size = static_cast<std::int64_t>(kToyVocab);
  s.base_config.context_length = static_cast<std::int64_t>(kToyContext);
  return s;
}

HyperParams toy_base_hyperparams() {
  HyperParams hp;
  hp.vector_lr = 3e-3;
  hp.matrix_lr = 3e-3;
  hp.min_lr = 3e-4;
  hp.vector_std = 0.02;
  hp.matrix_std = 0.025;
  hp.input_mult = 1.0;
  hp.output_mult = 8.0;
  hp.warmup_steps = 50;
  hp.batch_tokens = 8 * static_cast<std::int64_t>(kToyContext);
  hp.schedule_tokens = 500.0 * static_cast<double>(hp.batch_tokens);
  hp.clip_grad = 1.0;
  hp.weight_decay = 0.0;
  return hp;
}

}  // namespace flm::testing
