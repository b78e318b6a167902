#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "flm/batch.hpp"
#include "flm/hyperparams.hpp"
#include "flm/model.hpp"
#include "flm/tokenizer.hpp"

namespace flm::testing {

// Order-2 Markov text over seeded pseudo-words. Each word-pair state picks
// its successor from a small state-specific candidate list with Zipf
// weights, mixed with a global Zipf unigram draw.
struct SyntheticCorpusOptions {
  std::size_t target_bytes = 5u << 20;
  std::size_t vocab_words = 1000;
  std::size_t candidates = 8;
  double zipf_exponent = 1.1;
  double unigram_mix = 0.1;
  std::size_t min_doc_words = 40;
  std::size_t max_doc_words = 300;
  std::uint64_t seed = 1234;
};

std::vector<std::string> synthetic_documents(const SyntheticCorpusOptions& options = {});

// Shared setup for the width experiments: tokenizer, packed rows and the
// width-64 base architecture.
struct ToySetup {
  Tokenizer tokenizer;
  PackedBatch train;
  PackedBatch validation;
  ModelConfig base_config;
};

inline constexpr std::size_t kToyVocab = 512;
inline constexpr std::size_t kToyContext = 64;

ToySetup make_toy_setup(const SyntheticCorpusOptions& options = {});

// Base hyperparameters for the toy runs at width 64.
HyperParams toy_base_hyperparams();

}  // namespace flm::testing
