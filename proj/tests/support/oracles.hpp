#pragma once

// Reference implementations used only by tests. Each is written
// independently of the library code it checks.

#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "flm/tensor.hpp"

namespace flm::testing {

// Row-major triple loop.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n);

// Sum and count of -log softmax(row)[target] in 50-digit decimal arithmetic.
struct PreciseCrossEntropy {
  double total_nats = 0.0;
  std::size_t count = 0;
};
PreciseCrossEntropy precise_cross_entropy(const std::vector<double>& logits, std::size_t vocab,
                                          const std::vector<std::int32_t>& targets);

// loss * tokens / bytes / ln 2 in 50-digit decimal arithmetic.
double precise_bpb(double loss, std::uint64_t tokens, std::uint64_t bytes);

// BPE by full recount of every pair after every merge.
struct ReferenceBpe {
  std::vector<std::string> vocab;
  std::vector<std::pair<std::int32_t, std::int32_t>> merges;
};
ReferenceBpe reference_bpe(const std::vector<std::string>& corpus, std::size_t vocab_size,
                           const std::vector<std::string>& specials = {});

double exact_jaccard(const std::vector<std::uint64_t>& a, const std::vector<std::uint64_t>& b);

// Lays every document out token by token and cuts the stream into rows.
struct ReferenceRows {
  std::vector<std::int32_t> tokens, targets, segments, positions;
  std::size_t rows = 0;
};
ReferenceRows reference_pack(const std::vector<std::vector<std::int32_t>>& docs, std::size_t ctx,
                             std::int32_t pad);

// Relative error ||analytic - numeric|| / max(||analytic||, ||numeric||) of
// d f / d input, with central differences of step h.
struct GradCheck {
  double max_relative_error = 0.0;
  std::string worst_input;
};
GradCheck check_gradients(const std::function<Tensor()>& f, std::vector<Tensor> inputs,
                          const std::vector<std::string>& names = {}, double h = 1e-5);

}  // namespace flm::testing
