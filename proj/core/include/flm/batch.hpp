#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

namespace flm {

// Fixed-width token rows ready for the model. All vectors are rows * seq
// long, row-major.
struct PackedBatch {
  std::size_t rows = 0;
  std::size_t seq = 0;
  std::vector<std::int32_t> tokens;
  // Next token of the same document, or -1 where nothing is predicted
  // (padding, last token of a document).
  std::vector<std::int32_t> targets;
  // Document segment id per token; -1 marks padding. Attention never
  // crosses segments. Empty means each row is one segment.
  std::vector<std::int32_t> segments;
  // RoPE position per token, restarting at each segment. Empty means
  // 0..seq-1 in every row.
  std::vector<std::int32_t> positions;

  std::size_t size() const noexcept { return rows * seq; }
  std::size_t predicted_tokens() const noexcept;
  std::size_t non_pad_tokens() const noexcept;
};

// Binary layout, little-endian: "FLMPACK\0", u32 version 1, u64 rows,
// u64 seq, u8 flags (bit 0 segments present, bit 1 positions present), then
// the int32 arrays tokens, targets, segments, positions.
void save_packed(const PackedBatch& batch, const std::string& path);
PackedBatch load_packed(const std::string& path);

}  // namespace flm
