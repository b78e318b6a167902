#pragma once

#include <cstdint>

namespace flm {

// Counter-based generator: output n is a pure function of (seed, n), so a
// given seed and call sequence reproduces bit-identically on any platform.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) noexcept : seed_(seed) {}

  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t position() const noexcept { return counter_; }

  std::uint64_t next_u64() noexcept;
  // Uniform in [0, 1) with 53 bits of precision.
  double uniform() noexcept;
  // Uniform integer in [0, n); n > 0.
  std::uint64_t below(std::uint64_t n) noexcept;
  double normal() noexcept;

  // Independent child stream, e.g. one per grid job or per width.
  Rng fork(std::uint64_t stream) const noexcept;

 private:
  std::uint64_t seed_;
  std::uint64_t counter_ = 0;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

}  // namespace flm
