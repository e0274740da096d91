#pragma once

// Deterministic PRNG: xoshiro256** seeded through splitmix64. Same seed gives
// bit-identical draw sequences across runs and platforms; the gaussian uses an
// Irwin-Hall sum instead of Box-Muller so no libm transcendentals are involved.

#include <cstdint>

namespace shvit {

class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  std::uint64_t next_u64();

  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  double uniform(double lo, double hi);

  // Approximate standard normal: sum of 12 uniforms minus 6.
  double normal();

  // Uniform integer in [0, n).
  std::uint64_t next_below(std::uint64_t n);

  // Derive an independent stream for a named sub-purpose.
  Rng fork(std::uint64_t stream);

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

}  // namespace shvit
