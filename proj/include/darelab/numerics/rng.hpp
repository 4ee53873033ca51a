#pragma once

#include <cstdint>

#include "darelab/numerics/tensor.hpp"

namespace darelab {

// SplitMix64 stream. The integer sequence depends only on the seed, so a
// given seed reproduces on every platform. Independent sub-streams come from
// derive(), which mixes the parent seed before xor-ing in the index.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : state_(seed) {}

  static Rng derive(std::uint64_t seed, std::uint64_t index);

  std::uint64_t next_u64();
  // Uniform in [0, 1) with 53 random bits.
  double uniform();
  // Uniform integer in [lo, hi], inclusive.
  std::uint64_t uniform_int(std::uint64_t lo, std::uint64_t hi);
  double normal();

  std::uint64_t state() const { return state_; }

 private:
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t z);

// i.i.d. standard normal draws.
Tensor gaussian(Rng& rng, const Shape& shape);

}  // namespace darelab
