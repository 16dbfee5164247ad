#pragma once

#include <cstdint>
#include <random>

#include "m3/numcore/tensor.hpp"

namespace m3::numcore {

// Seeded generator shared by every stochastic component. Draw order is part
// of the reproducibility contract: identical seed and call sequence give
// identical streams.
class Rng {
public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  Real uniform(Real lo = 0, Real hi = 1) { return std::uniform_real_distribution<Real>(lo, hi)(engine_); }
  Real normal() { return normal_(engine_); }
  std::uint64_t index(std::uint64_t n) { return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_); }
  std::uint64_t next_u64() { return engine_(); }

  // Independent child stream; advances this generator once.
  Rng fork() { return Rng(engine_()); }

  std::mt19937_64& engine() { return engine_; }

private:
  std::mt19937_64 engine_;
  std::normal_distribution<Real> normal_{0.0, 1.0};
};

// U(-bound, bound) fill of a leaf tensor.
void uniform_fill(Tensor& t, Real bound, Rng& rng);

}  // namespace m3::numcore
