#include "m3/numcore/vecmath.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

// Built with -ffast-math (see CMakeLists.txt) so the loops call libmvec. The
// clamp keeps every argument finite, which that flag assumes.

namespace m3::numcore::vec {

namespace {

constexpr Real kLo = -745.0;
constexpr Real kHi = 709.0;

void check(std::size_t a, std::size_t b) {
  if (a != b) throw ShapeError("vecmath: input and output sizes differ");
}

__attribute__((target_clones("avx2", "default"))) void exp_kernel(Real* __restrict x, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) x[i] = std::exp(std::clamp(x[i], kLo, kHi));
}

__attribute__((target_clones("avx2", "default"))) void sigmoid_kernel(const Real* __restrict x, Real* __restrict out,
                                                                      std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real v = std::clamp(x[i], kLo, kHi);
    const Real e = std::exp(-std::abs(v));
    const Real s = Real{1} / (Real{1} + e);
    out[i] = v >= 0 ? s : e * s;
  }
}

__attribute__((target_clones("avx2", "default"))) void softplus_kernel(const Real* __restrict x, Real* __restrict out,
                                                                       std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) {
    const Real v = std::clamp(x[i], kLo, kHi);
    out[i] = std::max(v, Real{0}) + std::log1p(std::exp(-std::abs(v)));
  }
}

}  // namespace

void exp_inplace(std::span<Real> x) { exp_kernel(x.data(), x.size()); }

void sigmoid(std::span<const Real> x, std::span<Real> out) {
  check(x.size(), out.size());
  sigmoid_kernel(x.data(), out.data(), x.size());
}

void softplus(std::span<const Real> x, std::span<Real> out) {
  check(x.size(), out.size());
  softplus_kernel(x.data(), out.data(), x.size());
}

}  // namespace m3::numcore::vec
