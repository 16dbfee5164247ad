#include "m3/circuits/surrogate.hpp"

#include <cmath>
#include <stdexcept>

namespace m3::circuits {

namespace {

// Sign of w_ij, one row per spec, one column per parameter.
const std::array<std::vector<std::vector<int>>, kNumCircuits>& sign_table() {
  static const std::array<std::vector<std::vector<int>>, kNumCircuits> t{{
      // 2SOA: gain, bw, pm, ibias1, ibias2, vswing
      {{+1, +1, -1, +1, -1, +1, +1},
       {-1, +1, +1, -1, +1, -1, -1},
       {+1, -1, +1, +1, -1, +1, -1},
       {+1, +1, -1, +1, +1, -1, +1},
       {-1, +1, +1, -1, +1, +1, +1},
       {+1, -1, -1, +1, -1, +1, -1}},
      // R2SOA: gain, bw, pm, ibias
      {{+1, +1, -1, +1, -1, +1, +1}, {-1, +1, +1, -1, +1, -1, -1}, {+1, -1, +1, +1, -1, +1, -1}, {+1, +1, -1, +1, +1, -1, +1}},
      // 2STIA: gain, bw, pm, ibias
      {{+1, -1, +1, +1, -1, +1}, {-1, +1, -1, +1, +1, -1}, {+1, +1, -1, -1, +1, -1}, {+1, -1, +1, +1, -1, +1}},
      // Comp: delay, power
      {{+1, -1, +1, -1, +1, -1}, {-1, +1, +1, -1, -1, +1}},
  }};
  return t;
}

constexpr Real kMinMagnitude = 0.3;
constexpr Real kMaxMagnitude = 1.0;
constexpr Real kMargin = 0.1;

}  // namespace

SurrogateModel::SurrogateModel(std::uint64_t seed) : seed_(seed) {
  numcore::Rng rng(seed);
  for (const auto& def : registry()) {
    const int k = def.n_specs(), n = def.n_params();
    const auto& signs = sign_table()[static_cast<int>(def.id)];
    auto& w = weights_[static_cast<int>(def.id)];
    w.assign(static_cast<std::size_t>(k * n), 0.0);
    for (int i = 0; i < k; ++i) {
      for (int j = 0; j < n; ++j) w[i * n + j] = signs[i][j] * rng.uniform(kMinMagnitude, kMaxMagnitude);
    }
    // Raise each dedicated weight above the pull of the other dedicated
    // parameters plus the half log-width of the target range.
    for (int i = 0; i < k; ++i) {
      Real others = 0;
      for (int j = 0; j < k; ++j) {
        if (j != i) others += std::abs(w[i * n + j]);
      }
      const auto& s = def.specs[i];
      const Real need = 0.5 * std::log(s.hi / s.lo) + others + kMargin;
      Real& wii = w[i * n + i];
      if (std::abs(wii) < need) wii = std::copysign(need, wii);
    }
  }
}

void SurrogateModel::set_weights(CircuitId id, std::vector<Real> w) {
  const auto& def = circuit(id);
  if (static_cast<int>(w.size()) != def.n_specs() * def.n_params()) {
    throw std::invalid_argument(def.name + " weight matrix needs " + std::to_string(def.n_specs() * def.n_params()) +
                                " entries");
  }
  weights_[static_cast<int>(id)] = std::move(w);
}

std::vector<Real> SurrogateModel::evaluate(const CircuitDef& def, std::span<const Real> p) const {
  const int k = def.n_specs(), n = def.n_params();
  if (static_cast<int>(p.size()) != n) {
    throw std::invalid_argument(def.name + " expects " + std::to_string(n) + " parameters, got " +
                                std::to_string(p.size()));
  }
  for (int j = 0; j < n; ++j) {
    if (!(p[j] >= 0 && p[j] <= 1)) {
      throw std::out_of_range(def.name + " parameter " + std::to_string(j) + " = " + std::to_string(p[j]) +
                              " outside [0, 1]");
    }
  }
  const auto& w = weights(def.id);
  std::vector<Real> m(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    Real e = 0;
    for (int j = 0; j < n; ++j) e += w[i * n + j] * (2 * p[j] - 1);
    m[i] = def.specs[i].normalizer() * std::exp(e);
  }
  return m;
}

std::vector<Real> SurrogateModel::feasible_point(const CircuitDef& def) const {
  const int k = def.n_specs(), n = def.n_params();
  const auto& w = weights(def.id);
  std::vector<Real> p(static_cast<std::size_t>(n), 0.5);
  for (int i = 0; i < k; ++i) {
    const bool up = (def.specs[i].direction == Direction::Maximize) == (w[i * n + i] > 0);
    p[i] = up ? 1.0 : 0.0;
  }
  return p;
}

}  // namespace m3::circuits
