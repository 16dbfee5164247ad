#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "m3/circuits/circuits.hpp"

namespace m3::circuits {

// Log-linear stand-in for a circuit simulator:
//
//   m_i(p) = g_i * exp( sum_j w_ij * (2 p_j - 1) ),   p in [0, 1]^N
//
// Weights come from a seeded draw. Spec i owns parameter i (its "dedicated"
// parameter); the dedicated weight is raised until it outweighs every other
// weight in the row by the half log-width of the target range, so for any
// target there is a p meeting all specs at once.
class SurrogateModel {
public:
  static constexpr std::uint64_t kDefaultSeed = 20240917;

  explicit SurrogateModel(std::uint64_t seed = kDefaultSeed);

  // Row-major K x N weight matrix for one circuit.
  const std::vector<Real>& weights(CircuitId id) const { return weights_[static_cast<int>(id)]; }
  std::uint64_t seed() const { return seed_; }
  // Replaces one circuit's weights (K x N, row-major).
  void set_weights(CircuitId id, std::vector<Real> w);

  // Throws std::out_of_range when any p_j lies outside [0, 1].
  std::vector<Real> evaluate(const CircuitDef& def, std::span<const Real> p) const;

  // Parameters meeting every target inside the configured ranges: each
  // dedicated parameter at its favourable bound, the rest at 0.5.
  std::vector<Real> feasible_point(const CircuitDef& def) const;

private:
  std::uint64_t seed_;
  std::array<std::vector<Real>, kNumCircuits> weights_;
};

class SurrogateSimulator : public Simulator {
public:
  explicit SurrogateSimulator(std::uint64_t seed = SurrogateModel::kDefaultSeed) : model_(seed) {}
  std::vector<Real> simulate(const CircuitDef& def, std::span<const Real> p) override {
    return model_.evaluate(def, p);
  }
  const SurrogateModel& model() const { return model_; }

private:
  SurrogateModel model_;
};

}  // namespace m3::circuits
