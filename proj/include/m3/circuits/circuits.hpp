#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "m3/numcore/random.hpp"

namespace m3::circuits {

using numcore::Real;

enum class CircuitId : int { TwoStageOpAmp = 0, ReversedTwoStageOpAmp = 1, TwoStageTia = 2, Comparator = 3 };

inline constexpr int kNumCircuits = 4;
inline constexpr std::array<CircuitId, kNumCircuits> kAllCircuits{
    CircuitId::TwoStageOpAmp, CircuitId::ReversedTwoStageOpAmp, CircuitId::TwoStageTia, CircuitId::Comparator};

std::string_view circuit_name(CircuitId id);
std::optional<CircuitId> parse_circuit(std::string_view name);

enum class Scale { Linear, Log };
enum class Direction { Maximize, Minimize };

struct ParamDef {
  std::string name;
  Real min;
  Real max;
  Scale scale;
  bool integer;
};

struct SpecDef {
  std::string name;
  Real lo;  // lo == hi marks a fixed target
  Real hi;
  Direction direction;

  bool fixed() const { return lo == hi; }
  // g_i: geometric midpoint of the target range (the fixed value when fixed).
  Real normalizer() const;
};

struct CircuitDef {
  CircuitId id;
  std::string name;
  std::vector<ParamDef> params;
  std::vector<SpecDef> specs;

  int n_params() const { return static_cast<int>(params.size()); }
  int n_specs() const { return static_cast<int>(specs.size()); }
  int raw_obs_dim() const { return n_params() + 2 * n_specs(); }
};

// The four benchmark circuits with their parameter and target ranges.
const std::vector<CircuitDef>& registry();
const CircuitDef& circuit(CircuitId id);

struct TargetSpec {
  std::vector<Real> values;
};

// Ranged targets are log-uniform when the range spans at least a decade and
// uniform otherwise; fixed targets are returned as is.
TargetSpec sample_target(const CircuitDef& def, numcore::Rng& rng);

// Normalized parameters in [0, 1] to physical values. Integer parameters are
// rounded half up after the affine map.
std::vector<Real> denormalize(const CircuitDef& def, std::span<const Real> p);

// Anything that turns normalized parameters into performance metrics.
class Simulator {
public:
  virtual ~Simulator() = default;
  virtual std::vector<Real> simulate(const CircuitDef& def, std::span<const Real> p) = 0;
};

}  // namespace m3::circuits
