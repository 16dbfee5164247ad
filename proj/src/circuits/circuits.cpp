#include "m3/circuits/circuits.hpp"

#include <cmath>
#include <stdexcept>

namespace m3::circuits {

namespace {

constexpr auto kMax = Direction::Maximize;
constexpr auto kMin = Direction::Minimize;

std::vector<ParamDef> multipliers(int n) {
  std::vector<ParamDef> out;
  for (int i = 0; i < n; ++i) out.push_back({"m" + std::to_string(i + 1), 1, 100, Scale::Linear, true});
  return out;
}

std::vector<CircuitDef> build_registry() {
  std::vector<CircuitDef> r;

  // I_bias spans two columns in the reference table; the 2SOA reports the
  // bias current of each stage separately.
  auto soa_params = multipliers(6);
  soa_params.push_back({"c", 1e-13, 1e-11, Scale::Log, false});
  r.push_back({CircuitId::TwoStageOpAmp,
               "2SOA",
               soa_params,
               {{"gain", 2e2, 4e2, kMax},
                {"bw", 1e6, 2.5e7, kMax},
                {"pm", 60, 60, kMax},
                {"ibias1", 1e-4, 1e-2, kMin},
                {"ibias2", 1e-4, 1e-2, kMin},
                {"vswing", 0.5, 0.5, kMax}}});

  r.push_back({CircuitId::ReversedTwoStageOpAmp,
               "R2SOA",
               soa_params,
               {{"gain", 2e2, 4e2, kMax}, {"bw", 1e6, 2.5e7, kMax}, {"pm", 60, 60, kMax}, {"ibias", 1e-4, 1e-2, kMin}}});

  r.push_back({CircuitId::TwoStageTia,
               "2STIA",
               multipliers(6),
               {{"gain", 2.5e2, 5e2, kMax},
                {"bw", 4.5e9, 1e10, kMax},
                {"pm", 60, 60, kMax},
                {"ibias", 4e-2, 2e-1, kMin}}});

  std::vector<ParamDef> widths;
  for (int i = 0; i < 6; ++i) widths.push_back({"w" + std::to_string(i + 1), 0.1e-6, 100e-6, Scale::Log, false});
  r.push_back({CircuitId::Comparator, "Comp", widths, {{"delay", 4.5e-12, 9e-12, kMin}, {"power", 2e-10, 2.5e-10, kMin}}});
  return r;
}

}  // namespace

std::string_view circuit_name(CircuitId id) { return circuit(id).name; }

std::optional<CircuitId> parse_circuit(std::string_view name) {
  for (const auto& c : registry()) {
    if (c.name == name) return c.id;
  }
  return std::nullopt;
}

Real SpecDef::normalizer() const { return std::sqrt(lo * hi); }

const std::vector<CircuitDef>& registry() {
  static const std::vector<CircuitDef> r = build_registry();
  return r;
}

const CircuitDef& circuit(CircuitId id) {
  const auto i = static_cast<std::size_t>(id);
  if (i >= registry().size()) throw std::out_of_range("unknown circuit id " + std::to_string(i));
  return registry()[i];
}

TargetSpec sample_target(const CircuitDef& def, numcore::Rng& rng) {
  TargetSpec t;
  t.values.reserve(def.specs.size());
  for (const auto& s : def.specs) {
    if (s.fixed()) {
      t.values.push_back(s.lo);
    } else if (s.hi / s.lo >= 10) {
      t.values.push_back(std::exp(rng.uniform(std::log(s.lo), std::log(s.hi))));
    } else {
      t.values.push_back(rng.uniform(s.lo, s.hi));
    }
  }
  return t;
}

std::vector<Real> denormalize(const CircuitDef& def, std::span<const Real> p) {
  if (static_cast<int>(p.size()) != def.n_params()) {
    throw std::invalid_argument(def.name + " expects " + std::to_string(def.n_params()) + " parameters, got " +
                                std::to_string(p.size()));
  }
  std::vector<Real> out(p.size());
  for (std::size_t j = 0; j < p.size(); ++j) {
    const auto& d = def.params[j];
    Real v = d.scale == Scale::Log ? d.min * std::pow(d.max / d.min, p[j]) : d.min + p[j] * (d.max - d.min);
    if (d.integer) v = std::floor(v + 0.5);
    out[j] = v;
  }
  return out;
}

}  // namespace m3::circuits
