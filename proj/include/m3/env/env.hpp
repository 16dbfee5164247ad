#pragma once

#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "m3/circuits/circuits.hpp"
#include "m3/numcore/random.hpp"

namespace m3::env {

using circuits::CircuitDef;
using circuits::CircuitId;
using numcore::Real;

inline constexpr int kEmbedLen = 4;
inline constexpr int kObsLen = 23;  // one-hot + largest raw observation (2SOA)
inline constexpr int kActLen = 7;   // largest parameter count
inline constexpr int kEpisodeLen = 30;
inline constexpr Real kSuccessReward = 10;
inline constexpr Real kFomThreshold = -0.02;

// (x - y) / (x + y); throws std::domain_error when x + y == 0.
Real d(Real x, Real y);
// d(m, n) for maximize specs, d(n, m) for minimize specs: >= 0 iff met.
Real directional_d(Real m, Real n, circuits::Direction dir);

Real figure_of_merit(const CircuitDef& def, std::span<const Real> m, std::span<const Real> n);
Real reward_from_fom(Real fom);
inline Real reward(const CircuitDef& def, std::span<const Real> m, std::span<const Real> n) {
  return reward_from_fom(figure_of_merit(def, m, n));
}

int obs_valid_len(const CircuitDef& def);
std::vector<Real> pack(std::span<const Real> values, int length);
std::vector<Real> unpack(std::span<const Real> packed, int valid_len);

// [one-hot(4) | p | d(m_1,g_1), d(n_1,g_1), ... | zeros], length kObsLen.
std::vector<Real> build_observation(const CircuitDef& def, std::span<const Real> p, std::span<const Real> m,
                                    std::span<const Real> n);
// Circuit selected by the one-hot prefix; nullopt when it is not a valid one-hot.
std::optional<CircuitId> circuit_from_observation(std::span<const Real> obs);
// Offsets into an observation for one circuit.
inline int param_offset() { return kEmbedLen; }
inline int metric_offset(const CircuitDef& def, int spec) { return kEmbedLen + def.n_params() + 2 * spec; }
inline int target_offset(const CircuitDef& def, int spec) { return metric_offset(def, spec) + 1; }

struct EnvState {
  CircuitId circuit = CircuitId::TwoStageOpAmp;
  std::vector<Real> p;
  std::vector<Real> m;
  std::vector<Real> n;
  int step = 0;
};

struct StepInfo {
  std::vector<Real> directional;  // per-spec d-tilde
  std::vector<Real> metrics;
  Real fom = 0;
};

struct StepResult {
  std::vector<Real> obs;
  Real reward = 0;
  bool terminal = false;   // success: reward became positive
  bool truncated = false;  // episode length reached without success
  StepInfo info;
  bool done() const { return terminal || truncated; }
};

// One stored interaction. `done` marks success terminals only; time-limit
// truncations keep bootstrapping.
struct Transition {
  std::vector<Real> obs;
  std::vector<Real> action;
  Real reward = 0;
  std::vector<Real> next_obs;
  bool done = false;
};

class CircuitEnv {
public:
  CircuitEnv(std::shared_ptr<circuits::Simulator> sim, std::uint64_t seed);

  // Uniform circuit (unless forced), fresh targets, uniform initial p.
  std::vector<Real> reset(std::optional<CircuitId> forced = std::nullopt);
  // Deterministic reset used by evaluation.
  std::vector<Real> reset_to(CircuitId id, std::vector<Real> targets, std::vector<Real> p);
  // Applies the first N_c entries of a packed action. Components outside
  // [-1, 1] are clamped and counted in clamp_warnings().
  StepResult step(std::span<const Real> action);

  const EnvState& state() const { return state_; }
  const CircuitDef& current() const { return circuits::circuit(state_.circuit); }
  std::vector<Real> observation() const;

  std::int64_t clamp_warnings() const { return clamp_warnings_; }
  std::int64_t step_calls() const { return step_calls_; }
  std::int64_t sim_calls() const { return sim_calls_; }
  numcore::Rng& rng() { return rng_; }

private:
  std::vector<Real> simulate(const std::vector<Real>& p);

  std::shared_ptr<circuits::Simulator> sim_;
  numcore::Rng rng_;
  EnvState state_;
  bool started_ = false;
  std::int64_t clamp_warnings_ = 0;
  std::int64_t step_calls_ = 0;
  std::int64_t sim_calls_ = 0;
};

}  // namespace m3::env
