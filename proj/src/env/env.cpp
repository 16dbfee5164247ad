#include "m3/env/env.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace m3::env {

Real d(Real x, Real y) {
  const Real s = x + y;
  if (s == 0) throw std::domain_error("d(x, y) undefined for x + y = 0");
  return (x - y) / s;
}

Real directional_d(Real m, Real n, circuits::Direction dir) {
  return dir == circuits::Direction::Maximize ? d(m, n) : d(n, m);
}

Real figure_of_merit(const CircuitDef& def, std::span<const Real> m, std::span<const Real> n) {
  if (static_cast<int>(m.size()) != def.n_specs() || static_cast<int>(n.size()) != def.n_specs()) {
    throw std::invalid_argument(def.name + " has " + std::to_string(def.n_specs()) + " specs");
  }
  Real fom = 0;
  for (int i = 0; i < def.n_specs(); ++i) fom += std::min(directional_d(m[i], n[i], def.specs[i].direction), 0.0);
  return fom;
}

Real reward_from_fom(Real fom) { return fom < kFomThreshold ? fom : kSuccessReward; }

int obs_valid_len(const CircuitDef& def) { return kEmbedLen + def.raw_obs_dim(); }

std::vector<Real> pack(std::span<const Real> values, int length) {
  if (static_cast<int>(values.size()) > length) {
    throw std::invalid_argument("cannot pack " + std::to_string(values.size()) + " values into " +
                                std::to_string(length));
  }
  std::vector<Real> out(static_cast<std::size_t>(length), 0.0);
  std::copy(values.begin(), values.end(), out.begin());
  return out;
}

std::vector<Real> unpack(std::span<const Real> packed, int valid_len) {
  if (valid_len < 0 || valid_len > static_cast<int>(packed.size())) throw std::invalid_argument("bad valid length");
  return {packed.begin(), packed.begin() + valid_len};
}

std::vector<Real> build_observation(const CircuitDef& def, std::span<const Real> p, std::span<const Real> m,
                                    std::span<const Real> n) {
  std::vector<Real> raw;
  raw.reserve(static_cast<std::size_t>(obs_valid_len(def)));
  for (int c = 0; c < kEmbedLen; ++c) raw.push_back(c == static_cast<int>(def.id) ? 1.0 : 0.0);
  raw.insert(raw.end(), p.begin(), p.end());
  for (int i = 0; i < def.n_specs(); ++i) {
    const Real g = def.specs[i].normalizer();
    raw.push_back(d(m[i], g));
    raw.push_back(d(n[i], g));
  }
  return pack(raw, kObsLen);
}

std::optional<CircuitId> circuit_from_observation(std::span<const Real> obs) {
  int hot = -1;
  for (int c = 0; c < kEmbedLen; ++c) {
    if (obs[c] == 1.0) {
      if (hot >= 0) return std::nullopt;
      hot = c;
    } else if (obs[c] != 0.0) {
      return std::nullopt;
    }
  }
  if (hot < 0) return std::nullopt;
  return static_cast<CircuitId>(hot);
}

CircuitEnv::CircuitEnv(std::shared_ptr<circuits::Simulator> sim, std::uint64_t seed)
    : sim_(std::move(sim)), rng_(seed) {
  if (!sim_) throw std::invalid_argument("environment needs a simulator");
}

std::vector<Real> CircuitEnv::simulate(const std::vector<Real>& p) {
  ++sim_calls_;
  return sim_->simulate(current(), p);
}

std::vector<Real> CircuitEnv::reset(std::optional<CircuitId> forced) {
  const auto id = forced ? *forced : circuits::kAllCircuits[rng_.index(circuits::kNumCircuits)];
  const auto& def = circuits::circuit(id);
  auto targets = circuits::sample_target(def, rng_).values;
  std::vector<Real> p(static_cast<std::size_t>(def.n_params()));
  for (auto& v : p) v = rng_.uniform(0, 1);
  return reset_to(id, std::move(targets), std::move(p));
}

std::vector<Real> CircuitEnv::reset_to(CircuitId id, std::vector<Real> targets, std::vector<Real> p) {
  const auto& def = circuits::circuit(id);
  if (static_cast<int>(targets.size()) != def.n_specs() || static_cast<int>(p.size()) != def.n_params()) {
    throw std::invalid_argument("reset_to: wrong target or parameter count for " + def.name);
  }
  state_.circuit = id;
  state_.n = std::move(targets);
  state_.p = std::move(p);
  state_.step = 0;
  state_.m = simulate(state_.p);
  started_ = true;
  return observation();
}

std::vector<Real> CircuitEnv::observation() const {
  return build_observation(current(), state_.p, state_.m, state_.n);
}

StepResult CircuitEnv::step(std::span<const Real> action) {
  if (!started_) throw std::logic_error("step called before reset");
  if (state_.step >= kEpisodeLen) throw std::logic_error("episode already finished; call reset");
  const auto& def = current();
  if (static_cast<int>(action.size()) < def.n_params()) {
    throw std::invalid_argument("action has " + std::to_string(action.size()) + " entries, " + def.name + " needs " +
                                std::to_string(def.n_params()));
  }
  ++step_calls_;
  for (int j = 0; j < def.n_params(); ++j) {
    Real a = action[j];
    if (!std::isfinite(a)) throw std::invalid_argument("non-finite action component");
    if (a < -1 || a > 1) {
      ++clamp_warnings_;
      a = std::clamp(a, -1.0, 1.0);
    }
    state_.p[j] = std::clamp(state_.p[j] + a, 0.0, 1.0);
  }
  state_.m = simulate(state_.p);
  ++state_.step;

  StepResult r;
  r.info.metrics = state_.m;
  for (int i = 0; i < def.n_specs(); ++i) {
    r.info.directional.push_back(directional_d(state_.m[i], state_.n[i], def.specs[i].direction));
  }
  r.info.fom = figure_of_merit(def, state_.m, state_.n);
  r.reward = reward_from_fom(r.info.fom);
  r.terminal = r.reward > 0;
  r.truncated = !r.terminal && state_.step >= kEpisodeLen;
  r.obs = observation();
  return r;
}

}  // namespace m3::env
