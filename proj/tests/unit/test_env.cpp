#include <cmath>
#include <map>

#include "doctest.h"
#include "m3/circuits/surrogate.hpp"
#include "m3/env/env.hpp"

using namespace m3::env;
using m3::circuits::SurrogateModel;
using m3::circuits::SurrogateSimulator;
using m3::numcore::Rng;
namespace circuits = m3::circuits;

namespace {

std::shared_ptr<SurrogateSimulator> surrogate() { return std::make_shared<SurrogateSimulator>(); }

}  // namespace

TEST_CASE("d function values and errors") {
  CHECK(d(4.2, 4.2) == 0.0);
  CHECK(d(3, 1) == doctest::Approx(0.5));
  CHECK(d(1, 3) == doctest::Approx(-0.5));
  CHECK_THROWS_AS(d(2, -2), std::domain_error);
  Rng rng(1);
  for (int t = 0; t < 100; ++t) {
    const Real m = rng.uniform(0.1, 10), n = rng.uniform(0.1, 10), a = rng.uniform(0.01, 100);
    CHECK(d(a * m, a * n) == doctest::Approx(d(m, n)).epsilon(1e-12));
  }
}

TEST_CASE("reward follows the figure of merit threshold") {
  const auto& tia = circuits::circuit(CircuitId::TwoStageTia);  // gain, bw, pm maximize; ibias minimize
  const std::vector<Real> n{300, 5e9, 60, 0.1};
  CHECK(reward(tia, n, n) == 10.0);
  auto m = n;
  m[0] = 100;  // gain 100 against 300: d = -0.5
  CHECK(figure_of_merit(tia, m, n) == doctest::Approx(-0.5));
  CHECK(reward(tia, m, n) == doctest::Approx(-0.5));
  m = n;
  m[3] = 0.3;  // bias current above its ceiling: d(0.1, 0.3) = -0.5
  CHECK(reward(tia, m, n) == doctest::Approx(-0.5));
  m[3] = 0.05;  // comfortably below: contributes nothing
  CHECK(reward(tia, m, n) == 10.0);
  CHECK(reward_from_fom(-0.01) == 10.0);
  CHECK(reward_from_fom(-0.02) == 10.0);
  CHECK(reward_from_fom(-0.0200001) == doctest::Approx(-0.0200001));
}

TEST_CASE("observation packing layout") {
  const auto& comp = circuits::circuit(CircuitId::Comparator);
  const std::vector<Real> p{0.1, 0.2, 0.3, 0.4, 0.5, 0.6};
  const std::vector<Real> g{comp.specs[0].normalizer(), comp.specs[1].normalizer()};
  const std::vector<Real> n{6e-12, 2.2e-10};
  const auto obs = build_observation(comp, p, g, n);
  REQUIRE(obs.size() == 23);
  CHECK(obs_valid_len(comp) == 14);
  CHECK(obs[3] == 1.0);
  CHECK(obs[0] + obs[1] + obs[2] == 0.0);
  for (int j = 0; j < 6; ++j) CHECK(obs[4 + j] == p[j]);
  CHECK(obs[10] == 0.0);
  CHECK(obs[12] == 0.0);
  CHECK(obs[11] == doctest::Approx(d(n[0], g[0])));
  for (int k = 14; k < 23; ++k) CHECK(obs[k] == 0.0);
  CHECK(circuit_from_observation(obs) == CircuitId::Comparator);
  CHECK(obs_valid_len(circuits::circuit(CircuitId::TwoStageOpAmp)) == 23);
}

TEST_CASE("pack and unpack round trip for every circuit") {
  Rng rng(2);
  for (const auto& def : circuits::registry()) {
    std::vector<Real> x(static_cast<std::size_t>(obs_valid_len(def)));
    for (auto& v : x) v = rng.uniform(-1, 1);
    CHECK(unpack(pack(x, kObsLen), obs_valid_len(def)) == x);
    std::vector<Real> a(static_cast<std::size_t>(def.n_params()));
    for (auto& v : a) v = rng.uniform(-1, 1);
    const auto packed = pack(a, kActLen);
    CHECK(unpack(packed, def.n_params()) == a);
    for (int k = def.n_params(); k < kActLen; ++k) CHECK(packed[k] == 0.0);
  }
}

TEST_CASE("step semantics: zero action, clamping, success") {
  CircuitEnv env(surrogate(), 7);
  env.reset(CircuitId::TwoStageOpAmp);
  const auto before = env.state();
  const std::vector<Real> zero(kActLen, 0.0);
  auto r = env.step(zero);
  CHECK(env.state().p == before.p);
  CHECK(env.state().m == before.m);

  std::vector<Real> p(7, 0.5);
  p[0] = 0.3;
  env.reset_to(CircuitId::TwoStageOpAmp, env.state().n, p);
  std::vector<Real> a(kActLen, 0.0);
  a[0] = 1.0;
  env.step(a);
  CHECK(env.state().p[0] == 1.0);

  a[0] = -3.0;  // outside the box: clamped and counted
  const auto warnings = env.clamp_warnings();
  env.step(a);
  CHECK(env.state().p[0] == 0.0);
  CHECK(env.clamp_warnings() == warnings + 1);

  SUBCASE("reaching the target ends the episode immediately") {
    SurrogateModel model;
    const auto& def = circuits::circuit(CircuitId::Comparator);
    auto feasible = model.feasible_point(def);
    env.reset_to(CircuitId::Comparator, {6e-12, 2.2e-10}, feasible);
    r = env.step(zero);
    CHECK(r.reward == 10.0);
    CHECK(r.terminal);
    CHECK_FALSE(r.truncated);
    CHECK(env.state().step == 1);
  }
}

TEST_CASE("episodes never exceed the length limit and rewards skip the dead band") {
  CircuitEnv env(surrogate(), 9);
  Rng rng(4);
  int episodes = 0;
  env.reset();
  for (int t = 0; t < 6000; ++t) {
    std::vector<Real> a(kActLen);
    for (auto& v : a) v = rng.uniform(-0.2, 0.2);
    const auto r = env.step(a);
    CHECK(env.state().step <= kEpisodeLen);
    CHECK((r.reward == 10.0 || r.reward < -0.02));
    CHECK(r.info.fom <= 0.0);
    bool all_met = true;
    for (Real v : r.info.directional) all_met = all_met && v >= 0;
    CHECK((r.info.fom == 0.0) == all_met);
    if (r.done()) {
      ++episodes;
      env.reset();
    }
  }
  CHECK(episodes >= 6000 / kEpisodeLen);
  CHECK(env.step_calls() == 6000);
  CHECK(env.sim_calls() == 6000 + episodes + 1);
}

TEST_CASE("reset: forced circuit, determinism, uniform topology draw") {
  CircuitEnv a(surrogate(), 21), b(surrogate(), 21);
  CHECK(a.reset() == b.reset());
  CHECK(a.state().n == b.state().n);
  const auto obs = a.reset(CircuitId::Comparator);
  CHECK(obs[3] == 1.0);

  CircuitEnv env(surrogate(), 5);
  std::map<CircuitId, int> counts;
  const int n = 10000;
  for (int t = 0; t < n; ++t) {
    env.reset();
    ++counts[env.state().circuit];
    for (Real v : env.state().p) CHECK((v >= 0 && v <= 1));
  }
  const double sigma = std::sqrt(n * 0.25 * 0.75);
  for (auto id : circuits::kAllCircuits) {
    CAPTURE(static_cast<int>(id));
    CHECK(std::abs(counts[id] - n / 4.0) < 4 * sigma);
  }
}

TEST_CASE("every sampled target is attainable") {
  SurrogateModel model;
  Rng rng(17);
  for (const auto& def : circuits::registry()) {
    const auto p = model.feasible_point(def);
    const auto m = model.evaluate(def, p);
    for (int t = 0; t < 500; ++t) {
      const auto target = circuits::sample_target(def, rng);
      CHECK(figure_of_merit(def, m, target.values) == 0.0);
    }
  }
}

TEST_CASE("grid search at 1/16 finds a zero figure of merit for the comparator") {
  SurrogateModel model;
  const auto& def = circuits::circuit(CircuitId::Comparator);
  Rng rng(3);
  const auto target = circuits::sample_target(def, rng);
  // Exhaustive over the two dedicated parameters, coarse over the rest.
  bool found = false;
  std::vector<Real> p(6, 0.5);
  for (int i0 = 0; i0 <= 16 && !found; ++i0) {
    for (int i1 = 0; i1 <= 16 && !found; ++i1) {
      for (int rest = 0; rest <= 16 && !found; rest += 4) {
        p[0] = i0 / 16.0;
        p[1] = i1 / 16.0;
        for (int j = 2; j < 6; ++j) p[j] = rest / 16.0;
        found = figure_of_merit(def, model.evaluate(def, p), target.values) == 0.0;
      }
    }
  }
  CHECK(found);
}
