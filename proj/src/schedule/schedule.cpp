#include "m3/schedule/schedule.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <ostream>
#include <stdexcept>
#include <string_view>

namespace m3::schedule {

void ScheduleConfig::validate() const {
  for (Real v : {alpha_initial, alpha_final, updates_initial, updates_final, rollouts_initial, rollouts_final, scale}) {
    if (!std::isfinite(v)) throw std::invalid_argument("schedule endpoints must be finite");
  }
  if (!(scale > 0)) throw std::invalid_argument("schedule scale must be positive");
  if (std::min(alpha_initial, alpha_final) < 0 || std::max(alpha_initial, alpha_final) > 1) {
    throw std::invalid_argument("alpha endpoints must lie in [0, 1]");
  }
  if (std::min(rollouts_initial, rollouts_final) < 1) throw std::invalid_argument("rollout horizon must be >= 1");
  if (std::min(updates_initial, updates_final) < 0) throw std::invalid_argument("update counts must be >= 0");
}

Real ramp(Real initial, Real final, Real scale, std::int64_t t) {
  if (t < 0) throw std::invalid_argument("schedule queried at negative t");
  const Real v = initial + static_cast<Real>(t) * (final - initial) / scale;
  return std::clamp(v, std::min(initial, final), std::max(initial, final));
}

Schedule::Schedule(ScheduleConfig config) : config_(config) { config_.validate(); }

Schedule Schedule::fixed(Real alpha, std::int64_t rollouts, std::int64_t updates) {
  ScheduleConfig c;
  c.alpha_initial = c.alpha_final = alpha;
  c.rollouts_initial = c.rollouts_final = static_cast<Real>(rollouts);
  c.updates_initial = c.updates_final = static_cast<Real>(updates);
  Schedule s(c);
  s.fixed_ = true;
  return s;
}

Real Schedule::alpha(std::int64_t t) const {
  return ramp(config_.alpha_initial, config_.alpha_final, config_.scale, t);
}

std::int64_t Schedule::t_a(std::int64_t t) const {
  return std::lround(ramp(config_.updates_initial, config_.updates_final, config_.scale, t));
}

std::int64_t Schedule::r(std::int64_t t) const {
  return std::lround(ramp(config_.rollouts_initial, config_.rollouts_final, config_.scale, t));
}

void Schedule::write_csv(std::ostream& out, std::int64_t last, std::int64_t stride) const {
  if (stride <= 0) throw std::invalid_argument("stride must be positive");
  out << "t,alpha,t_a,r\n";
  std::array<char, 32> buf{};
  for (std::int64_t t = 0; t <= last; t += stride) {
    // Shortest text that reads back to the same double.
    const auto end = std::to_chars(buf.data(), buf.data() + buf.size(), alpha(t)).ptr;
    out << t << ',' << std::string_view(buf.data(), static_cast<std::size_t>(end - buf.data())) << ',' << t_a(t) << ','
        << r(t) << '\n';
  }
}

}  // namespace m3::schedule
