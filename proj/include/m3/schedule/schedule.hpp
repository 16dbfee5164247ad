#pragma once

#include <cstdint>
#include <iosfwd>

namespace m3::schedule {

using Real = double;

struct ScheduleConfig {
  Real alpha_initial = 0.05;
  Real alpha_final = 0.95;
  Real updates_initial = 15;  // T_a
  Real updates_final = 20;
  Real rollouts_initial = 1;  // R
  Real rollouts_final = 7;
  Real scale = 15000;

  void validate() const;
};

// Clamped linear ramp from `initial` at t = 0 to `final` at t = scale.
Real ramp(Real initial, Real final, Real scale, std::int64_t t);

// Real-data share, agent updates per env step and rollout horizon as
// functions of the environment step. Integer schedules round half away from
// zero. A fixed schedule returns the same triple for every t.
class Schedule {
public:
  explicit Schedule(ScheduleConfig config = {});
  static Schedule fixed(Real alpha = 0.05, std::int64_t rollouts = 10, std::int64_t updates = 20);

  Real alpha(std::int64_t t) const;
  std::int64_t t_a(std::int64_t t) const;
  std::int64_t r(std::int64_t t) const;

  bool is_fixed() const { return fixed_; }
  const ScheduleConfig& config() const { return config_; }

  // CSV rows "t,alpha,t_a,r" for t = 0, stride, ..., last.
  void write_csv(std::ostream& out, std::int64_t last, std::int64_t stride = 100) const;

private:
  ScheduleConfig config_;
  bool fixed_ = false;
};

}  // namespace m3::schedule
