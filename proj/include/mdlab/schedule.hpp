#pragma once

#include <stdexcept>

namespace mdlab {

enum class ScheduleKind { linear };

// Noise schedule over continuous time t in [0,1], discretized as t = step/S.
// The linear rule alpha(t) = 1 - t makes the final-step unmask multiplier
// exactly 1, which guarantees complete unmasking in S steps.
struct NoiseSchedule {
  ScheduleKind kind = ScheduleKind::linear;
  int steps = 0;  // S

  double dt() const { return 1.0 / static_cast<double>(steps); }

  void validate() const {
    if (steps < 1) throw std::invalid_argument("NoiseSchedule: steps must be >= 1");
  }
};

// alpha(t): survival probability of a token under the forward process.
inline double schedule_alpha(const NoiseSchedule& sched, double t) {
  sched.validate();
  if (t < 0.0 || t > 1.0) throw std::domain_error("schedule_alpha: t must lie in [0,1]");
  return 1.0 - t;  // linear
}

// dt / (1 - alpha(t)): per-step unmask probability multiplier of the reverse
// process. Equal to dt/t for the linear schedule; exactly 1 at t = dt.
inline double unmask_multiplier(const NoiseSchedule& sched, double t) {
  sched.validate();
  if (t <= 0.0 || t > 1.0)
    throw std::domain_error("unmask_multiplier: t must lie in (0,1]; the reverse process ends at t=dt");
  return sched.dt() / (1.0 - schedule_alpha(sched, t));
}

}  // namespace mdlab
