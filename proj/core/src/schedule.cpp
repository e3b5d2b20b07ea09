// SPDX-License-Identifier: Apache-2.0
#include "ver/schedule.hpp"

#include <cmath>
#include <numbers>
#include <string>

#include "ver/error.hpp"

namespace ver {

void LrSchedule::validate() const {
  if (total == 0) throw ContractError("schedule needs at least one step");
  if (!(peak >= 0.0)) throw ContractError("peak learning rate must be non-negative");
  if (!(warmup_fraction >= 0.0) || !(constant_fraction >= 0.0) || warmup_fraction + constant_fraction > 1.0) {
    throw ContractError("warmup and constant fractions must be non-negative and sum to at most 1");
  }
}

double lr_at(const LrSchedule& schedule, std::size_t step) {
  schedule.validate();
  if (step > schedule.total) {
    throw ContractError("step " + std::to_string(step) + " outside schedule of " + std::to_string(schedule.total));
  }
  const double s = static_cast<double>(step);
  const double total = static_cast<double>(schedule.total);
  const double warm_end = schedule.warmup_fraction * total;
  const double flat_end = (schedule.warmup_fraction + schedule.constant_fraction) * total;
  if (s < warm_end) return schedule.peak * s / warm_end;
  if (s <= flat_end || flat_end >= total) return schedule.peak;
  const double progress = (s - flat_end) / (total - flat_end);
  return 0.5 * schedule.peak * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace ver
