// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

namespace ver {

/// Linear warmup to `peak`, a constant plateau, then cosine decay to zero at `total`.
struct LrSchedule {
  std::size_t total = 1000;
  double peak = 0.002;
  double warmup_fraction = 0.10;
  double constant_fraction = 0.40;

  void validate() const;
};

/// Learning rate at step s in [0, total].
double lr_at(const LrSchedule& schedule, std::size_t step);

}  // namespace ver
