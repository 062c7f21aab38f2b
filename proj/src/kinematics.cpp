// Copyright 2026 The MPUR Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#include "mpur/kinematics.hpp"

#include <algorithm>

#include "mpur/error.hpp"

namespace mpur {

Action extract_action(Vec2 velocity, Vec2 next_velocity) {
  const double r = velocity.norm();
  if (!(r > 0.0)) {
    throw Error(ErrorCode::kInfeasibleAction, "extract_action: stationary car");
  }
  return {next_velocity.norm() - r, (next_velocity - velocity).dot(velocity.perp()) / r};
}

Vec2 apply_action(Vec2 velocity, Action a) {
  const double r = velocity.norm();
  const double speed = r + a.dspeed;
  if (!(r > 0.0) || !(speed > std::abs(a.dangle)) || !std::isfinite(a.dangle)) {
    throw Error(ErrorCode::kInfeasibleAction, "apply_action: infeasible action");
  }
  const Vec2 u = velocity * (1.0 / r);
  const double along = std::sqrt(speed * speed - a.dangle * a.dangle);
  return u * along + u.perp() * a.dangle;
}

Action clamp_action(Vec2 velocity, Action a, const ActionBounds& bounds) {
  const double r = velocity.norm();
  Action out;
  out.dspeed = std::clamp(a.dspeed, -bounds.max_dspeed, bounds.max_dspeed);
  out.dspeed = std::max(out.dspeed, std::min(0.0, bounds.min_speed - r));
  const double speed = r + out.dspeed;
  const double lateral = std::min(bounds.max_dangle, 0.99 * speed);
  out.dangle = std::clamp(a.dangle, -lateral, lateral);
  return out;
}

bool rectangles_intersect(const VehicleState& a, const VehicleState& b) {
  return std::abs(a.position.x - b.position.x) < 0.5 * (a.width + b.width) &&
         std::abs(a.position.y - b.position.y) < 0.5 * (a.length + b.length);
}

}  // namespace mpur
