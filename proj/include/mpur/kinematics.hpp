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

#pragma once

#include <cmath>
#include <cstdint>

namespace mpur {

struct Vec2 {
  double x = 0.0;
  double y = 0.0;

  Vec2 operator+(Vec2 o) const { return {x + o.x, y + o.y}; }
  Vec2 operator-(Vec2 o) const { return {x - o.x, y - o.y}; }
  Vec2 operator*(double s) const { return {x * s, y * s}; }
  double dot(Vec2 o) const { return x * o.x + y * o.y; }
  double norm() const { return std::hypot(x, y); }
  // (x, y)_perp = (-y, x)
  Vec2 perp() const { return {-y, x}; }
};

// x is lateral, y longitudinal; velocity is the per-step displacement.
struct VehicleState {
  Vec2 position;
  Vec2 velocity;
  double length = 4.5;
  double width = 1.8;
  std::int64_t car_id = 0;
};

// dspeed in meters/step^2, dangle in meters/step.
struct Action {
  double dspeed = 0.0;
  double dangle = 0.0;
};

struct ActionBounds {
  double max_dspeed = 0.1;
  double max_dangle = 0.1;
  double min_speed = 0.05;  // meters/step kept after braking
};

// Throws kInfeasibleAction for a stationary car.
Action extract_action(Vec2 velocity, Vec2 next_velocity);

// Exact inverse of extract_action. Throws kInfeasibleAction unless
// |v| > 0 and |v| + dspeed > |dangle|.
Vec2 apply_action(Vec2 velocity, Action a);

// Clamps to the bounds and to the region where apply_action is defined.
Action clamp_action(Vec2 velocity, Action a, const ActionBounds& bounds);

// Axis-aligned footprint intersection (strict overlap).
bool rectangles_intersect(const VehicleState& a, const VehicleState& b);

}  // namespace mpur
