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

#include <array>
#include <cstddef>
#include <span>
#include <vector>

#include "mpur/kinematics.hpp"
#include "mpur/tensor.hpp"

namespace mpur {

struct RoadGeometry {
  int lane_count = 4;
  double lane_width = 3.7;
  double segment_length = 300.0;
  double dt = 0.1;

  double road_width() const { return lane_count * lane_width; }
};

struct GridConfig {
  std::size_t height = 39;
  std::size_t width = 12;
  double meters_per_px_lon = 1.6;
  double meters_per_px_lat = 0.6;
  double marking_width_px = 2.0;

  std::size_t center_row() const { return height / 2; }
  std::size_t center_col() const { return width / 2; }
  // Ego-relative offsets of a pixel centre; row 0 is farthest ahead.
  double pixel_dx(std::size_t col) const;
  double pixel_dy(std::size_t row) const;
  double half_height_m() const { return 0.5 * height * meters_per_px_lon; }
};

enum Channel : std::size_t { kLaneChannel = 0, kNeighborChannel = 1, kEgoChannel = 2 };

// image [3,H,W] in [0,1]; u = (x, y, dx, dy).
struct State {
  Tensor image;
  std::array<double, 4> u{};
};

std::array<double, 4> kinematic_vector(const VehicleState& v);

State render_state(const VehicleState& ego, std::span<const VehicleState> neighbors,
                   const RoadGeometry& road, const GridConfig& grid);

}  // namespace mpur
