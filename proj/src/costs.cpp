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

#include "mpur/costs.hpp"

#include <algorithm>
#include <cmath>

#include "mpur/error.hpp"

namespace mpur {

namespace {

// 1 on |d| <= flat, linear down to 0 at |d| = edge.
double taper(double d, double flat, double edge) {
  const double a = std::abs(d);
  if (a <= flat) return 1.0;
  if (edge <= flat) return 0.0;
  return std::max(0.0, (edge - a) / (edge - flat));
}

}  // namespace

Tensor proximity_mask(double speed, double ego_length, double ego_width,
                      const RoadGeometry& road, const GridConfig& grid,
                      const CostConfig& cfg) {
  if (!(speed >= 0.0) || !std::isfinite(speed)) {
    throw Error(ErrorCode::kInvalidArgument, "proximity_mask: bad speed");
  }
  const double reach = std::min(ego_length * (1.0 + cfg.k_safety * speed / cfg.speed_ref),
                                grid.half_height_m());
  Tensor mask({grid.height * grid.width});
  for (std::size_t r = 0; r < grid.height; ++r) {
    const double fy = taper(grid.pixel_dy(r), 0.5 * ego_length, reach);
    for (std::size_t c = 0; c < grid.width; ++c) {
      mask[r * grid.width + c] =
          fy * taper(grid.pixel_dx(c), 0.5 * ego_width, 0.5 * road.lane_width);
    }
  }
  return mask;
}

Tensor lane_mask(double ego_length, double ego_width, const GridConfig& grid) {
  Tensor mask({grid.height * grid.width});
  for (std::size_t r = 0; r < grid.height; ++r) {
    const double fy = taper(grid.pixel_dy(r), 0.0, 0.5 * ego_length);
    for (std::size_t c = 0; c < grid.width; ++c) {
      mask[r * grid.width + c] = fy * taper(grid.pixel_dx(c), 0.0, 0.5 * ego_width);
    }
  }
  return mask;
}

double speed_mps(const std::array<double, 4>& u, double dt) {
  return std::hypot(u[2], u[3]) / dt;
}

CostVector state_costs(const State& s, double ego_length, double ego_width,
                       const RoadGeometry& road, const GridConfig& grid,
                       const CostConfig& cfg) {
  const std::size_t plane = grid.height * grid.width;
  if (s.image.size() != 3 * plane) {
    throw Error(ErrorCode::kShapeMismatch, "state_costs: image does not match grid");
  }
  const Tensor prox = proximity_mask(speed_mps(s.u, road.dt), ego_length, ego_width,
                                     road, grid, cfg);
  const Tensor lane = lane_mask(ego_length, ego_width, grid);
  const double* img = s.image.data();
  CostVector out;
  for (std::size_t i = 0; i < plane; ++i) {
    out.lane = std::max(out.lane, lane[i] * img[kLaneChannel * plane + i]);
    out.proximity = std::max(out.proximity, prox[i] * img[kNeighborChannel * plane + i]);
  }
  return out;
}

Var masked_max_cost(const Var& channel, const Tensor& masks, double tau) {
  Var weighted = mul_const(channel, masks);
  return tau > 0.0 ? soft_max_rows(weighted, tau) : max_rows(weighted);
}

}  // namespace mpur
