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

#include "mpur/render.hpp"

#include <algorithm>
#include <cmath>

namespace mpur {

double GridConfig::pixel_dx(std::size_t col) const {
  return (static_cast<double>(col) - static_cast<double>(center_col())) *
         meters_per_px_lat;
}

double GridConfig::pixel_dy(std::size_t row) const {
  return (static_cast<double>(center_row()) - static_cast<double>(row)) *
         meters_per_px_lon;
}

std::array<double, 4> kinematic_vector(const VehicleState& v) {
  return {v.position.x, v.position.y, v.velocity.x, v.velocity.y};
}

namespace {

double overlap(double a0, double a1, double b0, double b1) {
  return std::max(0.0, std::min(a1, b1) - std::max(a0, b0));
}

// Adds coverage of the ego-relative box [x0,x1]x[y0,y1] into one plane.
void rasterize(double* plane, const GridConfig& g, double x0, double x1, double y0,
               double y1) {
  const double hx = 0.5 * g.meters_per_px_lat;
  const double hy = 0.5 * g.meters_per_px_lon;
  const double inv_area = 1.0 / (g.meters_per_px_lat * g.meters_per_px_lon);
  // Column c covers dx in [pixel_dx(c) - hx, pixel_dx(c) + hx].
  const double cc = static_cast<double>(g.center_col());
  const double rc = static_cast<double>(g.center_row());
  const long c_lo = std::max(0L, static_cast<long>(std::floor((x0 - hx) / g.meters_per_px_lat + cc)));
  const long c_hi = std::min(static_cast<long>(g.width) - 1,
                             static_cast<long>(std::ceil((x1 + hx) / g.meters_per_px_lat + cc)));
  const long r_lo = std::max(0L, static_cast<long>(std::floor(rc - (y1 + hy) / g.meters_per_px_lon)));
  const long r_hi = std::min(static_cast<long>(g.height) - 1,
                             static_cast<long>(std::ceil(rc - (y0 - hy) / g.meters_per_px_lon)));
  for (long r = r_lo; r <= r_hi; ++r) {
    const double dy = g.pixel_dy(static_cast<std::size_t>(r));
    const double oy = overlap(dy - hy, dy + hy, y0, y1);
    if (oy <= 0.0) continue;
    for (long c = c_lo; c <= c_hi; ++c) {
      const double dx = g.pixel_dx(static_cast<std::size_t>(c));
      const double ox = overlap(dx - hx, dx + hx, x0, x1);
      if (ox <= 0.0) continue;
      plane[r * g.width + c] += ox * oy * inv_area;
    }
  }
}

void add_vehicle(double* plane, const GridConfig& g, const VehicleState& v,
                 const VehicleState& ego) {
  const double cx = v.position.x - ego.position.x;
  const double cy = v.position.y - ego.position.y;
  rasterize(plane, g, cx - 0.5 * v.width, cx + 0.5 * v.width, cy - 0.5 * v.length,
            cy + 0.5 * v.length);
}

}  // namespace

State render_state(const VehicleState& ego, std::span<const VehicleState> neighbors,
                   const RoadGeometry& road, const GridConfig& grid) {
  const std::size_t plane = grid.height * grid.width;
  State s;
  s.image = Tensor({3, grid.height, grid.width}, 0.0);
  double* img = s.image.data();

  // Markings are full-height bands at every lane boundary, road edges included.
  const double half_band = 0.5 * grid.marking_width_px * grid.meters_per_px_lat;
  const double reach = grid.half_height_m() + grid.meters_per_px_lon;
  for (int k = 0; k <= road.lane_count; ++k) {
    const double bx = k * road.lane_width - ego.position.x;
    rasterize(img + kLaneChannel * plane, grid, bx - half_band, bx + half_band, -reach,
              reach);
  }
  for (const VehicleState& n : neighbors) add_vehicle(img + kNeighborChannel * plane, grid, n, ego);
  add_vehicle(img + kEgoChannel * plane, grid, ego, ego);

  for (std::size_t i = 0; i < 3 * plane; ++i) img[i] = std::min(1.0, img[i]);
  s.u = kinematic_vector(ego);
  return s;
}

}  // namespace mpur
