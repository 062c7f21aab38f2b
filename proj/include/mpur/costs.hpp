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

#include "mpur/autodiff.hpp"
#include "mpur/render.hpp"

namespace mpur {

struct CostConfig {
  double k_safety = 1.5;      // mask growth per unit of speed / speed_ref
  double speed_ref = 5.0;     // m/s
  double smooth_tau = 10.0;   // temperature of the smooth max in training graphs
  double lane_weight = 0.2;
};

struct CostVector {
  double proximity = 0.0;
  double lane = 0.0;
};

// Flat [H*W] masks in [0,1], equal to 1 on the ego footprint.
Tensor proximity_mask(double speed_mps, double ego_length, double ego_width,
                      const RoadGeometry& road, const GridConfig& grid,
                      const CostConfig& cfg);
Tensor lane_mask(double ego_length, double ego_width, const GridConfig& grid);

double speed_mps(const std::array<double, 4>& u, double dt);

// Hard-max costs for reporting.
CostVector state_costs(const State& s, double ego_length, double ego_width,
                       const RoadGeometry& road, const GridConfig& grid,
                       const CostConfig& cfg);

// channel [B, H*W], masks [B, H*W] -> [B]. tau <= 0 selects the hard max.
Var masked_max_cost(const Var& channel, const Tensor& masks, double tau);

}  // namespace mpur
