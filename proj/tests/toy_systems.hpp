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

#include "mpur/data.hpp"
#include "mpur/rng.hpp"

namespace mpur::toy {

// Cars alone on the road (disjoint time slots), smooth speed and lateral
// variation. The next state is a near-linear function of state and action.
inline TrajectoryDataset lone_cars(std::size_t n_cars, std::size_t frames, std::uint64_t seed) {
  Rng rng(seed);
  TrajectoryDataset d;
  for (std::size_t c = 0; c < n_cars; ++c) {
    Trajectory t;
    t.car_id = static_cast<std::int64_t>(c + 1);
    t.first_frame = static_cast<std::int64_t>(c * (frames + 5));
    const double x0 = rng.uniform(2.0, 12.0), v0 = rng.uniform(1.0, 1.5);
    const double amp = rng.uniform(0.0, 0.2), w = rng.uniform(0.02, 0.08), ph = rng.uniform(0.0, 6.28);
    const double lat = rng.uniform(-0.02, 0.02);
    double y = rng.uniform(5.0, 20.0);
    for (std::size_t i = 0; i < frames; ++i) {
      VehicleState s;
      y += v0 + amp * std::sin(w * static_cast<double>(i) + ph);
      s.position = {x0 + lat * static_cast<double>(i), y};
      t.states.push_back(s);
    }
    derive_velocities(t);
    d.cars.push_back(std::move(t));
  }
  d.reindex();
  return d;
}

// Each ego has a leader ahead whose speed switches at random between slow and
// fast, so the ego's next image is multimodal given its own history and action.
inline TrajectoryDataset random_leader(std::size_t n_pairs, std::size_t frames, std::uint64_t seed) {
  Rng rng(seed);
  TrajectoryDataset d;
  for (std::size_t c = 0; c < n_pairs; ++c) {
    const std::int64_t start = static_cast<std::int64_t>(c * (frames + 5));
    const double x = 1.85 + 3.7 * static_cast<double>(rng.index(4));
    Trajectory ego, lead;
    ego.car_id = static_cast<std::int64_t>(2 * c + 1);
    lead.car_id = ego.car_id + 1;
    ego.first_frame = lead.first_frame = start;
    double ye = 10.0, yl = 10.0 + rng.uniform(9.0, 14.0), vl = 1.2;
    for (std::size_t i = 0; i < frames; ++i) {
      if (rng.bernoulli(0.15)) vl = rng.bernoulli(0.5) ? 0.9 : 1.6;
      ye += 1.2;
      yl += vl;
      if (yl - ye < 7.0) yl = ye + 7.0;
      if (yl - ye > 25.0) yl = ye + 25.0;
      VehicleState se, sl;
      se.position = {x, ye};
      sl.position = {x, yl};
      ego.states.push_back(se);
      lead.states.push_back(sl);
    }
    derive_velocities(ego);
    derive_velocities(lead);
    d.cars.push_back(std::move(ego));
    d.cars.push_back(std::move(lead));
  }
  d.reindex();
  return d;
}

}  // namespace mpur::toy
