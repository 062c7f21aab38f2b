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

#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include "mpur/data.hpp"
#include "mpur/error.hpp"
#include "mpur/rng.hpp"

namespace mpur {

std::vector<BehaviorClass> SyntheticConfig::default_classes() {
  BehaviorClass calm{0.35, 11.5, 1.0, 1.6, 2.5, 1.2, 1.8, 0.05, 0.02};
  BehaviorClass normal{0.45, 13.5, 1.2, 1.2, 2.0, 1.5, 2.0, 0.2, 0.05};
  BehaviorClass aggressive{0.20, 15.5, 1.2, 0.9, 1.5, 2.0, 2.5, 0.6, 0.10};
  return {calm, normal, aggressive};
}

namespace {

constexpr double kMinSpeed = 1.0;
constexpr double kMaxDecel = 8.0;

struct SimCar {
  std::int64_t id = 0;
  const BehaviorClass* cls = nullptr;
  double length = 4.5, width = 1.8;
  double desired = 13.0;
  double v = 0.0;
  double y = 0.0;
  int lane = 0;
  int to_lane = 0;
  double change_t = -1.0;  // < 0 when keeping the lane
  double slow_until = -1.0;
  double wander_phase = 0.0, wander_omega = 0.5;
  std::int64_t first_frame = 0;
  std::vector<Vec2> path;
  bool active = true;

  bool occupies(int l) const { return lane == l || (change_t >= 0.0 && to_lane == l); }
};

double lane_center(const RoadGeometry& road, int lane) { return (lane + 0.5) * road.lane_width; }

double lateral(const SimCar& c, const RoadGeometry& road, const SyntheticConfig& cfg, double time) {
  double base = lane_center(road, c.lane);
  if (c.change_t >= 0.0) {
    const double tau = std::min(1.0, c.change_t / cfg.lane_change_duration);
    base += (lane_center(road, c.to_lane) - base) * 0.5 * (1.0 - std::cos(std::numbers::pi * tau));
  }
  return base + cfg.lateral_wander * std::sin(c.wander_phase + c.wander_omega * time);
}

void validate(const SyntheticConfig& cfg, const RoadGeometry& road) {
  auto fail = [](const std::string& m) { throw Error(ErrorCode::kConfig, "synthetic traffic: " + m); };
  if (cfg.n_cars < 1) fail("n_cars must be positive");
  if (road.lane_count < 1) fail("lane_count must be positive");
  if (!(road.dt > 0.0)) fail("dt must be positive");
  if (cfg.classes.empty()) fail("no behavior classes");
  double w = 0.0;
  for (const BehaviorClass& c : cfg.classes) {
    if (!(c.weight >= 0.0) || !(c.desired_speed > kMinSpeed) || !(c.max_accel > 0.0) ||
        !(c.comfort_decel > 0.0) || c.accel_noise < 0.0 || c.time_headway < 0.0)
      fail("invalid behavior class");
    w += c.weight;
  }
  if (!(w > 0.0)) fail("class weights sum to zero");
  const double widest = cfg.car_width + 3.0 * cfg.car_width_std + 2.0 * cfg.lateral_wander;
  if (widest >= road.lane_width) fail("cars do not fit the lane width");
  const double longest = cfg.car_length + 3.0 * cfg.car_length_std;
  if (road.segment_length < 4.0 * longest) fail("cars do not fit the segment length");
  if (!(cfg.mean_spawn_headway > 0.0) || !(cfg.lane_change_duration > 0.0)) fail("bad timing");
}

}  // namespace

TrajectoryDataset generate_synthetic_traffic(const SyntheticConfig& cfg, const RoadGeometry& road,
                                             std::uint64_t seed) {
  validate(cfg, road);
  Rng rng(seed);
  const double dt = road.dt;
  std::vector<double> cum;
  for (const BehaviorClass& c : cfg.classes) cum.push_back((cum.empty() ? 0.0 : cum.back()) + c.weight);

  std::vector<SimCar> cars;
  std::vector<double> next_spawn(static_cast<std::size_t>(road.lane_count));
  for (double& t : next_spawn) t = rng.uniform(0.0, cfg.mean_spawn_headway);
  int spawned = 0;

  auto nearest = [&](const SimCar& me, int lane, bool ahead) -> const SimCar* {
    const SimCar* best = nullptr;
    for (const SimCar& o : cars) {
      if (!o.active || o.id == me.id || !o.occupies(lane)) continue;
      if (ahead ? o.y < me.y : o.y >= me.y) continue;
      if (!best || (ahead ? o.y < best->y : o.y > best->y)) best = &o;
    }
    return best;
  };
  auto gap = [](const SimCar& back, const SimCar& front) {
    return front.y - back.y - 0.5 * (front.length + back.length);
  };

  int frame = 0;
  for (; frame < cfg.max_frames; ++frame) {
    const double time = frame * dt;
    bool any_active = false;
    for (const SimCar& c : cars) any_active = any_active || c.active;
    if (spawned >= cfg.n_cars && !any_active) break;

    // Spawning at y = 0.
    for (int l = 0; l < road.lane_count && spawned < cfg.n_cars; ++l) {
      if (time < next_spawn[static_cast<std::size_t>(l)]) continue;
      SimCar c;
      c.id = spawned + 1;
      const double pick = rng.uniform(0.0, cum.back());
      c.cls = &cfg.classes[static_cast<std::size_t>(std::lower_bound(cum.begin(), cum.end(), pick) - cum.begin())];
      c.desired = std::clamp(c.cls->desired_speed + c.cls->desired_speed_std * rng.normal(),
                             0.6 * c.cls->desired_speed, 1.4 * c.cls->desired_speed);
      c.length = std::clamp(cfg.car_length + cfg.car_length_std * rng.normal(),
                            cfg.car_length - 3.0 * cfg.car_length_std, cfg.car_length + 3.0 * cfg.car_length_std);
      c.width = std::clamp(cfg.car_width + cfg.car_width_std * rng.normal(),
                           cfg.car_width - 3.0 * cfg.car_width_std, cfg.car_width + 3.0 * cfg.car_width_std);
      c.lane = c.to_lane = l;
      c.wander_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
      c.wander_omega = rng.uniform(0.3, 0.8);
      c.v = c.desired;
      c.y = 0.0;
      const SimCar* lead = nearest(c, l, true);
      if (lead) {
        c.v = std::min(c.v, lead->v);
        if (gap(c, *lead) < c.cls->min_gap + c.v * c.cls->time_headway + 2.0) {
          next_spawn[static_cast<std::size_t>(l)] = time + 0.5;
          continue;
        }
      }
      c.first_frame = frame;
      ++spawned;
      next_spawn[static_cast<std::size_t>(l)] =
          time + std::max(1.0, -cfg.mean_spawn_headway * std::log(1.0 - rng.uniform()));
      cars.push_back(std::move(c));
    }

    // Accelerations and lane-change decisions from the current snapshot.
    std::vector<double> accel(cars.size(), 0.0);
    std::vector<int> start_change(cars.size(), -1);
    for (std::size_t i = 0; i < cars.size(); ++i) {
      SimCar& c = cars[i];
      if (!c.active || c.first_frame == frame) continue;
      const BehaviorClass& b = *c.cls;
      if (c.slow_until < time && rng.bernoulli(cfg.slowdown_rate * dt)) c.slow_until = time + cfg.slowdown_duration;
      const double v0 = c.desired * (c.slow_until >= time ? cfg.slowdown_factor : 1.0);
      double a = b.max_accel * (1.0 - std::pow(c.v / v0, 4.0));
      const SimCar* lead = nearest(c, c.lane, true);
      if (c.change_t >= 0.0) {
        const SimCar* other = nearest(c, c.to_lane, true);
        if (other && (!lead || other->y < lead->y)) lead = other;
      }
      if (lead) {
        const double s = gap(c, *lead);
        const double s_star = b.min_gap + std::max(0.0, c.v * b.time_headway +
                                                            c.v * (c.v - lead->v) /
                                                                (2.0 * std::sqrt(b.max_accel * b.comfort_decel)));
        a -= b.max_accel * (s_star / std::max(s, 0.1)) * (s_star / std::max(s, 0.1));
      }
      a += b.accel_noise * rng.normal();
      accel[i] = std::clamp(a, -kMaxDecel, b.max_accel + 2.0 * b.accel_noise);

      if (c.change_t < 0.0 && c.y > 20.0 && c.y < road.segment_length - 60.0 &&
          rng.bernoulli(b.lane_change_rate * dt)) {
        const int dir = rng.bernoulli(0.5) ? 1 : -1;
        const int target = (c.lane + dir >= 0 && c.lane + dir < road.lane_count) ? c.lane + dir : c.lane - dir;
        if (target < 0 || target >= road.lane_count) continue;
        const SimCar* front = nearest(c, target, true);
        const SimCar* back = nearest(c, target, false);
        const bool front_ok = !front || gap(c, *front) > std::max(10.0, 1.5 * c.v);
        const bool back_ok = !back || gap(*back, c) > std::max(10.0, 1.5 * back->v + 2.0 * (back->v - c.v));
        if (front_ok && back_ok) start_change[i] = target;
      }
    }

    // Integrate.
    for (std::size_t i = 0; i < cars.size(); ++i) {
      SimCar& c = cars[i];
      if (!c.active) continue;
      if (c.first_frame != frame) {
        c.v = std::max(kMinSpeed, c.v + accel[i] * dt);
        c.y += c.v * dt;
        if (c.change_t >= 0.0) {
          c.change_t += dt;
          if (c.change_t >= cfg.lane_change_duration) {
            c.lane = c.to_lane;
            c.change_t = -1.0;
          }
        } else if (start_change[i] >= 0) {
          c.to_lane = start_change[i];
          c.change_t = dt;
        }
      }
      c.path.push_back({lateral(c, road, cfg, time), c.y});
      if (c.y > road.segment_length + 10.0) c.active = false;
    }
  }
  if (spawned < cfg.n_cars || std::any_of(cars.begin(), cars.end(), [](const SimCar& c) { return c.active; })) {
    throw Error(ErrorCode::kConfig, "synthetic traffic: cars do not fit the segment within max_frames");
  }

  TrajectoryDataset d;
  d.road = road;
  for (const SimCar& c : cars) {
    Trajectory t;
    t.car_id = c.id;
    t.first_frame = c.first_frame;
    for (const Vec2& p : c.path) {
      VehicleState s;
      s.position = p;
      s.length = c.length;
      s.width = c.width;
      t.states.push_back(s);
    }
    derive_velocities(t);
    d.cars.push_back(std::move(t));
  }
  d.reindex();

  // Drop the later car of any overlapping pair until none remain.
  for (auto hits = find_collisions(d); !hits.empty(); hits = find_collisions(d)) {
    std::set<std::int64_t> drop;
    for (const auto& [a, b] : hits) drop.insert(b);
    std::erase_if(d.cars, [&](const Trajectory& t) { return drop.count(t.car_id) > 0; });
    d.reindex();
  }
  return d;
}

}  // namespace mpur
