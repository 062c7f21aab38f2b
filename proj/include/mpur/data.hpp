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

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "mpur/costs.hpp"
#include "mpur/kinematics.hpp"
#include "mpur/render.hpp"

namespace mpur {

enum class Split : int { kTrain = 0, kVal = 1, kTest = 2, kSceneOnly = 3 };

const char* split_name(Split s);

struct Trajectory {
  std::int64_t car_id = 0;
  std::int64_t first_frame = 0;
  std::vector<VehicleState> states;  // one per consecutive frame
  Split split = Split::kSceneOnly;

  std::int64_t last_frame() const {
    return first_frame + static_cast<std::int64_t>(states.size()) - 1;
  }
};

class TrajectoryDataset {
 public:
  RoadGeometry road;
  std::vector<Trajectory> cars;  // sorted by car id

  // Rebuilds the frame lookup; call after editing `cars`.
  void reindex();

  // Every car present at `frame` other than `exclude_id`.
  std::vector<VehicleState> vehicles_at(std::int64_t frame, std::int64_t exclude_id) const;
  std::vector<std::size_t> cars_in(Split s) const;
  std::size_t state_count() const;

  State render(std::size_t car, std::size_t index, const GridConfig& grid) const;

 private:
  std::int64_t frame0_ = 0;
  std::vector<std::vector<std::pair<std::uint32_t, std::uint32_t>>> by_frame_;
};

// Velocities from positions: v_i = p_i - p_{i-1}, the first copied from the second.
void derive_velocities(Trajectory& t);

// Assigns 80/10/10 train/val/test by count over cars with at least
// `min_length` frames, in the order of a seeded hash of car id. Shorter cars
// stay in the scene as SceneOnly.
void assign_splits(TrajectoryDataset& d, std::size_t min_length, std::uint64_t seed);

// CSV header: frame,car_id,x_m,y_m,length_m,width_m
TrajectoryDataset load_trajectories(const std::filesystem::path& path, const RoadGeometry& road,
                                    std::size_t min_length, std::uint64_t split_seed);
TrajectoryDataset parse_trajectories(const std::string& text, const RoadGeometry& road,
                                     std::size_t min_length, std::uint64_t split_seed);
std::string trajectories_csv(const TrajectoryDataset& d);

// Cache in the checkpoint container format.
void save_dataset(const std::filesystem::path& path, const TrajectoryDataset& d);
TrajectoryDataset load_dataset(const std::filesystem::path& path);

struct BehaviorClass {
  double weight = 1.0;
  double desired_speed = 13.0;      // m/s
  double desired_speed_std = 1.5;
  double time_headway = 1.2;        // s
  double min_gap = 2.0;             // m
  double max_accel = 1.5;           // m/s^2
  double comfort_decel = 2.0;       // m/s^2
  double accel_noise = 0.2;         // m/s^2, per-step std
  double lane_change_rate = 0.02;   // attempts per second
};

struct SyntheticConfig {
  int n_cars = 200;
  double mean_spawn_headway = 1.8;  // s, per lane
  double slowdown_rate = 0.01;      // events per car per second
  double slowdown_factor = 0.4;
  double slowdown_duration = 4.0;   // s
  double lane_change_duration = 3.0;  // s
  double lateral_wander = 0.1;      // m amplitude around the lane centre
  double car_length = 4.5;
  double car_length_std = 0.4;
  double car_width = 1.8;
  double car_width_std = 0.1;
  int max_frames = 20000;
  std::vector<BehaviorClass> classes = default_classes();

  static std::vector<BehaviorClass> default_classes();
};

// IDM car following with gap-checked lane changes. The result is
// collision-free; cars that would overlap are removed whole.
TrajectoryDataset generate_synthetic_traffic(const SyntheticConfig& cfg, const RoadGeometry& road,
                                             std::uint64_t seed);

// Any pair of cars whose footprints intersect at a shared frame.
std::vector<std::pair<std::int64_t, std::int64_t>> find_collisions(const TrajectoryDataset& d);

// ---- transitions ----

struct TransitionRef {
  std::uint32_t car = 0;
  std::uint32_t index = 0;  // current frame within the car
};

struct TransitionStats {
  std::size_t kept = 0;
  std::size_t stationary_dropped = 0;
};

// One reference per (car, t) with t in [m, L-1-horizon] whose velocities over
// t..t+horizon-1 are nonzero.
std::vector<TransitionRef> build_transitions(const TrajectoryDataset& d, Split split,
                                             std::size_t window, std::size_t horizon,
                                             TransitionStats* stats = nullptr);

struct Transition {
  std::vector<State> window;      // s_{t-m+1..t}
  std::vector<Action> actions;    // a_t..a_{t+T-1}
  std::vector<State> future;      // s_{t+1..t+T}
  std::vector<CostVector> costs;  // costs of the future states
  double ego_length = 0.0;
  double ego_width = 0.0;
};

Transition materialize(const TrajectoryDataset& d, TransitionRef ref, std::size_t window,
                       std::size_t horizon, const GridConfig& grid, const CostConfig& costs);

// Per-channel mean/std of images, u vectors and actions over training transitions.
struct NormStats {
  std::array<double, 3> image_mean{};
  std::array<double, 3> image_std{1.0, 1.0, 1.0};
  std::array<double, 4> u_mean{};
  std::array<double, 4> u_std{1.0, 1.0, 1.0, 1.0};
  std::array<double, 2> action_mean{};
  std::array<double, 2> action_std{1.0, 1.0};
};

NormStats compute_norm_stats(const TrajectoryDataset& d, const std::vector<TransitionRef>& refs,
                             const GridConfig& grid, std::size_t max_samples, std::uint64_t seed);

}  // namespace mpur
