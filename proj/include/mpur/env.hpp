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
#include <deque>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "mpur/costs.hpp"
#include "mpur/data.hpp"

namespace mpur {

enum class Termination { kNone, kCollision, kOffRoad, kEndOfSegment, kMaxSteps };

const char* termination_name(Termination t);

struct EpisodeResult {
  std::int64_t car_id = 0;
  double distance = 0.0;
  bool success = false;
  Termination termination = Termination::kNone;
  int steps = 0;
};

struct EnvConfig {
  GridConfig grid;
  CostConfig cost;
  ActionBounds bounds;
  std::size_t window = 2;
  int max_steps = 1000;
};

struct EpisodeLogRow {
  int step = 0;
  double x = 0.0, y = 0.0;
  double dspeed = 0.0, dangle = 0.0;
  double proximity = 0.0, lane = 0.0;
  std::string event;
};

// One policy-controlled car; every other car replays its recording.
class ReplayEpisode {
 public:
  // Starts from the recorded state of `car` at index `start` (>= window).
  ReplayEpisode(const TrajectoryDataset& data, std::size_t car, const EnvConfig& cfg,
                std::size_t start);
  ReplayEpisode(const TrajectoryDataset& data, std::size_t car, const EnvConfig& cfg)
      : ReplayEpisode(data, car, cfg, cfg.window) {}

  // Replaces the ego state, e.g. to place it somewhere specific.
  void set_ego(const VehicleState& ego);

  struct StepOutput {
    State state;
    CostVector cost;
    std::optional<EpisodeResult> done;
  };

  // Clamps `a` to the bounds, advances one frame and checks termination in the
  // order collision, off-road, end-of-segment, max-steps.
  StepOutput step(Action a);

  bool done() const { return result_.has_value(); }
  const std::optional<EpisodeResult>& result() const { return result_; }
  const std::deque<State>& window() const { return window_; }
  const VehicleState& ego() const { return ego_; }
  std::int64_t frame() const { return frame_; }
  CostVector current_cost() const;
  std::vector<VehicleState> neighbors() const;
  const std::vector<EpisodeLogRow>& log() const { return log_; }
  const EnvConfig& config() const { return cfg_; }
  const TrajectoryDataset& data() const { return *data_; }

 private:
  std::optional<Termination> check(bool infeasible) const;
  void finish(Termination t);

  const TrajectoryDataset* data_;
  EnvConfig cfg_;
  std::int64_t car_id_;
  VehicleState ego_;
  std::int64_t frame_;
  std::deque<State> window_;
  double distance_ = 0.0;
  int steps_ = 0;
  std::optional<EpisodeResult> result_;
  std::vector<EpisodeLogRow> log_;
};

using Controller = std::function<Action(const ReplayEpisode&)>;

struct EvaluationReport {
  std::vector<EpisodeResult> episodes;
  double mean_distance = 0.0;
  double success_rate = 0.0;
  std::vector<std::vector<EpisodeLogRow>> logs;  // filled when requested
};

// Runs one episode per listed car. `make_controller` is called once per
// episode with the episode index.
EvaluationReport evaluate(const std::function<Controller(std::size_t)>& make_controller,
                          const TrajectoryDataset& data, const std::vector<std::size_t>& cars,
                          const EnvConfig& cfg, bool keep_logs = false);

std::string episode_csv(const std::vector<EpisodeLogRow>& rows);

}  // namespace mpur
