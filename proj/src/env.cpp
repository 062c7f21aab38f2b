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

#include "mpur/env.hpp"

#include <cstdio>

#include "mpur/error.hpp"

namespace mpur {

const char* termination_name(Termination t) {
  switch (t) {
    case Termination::kNone: return "none";
    case Termination::kCollision: return "collision";
    case Termination::kOffRoad: return "off-road";
    case Termination::kEndOfSegment: return "end-of-segment";
    case Termination::kMaxSteps: return "max-steps";
  }
  return "?";
}

ReplayEpisode::ReplayEpisode(const TrajectoryDataset& data, std::size_t car, const EnvConfig& cfg,
                             std::size_t start)
    : data_(&data), cfg_(cfg) {
  const Trajectory& t = data.cars.at(car);
  if (cfg.window == 0 || start + 1 < cfg.window || start >= t.states.size()) {
    throw Error(ErrorCode::kInvalidArgument, "ReplayEpisode: start index outside trajectory");
  }
  car_id_ = t.car_id;
  ego_ = t.states[start];
  frame_ = t.first_frame + static_cast<std::int64_t>(start);
  for (std::size_t j = start + 1 - cfg.window; j <= start; ++j)
    window_.push_back(data.render(car, j, cfg.grid));
  if (auto term = check(false)) finish(*term);
}

std::vector<VehicleState> ReplayEpisode::neighbors() const {
  return data_->vehicles_at(frame_, car_id_);
}

void ReplayEpisode::set_ego(const VehicleState& ego) {
  if (done()) throw Error(ErrorCode::kState, "set_ego: episode finished");
  ego_ = ego;
  ego_.car_id = car_id_;
  window_.back() = render_state(ego_, neighbors(), data_->road, cfg_.grid);
  if (auto term = check(false)) finish(*term);
}

CostVector ReplayEpisode::current_cost() const {
  return state_costs(window_.back(), ego_.length, ego_.width, data_->road, cfg_.grid, cfg_.cost);
}

std::optional<Termination> ReplayEpisode::check(bool infeasible) const {
  for (const VehicleState& n : neighbors())
    if (rectangles_intersect(ego_, n)) return Termination::kCollision;
  if (infeasible || ego_.position.x < 0.0 || ego_.position.x > data_->road.road_width())
    return Termination::kOffRoad;
  if (ego_.position.y >= data_->road.segment_length) return Termination::kEndOfSegment;
  if (steps_ >= cfg_.max_steps) return Termination::kMaxSteps;
  return std::nullopt;
}

void ReplayEpisode::finish(Termination t) {
  EpisodeResult r;
  r.car_id = car_id_;
  r.distance = distance_;
  r.termination = t;
  r.success = t == Termination::kEndOfSegment;
  r.steps = steps_;
  result_ = r;
}

ReplayEpisode::StepOutput ReplayEpisode::step(Action a) {
  if (done()) throw Error(ErrorCode::kState, "step: episode already terminated");
  const Action act = clamp_action(ego_.velocity, a, cfg_.bounds);
  bool infeasible = false;
  try {
    const Vec2 v = apply_action(ego_.velocity, act);
    ego_.velocity = v;
    ego_.position = ego_.position + v;
    distance_ += v.norm();
  } catch (const Error&) {
    infeasible = true;
  }
  ++frame_;
  ++steps_;
  State s = render_state(ego_, neighbors(), data_->road, cfg_.grid);
  window_.pop_front();
  window_.push_back(s);
  StepOutput out;
  out.state = std::move(s);
  out.cost = current_cost();
  if (auto term = check(infeasible)) finish(*term);
  out.done = result_;
  log_.push_back({steps_, ego_.position.x, ego_.position.y, act.dspeed, act.dangle,
                  out.cost.proximity, out.cost.lane,
                  result_ ? termination_name(result_->termination) : ""});
  return out;
}

EvaluationReport evaluate(const std::function<Controller(std::size_t)>& make_controller,
                          const TrajectoryDataset& data, const std::vector<std::size_t>& cars,
                          const EnvConfig& cfg, bool keep_logs) {
  if (cars.empty()) throw Error(ErrorCode::kInvalidArgument, "evaluate: empty test set");
  EvaluationReport rep;
  for (std::size_t k = 0; k < cars.size(); ++k) {
    ReplayEpisode ep(data, cars[k], cfg);
    const Controller ctl = make_controller(k);
    while (!ep.done()) ep.step(ctl(ep));
    rep.episodes.push_back(*ep.result());
    if (keep_logs) rep.logs.push_back(ep.log());
  }
  for (const EpisodeResult& r : rep.episodes) {
    rep.mean_distance += r.distance;
    rep.success_rate += r.success ? 1.0 : 0.0;
  }
  rep.mean_distance /= static_cast<double>(rep.episodes.size());
  rep.success_rate /= static_cast<double>(rep.episodes.size());
  return rep;
}

std::string episode_csv(const std::vector<EpisodeLogRow>& rows) {
  std::string out = "step,x,y,dspeed,dangle,proximity,lane,event\n";
  char buf[256];
  for (const EpisodeLogRow& r : rows) {
    std::snprintf(buf, sizeof buf, "%d,%.6f,%.6f,%.6g,%.6g,%.6f,%.6f,%s\n", r.step, r.x, r.y,
                  r.dspeed, r.dangle, r.proximity, r.lane, r.event.c_str());
    out += buf;
  }
  return out;
}

}  // namespace mpur
