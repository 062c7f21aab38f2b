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

#include <cmath>
#include <filesystem>
#include <set>

#include "doctest.h"
#include "mpur/container.hpp"
#include "mpur/data.hpp"
#include "mpur/error.hpp"

using namespace mpur;

namespace {

std::string ten_car_csv(std::size_t frames) {
  std::string s = "frame,car_id,x_m,y_m,length_m,width_m\n";
  for (std::size_t f = 0; f < frames; ++f)
    for (int c = 0; c < 10; ++c)
      s += std::to_string(f) + "," + std::to_string(100 + c) + "," + std::to_string(1.85 + 3.7 * (c % 4)) +
           "," + std::to_string(10.0 * (c / 4) * 3 + 1.1 * f) + ",4.5,1.8\n";
  return s;
}

SyntheticConfig small_traffic() {
  SyntheticConfig cfg;
  cfg.n_cars = 40;
  return cfg;
}

RoadGeometry short_road() {
  RoadGeometry r;
  r.segment_length = 150.0;
  return r;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("mpur_test_" + name);
}

}  // namespace

TEST_CASE("load: 10 cars split 8/1/1, deterministic") {
  const RoadGeometry road;
  const TrajectoryDataset a = parse_trajectories(ten_car_csv(30), road, 10, 5);
  CHECK(a.cars_in(Split::kTrain).size() == 8);
  CHECK(a.cars_in(Split::kVal).size() == 1);
  CHECK(a.cars_in(Split::kTest).size() == 1);
  const TrajectoryDataset b = parse_trajectories(ten_car_csv(30), road, 10, 5);
  for (std::size_t c = 0; c < a.cars.size(); ++c) CHECK(a.cars[c].split == b.cars[c].split);
  // Short cars are kept only as scenery.
  const TrajectoryDataset shortd = parse_trajectories(ten_car_csv(5), road, 10, 5);
  CHECK(shortd.cars_in(Split::kSceneOnly).size() == 10);
}

TEST_CASE("load: parse errors name the row") {
  const RoadGeometry road;
  std::string csv = ten_car_csv(3);
  csv += "3,100,1.0,2.0,4.5\n";
  try {
    parse_trajectories(csv, road, 1, 0);
    FAIL("expected parse error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kParse);
    CHECK(std::string(e.what()).find("row 32") != std::string::npos);
  }
  CHECK_THROWS_AS(parse_trajectories("", road, 1, 0), Error);
  CHECK_THROWS_AS(parse_trajectories("frame,car_id,x_m,y_m,length_m,width_m\n", road, 1, 0), Error);
  const std::string backwards =
      "frame,car_id,x_m,y_m,length_m,width_m\n1,1,0,0,4,2\n0,1,0,1,4,2\n";
  CHECK_THROWS_WITH_AS(parse_trajectories(backwards, road, 1, 0), doctest::Contains("non-monotone"), Error);
  CHECK_THROWS_AS(parse_trajectories("frame,car_id,x_m,y_m,length_m,width_m\n0,1,0,zz,4,2\n", road, 1, 0),
                  Error);
}

TEST_CASE("csv round trip and dataset cache round trip are exact") {
  const TrajectoryDataset d = generate_synthetic_traffic(small_traffic(), short_road(), 3);
  const std::string csv = trajectories_csv(d);
  TrajectoryDataset back = parse_trajectories(csv, d.road, 1, 0);
  REQUIRE(back.cars.size() == d.cars.size());
  for (std::size_t c = 0; c < d.cars.size(); ++c)
    for (std::size_t i = 0; i < d.cars[c].states.size(); ++i) {
      CHECK(back.cars[c].states[i].position.x == d.cars[c].states[i].position.x);
      CHECK(back.cars[c].states[i].velocity.y == d.cars[c].states[i].velocity.y);
    }
  const auto p1 = temp_path("ds1.bin"), p2 = temp_path("ds2.bin");
  save_dataset(p1, d);
  save_dataset(p2, load_dataset(p1));
  CHECK(read_file(p1) == read_file(p2));
  std::filesystem::remove(p1);
  std::filesystem::remove(p2);
}

TEST_CASE("synthetic traffic: deterministic, collision-free, feasible actions") {
  const RoadGeometry road = short_road();
  const TrajectoryDataset a = generate_synthetic_traffic(small_traffic(), road, 42);
  const TrajectoryDataset b = generate_synthetic_traffic(small_traffic(), road, 42);
  CHECK(trajectories_csv(a) == trajectories_csv(b));
  CHECK(a.cars.size() >= 30);

  // Exhaustive pairwise check over shared frames, independent of the frame index.
  std::size_t pairs = 0, hits = 0;
  for (std::size_t i = 0; i < a.cars.size(); ++i)
    for (std::size_t j = i + 1; j < a.cars.size(); ++j) {
      const Trajectory& p = a.cars[i];
      const Trajectory& q = a.cars[j];
      for (std::int64_t f = std::max(p.first_frame, q.first_frame);
           f <= std::min(p.last_frame(), q.last_frame()); ++f) {
        const VehicleState& s = p.states[static_cast<std::size_t>(f - p.first_frame)];
        const VehicleState& t = q.states[static_cast<std::size_t>(f - q.first_frame)];
        ++pairs;
        if (std::abs(s.position.x - t.position.x) < 0.5 * (s.width + t.width) &&
            std::abs(s.position.y - t.position.y) < 0.5 * (s.length + t.length))
          ++hits;
      }
    }
  CHECK(pairs > 0);
  CHECK(hits == 0);

  std::size_t checked = 0;
  for (const Trajectory& t : a.cars)
    for (std::size_t i = 0; i + 1 < t.states.size(); ++i) {
      const Vec2 v = t.states[i].velocity, w = t.states[i + 1].velocity;
      REQUIRE(v.norm() > 0.0);
      const Vec2 r = apply_action(v, extract_action(v, w));
      CHECK(std::abs(r.x - w.x) < 1e-12);
      CHECK(std::abs(r.y - w.y) < 1e-12);
      ++checked;
    }
  CHECK(checked > 1000);
}

TEST_CASE("synthetic traffic rejects infeasible configs") {
  SyntheticConfig cfg = small_traffic();
  cfg.car_width = 4.0;
  CHECK_THROWS_AS(generate_synthetic_traffic(cfg, short_road(), 1), Error);
  cfg = small_traffic();
  cfg.n_cars = 0;
  CHECK_THROWS_AS(generate_synthetic_traffic(cfg, short_road(), 1), Error);
  cfg = small_traffic();
  cfg.max_frames = 50;
  CHECK_THROWS_AS(generate_synthetic_traffic(cfg, short_road(), 1), Error);
  RoadGeometry tiny = short_road();
  tiny.segment_length = 10.0;
  CHECK_THROWS_AS(generate_synthetic_traffic(small_traffic(), tiny, 1), Error);
}

TEST_CASE("splits partition the eligible cars") {
  TrajectoryDataset d = generate_synthetic_traffic(small_traffic(), short_road(), 9);
  assign_splits(d, 20, 1);
  std::set<std::int64_t> seen;
  std::size_t eligible = 0;
  for (const Trajectory& t : d.cars) {
    CHECK(seen.insert(t.car_id).second);
    if (t.states.size() >= 20) {
      ++eligible;
      CHECK(t.split != Split::kSceneOnly);
    }
  }
  const std::size_t tr = d.cars_in(Split::kTrain).size(), va = d.cars_in(Split::kVal).size(),
                    te = d.cars_in(Split::kTest).size();
  CHECK(tr + va + te == eligible);
  CHECK(tr == static_cast<std::size_t>(std::llround(0.8 * eligible)));
}

TEST_CASE("transitions: counting, exact replay, empty-scene cost") {
  TrajectoryDataset d = generate_synthetic_traffic(small_traffic(), short_road(), 5);
  assign_splits(d, 1, 0);
  const std::size_t m = 3, horizon = 4;
  TransitionStats st;
  const auto refs = build_transitions(d, Split::kTrain, m, horizon, &st);
  std::size_t expected = 0;
  for (const Trajectory& t : d.cars)
    if (t.split == Split::kTrain && t.states.size() > m + horizon) expected += t.states.size() - m - horizon;
  CHECK(st.stationary_dropped == 0);
  CHECK(refs.size() == expected);
  CHECK(st.kept == expected);

  // Replay recorded actions through the kinematics from each start state.
  double worst = 0.0;
  for (const TransitionRef& r : refs) {
    const Trajectory& t = d.cars[r.car];
    Vec2 p = t.states[r.index].position, v = t.states[r.index].velocity;
    for (std::size_t k = 0; k < horizon; ++k) {
      v = apply_action(v, extract_action(t.states[r.index + k].velocity, t.states[r.index + k + 1].velocity));
      p = p + v;
      worst = std::max(worst, (p - t.states[r.index + k + 1].position).norm());
    }
  }
  CHECK(worst < 1e-9);

  GridConfig g;
  CostConfig cc;
  const Transition tr = materialize(d, refs.front(), m, horizon, g, cc);
  CHECK(tr.window.size() == m);
  CHECK(tr.actions.size() == horizon);
  CHECK(tr.future.size() == horizon);
  const Transition again = materialize(d, refs.front(), m, horizon, g, cc);
  CHECK(tr.future.back().image == again.future.back().image);

  // A lone car has zero proximity cost.
  TrajectoryDataset lone;
  lone.road = d.road;
  lone.cars.push_back(d.cars[refs.front().car]);
  lone.cars.back().split = Split::kTrain;
  lone.reindex();
  const Transition solo = materialize(lone, {0, refs.front().index}, m, horizon, g, cc);
  for (const CostVector& c : solo.costs) CHECK(c.proximity == 0.0);
}

TEST_CASE("stationary frames are dropped and counted") {
  TrajectoryDataset d;
  Trajectory t;
  t.car_id = 1;
  for (int i = 0; i < 20; ++i) {
    VehicleState s;
    s.position = {5.0, i < 10 ? 1.0 * i : 9.0 + 0.5 * (i - 10 > 2 ? i - 12 : 0)};
    t.states.push_back(s);
  }
  derive_velocities(t);
  t.split = Split::kTrain;
  d.cars.push_back(t);
  d.reindex();
  TransitionStats st;
  const auto refs = build_transitions(d, Split::kTrain, 2, 1, &st);
  CHECK(st.stationary_dropped > 0);
  CHECK(st.kept + st.stationary_dropped == 20 - 2 - 1);
  for (const TransitionRef& r : refs) CHECK(d.cars[0].states[r.index].velocity.norm() > 0.0);
}
