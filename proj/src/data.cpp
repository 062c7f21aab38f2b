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

#include "mpur/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <tuple>

#include "mpur/container.hpp"
#include "mpur/error.hpp"
#include "mpur/rng.hpp"

namespace mpur {

const char* split_name(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
    case Split::kSceneOnly: return "scene";
  }
  return "?";
}

void TrajectoryDataset::reindex() {
  std::sort(cars.begin(), cars.end(),
            [](const Trajectory& a, const Trajectory& b) { return a.car_id < b.car_id; });
  by_frame_.clear();
  if (cars.empty()) return;
  std::int64_t lo = cars.front().first_frame;
  std::int64_t hi = cars.front().last_frame();
  for (const Trajectory& t : cars) {
    lo = std::min(lo, t.first_frame);
    hi = std::max(hi, t.last_frame());
  }
  frame0_ = lo;
  by_frame_.resize(static_cast<std::size_t>(hi - lo + 1));
  for (std::size_t c = 0; c < cars.size(); ++c) {
    for (std::size_t i = 0; i < cars[c].states.size(); ++i) {
      by_frame_[static_cast<std::size_t>(cars[c].first_frame - lo) + i].emplace_back(
          static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(i));
    }
  }
}

std::vector<VehicleState> TrajectoryDataset::vehicles_at(std::int64_t frame,
                                                         std::int64_t exclude_id) const {
  std::vector<VehicleState> out;
  const std::int64_t k = frame - frame0_;
  if (k < 0 || k >= static_cast<std::int64_t>(by_frame_.size())) return out;
  for (const auto& [c, i] : by_frame_[static_cast<std::size_t>(k)]) {
    if (cars[c].car_id != exclude_id) out.push_back(cars[c].states[i]);
  }
  return out;
}

std::vector<std::size_t> TrajectoryDataset::cars_in(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t c = 0; c < cars.size(); ++c)
    if (cars[c].split == s) out.push_back(c);
  return out;
}

std::size_t TrajectoryDataset::state_count() const {
  std::size_t n = 0;
  for (const Trajectory& t : cars) n += t.states.size();
  return n;
}

State TrajectoryDataset::render(std::size_t car, std::size_t index,
                                const GridConfig& grid) const {
  const Trajectory& t = cars.at(car);
  const VehicleState& ego = t.states.at(index);
  const std::vector<VehicleState> others =
      vehicles_at(t.first_frame + static_cast<std::int64_t>(index), t.car_id);
  return render_state(ego, others, road, grid);
}

void derive_velocities(Trajectory& t) {
  auto& s = t.states;
  for (std::size_t i = 1; i < s.size(); ++i) s[i].velocity = s[i].position - s[i - 1].position;
  if (s.size() >= 2) s[0].velocity = s[1].velocity;
  else if (!s.empty()) s[0].velocity = {};
  for (VehicleState& v : s) v.car_id = t.car_id;
}

void assign_splits(TrajectoryDataset& d, std::size_t min_length, std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, std::size_t>> order;
  for (std::size_t c = 0; c < d.cars.size(); ++c) {
    d.cars[c].split = Split::kSceneOnly;
    if (d.cars[c].states.size() >= min_length) {
      order.emplace_back(hash_combine(seed, static_cast<std::uint64_t>(d.cars[c].car_id)), c);
    }
  }
  std::sort(order.begin(), order.end());
  const std::size_t n = order.size();
  const auto n_train = static_cast<std::size_t>(std::llround(0.8 * static_cast<double>(n)));
  const auto n_val = std::min(n - n_train,
                              static_cast<std::size_t>(std::llround(0.1 * static_cast<double>(n))));
  for (std::size_t k = 0; k < n; ++k) {
    d.cars[order[k].second].split =
        k < n_train ? Split::kTrain : (k < n_train + n_val ? Split::kVal : Split::kTest);
  }
}

namespace {

constexpr const char* kHeader = "frame,car_id,x_m,y_m,length_m,width_m";

template <typename T>
T parse_field(std::string_view field, std::size_t line, const char* name) {
  T value{};
  const char* end = field.data() + field.size();
  auto [ptr, ec] = std::from_chars(field.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw Error(ErrorCode::kParse, "row " + std::to_string(line) + ": bad " + name + " '" +
                                       std::string(field) + "'");
  }
  return value;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

TrajectoryDataset parse_trajectories(const std::string& text, const RoadGeometry& road,
                                     std::size_t min_length, std::uint64_t split_seed) {
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  std::map<std::int64_t, Trajectory> by_car;
  std::map<std::int64_t, std::int64_t> last_frame;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    if (!have_header) {
      if (line != kHeader) {
        throw Error(ErrorCode::kParse, "row 1: expected header '" + std::string(kHeader) + "'");
      }
      have_header = true;
      continue;
    }
    std::vector<std::string_view> f;
    std::string_view rest(line);
    while (true) {
      const std::size_t comma = rest.find(',');
      f.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    if (f.size() != 6) {
      throw Error(ErrorCode::kParse, "row " + std::to_string(line_no) + ": expected 6 columns, got " +
                                         std::to_string(f.size()));
    }
    const auto frame = parse_field<std::int64_t>(f[0], line_no, "frame");
    const auto id = parse_field<std::int64_t>(f[1], line_no, "car_id");
    VehicleState s;
    s.position = {parse_field<double>(f[2], line_no, "x_m"), parse_field<double>(f[3], line_no, "y_m")};
    s.length = parse_field<double>(f[4], line_no, "length_m");
    s.width = parse_field<double>(f[5], line_no, "width_m");
    if (!std::isfinite(s.position.x) || !std::isfinite(s.position.y) || !(s.length > 0.0) ||
        !(s.width > 0.0) || !std::isfinite(s.length) || !std::isfinite(s.width)) {
      throw Error(ErrorCode::kParse, "row " + std::to_string(line_no) + ": invalid vehicle values");
    }
    auto it = last_frame.find(id);
    Trajectory& t = by_car[id];
    if (it == last_frame.end()) {
      t.car_id = id;
      t.first_frame = frame;
    } else if (frame != it->second + 1) {
      throw Error(ErrorCode::kParse, "row " + std::to_string(line_no) + ": car " + std::to_string(id) +
                                         (frame <= it->second ? " has non-monotone frames"
                                                              : " has a frame gap"));
    }
    last_frame[id] = frame;
    t.states.push_back(s);
  }
  if (by_car.empty()) throw Error(ErrorCode::kParse, "trajectory file has no rows");
  TrajectoryDataset d;
  d.road = road;
  for (auto& [id, t] : by_car) {
    derive_velocities(t);
    d.cars.push_back(std::move(t));
  }
  d.reindex();
  assign_splits(d, min_length, split_seed);
  return d;
}

TrajectoryDataset load_trajectories(const std::filesystem::path& path, const RoadGeometry& road,
                                    std::size_t min_length, std::uint64_t split_seed) {
  return parse_trajectories(read_file(path), road, min_length, split_seed);
}

std::string trajectories_csv(const TrajectoryDataset& d) {
  std::vector<std::tuple<std::int64_t, std::int64_t, const VehicleState*>> rows;
  for (const Trajectory& t : d.cars)
    for (std::size_t i = 0; i < t.states.size(); ++i)
      rows.emplace_back(t.first_frame + static_cast<std::int64_t>(i), t.car_id, &t.states[i]);
  std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
    return std::tie(std::get<0>(a), std::get<1>(a)) < std::tie(std::get<0>(b), std::get<1>(b));
  });
  std::string out = std::string(kHeader) + "\n";
  for (const auto& [frame, id, s] : rows) {
    out += std::to_string(frame) + "," + std::to_string(id) + "," + fmt(s->position.x) + "," +
           fmt(s->position.y) + "," + fmt(s->length) + "," + fmt(s->width) + "\n";
  }
  return out;
}

void save_dataset(const std::filesystem::path& path, const TrajectoryDataset& d) {
  const std::size_t n = d.cars.size();
  if (n == 0) throw Error(ErrorCode::kInvalidArgument, "save_dataset: empty dataset");
  Tensor ids({n}), first({n}), count({n}), split({n});
  Tensor states({d.state_count(), 4});
  std::size_t k = 0;
  for (std::size_t c = 0; c < n; ++c) {
    const Trajectory& t = d.cars[c];
    ids[c] = static_cast<double>(t.car_id);
    first[c] = static_cast<double>(t.first_frame);
    count[c] = static_cast<double>(t.states.size());
    split[c] = static_cast<double>(static_cast<int>(t.split));
    for (const VehicleState& s : t.states) {
      states[4 * k + 0] = s.position.x;
      states[4 * k + 1] = s.position.y;
      states[4 * k + 2] = s.length;
      states[4 * k + 3] = s.width;
      ++k;
    }
  }
  Container c;
  c.tensors = {{"car_id", ids}, {"first_frame", first}, {"n_states", count}, {"split", split},
               {"states", states}};
  c.meta = {{"kind", "dataset"},
            {"lane_count", d.road.lane_count},
            {"lane_width", d.road.lane_width},
            {"segment_length", d.road.segment_length},
            {"dt", d.road.dt}};
  write_container(path, c);
}

TrajectoryDataset load_dataset(const std::filesystem::path& path) {
  const Container c = read_container(path);
  if (c.meta.value("kind", "") != "dataset") {
    throw Error(ErrorCode::kParse, path.string() + " is not a dataset cache");
  }
  TrajectoryDataset d;
  d.road.lane_count = c.meta.at("lane_count").get<int>();
  d.road.lane_width = c.meta.at("lane_width").get<double>();
  d.road.segment_length = c.meta.at("segment_length").get<double>();
  d.road.dt = c.meta.at("dt").get<double>();
  const Tensor& ids = c.at("car_id");
  const Tensor& first = c.at("first_frame");
  const Tensor& count = c.at("n_states");
  const Tensor& split = c.at("split");
  const Tensor& states = c.at("states");
  std::size_t k = 0;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    Trajectory t;
    t.car_id = static_cast<std::int64_t>(ids[i]);
    t.first_frame = static_cast<std::int64_t>(first[i]);
    t.split = static_cast<Split>(static_cast<int>(split[i]));
    const auto n = static_cast<std::size_t>(count[i]);
    if (k + n > states.dim(0)) throw Error(ErrorCode::kParse, "dataset cache: truncated states");
    for (std::size_t j = 0; j < n; ++j, ++k) {
      VehicleState s;
      s.position = {states[4 * k], states[4 * k + 1]};
      s.length = states[4 * k + 2];
      s.width = states[4 * k + 3];
      t.states.push_back(s);
    }
    derive_velocities(t);
    d.cars.push_back(std::move(t));
  }
  d.reindex();
  return d;
}

std::vector<std::pair<std::int64_t, std::int64_t>> find_collisions(const TrajectoryDataset& d) {
  std::int64_t lo = 0, hi = -1;
  for (const Trajectory& t : d.cars) {
    if (hi < lo) { lo = t.first_frame; hi = t.last_frame(); }
    lo = std::min(lo, t.first_frame);
    hi = std::max(hi, t.last_frame());
  }
  std::vector<std::pair<std::int64_t, std::int64_t>> out;
  for (std::int64_t f = lo; f <= hi; ++f) {
    const std::vector<VehicleState> v = d.vehicles_at(f, std::numeric_limits<std::int64_t>::min());
    for (std::size_t i = 0; i < v.size(); ++i)
      for (std::size_t j = i + 1; j < v.size(); ++j)
        if (rectangles_intersect(v[i], v[j]))
          out.emplace_back(std::min(v[i].car_id, v[j].car_id), std::max(v[i].car_id, v[j].car_id));
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<TransitionRef> build_transitions(const TrajectoryDataset& d, Split split,
                                             std::size_t window, std::size_t horizon,
                                             TransitionStats* stats) {
  if (window == 0) throw Error(ErrorCode::kInvalidArgument, "build_transitions: window must be >= 1");
  std::vector<TransitionRef> out;
  TransitionStats st;
  for (std::size_t c = 0; c < d.cars.size(); ++c) {
    const Trajectory& t = d.cars[c];
    if (t.split != split) continue;
    const std::size_t len = t.states.size();
    if (len < window + horizon + 1) continue;
    for (std::size_t i = window; i + horizon <= len - 1; ++i) {
      bool moving = true;
      for (std::size_t j = i; j < i + horizon && moving; ++j)
        moving = t.states[j].velocity.norm() > 0.0;
      if (!moving) {
        ++st.stationary_dropped;
        continue;
      }
      out.push_back({static_cast<std::uint32_t>(c), static_cast<std::uint32_t>(i)});
    }
  }
  st.kept = out.size();
  if (stats) *stats = st;
  return out;
}

Transition materialize(const TrajectoryDataset& d, TransitionRef ref, std::size_t window,
                       std::size_t horizon, const GridConfig& grid, const CostConfig& costs) {
  const Trajectory& t = d.cars.at(ref.car);
  const std::size_t i = ref.index;
  if (i + 1 < window || i + horizon >= t.states.size()) {
    throw Error(ErrorCode::kInvalidArgument, "materialize: transition outside trajectory");
  }
  Transition tr;
  tr.ego_length = t.states[i].length;
  tr.ego_width = t.states[i].width;
  for (std::size_t j = i + 1 - window; j <= i; ++j) tr.window.push_back(d.render(ref.car, j, grid));
  for (std::size_t k = 0; k < horizon; ++k) {
    tr.actions.push_back(extract_action(t.states[i + k].velocity, t.states[i + k + 1].velocity));
    tr.future.push_back(d.render(ref.car, i + k + 1, grid));
    tr.costs.push_back(state_costs(tr.future.back(), tr.ego_length, tr.ego_width, d.road, grid, costs));
  }
  return tr;
}

NormStats compute_norm_stats(const TrajectoryDataset& d, const std::vector<TransitionRef>& refs,
                             const GridConfig& grid, std::size_t max_samples, std::uint64_t seed) {
  if (refs.empty()) throw Error(ErrorCode::kInvalidArgument, "compute_norm_stats: no transitions");
  std::vector<std::size_t> pick(refs.size());
  std::iota(pick.begin(), pick.end(), 0);
  if (max_samples > 0 && refs.size() > max_samples) {
    Rng rng(seed);
    std::shuffle(pick.begin(), pick.end(), rng.engine());
    pick.resize(max_samples);
    std::sort(pick.begin(), pick.end());
  }
  std::array<double, 3> s1{}, s2{};
  std::array<double, 4> u1{}, u2{};
  std::array<double, 2> a1{}, a2{};
  const std::size_t plane = grid.height * grid.width;
  for (std::size_t k : pick) {
    const State s = d.render(refs[k].car, refs[k].index, grid);
    for (std::size_t ch = 0; ch < 3; ++ch)
      for (std::size_t p = 0; p < plane; ++p) {
        const double v = s.image[ch * plane + p];
        s1[ch] += v;
        s2[ch] += v * v;
      }
    for (std::size_t j = 0; j < 4; ++j) {
      u1[j] += s.u[j];
      u2[j] += s.u[j] * s.u[j];
    }
    const Trajectory& t = d.cars[refs[k].car];
    const Action a = extract_action(t.states[refs[k].index].velocity, t.states[refs[k].index + 1].velocity);
    a1[0] += a.dspeed;
    a2[0] += a.dspeed * a.dspeed;
    a1[1] += a.dangle;
    a2[1] += a.dangle * a.dangle;
  }
  NormStats ns;
  const double n = static_cast<double>(pick.size());
  auto finish = [](double a, double b, double count, double& mean, double& sd) {
    mean = a / count;
    sd = std::sqrt(std::max(0.0, b / count - mean * mean));
    if (sd < 1e-6) sd = 1.0;
  };
  for (std::size_t ch = 0; ch < 3; ++ch)
    finish(s1[ch], s2[ch], n * static_cast<double>(plane), ns.image_mean[ch], ns.image_std[ch]);
  for (std::size_t j = 0; j < 4; ++j) finish(u1[j], u2[j], n, ns.u_mean[j], ns.u_std[j]);
  for (std::size_t j = 0; j < 2; ++j) finish(a1[j], a2[j], n, ns.action_mean[j], ns.action_std[j]);
  return ns;
}

}  // namespace mpur
