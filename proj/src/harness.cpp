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

#include "mpur/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <map>
#include <set>
#include <type_traits>

#include "checkpoint_util.hpp"
#include "mpur/error.hpp"
#include "mpur/rng.hpp"

namespace mpur {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- strict config reading ----

namespace {

class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw Error(ErrorCode::kConfig, "config: '" + path_ + "' must be an object");
  }

  template <class T>
  void get(const char* key, T& dst) {
    if (!j_.contains(key)) return;
    used_.insert(key);
    const json& v = j_.at(key);
    const std::string where = path_.empty() ? key : path_ + "." + key;
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) throw Error(ErrorCode::kConfig, "config: '" + where + "' must be a boolean");
    } else if constexpr (std::is_integral_v<T> && std::is_unsigned_v<T>) {
      if (!v.is_number_integer() || v.get<long long>() < 0) throw Error(ErrorCode::kConfig, "config: '" + where + "' must be a non-negative integer");
    } else if constexpr (std::is_integral_v<T>) {
      if (!v.is_number_integer()) throw Error(ErrorCode::kConfig, "config: '" + where + "' must be an integer");
    } else if constexpr (std::is_floating_point_v<T>) {
      if (!v.is_number()) throw Error(ErrorCode::kConfig, "config: '" + where + "' must be a number");
    } else if constexpr (std::is_same_v<T, std::string>) {
      if (!v.is_string()) throw Error(ErrorCode::kConfig, "config: '" + where + "' must be a string");
    }
    try {
      dst = v.get<T>();
    } catch (const json::exception& e) {
      throw Error(ErrorCode::kConfig, "config: '" + where + "': " + e.what());
    }
  }

  bool has(const char* key) const { return j_.contains(key); }

  Section sub(const char* key) {
    used_.insert(key);
    return Section(j_.at(key), path_.empty() ? key : path_ + "." + key);
  }

  const json& raw(const char* key) {
    used_.insert(key);
    return j_.at(key);
  }

  std::string path(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (const auto& [k, v] : j_.items())
      if (!used_.count(k))
        throw Error(ErrorCode::kConfig, "config: unknown key '" + (path_.empty() ? k : path_ + "." + k) + "'");
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> used_;
};

void read_behavior(Section s, BehaviorClass& b) {
  s.get("weight", b.weight);
  s.get("desired_speed", b.desired_speed);
  s.get("desired_speed_std", b.desired_speed_std);
  s.get("time_headway", b.time_headway);
  s.get("min_gap", b.min_gap);
  s.get("max_accel", b.max_accel);
  s.get("comfort_decel", b.comfort_decel);
  s.get("accel_noise", b.accel_noise);
  s.get("lane_change_rate", b.lane_change_rate);
  s.finish();
}

json behavior_json(const BehaviorClass& b) {
  return {{"weight", b.weight},           {"desired_speed", b.desired_speed}, {"desired_speed_std", b.desired_speed_std},
          {"time_headway", b.time_headway}, {"min_gap", b.min_gap},          {"max_accel", b.max_accel},
          {"comfort_decel", b.comfort_decel}, {"accel_noise", b.accel_noise}, {"lane_change_rate", b.lane_change_rate}};
}

void read_data(Section s, DataSection& d) {
  s.get("source", d.source);
  s.get("csv_path", d.csv_path);
  if (s.has("synthetic")) {
    Section y = s.sub("synthetic");
    SyntheticConfig& c = d.synthetic;
    y.get("n_cars", c.n_cars);
    y.get("mean_spawn_headway", c.mean_spawn_headway);
    y.get("slowdown_rate", c.slowdown_rate);
    y.get("slowdown_factor", c.slowdown_factor);
    y.get("slowdown_duration", c.slowdown_duration);
    y.get("lane_change_duration", c.lane_change_duration);
    y.get("lateral_wander", c.lateral_wander);
    y.get("car_length", c.car_length);
    y.get("car_length_std", c.car_length_std);
    y.get("car_width", c.car_width);
    y.get("car_width_std", c.car_width_std);
    y.get("max_frames", c.max_frames);
    if (y.has("classes")) {
      const json& arr = y.raw("classes");
      if (!arr.is_array() || arr.empty())
        throw Error(ErrorCode::kConfig, "config: '" + y.path("classes") + "' must be a non-empty array");
      c.classes.clear();
      for (std::size_t i = 0; i < arr.size(); ++i) {
        BehaviorClass b;
        read_behavior(Section(arr[i], y.path("classes") + "[" + std::to_string(i) + "]"), b);
        c.classes.push_back(b);
      }
    }
    y.finish();
  }
  if (s.has("road")) {
    Section r = s.sub("road");
    r.get("lane_count", d.road.lane_count);
    r.get("lane_width", d.road.lane_width);
    r.get("segment_length", d.road.segment_length);
    r.get("dt", d.road.dt);
    r.finish();
  }
  if (s.has("grid")) {
    Section g = s.sub("grid");
    g.get("height", d.grid.height);
    g.get("width", d.grid.width);
    g.get("meters_per_px_lon", d.grid.meters_per_px_lon);
    g.get("meters_per_px_lat", d.grid.meters_per_px_lat);
    g.get("marking_width_px", d.grid.marking_width_px);
    g.finish();
  }
  if (s.has("cost")) {
    Section c = s.sub("cost");
    c.get("k_safety", d.cost.k_safety);
    c.get("speed_ref", d.cost.speed_ref);
    c.get("smooth_tau", d.cost.smooth_tau);
    c.get("lane_weight", d.cost.lane_weight);
    c.finish();
  }
  s.get("window", d.window);
  s.get("max_horizon", d.max_horizon);
  s.get("norm_samples", d.norm_samples);
  s.finish();
  if (d.source != "synthetic" && d.source != "csv")
    throw Error(ErrorCode::kConfig, "config: 'data.source' must be \"synthetic\" or \"csv\"");
  if (d.source == "csv" && d.csv_path.empty())
    throw Error(ErrorCode::kConfig, "config: 'data.csv_path' is required when data.source is \"csv\"");
  if (d.window == 0 || d.max_horizon == 0) throw Error(ErrorCode::kConfig, "config: data.window and data.max_horizon must be positive");
}

void read_model(Section s, ModelSection& m) {
  if (s.has("net")) {
    Section n = s.sub("net");
    n.get("conv1", m.net.conv1);
    n.get("conv2", m.net.conv2);
    n.get("hidden", m.net.hidden);
    n.get("n_z", m.net.n_z);
    n.get("dropout", m.net.dropout);
    n.get("p_u", m.net.p_u);
    n.finish();
  }
  if (s.has("train")) {
    Section t = s.sub("train");
    t.get("lr", m.train.lr);
    t.get("batch", m.train.batch);
    t.get("unroll", m.train.unroll);
    t.get("deterministic_updates", m.train.deterministic_updates);
    t.get("stochastic_updates", m.train.stochastic_updates);
    t.get("beta", m.train.beta);
    t.get("eval_every", m.train.eval_every);
    t.get("val_batches", m.train.val_batches);
    t.get("grad_clip", m.train.grad_clip);
    t.finish();
  }
  s.get("cost_head", m.cost_head);
  if (s.has("cost_head_net")) {
    Section c = s.sub("cost_head_net");
    c.get("channels", m.cost_head_cfg.channels);
    c.get("hidden", m.cost_head_cfg.hidden);
    c.get("lr", m.cost_head_cfg.lr);
    c.get("updates", m.cost_head_cfg.updates);
    c.get("batch", m.cost_head_cfg.batch);
    c.finish();
  }
  s.finish();
}

void read_uncertainty(Section s, UncertaintySection& u) {
  s.get("k_masks", u.cfg.k_masks);
  s.get("k_calibration", u.cfg.k_calibration);
  s.get("calibration_samples", u.cfg.calibration_samples);
  s.get("calibration_batch", u.cfg.calibration_batch);
  s.get("share_masks_across_steps", u.cfg.share_masks_across_steps);
  s.get("shift_samples", u.shift_samples);
  s.finish();
  if (u.cfg.k_masks < 2 || u.cfg.k_calibration < 2)
    throw Error(ErrorCode::kConfig, "config: uncertainty.k_masks and k_calibration must be at least 2");
}

void read_policy(Section s, PolicySection& p) {
  PolicyTrainConfig& t = p.train;
  std::string method = method_name(t.method), latents = latent_source_name(t.objective.latents);
  s.get("method", method);
  t.method = parse_method(method);
  s.get("rollout", t.objective.rollout);
  s.get("lambda", t.objective.lambda);
  s.get("latent_source", latents);
  t.objective.latents = parse_latent_source(latents);
  s.get("lr", t.lr);
  s.get("batch", t.batch);
  s.get("updates", t.updates);
  s.get("eval_every", t.eval_every);
  s.get("val_batches", t.val_batches);
  s.get("grad_clip", t.grad_clip);
  if (s.has("net")) {
    Section n = s.sub("net");
    n.get("channels", t.net.channels);
    n.get("hidden", t.net.hidden);
    n.get("init_sigma", t.net.init_sigma);
    n.finish();
  }
  if (s.has("bounds")) {
    Section b = s.sub("bounds");
    b.get("max_dspeed", t.bounds.max_dspeed);
    b.get("max_dangle", t.bounds.max_dangle);
    b.get("min_speed", t.bounds.min_speed);
    b.finish();
  }
  s.get("model", p.model);
  s.get("cost_source", p.cost_source);
  s.get("seeds", p.seeds);
  s.finish();
  if (p.model != "auto" && p.model != "deterministic" && p.model != "stochastic")
    throw Error(ErrorCode::kConfig, "config: 'policy.model' must be auto, deterministic or stochastic");
  if (p.cost_source != "analytic" && p.cost_source != "learned")
    throw Error(ErrorCode::kConfig, "config: 'policy.cost_source' must be analytic or learned");
  if (t.objective.lambda < 0.0) throw Error(ErrorCode::kConfig, "config: 'policy.lambda' must be non-negative");
  if (t.objective.rollout == 0) throw Error(ErrorCode::kConfig, "config: 'policy.rollout' must be positive");
  if (p.seeds.empty()) throw Error(ErrorCode::kConfig, "config: 'policy.seeds' must not be empty");
}

void read_eval(Section s, EvalSection& e) {
  s.get("max_episodes", e.max_episodes);
  s.get("max_steps", e.max_steps);
  s.get("act_mode", e.act_mode);
  s.get("episode_csvs", e.episode_csvs);
  s.get("rollout_u_samples", e.rollout_u_samples);
  s.finish();
  if (e.act_mode != "mean" && e.act_mode != "sample")
    throw Error(ErrorCode::kConfig, "config: 'eval.act_mode' must be mean or sample");
  if (e.max_steps <= 0) throw Error(ErrorCode::kConfig, "config: 'eval.max_steps' must be positive");
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  Section root(j, "");
  root.get("seed", c.seed);
  if (root.has("data")) read_data(root.sub("data"), c.data);
  if (root.has("model")) read_model(root.sub("model"), c.model);
  if (root.has("uncertainty")) read_uncertainty(root.sub("uncertainty"), c.uncertainty);
  if (root.has("policy")) read_policy(root.sub("policy"), c.policy);
  if (root.has("eval")) read_eval(root.sub("eval"), c.eval);
  root.finish();
  c.model.net.window = c.data.window;
  c.policy.train.net.window = c.data.window;
  c.policy.train.objective.k_masks = c.uncertainty.cfg.k_masks;
  c.policy.train.objective.cost = c.data.cost;
  c.policy.train.objective.road = c.data.road;
  if (c.policy.train.objective.rollout > c.data.max_horizon)
    throw Error(ErrorCode::kConfig, "config: policy.rollout exceeds data.max_horizon");
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, "config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  const DataSection& d = data;
  json classes = json::array();
  for (const BehaviorClass& b : d.synthetic.classes) classes.push_back(behavior_json(b));
  const SyntheticConfig& y = d.synthetic;
  const PolicyTrainConfig& t = policy.train;
  return {
      {"seed", seed},
      {"data",
       {{"source", d.source},
        {"csv_path", d.csv_path},
        {"synthetic",
         {{"n_cars", y.n_cars}, {"mean_spawn_headway", y.mean_spawn_headway}, {"slowdown_rate", y.slowdown_rate},
          {"slowdown_factor", y.slowdown_factor}, {"slowdown_duration", y.slowdown_duration},
          {"lane_change_duration", y.lane_change_duration}, {"lateral_wander", y.lateral_wander},
          {"car_length", y.car_length}, {"car_length_std", y.car_length_std}, {"car_width", y.car_width},
          {"car_width_std", y.car_width_std}, {"max_frames", y.max_frames}, {"classes", classes}}},
        {"road",
         {{"lane_count", d.road.lane_count}, {"lane_width", d.road.lane_width},
          {"segment_length", d.road.segment_length}, {"dt", d.road.dt}}},
        {"grid", detail::grid_json(d.grid)},
        {"cost",
         {{"k_safety", d.cost.k_safety}, {"speed_ref", d.cost.speed_ref}, {"smooth_tau", d.cost.smooth_tau},
          {"lane_weight", d.cost.lane_weight}}},
        {"window", d.window},
        {"max_horizon", d.max_horizon},
        {"norm_samples", d.norm_samples}}},
      {"model",
       {{"net",
         {{"conv1", model.net.conv1}, {"conv2", model.net.conv2}, {"hidden", model.net.hidden},
          {"n_z", model.net.n_z}, {"dropout", model.net.dropout}, {"p_u", model.net.p_u}}},
        {"train",
         {{"lr", model.train.lr}, {"batch", model.train.batch}, {"unroll", model.train.unroll},
          {"deterministic_updates", model.train.deterministic_updates},
          {"stochastic_updates", model.train.stochastic_updates}, {"beta", model.train.beta},
          {"eval_every", model.train.eval_every}, {"val_batches", model.train.val_batches},
          {"grad_clip", model.train.grad_clip}}},
        {"cost_head", model.cost_head},
        {"cost_head_net",
         {{"channels", model.cost_head_cfg.channels}, {"hidden", model.cost_head_cfg.hidden},
          {"lr", model.cost_head_cfg.lr}, {"updates", model.cost_head_cfg.updates},
          {"batch", model.cost_head_cfg.batch}}}}},
      {"uncertainty",
       {{"k_masks", uncertainty.cfg.k_masks}, {"k_calibration", uncertainty.cfg.k_calibration},
        {"calibration_samples", uncertainty.cfg.calibration_samples},
        {"calibration_batch", uncertainty.cfg.calibration_batch},
        {"share_masks_across_steps", uncertainty.cfg.share_masks_across_steps},
        {"shift_samples", uncertainty.shift_samples}}},
      {"policy",
       {{"method", method_name(t.method)},
        {"rollout", t.objective.rollout},
        {"lambda", t.objective.lambda},
        {"latent_source", latent_source_name(t.objective.latents)},
        {"lr", t.lr},
        {"batch", t.batch},
        {"updates", t.updates},
        {"eval_every", t.eval_every},
        {"val_batches", t.val_batches},
        {"grad_clip", t.grad_clip},
        {"net", {{"channels", t.net.channels}, {"hidden", t.net.hidden}, {"init_sigma", t.net.init_sigma}}},
        {"bounds",
         {{"max_dspeed", t.bounds.max_dspeed}, {"max_dangle", t.bounds.max_dangle},
          {"min_speed", t.bounds.min_speed}}},
        {"model", policy.model},
        {"cost_source", policy.cost_source},
        {"seeds", policy.seeds}}},
      {"eval",
       {{"max_episodes", eval.max_episodes}, {"max_steps", eval.max_steps}, {"act_mode", eval.act_mode},
        {"episode_csvs", eval.episode_csvs}, {"rollout_u_samples", eval.rollout_u_samples}}}};
}

Overrides Overrides::from_json(const json& j) {
  Overrides o;
  if (j.is_null()) return o;
  Section s(j, "overrides");
  auto opt = [&](const char* key, auto& dst) {
    if (!s.has(key)) return;
    std::remove_reference_t<decltype(*dst)> v{};
    s.get(key, v);
    dst = v;
  };
  opt("seed", o.seed);
  opt("method", o.method);
  opt("rollout", o.rollout);
  opt("latent_source", o.latent_source);
  opt("lambda", o.lambda);
  s.finish();
  return o;
}

RunConfig apply_overrides(RunConfig cfg, const Overrides& o, const std::string& command) {
  json j = cfg.to_json();
  if (o.seed) {
    if (command == "train-policy" || command == "evaluate")
      j["policy"]["seeds"] = json::array({*o.seed});
    else
      j["seed"] = *o.seed;
  }
  if (o.method) j["policy"]["method"] = *o.method;
  if (o.rollout) j["policy"]["rollout"] = *o.rollout;
  if (o.latent_source) j["policy"]["latent_source"] = *o.latent_source;
  if (o.lambda) j["policy"]["lambda"] = *o.lambda;
  return RunConfig::from_json(j);
}

std::string policy_tag(const RunConfig& cfg) {
  const PolicyTrainConfig& t = cfg.policy.train;
  if (t.method == PolicyMethod::kNoop) return "noop";
  if (t.method == PolicyMethod::kIl1) return "il1";
  std::string tag = method_name(t.method) + "_T" + std::to_string(t.objective.rollout);
  const bool uses_latents = t.method == PolicyMethod::kMpur || t.method == PolicyMethod::kSvg;
  if (uses_latents && t.objective.latents == LatentSource::kPosterior) tag += "_posterior";
  if (t.method == PolicyMethod::kMpur && t.objective.lambda != PolicyObjective{}.lambda) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_lambda%g", t.objective.lambda);
    tag += buf;
  }
  if (cfg.policy.model != "auto") tag += "_" + cfg.policy.model;
  return tag;
}

std::uint64_t stage_seed(const RunConfig& cfg, const std::string& stage) { return substream_seed(cfg.seed, stage); }

std::string mean_pm_std(const std::vector<double>& values, int decimals) {
  if (values.empty()) return "";
  double m = 0.0;
  for (double v : values) m += v;
  m /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - m) * (v - m);
  const double sd = values.size() > 1 ? std::sqrt(var / static_cast<double>(values.size() - 1)) : 0.0;
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f ± %.*f", decimals, m, decimals, sd);
  return buf;
}

EnvConfig env_config(const RunConfig& cfg) {
  EnvConfig env;
  env.grid = cfg.data.grid;
  env.cost = cfg.data.cost;
  env.bounds = cfg.policy.train.bounds;
  env.window = cfg.data.window;
  env.max_steps = cfg.eval.max_steps;
  return env;
}

// ---- artifacts ----

namespace {

struct Paths {
  fs::path out;
  fs::path data() const { return out / "data"; }
  fs::path dataset() const { return data() / "dataset.mpur"; }
  fs::path norm() const { return data() / "norm.json"; }
  fs::path model() const { return out / "model"; }
  fs::path model_file(bool stochastic) const { return model() / (stochastic ? "stochastic.mpur" : "deterministic.mpur"); }
  fs::path calibration(bool stochastic) const {
    return model() / (stochastic ? "calibration.mpur" : "calibration_deterministic.mpur");
  }
  fs::path cost_head() const { return model() / "cost_head.mpur"; }
  fs::path policy(const std::string& tag, std::uint64_t seed) const {
    return out / "policy" / tag / ("seed" + std::to_string(seed));
  }
  fs::path eval(const std::string& tag, std::uint64_t seed) const {
    return out / "eval" / tag / ("seed" + std::to_string(seed));
  }
  fs::path report() const { return out / "report"; }
};

void require(const fs::path& p, const std::string& hint) {
  if (!fs::exists(p))
    throw Error(ErrorCode::kMissingArtifact, "missing " + p.string() + "; run `" + hint + "` first");
}

void write_json(const fs::path& p, const json& j) { write_file(p, j.dump(2) + "\n"); }

void write_resolved(const fs::path& dir, const RunConfig& cfg) {
  fs::create_directories(dir);
  write_json(dir / "config.resolved.json", cfg.to_json());
}

// Wall-clock notes go to a sidecar so artifacts stay byte-reproducible.
void log_line(const Paths& p, const std::string& msg) {
  fs::create_directories(p.out);
  std::ofstream f(p.out / "run.log", std::ios::app);
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%S", std::gmtime(&now));
  f << buf << " " << msg << "\n";
}

struct Loaded {
  TrajectoryDataset data;
  NormStats norm;
};

Loaded load_data(const Paths& p) {
  require(p.dataset(), "mpur gen-data");
  require(p.norm(), "mpur gen-data");
  Loaded l{load_dataset(p.dataset()), {}};
  try {
    l.norm = detail::norm_from_json(json::parse(read_file(p.norm())));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::kParse, p.norm().string() + ": " + e.what());
  }
  return l;
}

BatchSource make_source(const RunConfig& cfg, const Loaded& l) {
  return dataset_batch_source(l.data, cfg.data.window, cfg.data.max_horizon, cfg.data.grid, cfg.data.cost, l.norm);
}

ForwardModel load_model(const Paths& p, bool stochastic) {
  require(p.model_file(stochastic), "mpur train-model");
  return ForwardModel::load(read_container(p.model_file(stochastic)));
}

bool policy_uses_stochastic(const RunConfig& cfg) {
  if (cfg.policy.model == "deterministic") return false;
  if (cfg.policy.model == "stochastic") return true;
  return cfg.policy.train.method != PolicyMethod::kVg;
}

}  // namespace

// ---- stages ----

void stage_gen_data(const RunConfig& cfg, const fs::path& out) {
  const Paths p{out};
  const std::uint64_t seed = stage_seed(cfg, "data");
  const std::size_t min_length = cfg.data.window + cfg.data.max_horizon + 1;
  TrajectoryDataset d;
  if (cfg.data.source == "synthetic") {
    d = generate_synthetic_traffic(cfg.data.synthetic, cfg.data.road, substream_seed(seed, "traffic"));
    assign_splits(d, min_length, substream_seed(seed, "splits"));
  } else {
    d = load_trajectories(cfg.data.csv_path, cfg.data.road, min_length, substream_seed(seed, "splits"));
  }
  const auto train = build_transitions(d, Split::kTrain, cfg.data.window, cfg.data.max_horizon);
  if (train.empty()) throw Error(ErrorCode::kConfig, "gen-data: no training transitions; add cars or shorten data.max_horizon");
  const NormStats norm =
      compute_norm_stats(d, train, cfg.data.grid, cfg.data.norm_samples, substream_seed(seed, "norm"));
  write_resolved(p.data(), cfg);
  save_dataset(p.dataset(), d);
  write_file(p.data() / "trajectories.csv", trajectories_csv(d));
  write_json(p.norm(), detail::norm_json(norm));
  json summary = {{"cars", d.cars.size()}, {"states", d.state_count()}};
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest, Split::kSceneOnly})
    summary["cars_" + std::string(split_name(s))] = d.cars_in(s).size();
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest}) {
    TransitionStats st;
    build_transitions(d, s, cfg.data.window, cfg.data.max_horizon, &st);
    summary["transitions_" + std::string(split_name(s))] = st.kept;
    summary["stationary_dropped_" + std::string(split_name(s))] = st.stationary_dropped;
  }
  write_json(p.data() / "summary.json", summary);
  log_line(p, "gen-data done");
}

void stage_train_model(const RunConfig& cfg, const fs::path& out) {
  const Paths p{out};
  const Loaded l = load_data(p);
  const BatchSource source = make_source(cfg, l);
  const std::uint64_t seed = stage_seed(cfg, "model");
  Rng init(substream_seed(seed, "init"));
  const ForwardModel initial(cfg.model.net, cfg.data.grid, l.norm, init);
  write_resolved(p.model(), cfg);
  const TrainedModels t = train_forward_model(
      initial, source, cfg.model.train, substream_seed(seed, "train"),
      [&](const std::string& phase, const ForwardModel& m) {
        if (phase == "diverged") write_container(p.model() / "diverged_last_good.mpur", m.save());
      });
  write_container(p.model_file(false), t.deterministic.save());
  write_container(p.model_file(true), t.stochastic.save());
  write_file(p.model() / "curves.csv", curves_csv(t.curve));
  if (cfg.model.cost_head) {
    CostHeadReport rep;
    const CostPredictor head =
        train_cost_predictor(source, cfg.model.cost_head_cfg, cfg.data.grid, substream_seed(seed, "cost_head"), &rep);
    write_container(p.cost_head(), head.save());
    write_json(p.model() / "cost_head.json", {{"val_mse", rep.val_mse}, {"pearson", rep.pearson}});
  }
  log_line(p, "train-model done");
}

void stage_calibrate(const RunConfig& cfg, const fs::path& out) {
  const Paths p{out};
  const Loaded l = load_data(p);
  const BatchSource source = make_source(cfg, l);
  const std::uint64_t seed = stage_seed(cfg, "masks");
  const std::size_t horizon = cfg.data.max_horizon;
  for (bool stochastic : {true, false}) {
    const ForwardModel m = load_model(p, stochastic);
    const UncertaintyCalibration c = calibrate(m, source, horizon, cfg.uncertainty.cfg, substream_seed(seed, "calibration"));
    write_container(p.calibration(stochastic), c.save());
    write_file(p.calibration(stochastic).replace_extension(".csv"), c.csv());
  }
  // Covariate-shift check: U under recorded vs uniformly random actions.
  const ForwardModel m = load_model(p, true);
  const std::size_t n = cfg.uncertainty.shift_samples, k = cfg.uncertainty.cfg.k_calibration;
  const RolloutUncertainty in = rollout_uncertainty(m, source, Split::kTest, horizon, n, 32, k,
                                                    substream_seed(seed, "shift"), recorded_actions());
  const RolloutUncertainty rnd =
      rollout_uncertainty(m, source, Split::kTest, horizon, n, 32, k, substream_seed(seed, "shift"),
                          uniform_random_actions(l.norm, cfg.policy.train.bounds));
  write_json(p.model() / "uncertainty_shift.json",
             {{"horizon", horizon},
              {"samples", in.samples},
              {"recorded_actions_mean_u", in.mean_raw_u},
              {"random_actions_mean_u", rnd.mean_raw_u},
              {"ratio", rnd.mean_raw_u / in.mean_raw_u},
              {"recorded_actions_per_step", in.per_step},
              {"random_actions_per_step", rnd.per_step}});
  log_line(p, "calibrate done");
}

void stage_train_policy(const RunConfig& cfg, const fs::path& out) {
  const Paths p{out};
  const Loaded l = load_data(p);
  const BatchSource source = make_source(cfg, l);
  const bool stochastic = policy_uses_stochastic(cfg);
  const PolicyMethod method = cfg.policy.train.method;
  // The zero-action baseline needs no trained model; train_policy never reads it.
  Rng unused(0);
  const ForwardModel model = method == PolicyMethod::kNoop ? ForwardModel(cfg.model.net, cfg.data.grid, l.norm, unused)
                                                           : load_model(p, stochastic);
  std::optional<UncertaintyCalibration> calib;
  if (method == PolicyMethod::kMpur && cfg.policy.train.objective.lambda > 0.0) {
    require(p.calibration(stochastic), "mpur calibrate");
    calib = UncertaintyCalibration::load(read_container(p.calibration(stochastic)));
  }
  std::optional<CostPredictor> head;
  PolicyTrainConfig tc = cfg.policy.train;
  if (cfg.policy.cost_source == "learned") {
    require(p.cost_head(), "mpur train-model (with model.cost_head = true)");
    head = CostPredictor::load(read_container(p.cost_head()));
    tc.objective.cost_head = &*head;
  }
  const std::string tag = policy_tag(cfg);
  for (std::uint64_t s : cfg.policy.seeds) {
    const fs::path dir = p.policy(tag, s);
    write_resolved(dir, cfg);
    const TrainedPolicy t = train_policy(model, calib ? &*calib : nullptr, source, tc,
                                         hash_combine(stage_seed(cfg, "policy"), s));
    write_container(dir / "policy.mpur", t.policy.save());
    write_file(dir / "curve.csv", policy_curve_csv(t.curve));
    log_line(p, "train-policy " + tag + " seed " + std::to_string(s) + " done");
  }
}

void stage_evaluate(const RunConfig& cfg, const fs::path& out) {
  const Paths p{out};
  const Loaded l = load_data(p);
  const BatchSource source = make_source(cfg, l);
  const ForwardModel stochastic = load_model(p, true);
  const std::string tag = policy_tag(cfg);
  std::vector<std::size_t> cars = l.data.cars_in(Split::kTest);
  if (cars.empty()) throw Error(ErrorCode::kState, "evaluate: the dataset has no test cars");
  if (cfg.eval.max_episodes > 0 && cars.size() > cfg.eval.max_episodes) cars.resize(cfg.eval.max_episodes);
  const EnvConfig env = env_config(cfg);
  const ActMode mode = cfg.eval.act_mode == "sample" ? ActMode::kSample : ActMode::kMean;
  const std::uint64_t eval_seed = stage_seed(cfg, "eval");
  for (std::uint64_t s : cfg.policy.seeds) {
    const fs::path pol = p.policy(tag, s) / "policy.mpur";
    require(pol, "mpur train-policy --method " + method_name(cfg.policy.train.method));
    const PolicyNetwork policy = PolicyNetwork::load(read_container(pol));
    const EvaluationReport rep = evaluate(
        [&](std::size_t i) { return policy_controller(policy, mode, hash_combine(hash_combine(eval_seed, s), i)); },
        l.data, cars, env, true);
    const fs::path dir = p.eval(tag, s);
    write_resolved(dir, cfg);
    write_json(dir / "metrics.json", {{"method", method_name(cfg.policy.train.method)},
                                      {"seed", s},
                                      {"mean_distance_m", rep.mean_distance},
                                      {"success_rate", rep.success_rate},
                                      {"n_episodes", rep.episodes.size()}});
    std::string rows = "car_id,distance_m,success,termination,steps\n";
    char buf[160];
    for (const EpisodeResult& e : rep.episodes) {
      std::snprintf(buf, sizeof buf, "%lld,%.6f,%d,%s,%d\n", static_cast<long long>(e.car_id), e.distance,
                    e.success ? 1 : 0, termination_name(e.termination), e.steps);
      rows += buf;
    }
    write_file(dir / "episodes.csv", rows);
    fs::create_directories(dir / "trajectories");
    for (std::size_t i = 0; i < std::min(cfg.eval.episode_csvs, rep.logs.size()); ++i)
      write_file(dir / "trajectories" / ("car" + std::to_string(rep.episodes[i].car_id) + ".csv"),
                 episode_csv(rep.logs[i]));
    const RolloutUncertainty ru =
        rollout_uncertainty(stochastic, source, Split::kTest, cfg.data.max_horizon, cfg.eval.rollout_u_samples, 32,
                            cfg.uncertainty.cfg.k_calibration, substream_seed(eval_seed, "rollout_u"),
                            policy_actions(policy));
    write_json(dir / "diagnostics.json", {{"tag", tag},
                                          {"method", method_name(cfg.policy.train.method)},
                                          {"model", policy_uses_stochastic(cfg) ? "stochastic" : "deterministic"},
                                          {"rollout", cfg.policy.train.objective.rollout},
                                          {"latent_source", latent_source_name(cfg.policy.train.objective.latents)},
                                          {"lambda", cfg.policy.train.objective.lambda},
                                          {"rollout_u", ru.mean_raw_u},
                                          {"rollout_u_per_step", ru.per_step}});
    log_line(p, "evaluate " + tag + " seed " + std::to_string(s) + " done");
  }
}

void stage_report(const RunConfig& cfg, const fs::path& out) {
  const Paths p{out};
  const fs::path eval_root = out / "eval";
  if (!fs::exists(eval_root)) throw Error(ErrorCode::kMissingArtifact, "report: nothing evaluated yet; run `mpur evaluate` first");
  struct Row {
    json diag;
    std::vector<std::uint64_t> seeds;
    std::vector<double> distance, success, rollout_u;
  };
  std::map<std::string, Row> rows;
  std::vector<fs::path> tags;
  for (const auto& e : fs::directory_iterator(eval_root))
    if (e.is_directory()) tags.push_back(e.path());
  std::sort(tags.begin(), tags.end());
  const fs::path traj_out = p.report() / "trajectories";
  fs::create_directories(traj_out);
  for (const fs::path& t : tags) {
    std::vector<fs::path> seeds;
    for (const auto& e : fs::directory_iterator(t))
      if (e.is_directory() && fs::exists(e.path() / "metrics.json")) seeds.push_back(e.path());
    std::sort(seeds.begin(), seeds.end());
    for (const fs::path& sd : seeds) {
      const json m = json::parse(read_file(sd / "metrics.json"));
      const json d = json::parse(read_file(sd / "diagnostics.json"));
      Row& r = rows[t.filename().string()];
      r.diag = d;
      r.seeds.push_back(m.at("seed").get<std::uint64_t>());
      r.distance.push_back(m.at("mean_distance_m"));
      r.success.push_back(100.0 * m.at("success_rate").get<double>());
      r.rollout_u.push_back(d.at("rollout_u"));
      if (fs::exists(sd / "trajectories")) {
        std::vector<fs::path> files;
        for (const auto& f : fs::directory_iterator(sd / "trajectories")) files.push_back(f.path());
        std::sort(files.begin(), files.end());
        for (const fs::path& f : files)
          write_file(traj_out / (t.filename().string() + "_" + sd.filename().string() + "_" + f.filename().string()),
                     read_file(f));
      }
    }
  }
  if (rows.empty()) throw Error(ErrorCode::kMissingArtifact, "report: no metrics found under " + eval_root.string());
  auto mean_of = [](const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  };
  auto std_of = [&](const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / static_cast<double>(v.size() - 1));
  };
  std::string csv = "tag,method,model,rollout,latent_source,lambda,n_seeds,mean_distance_m,success_rate_pct,rollout_u\n";
  json summary = json::array();
  std::string curves = "method,model,latent_source,lambda,rollout,n_seeds,success_mean_pct,success_std_pct,distance_mean_m,distance_std_m\n";
  char buf[256];
  for (const auto& [tag, r] : rows) {
    const json& d = r.diag;
    const std::string method = d.at("method"), model = d.at("model"), latents = d.at("latent_source");
    const std::size_t rollout = d.at("rollout");
    const double lambda = d.at("lambda");
    std::snprintf(buf, sizeof buf, "%s,%s,%s,%zu,%s,%g,%zu,%s,%s,%s\n", tag.c_str(), method.c_str(), model.c_str(),
                  rollout, latents.c_str(), lambda, r.seeds.size(), mean_pm_std(r.distance, 1).c_str(),
                  mean_pm_std(r.success, 1).c_str(), mean_pm_std(r.rollout_u, 3).c_str());
    csv += buf;
    summary.push_back({{"tag", tag},
                       {"method", method},
                       {"model", model},
                       {"rollout", rollout},
                       {"latent_source", latents},
                       {"lambda", lambda},
                       {"seeds", r.seeds},
                       {"mean_distance_m", {{"mean", mean_of(r.distance)}, {"std", std_of(r.distance)}, {"values", r.distance}}},
                       {"success_rate_pct", {{"mean", mean_of(r.success)}, {"std", std_of(r.success)}, {"values", r.success}}},
                       {"rollout_u", {{"mean", mean_of(r.rollout_u)}, {"std", std_of(r.rollout_u)}, {"values", r.rollout_u}}},
                       {"display",
                        {{"mean_distance_m", mean_pm_std(r.distance, 1)}, {"success_rate_pct", mean_pm_std(r.success, 1)}}}});
    if (method != "noop" && method != "il1") {
      std::snprintf(buf, sizeof buf, "%s,%s,%s,%g,%zu,%zu,%.4f,%.4f,%.4f,%.4f\n", method.c_str(), model.c_str(),
                    latents.c_str(), lambda, rollout, r.seeds.size(), mean_of(r.success), std_of(r.success),
                    mean_of(r.distance), std_of(r.distance));
      curves += buf;
    }
  }
  write_resolved(p.report(), cfg);
  write_file(p.report() / "summary.csv", csv);
  write_json(p.report() / "summary.json", summary);
  write_file(p.report() / "rollout_length.csv", curves);
  if (fs::exists(p.calibration(true).replace_extension(".csv")))
    write_file(p.report() / "calibration.csv", read_file(p.calibration(true).replace_extension(".csv")));
  log_line(p, "report done");
}

void run_command(const std::string& command, const RunConfig& cfg, const fs::path& out) {
  if (command == "gen-data") return stage_gen_data(cfg, out);
  if (command == "train-model") return stage_train_model(cfg, out);
  if (command == "calibrate") return stage_calibrate(cfg, out);
  if (command == "train-policy") return stage_train_policy(cfg, out);
  if (command == "evaluate") return stage_evaluate(cfg, out);
  if (command == "report") return stage_report(cfg, out);
  throw Error(ErrorCode::kInvalidArgument, "unknown command '" + command + "'");
}

}  // namespace mpur
