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
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "mpur/policy.hpp"

namespace mpur {

struct DataSection {
  std::string source = "synthetic";  // synthetic | csv
  std::string csv_path;
  SyntheticConfig synthetic;
  RoadGeometry road;
  GridConfig grid;
  CostConfig cost;
  std::size_t window = 2;
  std::size_t max_horizon = 10;  // longest rollout any later stage may request
  std::size_t norm_samples = 2000;
};

struct ModelSection {
  ModelConfig net;
  ModelTrainConfig train;
  bool cost_head = false;
  CostPredictorConfig cost_head_cfg;
};

struct UncertaintySection {
  UncertaintyConfig cfg;
  std::size_t shift_samples = 128;  // windows for the in/out-of-distribution U diagnostic
};

struct PolicySection {
  PolicyTrainConfig train;
  std::string model = "auto";        // auto | deterministic | stochastic
  std::string cost_source = "analytic";  // analytic | learned
  std::vector<std::uint64_t> seeds{1, 2, 3};
};

struct EvalSection {
  std::size_t max_episodes = 0;  // 0 = every test car
  int max_steps = 1000;
  std::string act_mode = "mean";  // mean | sample
  std::size_t episode_csvs = 5;
  std::size_t rollout_u_samples = 128;
};

struct RunConfig {
  std::uint64_t seed = 1;
  DataSection data;
  ModelSection model;
  UncertaintySection uncertainty;
  PolicySection policy;
  EvalSection eval;

  // Unknown keys and ill-typed values throw kConfig naming the key path.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
  nlohmann::json to_json() const;
};

// Command-line overrides; `seed` selects a single policy seed for
// train-policy/evaluate and replaces the root seed elsewhere.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method;
  std::optional<std::size_t> rollout;
  std::optional<std::string> latent_source;
  std::optional<double> lambda;

  static Overrides from_json(const nlohmann::json& j);
};

RunConfig apply_overrides(RunConfig cfg, const Overrides& o, const std::string& command);

// Directory name of one policy configuration, e.g. "mpur_T10" or
// "mpur_T10_posterior".
std::string policy_tag(const RunConfig& cfg);

// Named substream of the root seed.
std::uint64_t stage_seed(const RunConfig& cfg, const std::string& stage);

// Pipeline stages; each reads prerequisites from and writes into `out`.
void stage_gen_data(const RunConfig& cfg, const std::filesystem::path& out);
void stage_train_model(const RunConfig& cfg, const std::filesystem::path& out);
void stage_calibrate(const RunConfig& cfg, const std::filesystem::path& out);
void stage_train_policy(const RunConfig& cfg, const std::filesystem::path& out);
void stage_evaluate(const RunConfig& cfg, const std::filesystem::path& out);
void stage_report(const RunConfig& cfg, const std::filesystem::path& out);

// Environment settings used by `evaluate`.
EnvConfig env_config(const RunConfig& cfg);

// Dispatches a subcommand by name.
void run_command(const std::string& command, const RunConfig& cfg, const std::filesystem::path& out);

// "171.2 ± 4.5": mean and sample standard deviation over seeds.
std::string mean_pm_std(const std::vector<double>& values, int decimals = 1);

}  // namespace mpur
