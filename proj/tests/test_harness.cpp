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

#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "doctest.h"
#include "mpur/error.hpp"
#include "mpur/harness.hpp"

using namespace mpur;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json tiny_json() {
  std::ifstream f(fs::path(MPUR_SOURCE_DIR) / "configs" / "tiny.json");
  return json::parse(f);
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::kInvalidArgument;
}

std::map<std::string, std::string> snapshot(const fs::path& root) {
  std::map<std::string, std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    if (!e.is_regular_file() || e.path().filename() == "run.log") continue;
    std::ifstream f(e.path(), std::ios::binary);
    std::stringstream ss;
    ss << f.rdbuf();
    files[fs::relative(e.path(), root).string()] = ss.str();
  }
  return files;
}

fs::path fresh_dir(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("mpur_test_harness_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("config: defaults and the tiny config survive a round trip") {
  const RunConfig d;
  CHECK(RunConfig::from_json(d.to_json()).to_json() == d.to_json());
  const RunConfig t = RunConfig::from_json(tiny_json());
  CHECK(t.seed == 7);
  CHECK(t.policy.seeds == std::vector<std::uint64_t>{1, 2});
  CHECK(RunConfig::from_json(t.to_json()).to_json() == t.to_json());
  CHECK(t.policy.train.objective.road.lane_count == t.data.road.lane_count);
}

TEST_CASE("config: unknown keys and wrong types are rejected with their path") {
  json j = tiny_json();
  j["model"]["net"]["dropuot"] = 0.1;
  try {
    RunConfig::from_json(j);
    FAIL("accepted an unknown key");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kConfig);
    CHECK(std::string(e.what()).find("model.net.dropuot") != std::string::npos);
  }
  j = tiny_json();
  j["seed"] = "seven";
  CHECK(code_of([&] { RunConfig::from_json(j); }) == ErrorCode::kConfig);
  j = tiny_json();
  j["data"]["window"] = -2;
  CHECK(code_of([&] { RunConfig::from_json(j); }) == ErrorCode::kConfig);
  j = tiny_json();
  j["policy"]["method"] = "ppo";
  CHECK(code_of([&] { RunConfig::from_json(j); }) == ErrorCode::kConfig);
  j = tiny_json();
  j["policy"]["lambda"] = -0.1;
  CHECK(code_of([&] { RunConfig::from_json(j); }) == ErrorCode::kConfig);
  j = tiny_json();
  j["policy"]["rollout"] = 50;
  CHECK(code_of([&] { RunConfig::from_json(j); }) == ErrorCode::kConfig);
  CHECK(code_of([&] { Overrides::from_json(json{{"sead", 1}}); }) == ErrorCode::kConfig);
}

TEST_CASE("overrides: --seed is per-policy for train-policy and evaluate, root otherwise") {
  const RunConfig base = RunConfig::from_json(tiny_json());
  Overrides o;
  o.seed = 42;
  const RunConfig a = apply_overrides(base, o, "train-policy");
  CHECK(a.seed == base.seed);
  CHECK(a.policy.seeds == std::vector<std::uint64_t>{42});
  const RunConfig b = apply_overrides(base, o, "train-model");
  CHECK(b.seed == 42);
  CHECK(b.policy.seeds == base.policy.seeds);
  o = Overrides::from_json(json{{"method", "vg"}, {"rollout", 1}, {"lambda", 0.0}, {"latent_source", "posterior"}});
  const RunConfig c = apply_overrides(base, o, "train-policy");
  CHECK(c.policy.train.method == PolicyMethod::kVg);
  CHECK(c.policy.train.objective.rollout == 1);
  CHECK(c.policy.train.objective.latents == LatentSource::kPosterior);
}

TEST_CASE("policy tags name every setting that changes the run") {
  RunConfig c;
  c.policy.train.method = PolicyMethod::kMpur;
  c.policy.train.objective.rollout = 10;
  CHECK(policy_tag(c) == "mpur_T10");
  c.policy.train.objective.latents = LatentSource::kPosterior;
  CHECK(policy_tag(c) == "mpur_T10_posterior");
  c.policy.train.objective.lambda = 0.0;
  CHECK(policy_tag(c) == "mpur_T10_posterior_lambda0");
  c.policy.train.method = PolicyMethod::kVg;
  CHECK(policy_tag(c) == "vg_T10");
  c.policy.train.method = PolicyMethod::kNoop;
  CHECK(policy_tag(c) == "noop");
  c.policy.train.method = PolicyMethod::kMper;
  c.policy.model = "deterministic";
  CHECK(policy_tag(c) == "mper_T10_deterministic");
}

TEST_CASE("mean ± std formatting") {
  CHECK(mean_pm_std({166.7, 171.2, 175.7}) == "171.2 ± 4.5");
  CHECK(mean_pm_std({0.5}, 2) == "0.50 ± 0.00");
  CHECK(mean_pm_std({}) == "");
}

TEST_CASE("pipeline: prerequisites, artifacts, byte-identical reruns") {
  const RunConfig cfg = RunConfig::from_json(tiny_json());
  const fs::path a = fresh_dir("a"), b = fresh_dir("b");

  CHECK(code_of([&] { run_command("train-model", cfg, a); }) == ErrorCode::kMissingArtifact);
  CHECK(code_of([&] { run_command("report", cfg, a); }) == ErrorCode::kMissingArtifact);
  CHECK(code_of([&] { run_command("dance", cfg, a); }) == ErrorCode::kInvalidArgument);

  for (const char* c : {"gen-data", "train-model", "calibrate", "train-policy", "evaluate", "report"}) {
    run_command(c, cfg, a);
    run_command(c, cfg, b);
  }
  CHECK(fs::exists(a / "run.log"));
  const auto sa = snapshot(a), sb = snapshot(b);
  CHECK(sa.size() > 20);
  CHECK(sa == sb);

  // Every stage directory carries a config that reproduces the run.
  for (const char* dir : {"data", "model", "policy/mpur_T3/seed1", "eval/mpur_T3/seed2", "report"}) {
    const RunConfig r = RunConfig::load(a / dir / "config.resolved.json");
    CHECK(r.to_json() == cfg.to_json());
  }

  const json m = json::parse(sa.at("eval/mpur_T3/seed1/metrics.json"));
  for (const char* k : {"method", "seed", "mean_distance_m", "success_rate", "n_episodes"}) CHECK(m.contains(k));
  CHECK(m["n_episodes"] == 3);
  CHECK(sa.at("report/summary.csv").find(" ± ") != std::string::npos);

  // Evaluating an untrained method names the missing step.
  RunConfig vg = cfg;
  vg.policy.train.method = PolicyMethod::kVg;
  try {
    run_command("evaluate", vg, a);
    FAIL("evaluated a missing policy");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kMissingArtifact);
    CHECK(std::string(e.what()).find("train-policy --method vg") != std::string::npos);
  }
  fs::remove_all(a);
  fs::remove_all(b);
}
