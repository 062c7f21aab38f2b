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

#include <cstdio>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mpur.h"

int main(int argc, char** argv) {
  CLI::App app{"Model-predictive policy learning with uncertainty regularization"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config, out = "runs";
  std::optional<std::uint64_t> seed;
  std::optional<std::string> method, latent_source;
  std::optional<std::size_t> rollout;
  std::optional<double> lambda;
  app.add_option("--config", config, "Run config (JSON)")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out, "Output directory")->capture_default_str();
  app.add_option("--seed", seed, "Root seed; for train-policy and evaluate, the single policy seed");
  app.add_option("--method", method, "Policy method")
      ->check(CLI::IsMember({"mpur", "mper", "vg", "svg", "il1", "noop"}));
  app.add_option("--rollout", rollout, "Rollout length T")->check(CLI::PositiveNumber);
  app.add_option("--latent-source", latent_source, "Latents during policy training")
      ->check(CLI::IsMember({"prior", "posterior"}));
  app.add_option("--lambda", lambda, "Uncertainty weight")->check(CLI::NonNegativeNumber);

  for (const char* name : {"gen-data", "train-model", "calibrate", "train-policy", "evaluate", "report"})
    app.add_subcommand(name, "");
  app.get_subcommand("gen-data")->description("Generate or import trajectories and normalization stats");
  app.get_subcommand("train-model")->description("Train the deterministic and stochastic forward models");
  app.get_subcommand("calibrate")->description("Estimate per-step uncertainty statistics");
  app.get_subcommand("train-policy")->description("Train one policy per seed");
  app.get_subcommand("evaluate")->description("Run closed-loop episodes on test cars");
  app.get_subcommand("report")->description("Summarize evaluated runs");

  CLI11_PARSE(app, argc, argv);
  const std::string command = app.get_subcommands().front()->get_name();

  nlohmann::json o = nlohmann::json::object();
  if (seed) o["seed"] = *seed;
  if (method) o["method"] = *method;
  if (rollout) o["rollout"] = *rollout;
  if (latent_source) o["latent_source"] = *latent_source;
  if (lambda) o["lambda"] = *lambda;

  const mpur_status s = mpur_run(command.c_str(), config.c_str(), out.c_str(), o.dump().c_str());
  if (s != MPUR_OK) {
    std::fprintf(stderr, "mpur %s: %s error: %s\n", command.c_str(), mpur_status_name(s), mpur_last_error());
    return static_cast<int>(s) > 100 ? 100 : static_cast<int>(s);
  }
  return 0;
}
