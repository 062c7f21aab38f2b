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
#include <string>
#include <vector>

#include "mpur/dynamics.hpp"
#include "mpur/env.hpp"
#include "mpur/uncertainty.hpp"

namespace mpur {

struct PolicyConfig {
  std::size_t window = 2;
  std::size_t channels = 16;
  std::size_t hidden = 64;
  double init_sigma = 0.1;  // normalized action units
};

enum class PolicyMethod { kMpur, kMper, kVg, kSvg, kIl1, kNoop };
enum class LatentSource { kPrior, kPosterior };
enum class ActMode { kMean, kSample };

std::string method_name(PolicyMethod m);
PolicyMethod parse_method(const std::string& name);
std::string latent_source_name(LatentSource s);
LatentSource parse_latent_source(const std::string& name);

struct ActionDistribution {
  Var mean;   // [B,2] normalized
  Var sigma;  // [B,2] > 0
};

// Gaussian policy over normalized actions. Mean and samples are clipped to
// the feasible box.
class PolicyNetwork {
 public:
  PolicyNetwork(const PolicyConfig& cfg, const GridConfig& grid, const NormStats& norm,
                const ActionBounds& bounds, Rng& rng);
  // Outputs (0, 0) in raw units whatever the input.
  static PolicyNetwork zero_action(const GridConfig& grid, const NormStats& norm, const ActionBounds& bounds);

  ActionDistribution distribution(const Window& w) const;
  Var sample(const Window& w, Rng& rng) const;
  Var mean_action(const Window& w) const;

  // Raw action for the latest state of a rendered window; clamped to what
  // the environment accepts for `velocity`.
  Action act(const std::deque<State>& window, Vec2 velocity, ActMode mode, Rng* rng = nullptr) const;

  bool is_zero_action() const { return zero_; }
  const PolicyConfig& config() const { return cfg_; }
  const NormStats& norm() const { return norm_; }
  const ActionBounds& bounds() const { return bounds_; }
  const GridConfig& grid() const { return grid_; }
  nn::ParamList parameters() const;
  Container save() const;
  static PolicyNetwork load(const Container& c);
  PolicyNetwork clone() const { return load(save()); }

 private:
  PolicyConfig cfg_;
  GridConfig grid_;
  NormStats norm_;
  ActionBounds bounds_;
  bool zero_ = false;
  Tensor lo_, hi_;  // normalized box [1,2]
  nn::Conv2d c1_, c2_;
  nn::Linear fc_, u_fc_, h_fc_, mu_, sigma_;

  Var clamp_box(const Var& a) const;
};

// Normalized batch-1 window from rendered states.
Window window_from_states(const std::deque<State>& states, const NormStats& norm);

Controller policy_controller(const PolicyNetwork& policy, ActMode mode = ActMode::kMean, std::uint64_t seed = 0);

// ---- objectives ----

struct PolicyObjective {
  std::size_t rollout = 10;
  double lambda = 0.5;
  LatentSource latents = LatentSource::kPrior;
  std::size_t k_masks = 4;
  CostConfig cost;
  RoadGeometry road;
  const CostPredictor* cost_head = nullptr;  // analytic costs when null
};

// Differentiable C = proximity + lane_weight * lane per row -> [B]. The
// proximity mask size follows the predicted speed but is not differentiated.
Var policy_cost(const Prediction& p, const std::vector<double>& ego_length, const std::vector<double>& ego_width,
                const NormStats& norm, const GridConfig& grid, const PolicyObjective& obj);

// mean_b(cost + lambda * normalized U), one rollout step.
Var step_objective(const Var& cost, const Var& u_norm, double lambda);

// Per-row L2 distance over normalized image and u -> [B].
Var state_distance(const Prediction& p, const Var& frame, const Var& u);

// Negative log-likelihood of `a` under N(mean, diag sigma^2) -> [B].
Var gaussian_nll(const ActionDistribution& d, const Var& a);

struct PolicyLoss {
  Var total;
  double cost = 0.0;    // mean per step
  double u_norm = 0.0;  // mean per step
  double u_raw = 0.0;   // mean per step, 0 when not computed
};

PolicyLoss mpur_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                     const UncertaintyCalibration* calib, const PolicyObjective& obj, Rng& rng,
                     std::uint64_t mask_seed);
PolicyLoss vg_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                   const PolicyObjective& obj, Rng& rng);
PolicyLoss svg_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                    const PolicyObjective& obj, Rng& rng);
PolicyLoss mper_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                     const PolicyObjective& obj, Rng& rng);
PolicyLoss il1_loss(const PolicyNetwork& policy, const ModelBatch& batch);

// ---- training ----

struct PolicyTrainConfig {
  PolicyMethod method = PolicyMethod::kMpur;
  PolicyConfig net;
  PolicyObjective objective;
  ActionBounds bounds;
  double lr = 1e-4;
  std::size_t batch = 16;
  std::size_t updates = 2000;
  std::size_t eval_every = 200;
  std::size_t val_batches = 2;
  double grad_clip = 0.0;
};

struct PolicyCurvePoint {
  std::size_t update = 0;
  double train_loss = 0.0;
  double train_cost = 0.0;
  double train_u = 0.0;
  double val_loss = 0.0;
};

std::string policy_curve_csv(const std::vector<PolicyCurvePoint>& curve);

struct TrainedPolicy {
  PolicyNetwork policy;
  std::vector<PolicyCurvePoint> curve;
};

// Optimizes only the policy; the model is used through a frozen copy.
TrainedPolicy train_policy(const ForwardModel& model, const UncertaintyCalibration* calib,
                           const BatchSource& source, const PolicyTrainConfig& cfg, std::uint64_t seed);

// Rollout actions from the policy mean, for uncertainty diagnostics.
RolloutActions policy_actions(const PolicyNetwork& policy);

}  // namespace mpur
