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
#include <functional>
#include <string>
#include <vector>

#include "mpur/dynamics.hpp"

namespace mpur {

struct UncertaintyConfig {
  std::size_t k_masks = 4;              // during policy training
  std::size_t k_calibration = 16;       // calibration and reporting
  std::size_t calibration_samples = 256;
  std::size_t calibration_batch = 32;
  bool share_masks_across_steps = true;
};

// stacked [K, B, ...] -> [B]: per-dimension population variance over K, summed.
Var ensemble_trace_variance(const Var& stacked);

struct UncertainStep {
  Prediction clean;  // replica without dropout, [B,...]
  Var u_raw;         // [B]
};

// Runs one clean replica plus K masked replicas in one batch. Outputs are in
// normalized units, so U sums commensurate image and u dimensions.
UncertainStep predict_with_uncertainty(const ForwardModel& model, const Window& w, const Var& action,
                                       const Var* z, std::size_t k, std::uint64_t mask_seed);

struct UncertaintyCalibration {
  std::vector<double> mean;    // per rollout step 1..T
  std::vector<double> stddev;

  std::size_t steps() const { return mean.size(); }
  Container save() const;
  static UncertaintyCalibration load(const Container& c);
  std::string csv() const;
};

// Rolls the model over training windows with recorded actions and prior
// latents, recording raw U per step. Throws kStatistics below 30 samples.
UncertaintyCalibration calibrate(const ForwardModel& model, const BatchSource& source,
                                 std::size_t horizon, const UncertaintyConfig& cfg,
                                 std::uint64_t seed);

// [(U - mean_t) / std_t]_+ for 1-based step t.
Var normalized_u(const Var& raw, std::size_t step, const UncertaintyCalibration& calib);
double normalized_u(double raw, std::size_t step, const UncertaintyCalibration& calib);

struct CovarianceTraces {
  double epistemic = 0.0;
  double aleatoric = 0.0;
  double total = 0.0;
};

// Traces of the conditional-covariance decomposition on a K x M grid of
// (mask, latent) pairs; f(k, m) returns one flattened prediction. M = 1 is
// allowed here (epistemic only).
CovarianceTraces decompose_covariance(const std::function<std::vector<double>(std::size_t, std::size_t)>& f,
                                      std::size_t k, std::size_t m);

// Same for a model at one window (batch 1): masks from `seed`, latents from
// the prior. Needs K >= 2 and M >= 2.
CovarianceTraces decompose_covariance(const ForwardModel& model, const Window& w, const Var& action,
                                      std::size_t k, std::size_t m, std::uint64_t seed);

}  // namespace mpur

namespace mpur {

// Normalized action [B,2] for rollout step t (0-based).
using RolloutActions = std::function<Var(const Window& w, std::size_t t, const ModelBatch& batch, Rng& rng)>;

struct RolloutUncertainty {
  double mean_raw_u = 0.0;
  std::vector<double> per_step;
  std::size_t samples = 0;
};

// Mean raw U along model rollouts (prior latents, clean replica driving)
// from windows of `split`, actions chosen by `actions`.
RolloutUncertainty rollout_uncertainty(const ForwardModel& model, const BatchSource& source, Split split,
                                       std::size_t horizon, std::size_t samples, std::size_t batch,
                                       std::size_t k, std::uint64_t seed, const RolloutActions& actions);

// Uniform draws inside the feasible action box, in normalized units.
RolloutActions uniform_random_actions(const NormStats& norm, const ActionBounds& bounds);
RolloutActions recorded_actions();

}  // namespace mpur
