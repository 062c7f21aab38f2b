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
#include <functional>
#include <string>
#include <vector>

#include "mpur/autodiff.hpp"
#include "mpur/container.hpp"
#include "mpur/data.hpp"
#include "mpur/nn.hpp"
#include "mpur/optim.hpp"

namespace mpur {

struct ModelConfig {
  std::size_t window = 2;
  std::size_t conv1 = 16;
  std::size_t conv2 = 32;
  std::size_t hidden = 64;
  std::size_t n_z = 8;
  double dropout = 0.1;
  double p_u = 0.5;
};

enum class ModelMode { kDeterministic, kStochastic };

// Dropout on every hidden layer. Rows [0, clean_rows) pass through untouched,
// which lets a clean replica share a batch with masked ones.
struct DropoutSpec {
  std::uint64_t seed = 0;
  double rate = 0.0;
  std::size_t clean_rows = 0;
  std::size_t rows_per_mask = 1;  // consecutive rows sharing one mask
};

Var apply_dropout_rows(const Var& x, const DropoutSpec& d, std::uint64_t layer);

// Normalized frames [B,3,H,W] and kinematic vectors [B,4], oldest first.
struct Window {
  std::vector<Var> frames;
  std::vector<Var> us;

  std::size_t batch() const { return frames.at(0).dim(0); }
  Window shifted(const Var& frame, const Var& u) const;
  Window tiled(std::size_t k) const;
};

struct Prediction {
  Var image;  // [B,3,H,W] normalized
  Var u;      // [B,4] normalized
};

struct PosteriorParams {
  Var mu;     // [B,n_z]
  Var sigma;  // [B,n_z], > 0
};

// ---- normalization ----
Tensor normalize_image(const Tensor& image, const NormStats& n);  // [3,H,W] or [B,3,H,W]
Tensor normalize_u(const std::array<double, 4>& u, const NormStats& n);
Tensor normalize_action(const Action& a, const NormStats& n);
Action denormalize_action(const double* a, const NormStats& n);
// Graph versions used inside rollouts.
Var denormalize_image(const Var& image, const NormStats& n);
Var denormalize_u(const Var& u, const NormStats& n);

struct ModelBatch {
  Window window;
  std::vector<Var> actions;      // horizon x [B,2]
  std::vector<Var> next_frames;  // horizon x [B,3,H,W]
  std::vector<Var> next_us;      // horizon x [B,4]
  std::vector<std::vector<CostVector>> costs;  // horizon x B
  std::vector<double> ego_length;
  std::vector<double> ego_width;

  std::size_t horizon() const { return actions.size(); }
};

ModelBatch make_batch(const std::vector<Transition>& ts, const NormStats& norm);

class ForwardModel {
 public:
  ForwardModel(const ModelConfig& cfg, const GridConfig& grid, const NormStats& norm, Rng& rng);

  // Next-state prediction. z is ignored in deterministic mode and may be null.
  Prediction predict(const Window& w, const Var& action, const Var* z, const DropoutSpec& drop) const;
  PosteriorParams posterior(const Window& w, const Var& next_frame, const Var& next_u) const;

  ModelMode mode = ModelMode::kDeterministic;

  const ModelConfig& config() const { return cfg_; }
  const GridConfig& grid() const { return grid_; }
  const NormStats& norm() const { return norm_; }

  nn::ParamList parameters() const;
  nn::ParamList prediction_parameters() const;
  nn::ParamList posterior_parameters() const;

  Container save() const;
  static ForwardModel load(const Container& c);
  // Copies share parameter nodes; clone() makes an independent model.
  ForwardModel clone() const { return load(save()); }

 private:
  ModelConfig cfg_;
  GridConfig grid_;
  NormStats norm_;
  std::size_t h1_, w1_, h2_, w2_;
  nn::Conv2d enc_c1_, enc_c2_;
  nn::Linear enc_fc_, u_fc1_, u_fc2_, act_fc1_, act_fc2_, z_fc_;
  nn::Linear dec_fc_;
  nn::ConvTranspose2d dec_t1_, dec_t2_;
  nn::Linear uh_fc1_, uh_fc2_;
  nn::Conv2d post_c1_, post_c2_;
  nn::Linear post_fc_, post_u_, post_mu_, post_sigma_;
};

// ---- latent variables ----
Tensor prior_sample(std::size_t batch, std::size_t n_z, Rng& rng);
// Per row: with probability p_u a prior draw, else mu + sigma * eps.
Var sample_latent(const PosteriorParams& p, double p_u, Rng& rng);
// 0.5 * sum_j (mu^2 + sigma^2 - log sigma^2 - 1) per row -> [B].
Var kl_diag_gaussian(const PosteriorParams& p);

// Per-row squared error of normalized image and u -> [B].
Var reconstruction_error(const Prediction& p, const Var& frame, const Var& u);

struct ModelLoss {
  Var total;
  double recon = 0.0;  // batch mean, per step
  double kl = 0.0;
};

// Unrolls over the batch horizon feeding predictions back. Deterministic
// models use z = 0 semantics (no latent path) and no KL.
ModelLoss model_loss(const ForwardModel& model, const ModelBatch& batch, double beta, Rng& rng,
                     const DropoutSpec& drop);

struct ModelTrainConfig {
  double lr = 1e-4;
  std::size_t batch = 64;
  std::size_t unroll = 20;
  std::size_t deterministic_updates = 200000;
  std::size_t stochastic_updates = 200000;
  double beta = 1e-3;
  std::size_t eval_every = 1000;
  std::size_t val_batches = 4;
  double grad_clip = 0.0;
};

struct CurvePoint {
  std::string phase;
  std::size_t update = 0;
  double train_loss = 0.0;
  double val_recon = 0.0;
  double val_kl = 0.0;
};

std::string curves_csv(const std::vector<CurvePoint>& curve);

// Supplies batches of `size` transitions with horizon `horizon` from a split.
using BatchSource = std::function<ModelBatch(Split split, std::size_t size, std::size_t horizon, Rng& rng)>;

BatchSource dataset_batch_source(const TrajectoryDataset& data, std::size_t window,
                                 std::size_t max_horizon, const GridConfig& grid,
                                 const CostConfig& costs, const NormStats& norm);

struct TrainedModels {
  ForwardModel deterministic;
  ForwardModel stochastic;
  std::vector<CurvePoint> curve;
};

// Phase 1 trains in deterministic mode; phase 2 continues from it in
// stochastic mode with the posterior. A non-finite loss restores the last
// good parameters and throws. `initial` is copied, not modified.
TrainedModels train_forward_model(const ForwardModel& initial, const BatchSource& source,
                                  const ModelTrainConfig& cfg, std::uint64_t seed,
                                  const std::function<void(const std::string&, const ForwardModel&)>& on_phase_end = {});

// Mean validation reconstruction and KL over fixed batches.
std::pair<double, double> validation_loss(const ForwardModel& model, const BatchSource& source,
                                          const ModelTrainConfig& cfg, std::uint64_t seed);

// ---- cost head ----
struct CostPredictorConfig {
  std::size_t channels = 8;
  std::size_t hidden = 32;
  double lr = 1e-3;
  std::size_t updates = 1500;
  std::size_t batch = 32;
};

class CostPredictor {
 public:
  CostPredictor(const CostPredictorConfig& cfg, const GridConfig& grid, Rng& rng);
  // Normalized image [B,3,H,W] and u [B,4] -> [B,2] (proximity, lane) in [0,1].
  Var operator()(const Var& image, const Var& u) const;
  nn::ParamList parameters() const;
  Container save() const;
  static CostPredictor load(const Container& c);

 private:
  CostPredictorConfig cfg_;
  GridConfig grid_;
  nn::Conv2d c1_, c2_, c3_;
  nn::Linear fc_, u_fc_, out_;
};

struct CostHeadReport {
  double val_mse = 0.0;
  double pearson = 0.0;
};

// Trains on recorded states against the analytic costs.
CostPredictor train_cost_predictor(const BatchSource& source, const CostPredictorConfig& cfg,
                                   const GridConfig& grid, std::uint64_t seed,
                                   CostHeadReport* report = nullptr);

}  // namespace mpur
