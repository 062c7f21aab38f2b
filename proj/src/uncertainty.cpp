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

#include "mpur/uncertainty.hpp"

#include <cmath>
#include <cstdio>

#include "mpur/error.hpp"
#include "mpur/rng.hpp"

namespace mpur {

namespace {

constexpr std::size_t kMinCalibrationSamples = 30;

Var stack_replicas(const Var& x, std::size_t k, std::size_t b) {
  return reshape(slice(x, 0, b, k * b), {k, b, (x.size() / x.dim(0))});
}

}  // namespace

Var ensemble_trace_variance(const Var& stacked) {
  if (stacked.rank() < 2) throw Error(ErrorCode::kShapeMismatch, "ensemble_trace_variance: need [K,B,...]");
  if (stacked.dim(0) < 2) throw Error(ErrorCode::kInvalidArgument, "ensemble_trace_variance: need K >= 2");
  const std::size_t b = stacked.dim(1);
  return sum_rows(reshape(variance_axis0(stacked), {b, stacked.size() / (stacked.dim(0) * b)}));
}

UncertainStep predict_with_uncertainty(const ForwardModel& model, const Window& w, const Var& action,
                                       const Var* z, std::size_t k, std::uint64_t mask_seed) {
  if (k < 2) throw Error(ErrorCode::kInvalidArgument, "uncertainty needs at least 2 dropout masks");
  const std::size_t b = w.batch();
  const Window wt = w.tiled(k + 1);
  const Var at = tile0(action, k + 1);
  Var zt;
  if (z) zt = tile0(*z, k + 1);
  const DropoutSpec drop{mask_seed, model.config().dropout, b, 1};
  const Prediction p = model.predict(wt, at, z ? &zt : nullptr, drop);
  UncertainStep out;
  out.clean.image = slice(p.image, 0, 0, b);
  out.clean.u = slice(p.u, 0, 0, b);
  out.u_raw = add(ensemble_trace_variance(stack_replicas(p.image, k, b)),
                  ensemble_trace_variance(stack_replicas(p.u, k, b)));
  return out;
}

Container UncertaintyCalibration::save() const {
  Container c;
  c.meta["kind"] = "uncertainty_calibration";
  c.tensors["mean"] = Tensor({mean.size()}, mean);
  c.tensors["stddev"] = Tensor({stddev.size()}, stddev);
  return c;
}

UncertaintyCalibration UncertaintyCalibration::load(const Container& c) {
  if (c.meta.value("kind", "") != "uncertainty_calibration")
    throw Error(ErrorCode::kParse, "container is not an uncertainty calibration");
  UncertaintyCalibration u;
  const Tensor& m = c.at("mean");
  const Tensor& s = c.at("stddev");
  if (m.size() != s.size()) throw Error(ErrorCode::kShapeMismatch, "calibration mean/stddev lengths differ");
  u.mean.assign(m.data(), m.data() + m.size());
  u.stddev.assign(s.data(), s.data() + s.size());
  return u;
}

std::string UncertaintyCalibration::csv() const {
  std::string out = "step,mean,stddev\n";
  char buf[96];
  for (std::size_t t = 0; t < mean.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g\n", t + 1, mean[t], stddev[t]);
    out += buf;
  }
  return out;
}

UncertaintyCalibration calibrate(const ForwardModel& model, const BatchSource& source,
                                 std::size_t horizon, const UncertaintyConfig& cfg,
                                 std::uint64_t seed) {
  if (horizon == 0) throw Error(ErrorCode::kInvalidArgument, "calibrate: horizon must be positive");
  if (cfg.calibration_samples < kMinCalibrationSamples)
    throw Error(ErrorCode::kStatistics, "calibrate: fewer than 30 samples requested");
  Rng batch_rng(substream_seed(seed, "calibration_batches"));
  Rng latent_rng(substream_seed(seed, "calibration_latents"));
  std::vector<std::vector<double>> values(horizon);
  std::size_t batch_index = 0;
  while (values[0].size() < cfg.calibration_samples) {
    const std::size_t want = std::min(cfg.calibration_batch, cfg.calibration_samples - values[0].size());
    const ModelBatch batch = source(Split::kTrain, want, horizon, batch_rng);
    const std::size_t b = batch.window.batch();
    if (b == 0) break;
    Window w = batch.window;
    for (std::size_t t = 0; t < horizon; ++t) {
      const std::uint64_t mask_seed = cfg.share_masks_across_steps
                                          ? hash_combine(seed, batch_index)
                                          : hash_combine(hash_combine(seed, batch_index), t);
      Var z;
      if (model.mode == ModelMode::kStochastic)
        z = Var::constant(prior_sample(b, model.config().n_z, latent_rng));
      const UncertainStep s = predict_with_uncertainty(model, w, batch.actions[t], z.defined() ? &z : nullptr,
                                                       cfg.k_calibration, mask_seed);
      const Tensor& u = s.u_raw.value();
      values[t].insert(values[t].end(), u.data(), u.data() + u.size());
      w = w.shifted(stop_gradient(s.clean.image), stop_gradient(s.clean.u));
    }
    ++batch_index;
  }
  if (values[0].size() < kMinCalibrationSamples)
    throw Error(ErrorCode::kStatistics, "calibrate: fewer than 30 samples available");
  UncertaintyCalibration out;
  for (const auto& v : values) {
    double m = 0.0;
    for (double x : v) m += x;
    m /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - m) * (x - m);
    var /= static_cast<double>(v.size() - 1);
    out.mean.push_back(m);
    // A degenerate spread would make the hinge explode; floor it.
    out.stddev.push_back(std::max(std::sqrt(var), 1e-8));
  }
  return out;
}

Var normalized_u(const Var& raw, std::size_t step, const UncertaintyCalibration& calib) {
  if (step == 0 || step > calib.steps())
    throw Error(ErrorCode::kInvalidArgument, "normalized_u: step outside calibrated horizon");
  return relu(scale(add_scalar(raw, -calib.mean[step - 1]), 1.0 / calib.stddev[step - 1]));
}

double normalized_u(double raw, std::size_t step, const UncertaintyCalibration& calib) {
  if (step == 0 || step > calib.steps())
    throw Error(ErrorCode::kInvalidArgument, "normalized_u: step outside calibrated horizon");
  return std::max(0.0, (raw - calib.mean[step - 1]) / calib.stddev[step - 1]);
}

CovarianceTraces decompose_covariance(const std::function<std::vector<double>(std::size_t, std::size_t)>& f,
                                      std::size_t k, std::size_t m) {
  if (k < 2 || m < 1) throw Error(ErrorCode::kInvalidArgument, "decompose_covariance: need K >= 2 and M >= 1");
  std::vector<std::vector<double>> grid(k * m);
  for (std::size_t i = 0; i < k; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      grid[i * m + j] = f(i, j);
      if (grid[i * m + j].size() != grid[0].size())
        throw Error(ErrorCode::kShapeMismatch, "decompose_covariance: predictions differ in size");
    }
  const std::size_t d = grid[0].size();
  const double kd = static_cast<double>(k), md = static_cast<double>(m);
  CovarianceTraces out;
  std::vector<double> cond_mean(k), all(k * m);
  for (std::size_t c = 0; c < d; ++c) {
    double grand = 0.0;
    for (std::size_t i = 0; i < k; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < m; ++j) s += grid[i * m + j][c];
      cond_mean[i] = s / md;
      grand += s;
    }
    grand /= kd * md;
    for (std::size_t i = 0; i < k; ++i) {
      out.epistemic += (cond_mean[i] - grand) * (cond_mean[i] - grand) / kd;
      for (std::size_t j = 0; j < m; ++j) {
        const double x = grid[i * m + j][c];
        out.aleatoric += (x - cond_mean[i]) * (x - cond_mean[i]) / (kd * md);
        out.total += (x - grand) * (x - grand) / (kd * md);
      }
    }
  }
  return out;
}

CovarianceTraces decompose_covariance(const ForwardModel& model, const Window& w, const Var& action,
                                      std::size_t k, std::size_t m, std::uint64_t seed) {
  if (w.batch() != 1) throw Error(ErrorCode::kShapeMismatch, "decompose_covariance: window batch must be 1");
  if (k < 2 || m < 2) throw Error(ErrorCode::kInvalidArgument, "decompose_covariance: need K >= 2 and M >= 2");
  const std::size_t n = k * m;
  Rng rng(substream_seed(seed, "decomposition_latents"));
  // Row i*m + j uses mask i and latent draw j.
  const Var z = Var::constant(prior_sample(n, model.config().n_z, rng));
  const DropoutSpec drop{hash_combine(seed, 0x6d61736bULL), model.config().dropout, 0, m};
  const Prediction p = model.predict(w.tiled(n), tile0(action, n), &z, drop);
  const std::size_t di = p.image.size() / n, du = p.u.size() / n;
  return decompose_covariance(
      [&](std::size_t i, std::size_t j) {
        const std::size_t r = i * m + j;
        std::vector<double> v(p.image.value().data() + r * di, p.image.value().data() + (r + 1) * di);
        v.insert(v.end(), p.u.value().data() + r * du, p.u.value().data() + (r + 1) * du);
        return v;
      },
      k, m);
}

RolloutUncertainty rollout_uncertainty(const ForwardModel& model, const BatchSource& source, Split split,
                                       std::size_t horizon, std::size_t samples, std::size_t batch,
                                       std::size_t k, std::uint64_t seed, const RolloutActions& actions) {
  if (horizon == 0 || samples == 0 || batch == 0)
    throw Error(ErrorCode::kInvalidArgument, "rollout_uncertainty: horizon, samples and batch must be positive");
  ForwardModel frozen = model.clone();
  frozen.parameters().set_requires_grad(false);
  Rng batch_rng(substream_seed(seed, "rollout_batches"));
  Rng latent_rng(substream_seed(seed, "rollout_latents"));
  Rng action_rng(substream_seed(seed, "rollout_actions"));
  RolloutUncertainty out;
  out.per_step.assign(horizon, 0.0);
  std::size_t done = 0, batch_index = 0;
  while (done < samples) {
    const ModelBatch b = source(split, std::min(batch, samples - done), horizon, batch_rng);
    const std::size_t n = b.window.batch();
    Window w = b.window;
    const std::uint64_t mask_seed = hash_combine(substream_seed(seed, "rollout_masks"), batch_index++);
    for (std::size_t t = 0; t < horizon; ++t) {
      Var z;
      if (frozen.mode == ModelMode::kStochastic)
        z = Var::constant(prior_sample(n, frozen.config().n_z, latent_rng));
      const Var a = stop_gradient(actions(w, t, b, action_rng));
      const UncertainStep s = predict_with_uncertainty(frozen, w, a, z.defined() ? &z : nullptr, k, mask_seed);
      for (double v : s.u_raw.value().values()) out.per_step[t] += v;
      w = w.shifted(s.clean.image, s.clean.u);
    }
    done += n;
  }
  double total = 0.0;
  for (double& v : out.per_step) {
    v /= static_cast<double>(done);
    total += v;
  }
  out.mean_raw_u = total / static_cast<double>(horizon);
  out.samples = done;
  return out;
}

RolloutActions uniform_random_actions(const NormStats& norm, const ActionBounds& bounds) {
  const double lim[2] = {bounds.max_dspeed, bounds.max_dangle};
  return [norm, lim0 = lim[0], lim1 = lim[1]](const Window& w, std::size_t, const ModelBatch&, Rng& rng) {
    const std::size_t b = w.batch();
    Tensor a({b, 2});
    for (std::size_t i = 0; i < b; ++i) {
      const Action raw{rng.uniform(-lim0, lim0), rng.uniform(-lim1, lim1)};
      const Tensor n = normalize_action(raw, norm);
      a[2 * i] = n[0];
      a[2 * i + 1] = n[1];
    }
    return Var::constant(std::move(a));
  };
}

RolloutActions recorded_actions() {
  return [](const Window&, std::size_t t, const ModelBatch& b, Rng&) { return b.actions.at(t); };
}

}  // namespace mpur
