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

#include "mpur/policy.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

#include "checkpoint_util.hpp"
#include "mpur/error.hpp"
#include "mpur/rng.hpp"

namespace mpur {

using detail::json;

std::string method_name(PolicyMethod m) {
  switch (m) {
    case PolicyMethod::kMpur: return "mpur";
    case PolicyMethod::kMper: return "mper";
    case PolicyMethod::kVg: return "vg";
    case PolicyMethod::kSvg: return "svg";
    case PolicyMethod::kIl1: return "il1";
    case PolicyMethod::kNoop: return "noop";
  }
  return "?";
}

PolicyMethod parse_method(const std::string& name) {
  for (PolicyMethod m : {PolicyMethod::kMpur, PolicyMethod::kMper, PolicyMethod::kVg, PolicyMethod::kSvg,
                         PolicyMethod::kIl1, PolicyMethod::kNoop})
    if (method_name(m) == name) return m;
  throw Error(ErrorCode::kConfig, "unknown policy method '" + name + "'");
}

std::string latent_source_name(LatentSource s) { return s == LatentSource::kPrior ? "prior" : "posterior"; }

LatentSource parse_latent_source(const std::string& name) {
  if (name == "prior") return LatentSource::kPrior;
  if (name == "posterior") return LatentSource::kPosterior;
  throw Error(ErrorCode::kConfig, "unknown latent source '" + name + "'");
}

// ---- network ----

namespace {

Tensor rows_of(const Tensor& row, std::size_t b) {
  Tensor t({b, row.size()});
  for (std::size_t i = 0; i < b; ++i) std::copy(row.data(), row.data() + row.size(), t.data() + i * row.size());
  return t;
}

}  // namespace

PolicyNetwork::PolicyNetwork(const PolicyConfig& cfg, const GridConfig& grid, const NormStats& norm,
                             const ActionBounds& bounds, Rng& rng)
    : cfg_(cfg), grid_(grid), norm_(norm), bounds_(bounds) {
  if (cfg.window == 0 || cfg.channels == 0 || cfg.hidden == 0 || !(cfg.init_sigma > 0.0))
    throw Error(ErrorCode::kConfig, "policy: window, channels, hidden and init_sigma must be positive");
  const double lim[2] = {bounds.max_dspeed, bounds.max_dangle};
  lo_ = Tensor({1, 2});
  hi_ = Tensor({1, 2});
  for (int j = 0; j < 2; ++j) {
    lo_[j] = (-lim[j] - norm.action_mean[j]) / norm.action_std[j];
    hi_[j] = (lim[j] - norm.action_mean[j]) / norm.action_std[j];
  }
  const std::size_t h1 = nn::conv_out_size(grid.height, 3, 2, 1), w1 = nn::conv_out_size(grid.width, 3, 2, 1);
  const std::size_t h2 = nn::conv_out_size(h1, 3, 2, 1), w2 = nn::conv_out_size(w1, 3, 2, 1);
  c1_ = nn::Conv2d::make(3 * cfg.window, cfg.channels, 3, 2, 1, rng);
  c2_ = nn::Conv2d::make(cfg.channels, cfg.channels, 3, 2, 1, rng);
  fc_ = nn::Linear::make(cfg.channels * h2 * w2, cfg.hidden, rng);
  u_fc_ = nn::Linear::make(4 * cfg.window, cfg.hidden, rng);
  h_fc_ = nn::Linear::make(cfg.hidden, cfg.hidden, rng);
  mu_ = nn::Linear::make(cfg.hidden, 2, rng, 0.1);
  sigma_ = nn::Linear::make(cfg.hidden, 2, rng, 0.1);
  const double inv_softplus = std::log(std::expm1(cfg.init_sigma));
  for (double& v : sigma_.bias.mutable_value().values()) v = inv_softplus;
}

PolicyNetwork PolicyNetwork::zero_action(const GridConfig& grid, const NormStats& norm, const ActionBounds& bounds) {
  PolicyConfig c;
  c.channels = 1;
  c.hidden = 1;
  Rng rng(0);
  PolicyNetwork p(c, grid, norm, bounds, rng);
  p.zero_ = true;
  return p;
}

Var PolicyNetwork::clamp_box(const Var& a) const {
  // a - [a - hi]_+ + [lo - a]_+ leaves in-box values bit-exact.
  const std::size_t b = a.dim(0);
  const Tensor lo = rows_of(lo_, b);
  Tensor neg_hi = rows_of(hi_, b);
  for (double& v : neg_hi.values()) v = -v;
  return add(sub(a, relu(add_const(a, neg_hi))), relu(add_const(neg(a), lo)));
}

ActionDistribution PolicyNetwork::distribution(const Window& w) const {
  if (w.frames.size() != cfg_.window) throw Error(ErrorCode::kShapeMismatch, "policy: window length mismatch");
  const std::size_t b = w.batch();
  if (zero_) {
    Tensor m({b, 2});
    for (std::size_t i = 0; i < b; ++i)
      for (int j = 0; j < 2; ++j) m[2 * i + j] = -norm_.action_mean[j] / norm_.action_std[j];
    return {Var::constant(std::move(m)), Var::constant(Tensor({b, 2}, 1e-4))};
  }
  Var e = relu(c2_(relu(c1_(concat(w.frames, 1)))));
  e = fc_(reshape(e, {b, e.size() / b}));
  Var h = relu(add(e, u_fc_(concat(w.us, 1))));
  h = relu(h_fc_(h));
  ActionDistribution d;
  d.mean = clamp_box(mu_(h));
  d.sigma = add_scalar(softplus(sigma_(h)), 1e-4);
  return d;
}

Var PolicyNetwork::sample(const Window& w, Rng& rng) const {
  const ActionDistribution d = distribution(w);
  if (zero_) return d.mean;
  const Tensor eps = rng.normal(d.mean.shape());
  return clamp_box(add(d.mean, mul_const(d.sigma, eps)));
}

Var PolicyNetwork::mean_action(const Window& w) const { return distribution(w).mean; }

Action PolicyNetwork::act(const std::deque<State>& window, Vec2 velocity, ActMode mode, Rng* rng) const {
  if (zero_) return clamp_action(velocity, Action{0.0, 0.0}, bounds_);
  const Window w = window_from_states(window, norm_);
  Var a;
  if (mode == ActMode::kSample) {
    if (!rng) throw Error(ErrorCode::kInvalidArgument, "policy: sample mode needs an rng");
    a = sample(w, *rng);
  } else {
    a = mean_action(w);
  }
  return clamp_action(velocity, denormalize_action(a.value().data(), norm_), bounds_);
}

nn::ParamList PolicyNetwork::parameters() const {
  nn::ParamList p;
  p.add("policy.conv1", c1_);
  p.add("policy.conv2", c2_);
  p.add("policy.fc", fc_);
  p.add("policy.u_fc", u_fc_);
  p.add("policy.hidden", h_fc_);
  p.add("policy.mu", mu_);
  p.add("policy.sigma", sigma_);
  return p;
}

Container PolicyNetwork::save() const {
  Container c = detail::params_container(parameters());
  c.meta = {{"kind", "policy"},
            {"window", cfg_.window},
            {"channels", cfg_.channels},
            {"hidden", cfg_.hidden},
            {"init_sigma", cfg_.init_sigma},
            {"zero_action", zero_},
            {"bounds", {bounds_.max_dspeed, bounds_.max_dangle, bounds_.min_speed}},
            {"grid", detail::grid_json(grid_)},
            {"norm", detail::norm_json(norm_)}};
  return c;
}

PolicyNetwork PolicyNetwork::load(const Container& c) {
  if (c.meta.value("kind", "") != "policy") throw Error(ErrorCode::kParse, "container does not hold a policy");
  PolicyConfig cfg;
  cfg.window = c.meta.at("window");
  cfg.channels = c.meta.at("channels");
  cfg.hidden = c.meta.at("hidden");
  cfg.init_sigma = c.meta.at("init_sigma");
  const json& b = c.meta.at("bounds");
  const ActionBounds bounds{b.at(0), b.at(1), b.at(2)};
  Rng rng(0);
  PolicyNetwork p(cfg, detail::grid_from_json(c.meta.at("grid")), detail::norm_from_json(c.meta.at("norm")), bounds,
                  rng);
  p.zero_ = c.meta.at("zero_action");
  detail::load_params(p.parameters(), c);
  return p;
}

Window window_from_states(const std::deque<State>& states, const NormStats& norm) {
  Window w;
  for (const State& s : states) {
    Tensor img = normalize_image(s.image, norm);
    const Shape sh = img.shape();
    w.frames.push_back(Var::constant(img.reshape({1, sh[0], sh[1], sh[2]})));
    w.us.push_back(Var::constant(normalize_u(s.u, norm).reshape({1, 4})));
  }
  return w;
}

Controller policy_controller(const PolicyNetwork& policy, ActMode mode, std::uint64_t seed) {
  auto rng = std::make_shared<Rng>(seed);
  return [policy, mode, rng](const ReplayEpisode& ep) {
    return policy.act(ep.window(), ep.ego().velocity, mode, rng.get());
  };
}

RolloutActions policy_actions(const PolicyNetwork& policy) {
  return [policy](const Window& w, std::size_t, const ModelBatch&, Rng&) {
    return stop_gradient(policy.mean_action(w));
  };
}

// ---- objectives ----

Var policy_cost(const Prediction& p, const std::vector<double>& ego_length, const std::vector<double>& ego_width,
                const NormStats& norm, const GridConfig& grid, const PolicyObjective& obj) {
  const std::size_t b = p.image.dim(0), plane = grid.height * grid.width;
  if (ego_length.size() != b || ego_width.size() != b)
    throw Error(ErrorCode::kShapeMismatch, "policy_cost: ego sizes do not match the batch");
  Var prox, lane;
  if (obj.cost_head) {
    const Var out = (*obj.cost_head)(p.image, p.u);
    prox = reshape(slice(out, 1, 0, 1), {b});
    lane = reshape(slice(out, 1, 1, 1), {b});
  } else {
    const Var img = clamp(denormalize_image(p.image, norm), 0.0, 1.0);
    // Mask extent uses the predicted speed as a constant.
    const Tensor u = denormalize_u(stop_gradient(p.u), norm).value();
    Tensor pm({b, plane}), lm({b, plane});
    for (std::size_t i = 0; i < b; ++i) {
      const std::array<double, 4> ui{u[4 * i], u[4 * i + 1], u[4 * i + 2], u[4 * i + 3]};
      const Tensor a = proximity_mask(speed_mps(ui, obj.road.dt), ego_length[i], ego_width[i], obj.road, grid,
                                      obj.cost);
      const Tensor l = lane_mask(ego_length[i], ego_width[i], grid);
      std::copy(a.data(), a.data() + plane, pm.data() + i * plane);
      std::copy(l.data(), l.data() + plane, lm.data() + i * plane);
    }
    const Var neigh = reshape(slice(img, 1, kNeighborChannel, 1), {b, plane});
    const Var lanes = reshape(slice(img, 1, kLaneChannel, 1), {b, plane});
    prox = masked_max_cost(neigh, pm, obj.cost.smooth_tau);
    lane = masked_max_cost(lanes, lm, obj.cost.smooth_tau);
  }
  return add(prox, scale(lane, obj.cost.lane_weight));
}

Var step_objective(const Var& cost, const Var& u_norm, double lambda) {
  if (!u_norm.defined() || lambda == 0.0) return mean(cost);
  return mean(add(cost, scale(u_norm, lambda)));
}

Var state_distance(const Prediction& p, const Var& frame, const Var& u) {
  const std::size_t b = p.image.dim(0);
  const Var d = concat({reshape(sub(p.image, frame), {b, p.image.size() / b}), sub(p.u, u)}, 1);
  return l2_norm_rows(d);
}

Var gaussian_nll(const ActionDistribution& d, const Var& a) {
  const Var log_sigma = log(d.sigma);
  const Var z2 = mul(square(sub(a, d.mean)), exp(scale(log_sigma, -2.0)));
  const double dims = static_cast<double>(a.size() / a.dim(0));
  return add_scalar(sum_rows(add(scale(z2, 0.5), log_sigma)), 0.5 * dims * std::log(2.0 * std::numbers::pi));
}

namespace {

Var draw_latent(const ForwardModel& model, const Window& w, const ModelBatch& batch, std::size_t t,
                LatentSource source, Rng& rng) {
  if (model.mode != ModelMode::kStochastic) return {};
  if (source == LatentSource::kPrior)
    return Var::constant(prior_sample(w.batch(), model.config().n_z, rng));
  if (batch.horizon() <= t)
    throw Error(ErrorCode::kInvalidArgument, "posterior latents need the recorded future for every step");
  return sample_latent(model.posterior(w, batch.next_frames[t], batch.next_us[t]), 0.0, rng);
}

PolicyLoss rollout_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                        const UncertaintyCalibration* calib, const PolicyObjective& obj, double lambda,
                        Rng& rng, std::uint64_t mask_seed) {
  if (obj.rollout == 0) throw Error(ErrorCode::kConfig, "policy rollout length must be positive");
  if (lambda < 0.0) throw Error(ErrorCode::kConfig, "uncertainty weight must be non-negative");
  if (lambda > 0.0 && !calib) throw Error(ErrorCode::kMissingArtifact, "uncertainty cost needs a calibration");
  if (lambda > 0.0 && calib->steps() < obj.rollout)
    throw Error(ErrorCode::kMissingArtifact, "calibration covers fewer steps than the rollout");
  PolicyLoss out;
  Window w = batch.window;
  const double steps = static_cast<double>(obj.rollout);
  for (std::size_t t = 0; t < obj.rollout; ++t) {
    const Var z = draw_latent(model, w, batch, t, obj.latents, rng);
    const Var a = policy.sample(w, rng);
    Prediction pred;
    Var un;
    if (lambda > 0.0) {
      const UncertainStep s = predict_with_uncertainty(model, w, a, z.defined() ? &z : nullptr, obj.k_masks, mask_seed);
      pred = s.clean;
      un = normalized_u(s.u_raw, t + 1, *calib);
      out.u_raw += mean(s.u_raw).item() / steps;
      out.u_norm += mean(un).item() / steps;
    } else {
      pred = model.predict(w, a, z.defined() ? &z : nullptr, {});
    }
    const Var c = policy_cost(pred, batch.ego_length, batch.ego_width, model.norm(), model.grid(), obj);
    out.cost += mean(c).item() / steps;
    const Var step = step_objective(c, un, lambda);
    out.total = out.total.defined() ? add(out.total, step) : step;
    w = w.shifted(pred.image, pred.u);
  }
  return out;
}

}  // namespace

PolicyLoss mpur_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                     const UncertaintyCalibration* calib, const PolicyObjective& obj, Rng& rng,
                     std::uint64_t mask_seed) {
  return rollout_loss(policy, model, batch, calib, obj, obj.lambda, rng, mask_seed);
}

PolicyLoss vg_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                   const PolicyObjective& obj, Rng& rng) {
  if (model.mode != ModelMode::kDeterministic) throw Error(ErrorCode::kState, "vg needs a deterministic model");
  return rollout_loss(policy, model, batch, nullptr, obj, 0.0, rng, 0);
}

PolicyLoss svg_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                    const PolicyObjective& obj, Rng& rng) {
  if (model.mode != ModelMode::kStochastic) throw Error(ErrorCode::kState, "svg needs a stochastic model");
  PolicyObjective o = obj;
  o.latents = LatentSource::kPrior;
  return rollout_loss(policy, model, batch, nullptr, o, 0.0, rng, 0);
}

PolicyLoss mper_loss(const PolicyNetwork& policy, const ForwardModel& model, const ModelBatch& batch,
                     const PolicyObjective& obj, Rng& rng) {
  if (obj.rollout == 0) throw Error(ErrorCode::kConfig, "policy rollout length must be positive");
  if (batch.horizon() < obj.rollout)
    throw Error(ErrorCode::kInvalidArgument, "mper: recorded future shorter than the rollout");
  PolicyLoss out;
  Window w = batch.window;
  for (std::size_t t = 0; t < obj.rollout; ++t) {
    const Var z = draw_latent(model, w, batch, t, LatentSource::kPosterior, rng);
    const Var a = policy.sample(w, rng);
    const Prediction pred = model.predict(w, a, z.defined() ? &z : nullptr, {});
    const Var step = mean(state_distance(pred, batch.next_frames[t], batch.next_us[t]));
    out.total = out.total.defined() ? add(out.total, step) : step;
    w = w.shifted(pred.image, pred.u);
  }
  return out;
}

PolicyLoss il1_loss(const PolicyNetwork& policy, const ModelBatch& batch) {
  if (batch.horizon() == 0) throw Error(ErrorCode::kInvalidArgument, "il1: batch has no actions");
  PolicyLoss out;
  out.total = mean(gaussian_nll(policy.distribution(batch.window), batch.actions[0]));
  return out;
}

// ---- training ----

std::string policy_curve_csv(const std::vector<PolicyCurvePoint>& curve) {
  std::string out = "update,train_loss,train_cost,train_u,val_loss\n";
  char buf[160];
  for (const PolicyCurvePoint& p : curve) {
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g,%.10g\n", p.update, p.train_loss, p.train_cost, p.train_u,
                  p.val_loss);
    out += buf;
  }
  return out;
}

namespace {

std::size_t batch_horizon(const PolicyTrainConfig& cfg) {
  switch (cfg.method) {
    case PolicyMethod::kMper: return cfg.objective.rollout;
    case PolicyMethod::kIl1: return 1;
    default: return cfg.objective.latents == LatentSource::kPosterior ? cfg.objective.rollout : 1;
  }
}

PolicyLoss method_loss(const PolicyTrainConfig& cfg, const PolicyNetwork& policy, const ForwardModel& model,
                       const UncertaintyCalibration* calib, const ModelBatch& batch, Rng& rng,
                       std::uint64_t mask_seed) {
  switch (cfg.method) {
    case PolicyMethod::kMpur: return mpur_loss(policy, model, batch, calib, cfg.objective, rng, mask_seed);
    case PolicyMethod::kMper: return mper_loss(policy, model, batch, cfg.objective, rng);
    case PolicyMethod::kVg: return vg_loss(policy, model, batch, cfg.objective, rng);
    case PolicyMethod::kSvg: return svg_loss(policy, model, batch, cfg.objective, rng);
    case PolicyMethod::kIl1: return il1_loss(policy, batch);
    case PolicyMethod::kNoop: break;
  }
  throw Error(ErrorCode::kState, "noop policy has no loss");
}

}  // namespace

TrainedPolicy train_policy(const ForwardModel& model, const UncertaintyCalibration* calib,
                           const BatchSource& source, const PolicyTrainConfig& cfg, std::uint64_t seed) {
  if (cfg.method == PolicyMethod::kNoop)
    return {PolicyNetwork::zero_action(model.grid(), model.norm(), cfg.bounds), {}};
  if (cfg.batch == 0) throw Error(ErrorCode::kConfig, "policy training: batch must be positive");
  if (cfg.eval_every == 0) throw Error(ErrorCode::kConfig, "policy training: eval_every must be positive");
  const bool stochastic = model.mode == ModelMode::kStochastic;
  if ((cfg.method == PolicyMethod::kMper || cfg.method == PolicyMethod::kSvg) && !stochastic)
    throw Error(ErrorCode::kState, method_name(cfg.method) + " needs a stochastic model");
  if (cfg.method == PolicyMethod::kVg && stochastic) throw Error(ErrorCode::kState, "vg needs a deterministic model");
  if (cfg.method == PolicyMethod::kMpur && cfg.objective.lambda > 0.0 && !calib)
    throw Error(ErrorCode::kMissingArtifact, "mpur needs an uncertainty calibration");

  ForwardModel frozen = model.clone();
  frozen.parameters().set_requires_grad(false);
  Rng init_rng(substream_seed(seed, "policy-init"));
  PolicyNetwork policy(cfg.net, model.grid(), model.norm(), cfg.bounds, init_rng);
  Rng batch_rng(substream_seed(seed, "policy-batches"));
  Rng noise_rng(substream_seed(seed, "policy-noise"));
  const std::uint64_t mask_root = substream_seed(seed, "policy-masks");
  const std::size_t horizon = batch_horizon(cfg);
  Adam opt(policy.parameters().vars(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.grad_clip});

  auto validate = [&]() {
    Rng vb(substream_seed(seed, "policy-val-batches"));
    Rng vn(substream_seed(seed, "policy-val-noise"));
    double total = 0.0;
    for (std::size_t i = 0; i < cfg.val_batches; ++i) {
      const ModelBatch b = source(Split::kVal, cfg.batch, horizon, vb);
      total += method_loss(cfg, policy, frozen, calib, b, vn, hash_combine(mask_root, ~i)).total.item();
    }
    return cfg.val_batches ? total / static_cast<double>(cfg.val_batches) : 0.0;
  };

  std::vector<PolicyCurvePoint> curve;
  Container last_good = policy.save();
  PolicyCurvePoint acc;
  std::size_t since = 0;
  for (std::size_t u = 1; u <= cfg.updates; ++u) {
    const ModelBatch batch = source(Split::kTrain, cfg.batch, horizon, batch_rng);
    try {
      opt.zero_grad();
      const PolicyLoss loss = method_loss(cfg, policy, frozen, calib, batch, noise_rng, hash_combine(mask_root, u));
      backward(loss.total);
      opt.step();
      acc.train_loss += loss.total.item();
      acc.train_cost += loss.cost;
      acc.train_u += loss.u_norm;
      ++since;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kNumeric) throw;
      detail::load_params(policy.parameters(), last_good);
      throw Error(ErrorCode::kNumeric, method_name(cfg.method) + " policy training diverged at update " +
                                           std::to_string(u) + "; restored the last good parameters (" + e.what() +
                                           ")");
    }
    if (u % cfg.eval_every == 0 || u == cfg.updates) {
      const double n = static_cast<double>(since);
      curve.push_back({u, acc.train_loss / n, acc.train_cost / n, acc.train_u / n, validate()});
      acc = {};
      since = 0;
      last_good = policy.save();
    }
  }
  return {std::move(policy), std::move(curve)};
}

}  // namespace mpur
