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

#include "mpur/dynamics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "mpur/error.hpp"
#include "mpur/rng.hpp"
#include "checkpoint_util.hpp"

namespace mpur {

using nlohmann::json;
using detail::grid_from_json;
using detail::grid_json;
using detail::load_params;
using detail::norm_from_json;
using detail::norm_json;
using detail::params_container;

Var apply_dropout_rows(const Var& x, const DropoutSpec& d, std::uint64_t layer) {
  if (d.rate == 0.0) return x;
  const std::size_t rows = x.dim(0), row = x.size() / rows;
  Tensor mask;
  if (d.rows_per_mask <= 1) {
    mask = DropoutMask{d.seed, d.rate, layer}.scaled(x.shape());
  } else {
    const std::size_t groups = (rows + d.rows_per_mask - 1) / d.rows_per_mask;
    const Tensor g = DropoutMask{d.seed, d.rate, layer}.scaled({groups, row});
    mask = Tensor(x.shape());
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(g.data() + (r / d.rows_per_mask) * row, g.data() + (r / d.rows_per_mask + 1) * row,
                mask.data() + r * row);
  }
  std::fill(mask.data(), mask.data() + std::min(d.clean_rows, x.dim(0)) * row, 1.0);
  return mul_const(x, mask);
}

Window Window::shifted(const Var& frame, const Var& u) const {
  Window w;
  w.frames.assign(frames.begin() + 1, frames.end());
  w.us.assign(us.begin() + 1, us.end());
  w.frames.push_back(frame);
  w.us.push_back(u);
  return w;
}

Window Window::tiled(std::size_t k) const {
  Window w;
  for (const Var& f : frames) w.frames.push_back(tile0(f, k));
  for (const Var& u : us) w.us.push_back(tile0(u, k));
  return w;
}

// ---- normalization ----

namespace {

// Per-element scale/offset tensors broadcasting channel statistics over [B,3,H,W].
std::pair<Tensor, Tensor> image_affine(const Shape& shape, const NormStats& n, bool inverse) {
  Tensor scale(shape), offset(shape);
  const std::size_t plane = shape[2] * shape[3];
  for (std::size_t b = 0; b < shape[0]; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      const double s = inverse ? n.image_std[c] : 1.0 / n.image_std[c];
      const double o = inverse ? n.image_mean[c] : -n.image_mean[c] / n.image_std[c];
      double* ps = scale.data() + (b * 3 + c) * plane;
      double* po = offset.data() + (b * 3 + c) * plane;
      std::fill(ps, ps + plane, s);
      std::fill(po, po + plane, o);
    }
  return {scale, offset};
}

}  // namespace

Tensor normalize_image(const Tensor& image, const NormStats& n) {
  Tensor out = image;
  const std::size_t rank = image.rank();
  if ((rank != 3 && rank != 4) || image.dim(rank - 3) != 3) {
    throw Error(ErrorCode::kShapeMismatch, "normalize_image: expected [..,3,H,W]");
  }
  const std::size_t plane = image.dim(rank - 1) * image.dim(rank - 2);
  const std::size_t batch = rank == 4 ? image.dim(0) : 1;
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      double* p = out.data() + (b * 3 + c) * plane;
      for (std::size_t i = 0; i < plane; ++i) p[i] = (p[i] - n.image_mean[c]) / n.image_std[c];
    }
  return out;
}

Tensor normalize_u(const std::array<double, 4>& u, const NormStats& n) {
  Tensor out({4});
  for (std::size_t j = 0; j < 4; ++j) out[j] = (u[j] - n.u_mean[j]) / n.u_std[j];
  return out;
}

Tensor normalize_action(const Action& a, const NormStats& n) {
  return Tensor({2}, {(a.dspeed - n.action_mean[0]) / n.action_std[0],
                      (a.dangle - n.action_mean[1]) / n.action_std[1]});
}

Action denormalize_action(const double* a, const NormStats& n) {
  return {a[0] * n.action_std[0] + n.action_mean[0], a[1] * n.action_std[1] + n.action_mean[1]};
}

Var denormalize_image(const Var& image, const NormStats& n) {
  auto [s, o] = image_affine(image.shape(), n, true);
  return add_const(mul_const(image, s), o);
}

Var denormalize_u(const Var& u, const NormStats& n) {
  Tensor s(u.shape()), o(u.shape());
  for (std::size_t b = 0; b < u.dim(0); ++b)
    for (std::size_t j = 0; j < 4; ++j) {
      s[b * 4 + j] = n.u_std[j];
      o[b * 4 + j] = n.u_mean[j];
    }
  return add_const(mul_const(u, s), o);
}

ModelBatch make_batch(const std::vector<Transition>& ts, const NormStats& norm) {
  if (ts.empty()) throw Error(ErrorCode::kInvalidArgument, "make_batch: no transitions");
  const std::size_t b = ts.size();
  const std::size_t m = ts[0].window.size();
  const std::size_t horizon = ts[0].actions.size();
  const Shape img_shape = ts[0].window[0].image.shape();
  const std::size_t img = shape_size(img_shape);
  auto frame_tensor = [&](auto get) {
    Tensor t({b, img_shape[0], img_shape[1], img_shape[2]});
    for (std::size_t i = 0; i < b; ++i) {
      const Tensor n = normalize_image(get(ts[i]).image, norm);
      std::copy(n.data(), n.data() + img, t.data() + i * img);
    }
    return Var::constant(std::move(t));
  };
  auto u_tensor = [&](auto get) {
    Tensor t({b, 4});
    for (std::size_t i = 0; i < b; ++i) {
      const Tensor n = normalize_u(get(ts[i]).u, norm);
      std::copy(n.data(), n.data() + 4, t.data() + i * 4);
    }
    return Var::constant(std::move(t));
  };
  ModelBatch out;
  for (const Transition& t : ts) {
    if (t.window.size() != m || t.actions.size() != horizon) {
      throw Error(ErrorCode::kShapeMismatch, "make_batch: ragged transitions");
    }
    out.ego_length.push_back(t.ego_length);
    out.ego_width.push_back(t.ego_width);
  }
  for (std::size_t j = 0; j < m; ++j) {
    out.window.frames.push_back(frame_tensor([j](const Transition& t) -> const State& { return t.window[j]; }));
    out.window.us.push_back(u_tensor([j](const Transition& t) -> const State& { return t.window[j]; }));
  }
  for (std::size_t k = 0; k < horizon; ++k) {
    Tensor a({b, 2});
    std::vector<CostVector> c;
    for (std::size_t i = 0; i < b; ++i) {
      const Tensor n = normalize_action(ts[i].actions[k], norm);
      a[2 * i] = n[0];
      a[2 * i + 1] = n[1];
      c.push_back(ts[i].costs[k]);
    }
    out.actions.push_back(Var::constant(std::move(a)));
    out.next_frames.push_back(frame_tensor([k](const Transition& t) -> const State& { return t.future[k]; }));
    out.next_us.push_back(u_tensor([k](const Transition& t) -> const State& { return t.future[k]; }));
    out.costs.push_back(std::move(c));
  }
  return out;
}

// ---- model ----

namespace {

enum DropLayer : std::uint64_t {
  kEncConv1, kEncConv2, kEncFc, kUFc, kActFc, kDecFc, kDecConv, kUHead
};

}  // namespace

ForwardModel::ForwardModel(const ModelConfig& cfg, const GridConfig& grid, const NormStats& norm,
                           Rng& rng)
    : cfg_(cfg), grid_(grid), norm_(norm) {
  if (cfg.window == 0 || cfg.hidden == 0 || cfg.n_z == 0 || cfg.conv1 == 0 || cfg.conv2 == 0) {
    throw Error(ErrorCode::kConfig, "model: sizes must be positive");
  }
  if (!(cfg.dropout >= 0.0 && cfg.dropout < 1.0) || !(cfg.p_u >= 0.0 && cfg.p_u <= 1.0)) {
    throw Error(ErrorCode::kConfig, "model: dropout must be in [0,1) and p_u in [0,1]");
  }
  h1_ = nn::conv_out_size(grid.height, 3, 2, 1);
  w1_ = nn::conv_out_size(grid.width, 3, 2, 1);
  h2_ = nn::conv_out_size(h1_, 3, 2, 1);
  w2_ = nn::conv_out_size(w1_, 3, 2, 1);
  const std::size_t m = cfg.window, hd = cfg.hidden, flat = cfg.conv2 * h2_ * w2_;
  enc_c1_ = nn::Conv2d::make(3 * m, cfg.conv1, 3, 2, 1, rng);
  enc_c2_ = nn::Conv2d::make(cfg.conv1, cfg.conv2, 3, 2, 1, rng);
  enc_fc_ = nn::Linear::make(flat, hd, rng);
  u_fc1_ = nn::Linear::make(4 * m, hd, rng);
  u_fc2_ = nn::Linear::make(hd, hd, rng);
  act_fc1_ = nn::Linear::make(2, hd, rng);
  act_fc2_ = nn::Linear::make(hd, hd, rng);
  z_fc_ = nn::Linear::make(cfg.n_z, hd, rng);
  dec_fc_ = nn::Linear::make(hd, flat, rng);
  dec_t1_ = nn::ConvTranspose2d::make(cfg.conv2, cfg.conv1, 3, 2, 1, h1_, w1_, rng);
  dec_t2_ = nn::ConvTranspose2d::make(cfg.conv1, 3, 3, 2, 1, grid.height, grid.width, rng);
  uh_fc1_ = nn::Linear::make(hd, hd, rng);
  uh_fc2_ = nn::Linear::make(hd, 4, rng);
  post_c1_ = nn::Conv2d::make(3 * (m + 1), cfg.conv1, 3, 2, 1, rng);
  post_c2_ = nn::Conv2d::make(cfg.conv1, cfg.conv2, 3, 2, 1, rng);
  post_fc_ = nn::Linear::make(flat, hd, rng);
  post_u_ = nn::Linear::make(4 * (m + 1), hd, rng);
  post_mu_ = nn::Linear::make(hd, cfg.n_z, rng);
  post_sigma_ = nn::Linear::make(hd, cfg.n_z, rng);
}

Prediction ForwardModel::predict(const Window& w, const Var& action, const Var* z,
                                 const DropoutSpec& drop) const {
  if (w.frames.size() != cfg_.window || w.us.size() != cfg_.window) {
    throw Error(ErrorCode::kShapeMismatch, "predict: window length " + std::to_string(w.frames.size()) +
                                               ", expected " + std::to_string(cfg_.window));
  }
  const std::size_t b = w.batch();
  if (action.rank() != 2 || action.dim(0) != b || action.dim(1) != 2) {
    throw Error(ErrorCode::kShapeMismatch, "predict: action must be [B,2]");
  }
  auto drop_at = [&](const Var& x, std::uint64_t layer) { return apply_dropout_rows(x, drop, layer); };
  Var e = drop_at(relu(enc_c1_(concat(w.frames, 1))), kEncConv1);
  e = drop_at(relu(enc_c2_(e)), kEncConv2);
  e = drop_at(relu(enc_fc_(reshape(e, {b, cfg_.conv2 * h2_ * w2_}))), kEncFc);
  const Var eu = u_fc2_(drop_at(relu(u_fc1_(concat(w.us, 1))), kUFc));
  const Var ea = act_fc2_(drop_at(relu(act_fc1_(action)), kActFc));
  Var h = add(add(e, eu), ea);
  if (mode == ModelMode::kStochastic) {
    if (!z || z->rank() != 2 || z->dim(0) != b || z->dim(1) != cfg_.n_z) {
      throw Error(ErrorCode::kShapeMismatch, "predict: stochastic mode needs z of shape [B,n_z]");
    }
    h = add(h, z_fc_(*z));
  }
  Var d = drop_at(relu(dec_fc_(h)), kDecFc);
  d = drop_at(relu(dec_t1_(reshape(d, {b, cfg_.conv2, h2_, w2_}))), kDecConv);
  Prediction p;
  p.image = add(dec_t2_(d), w.frames.back());
  p.u = add(uh_fc2_(drop_at(relu(uh_fc1_(h)), kUHead)), w.us.back());
  return p;
}

PosteriorParams ForwardModel::posterior(const Window& w, const Var& next_frame,
                                        const Var& next_u) const {
  const std::size_t b = w.batch();
  std::vector<Var> frames = w.frames, us = w.us;
  frames.push_back(next_frame);
  us.push_back(next_u);
  Var e = relu(post_c1_(concat(frames, 1)));
  e = relu(post_c2_(e));
  e = relu(post_fc_(reshape(e, {b, cfg_.conv2 * h2_ * w2_})));
  const Var h = add(e, relu(post_u_(concat(us, 1))));
  return {post_mu_(h), add_scalar(softplus(post_sigma_(h)), 1e-4)};
}

nn::ParamList ForwardModel::prediction_parameters() const {
  nn::ParamList p;
  p.add("enc_c1", enc_c1_);
  p.add("enc_c2", enc_c2_);
  p.add("enc_fc", enc_fc_);
  p.add("u_fc1", u_fc1_);
  p.add("u_fc2", u_fc2_);
  p.add("act_fc1", act_fc1_);
  p.add("act_fc2", act_fc2_);
  p.add("z_fc", z_fc_);
  p.add("dec_fc", dec_fc_);
  p.add("dec_t1", dec_t1_);
  p.add("dec_t2", dec_t2_);
  p.add("uh_fc1", uh_fc1_);
  p.add("uh_fc2", uh_fc2_);
  return p;
}

nn::ParamList ForwardModel::posterior_parameters() const {
  nn::ParamList p;
  p.add("post_c1", post_c1_);
  p.add("post_c2", post_c2_);
  p.add("post_fc", post_fc_);
  p.add("post_u", post_u_);
  p.add("post_mu", post_mu_);
  p.add("post_sigma", post_sigma_);
  return p;
}

nn::ParamList ForwardModel::parameters() const {
  nn::ParamList p = prediction_parameters();
  for (const auto& [name, v] : posterior_parameters().entries()) p.add(name, v);
  return p;
}

Container ForwardModel::save() const {
  Container c = params_container(parameters());
  c.meta = {{"kind", "forward_model"},
            {"mode", mode == ModelMode::kStochastic ? "stochastic" : "deterministic"},
            {"window", cfg_.window}, {"conv1", cfg_.conv1}, {"conv2", cfg_.conv2},
            {"hidden", cfg_.hidden}, {"n_z", cfg_.n_z}, {"dropout", cfg_.dropout}, {"p_u", cfg_.p_u},
            {"grid", grid_json(grid_)}, {"norm", norm_json(norm_)}};
  return c;
}

ForwardModel ForwardModel::load(const Container& c) {
  if (c.meta.value("kind", "") != "forward_model") {
    throw Error(ErrorCode::kParse, "container does not hold a forward model");
  }
  ModelConfig cfg;
  cfg.window = c.meta.at("window");
  cfg.conv1 = c.meta.at("conv1");
  cfg.conv2 = c.meta.at("conv2");
  cfg.hidden = c.meta.at("hidden");
  cfg.n_z = c.meta.at("n_z");
  cfg.dropout = c.meta.at("dropout");
  cfg.p_u = c.meta.at("p_u");
  Rng rng(0);
  ForwardModel m(cfg, grid_from_json(c.meta.at("grid")), norm_from_json(c.meta.at("norm")), rng);
  m.mode = c.meta.at("mode") == "stochastic" ? ModelMode::kStochastic : ModelMode::kDeterministic;
  load_params(m.parameters(), c);
  return m;
}

// ---- latent ----

Tensor prior_sample(std::size_t batch, std::size_t n_z, Rng& rng) { return rng.normal({batch, n_z}); }

Var sample_latent(const PosteriorParams& p, double p_u, Rng& rng) {
  if (!(p_u >= 0.0 && p_u <= 1.0)) throw Error(ErrorCode::kInvalidArgument, "sample_latent: p_u outside [0,1]");
  const std::size_t b = p.mu.dim(0), nz = p.mu.dim(1);
  const Tensor eps = rng.normal({b, nz});
  Tensor keep({b, nz}, 1.0), prior({b, nz}, 0.0);
  for (std::size_t i = 0; i < b; ++i) {
    if (!rng.bernoulli(p_u)) continue;
    for (std::size_t j = 0; j < nz; ++j) {
      keep[i * nz + j] = 0.0;
      prior[i * nz + j] = rng.normal();
    }
  }
  return add_const(mul_const(add(p.mu, mul_const(p.sigma, eps)), keep), prior);
}

Var kl_diag_gaussian(const PosteriorParams& p) {
  for (double s : p.sigma.value().values())
    if (!(s > 0.0)) throw Error(ErrorCode::kInvalidArgument, "kl_diag_gaussian: sigma must be positive");
  const Var terms = sub(add(square(p.mu), square(p.sigma)), scale(log(p.sigma), 2.0));
  return scale(add_scalar(sum_rows(terms), -static_cast<double>(p.mu.dim(1))), 0.5);
}

Var reconstruction_error(const Prediction& p, const Var& frame, const Var& u) {
  return add(sum_rows(square(sub(p.image, frame))), sum_rows(square(sub(p.u, u))));
}

ModelLoss model_loss(const ForwardModel& model, const ModelBatch& batch, double beta, Rng& rng,
                     const DropoutSpec& drop) {
  if (beta < 0.0) throw Error(ErrorCode::kInvalidArgument, "model_loss: beta must be >= 0");
  const std::size_t horizon = batch.horizon();
  if (horizon == 0) throw Error(ErrorCode::kInvalidArgument, "model_loss: empty horizon");
  const bool stochastic = model.mode == ModelMode::kStochastic;
  Window w = batch.window;
  ModelLoss out;
  for (std::size_t k = 0; k < horizon; ++k) {
    DropoutSpec d = drop;
    d.seed = hash_combine(drop.seed, k);
    Var z, kl;
    if (stochastic) {
      const PosteriorParams post = model.posterior(w, batch.next_frames[k], batch.next_us[k]);
      z = sample_latent(post, model.config().p_u, rng);
      kl = kl_diag_gaussian(post);
    }
    const Prediction pred = model.predict(w, batch.actions[k], stochastic ? &z : nullptr, d);
    const Var recon = reconstruction_error(pred, batch.next_frames[k], batch.next_us[k]);
    Var step = mean(recon);
    out.recon += step.item();
    if (stochastic) {
      const Var mkl = mean(kl);
      out.kl += mkl.item();
      step = add(step, scale(mkl, beta));
    }
    out.total = out.total.defined() ? add(out.total, step) : step;
    w = w.shifted(pred.image, pred.u);
  }
  const double inv = 1.0 / static_cast<double>(horizon);
  out.total = scale(out.total, inv);
  out.recon *= inv;
  out.kl *= inv;
  return out;
}

std::string curves_csv(const std::vector<CurvePoint>& curve) {
  std::string out = "phase,update,train_loss,val_recon,val_kl\n";
  char buf[160];
  for (const CurvePoint& p : curve) {
    std::snprintf(buf, sizeof buf, "%s,%zu,%.9g,%.9g,%.9g\n", p.phase.c_str(), p.update, p.train_loss,
                  p.val_recon, p.val_kl);
    out += buf;
  }
  return out;
}

BatchSource dataset_batch_source(const TrajectoryDataset& data, std::size_t window,
                                 std::size_t max_horizon, const GridConfig& grid,
                                 const CostConfig& costs, const NormStats& norm) {
  auto refs = std::make_shared<std::array<std::vector<TransitionRef>, 3>>();
  for (Split s : {Split::kTrain, Split::kVal, Split::kTest})
    (*refs)[static_cast<int>(s)] = build_transitions(data, s, window, max_horizon);
  return [&data, refs, window, max_horizon, grid, costs, norm](Split s, std::size_t size,
                                                                std::size_t horizon, Rng& rng) {
    if (s == Split::kSceneOnly) throw Error(ErrorCode::kInvalidArgument, "batch source: no scene split");
    const auto& pool = (*refs)[static_cast<int>(s)];
    if (pool.empty()) {
      throw Error(ErrorCode::kInvalidArgument, std::string("batch source: no ") + split_name(s) + " transitions");
    }
    if (horizon > max_horizon) throw Error(ErrorCode::kInvalidArgument, "batch source: horizon too long");
    std::vector<Transition> ts;
    for (std::size_t i = 0; i < size; ++i)
      ts.push_back(materialize(data, pool[rng.index(pool.size())], window, horizon, grid, costs));
    return make_batch(ts, norm);
  };
}

std::pair<double, double> validation_loss(const ForwardModel& model, const BatchSource& source,
                                          const ModelTrainConfig& cfg, std::uint64_t seed) {
  ForwardModel eval = model.clone();
  eval.parameters().set_requires_grad(false);
  Rng batches(substream_seed(seed, "val-batches"));
  Rng latents(substream_seed(seed, "val-latents"));
  double recon = 0.0, kl = 0.0;
  for (std::size_t i = 0; i < cfg.val_batches; ++i) {
    const ModelBatch b = source(Split::kVal, cfg.batch, cfg.unroll, batches);
    // Validation reconstructs with posterior latents.
    Window w = b.window;
    for (std::size_t k = 0; k < b.horizon(); ++k) {
      Var z;
      if (eval.mode == ModelMode::kStochastic) {
        const PosteriorParams post = eval.posterior(w, b.next_frames[k], b.next_us[k]);
        z = sample_latent(post, 0.0, latents);
        kl += mean(kl_diag_gaussian(post)).item();
      }
      const Prediction p = eval.predict(w, b.actions[k], z.defined() ? &z : nullptr, {});
      recon += mean(reconstruction_error(p, b.next_frames[k], b.next_us[k])).item();
      w = w.shifted(p.image, p.u);
    }
  }
  const double n = static_cast<double>(cfg.val_batches * cfg.unroll);
  return {recon / n, kl / n};
}

TrainedModels train_forward_model(const ForwardModel& initial, const BatchSource& source,
                                  const ModelTrainConfig& cfg, std::uint64_t seed,
                                  const std::function<void(const std::string&, const ForwardModel&)>& on_phase_end) {
  if (cfg.batch == 0 || cfg.unroll == 0) throw Error(ErrorCode::kConfig, "model training: batch and unroll must be positive");
  ForwardModel model = initial.clone();
  Rng rng(substream_seed(seed, "model-batches"));
  Rng latent_rng(substream_seed(seed, "model-latents"));
  const std::uint64_t mask_root = substream_seed(seed, "model-masks");
  std::vector<CurvePoint> curve;
  ForwardModel deterministic = model.clone();

  struct Phase {
    const char* name;
    std::size_t updates;
    ModelMode mode;
  };
  for (const Phase& phase : {Phase{"deterministic", cfg.deterministic_updates, ModelMode::kDeterministic},
                             Phase{"stochastic", cfg.stochastic_updates, ModelMode::kStochastic}}) {
    model.mode = phase.mode;
    const nn::ParamList params =
        phase.mode == ModelMode::kDeterministic ? model.prediction_parameters() : model.parameters();
    Adam opt(params.vars(), {cfg.lr, 0.9, 0.999, 1e-8, cfg.grad_clip});
    Container last_good = model.save();
    double running = 0.0;
    std::size_t since = 0;
    for (std::size_t u = 1; u <= phase.updates; ++u) {
      const ModelBatch batch = source(Split::kTrain, cfg.batch, cfg.unroll, rng);
      const DropoutSpec drop{hash_combine(mask_root, hash_combine(static_cast<std::uint64_t>(phase.mode), u)),
                             model.config().dropout, 0};
      try {
        opt.zero_grad();
        const ModelLoss loss = model_loss(model, batch, cfg.beta, latent_rng, drop);
        backward(loss.total);
        opt.step();
        running += loss.total.item();
        ++since;
      } catch (const Error& e) {
        if (e.code() != ErrorCode::kNumeric) throw;
        load_params(model.parameters(), last_good);
        if (on_phase_end) on_phase_end("diverged", model);
        throw Error(ErrorCode::kNumeric, std::string("model training diverged in ") + phase.name +
                                             " phase at update " + std::to_string(u) +
                                             "; restored the last good checkpoint (" + e.what() + ")");
      }
      if (u % cfg.eval_every == 0 || u == phase.updates) {
        const auto [vr, vk] = validation_loss(model, source, cfg, seed);
        curve.push_back({phase.name, u, running / static_cast<double>(since), vr, vk});
        running = 0.0;
        since = 0;
        last_good = model.save();
      }
    }
    if (on_phase_end) on_phase_end(phase.name, model);
    if (phase.mode == ModelMode::kDeterministic) deterministic = model.clone();
  }
  return {std::move(deterministic), std::move(model), std::move(curve)};
}

// ---- cost head ----

CostPredictor::CostPredictor(const CostPredictorConfig& cfg, const GridConfig& grid, Rng& rng)
    : cfg_(cfg), grid_(grid) {
  const std::size_t h = nn::conv_out_size(nn::conv_out_size(nn::conv_out_size(grid.height, 3, 2, 1), 3, 2, 1), 3, 2, 1);
  const std::size_t w = nn::conv_out_size(nn::conv_out_size(nn::conv_out_size(grid.width, 3, 2, 1), 3, 2, 1), 3, 2, 1);
  c1_ = nn::Conv2d::make(3, cfg.channels, 3, 2, 1, rng);
  c2_ = nn::Conv2d::make(cfg.channels, cfg.channels, 3, 2, 1, rng);
  c3_ = nn::Conv2d::make(cfg.channels, cfg.channels, 3, 2, 1, rng);
  fc_ = nn::Linear::make(cfg.channels * h * w, cfg.hidden, rng);
  u_fc_ = nn::Linear::make(4, cfg.hidden, rng);
  out_ = nn::Linear::make(cfg.hidden, 2, rng);
}

Var CostPredictor::operator()(const Var& image, const Var& u) const {
  const std::size_t b = image.dim(0);
  Var e = relu(c3_(relu(c2_(relu(c1_(image))))));
  e = reshape(e, {b, e.size() / b});
  return sigmoid(out_(relu(add(fc_(e), u_fc_(u)))));
}

nn::ParamList CostPredictor::parameters() const {
  nn::ParamList p;
  p.add("c1", c1_);
  p.add("c2", c2_);
  p.add("c3", c3_);
  p.add("fc", fc_);
  p.add("u_fc", u_fc_);
  p.add("out", out_);
  return p;
}

Container CostPredictor::save() const {
  Container c = params_container(parameters());
  c.meta = {{"kind", "cost_predictor"}, {"channels", cfg_.channels}, {"hidden", cfg_.hidden},
            {"grid", grid_json(grid_)}};
  return c;
}

CostPredictor CostPredictor::load(const Container& c) {
  if (c.meta.value("kind", "") != "cost_predictor") {
    throw Error(ErrorCode::kParse, "container does not hold a cost predictor");
  }
  CostPredictorConfig cfg;
  cfg.channels = c.meta.at("channels");
  cfg.hidden = c.meta.at("hidden");
  Rng rng(0);
  CostPredictor p(cfg, grid_from_json(c.meta.at("grid")), rng);
  load_params(p.parameters(), c);
  return p;
}

CostPredictor train_cost_predictor(const BatchSource& source, const CostPredictorConfig& cfg,
                                   const GridConfig& grid, std::uint64_t seed,
                                   CostHeadReport* report) {
  Rng init(substream_seed(seed, "cost-init"));
  CostPredictor head(cfg, grid, init);
  Rng rng(substream_seed(seed, "cost-batches"));
  Adam opt(head.parameters().vars(), {cfg.lr, 0.9, 0.999, 1e-8, 0.0});
  auto targets = [](const ModelBatch& b) {
    Tensor t({b.costs[0].size(), 2});
    for (std::size_t i = 0; i < b.costs[0].size(); ++i) {
      t[2 * i] = b.costs[0][i].proximity;
      t[2 * i + 1] = b.costs[0][i].lane;
    }
    return t;
  };
  for (std::size_t u = 0; u < cfg.updates; ++u) {
    const ModelBatch b = source(Split::kTrain, cfg.batch, 1, rng);
    opt.zero_grad();
    const Var pred = head(b.next_frames[0], b.next_us[0]);
    Tensor neg = targets(b);
    for (double& v : neg.values()) v = -v;
    backward(mean(square(add_const(pred, neg))));
    opt.step();
  }
  if (report) {
    Rng vr(substream_seed(seed, "cost-val"));
    std::vector<double> p, t;
    double se = 0.0;
    for (int i = 0; i < 8; ++i) {
      const ModelBatch b = source(Split::kVal, cfg.batch, 1, vr);
      const Var pred = head(b.next_frames[0], b.next_us[0]);
      const Tensor tg = targets(b);
      for (std::size_t j = 0; j < tg.size(); ++j) {
        p.push_back(pred.value()[j]);
        t.push_back(tg[j]);
        se += (pred.value()[j] - tg[j]) * (pred.value()[j] - tg[j]);
      }
    }
    const double n = static_cast<double>(p.size());
    double mp = 0, mt = 0;
    for (std::size_t i = 0; i < p.size(); ++i) { mp += p[i]; mt += t[i]; }
    mp /= n;
    mt /= n;
    double sxy = 0, sxx = 0, syy = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      sxy += (p[i] - mp) * (t[i] - mt);
      sxx += (p[i] - mp) * (p[i] - mp);
      syy += (t[i] - mt) * (t[i] - mt);
    }
    report->val_mse = se / n;
    report->pearson = (sxx > 0 && syy > 0) ? sxy / std::sqrt(sxx * syy) : 0.0;
  }
  return head;
}

}  // namespace mpur
