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

#include <cmath>

#include "doctest.h"
#include "mpur/dynamics.hpp"
#include "mpur/error.hpp"
#include "toy_systems.hpp"

using namespace mpur;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.window = 2;
  c.conv1 = 4;
  c.conv2 = 6;
  c.hidden = 16;
  c.n_z = 3;
  c.dropout = 0.1;
  c.p_u = 0.5;
  return c;
}

GridConfig tiny_grid() {
  GridConfig g;
  g.height = 9;
  g.width = 6;
  return g;
}

struct Fixture {
  TrajectoryDataset data;
  GridConfig grid;
  NormStats norm;
  BatchSource source;

  Fixture(TrajectoryDataset d, GridConfig g, std::size_t horizon) : data(std::move(d)), grid(g) {
    assign_splits(data, 2 + horizon + 1, 17);
    norm = compute_norm_stats(data, build_transitions(data, Split::kTrain, 2, horizon), grid, 500, 3);
    source = dataset_batch_source(data, 2, horizon, grid, CostConfig{}, norm);
  }
};

Var rand_var(const Shape& s, Rng& rng) { return Var::constant(rng.normal(s)); }

Window rand_window(std::size_t b, const GridConfig& g, Rng& rng) {
  Window w;
  for (int i = 0; i < 2; ++i) {
    w.frames.push_back(rand_var({b, 3, g.height, g.width}, rng));
    w.us.push_back(rand_var({b, 4}, rng));
  }
  return w;
}

}  // namespace

TEST_CASE("predict is deterministic given masks; deterministic mode ignores z") {
  Rng rng(1);
  const GridConfig g = tiny_grid();
  ForwardModel m(tiny_model(), g, NormStats{}, rng);
  const Window w = rand_window(3, g, rng);
  const Var a = rand_var({3, 2}, rng);
  Var z = Var::parameter(rng.normal({3, 3}));
  const DropoutSpec drop{99, 0.1, 0};
  m.mode = ModelMode::kStochastic;
  const Prediction p1 = m.predict(w, a, &z, drop);
  const Prediction p2 = m.predict(w, a, &z, drop);
  CHECK(p1.image.value() == p2.image.value());
  CHECK(p1.u.value() == p2.u.value());
  CHECK(p1.image.shape() == Shape{3, 3, g.height, g.width});

  m.mode = ModelMode::kDeterministic;
  const Prediction pd = m.predict(w, a, &z, drop);
  backward(add(sum(pd.image), sum(pd.u)));
  CHECK_FALSE(z.has_grad());
  CHECK_THROWS_AS(m.predict(w, rand_var({3, 3}, rng), nullptr, drop), Error);
  m.mode = ModelMode::kStochastic;
  CHECK_THROWS_AS(m.predict(w, a, nullptr, drop), Error);
}

TEST_CASE("dropout rows: clean replica untouched, masks replayable") {
  Rng rng(2);
  const Var x = Var::constant(rng.normal({6, 10}));
  const Var y = apply_dropout_rows(x, {7, 0.5, 2}, 3);
  for (std::size_t i = 0; i < 20; ++i) CHECK(y.value()[i] == x.value()[i]);
  bool changed = false;
  for (std::size_t i = 20; i < 60; ++i) changed = changed || y.value()[i] != x.value()[i];
  CHECK(changed);
  CHECK(apply_dropout_rows(x, {7, 0.5, 2}, 3).value() == y.value());
}

TEST_CASE("posterior: deterministic, finite, positive sigma") {
  Rng rng(3);
  const GridConfig g = tiny_grid();
  ForwardModel m(tiny_model(), g, NormStats{}, rng);
  const Window w = rand_window(4, g, rng);
  const Var nf = rand_var({4, 3, g.height, g.width}, rng), nu = rand_var({4, 4}, rng);
  const PosteriorParams a = m.posterior(w, nf, nu), b = m.posterior(w, nf, nu);
  CHECK(a.mu.value() == b.mu.value());
  CHECK(a.mu.value().all_finite());
  for (double s : a.sigma.value().values()) CHECK(s > 0.0);
}

TEST_CASE("sample_latent mixture contract") {
  const std::size_t n = 100000;
  Tensor mu({n, 2}), sigma({n, 2});
  for (std::size_t i = 0; i < n; ++i) {
    mu[2 * i] = 1.5;
    mu[2 * i + 1] = -0.7;
    sigma[2 * i] = 0.4;
    sigma[2 * i + 1] = 1.3;
  }
  const PosteriorParams p{Var::constant(mu), Var::constant(sigma)};

  SUBCASE("p_u = 0 is plain reparameterized sampling, bitwise") {
    Rng a(5), b(5);
    const Var z = sample_latent({Var::constant(Tensor({2, 2}, {0.1, 0.2, 0.3, 0.4})),
                                 Var::constant(Tensor({2, 2}, {1.0, 2.0, 0.5, 0.25}))},
                                0.0, a);
    const Tensor eps = b.normal({2, 2});
    const double mus[] = {0.1, 0.2, 0.3, 0.4}, sig[] = {1.0, 2.0, 0.5, 0.25};
    for (std::size_t i = 0; i < 4; ++i) CHECK(z.value()[i] == mus[i] + sig[i] * eps[i]);
  }
  SUBCASE("p_u = 1 matches the prior moments") {
    Rng rng(6);
    const Tensor z = sample_latent(p, 1.0, rng).value();
    for (std::size_t j = 0; j < 2; ++j) {
      double s1 = 0, s2 = 0;
      for (std::size_t i = 0; i < n; ++i) {
        s1 += z[2 * i + j];
        s2 += z[2 * i + j] * z[2 * i + j];
      }
      const double m = s1 / n, v = s2 / n - m * m;
      CHECK(std::abs(m) < 3.0 / std::sqrt(double(n)));
      CHECK(std::abs(v - 1.0) < 3.0 * std::sqrt(2.0 / n));
    }
  }
  SUBCASE("mixture mean is (1 - p_u) mu") {
    Rng rng(7);
    const double pu = 0.3;
    const Tensor z = sample_latent(p, pu, rng).value();
    const double mus[] = {1.5, -0.7}, sig[] = {0.4, 1.3};
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0;
      for (std::size_t i = 0; i < n; ++i) s += z[2 * i + j];
      const double var = (1 - pu) * sig[j] * sig[j] + pu + pu * (1 - pu) * mus[j] * mus[j];
      CHECK(std::abs(s / n - (1 - pu) * mus[j]) < 3.0 * std::sqrt(var / n));
    }
  }
}

TEST_CASE("kl_diag_gaussian closed forms and Monte Carlo") {
  CHECK(kl_diag_gaussian({Var::constant(Tensor({1, 2}, 0.0)), Var::constant(Tensor({1, 2}, 1.0))}).item() == 0.0);
  CHECK(kl_diag_gaussian({Var::constant(Tensor({1, 2}, {1.0, 0.0})), Var::constant(Tensor({1, 2}, 1.0))}).item() ==
        doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(kl_diag_gaussian({Var::constant(Tensor({1, 1}, 0.0)), Var::constant(Tensor({1, 1}, 0.0))}), Error);

  Rng rng(8);
  for (int trial = 0; trial < 3; ++trial) {
    const std::size_t nz = 3;
    Tensor mu({1, nz}), sg({1, nz});
    for (std::size_t j = 0; j < nz; ++j) {
      mu[j] = rng.uniform(-2, 2);
      sg[j] = rng.uniform(0.3, 2.0);
    }
    const double kl = kl_diag_gaussian({Var::constant(mu), Var::constant(sg)}).item();
    // E_q[log q(z) - log p(z)]
    double acc = 0.0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i)
      for (std::size_t j = 0; j < nz; ++j) {
        const double e = rng.normal();
        const double z = mu[j] + sg[j] * e;
        acc += -0.5 * e * e - std::log(sg[j]) + 0.5 * z * z;
      }
    CHECK(std::abs(acc / n - kl) / kl < 0.02);
  }
}

TEST_CASE("model_loss: zero for a perfect model with prior posterior; beta 0 is pure reconstruction") {
  Rng rng(9);
  const GridConfig g = tiny_grid();
  ForwardModel m(tiny_model(), g, NormStats{}, rng);
  for (const auto& [name, v] : m.parameters().entries()) {
    if (name.rfind("dec_t2", 0) == 0 || name.rfind("uh_fc2", 0) == 0 || name.rfind("post_mu", 0) == 0 ||
        name.rfind("post_sigma", 0) == 0)
      Var(v).mutable_value().fill(0.0);
  }
  for (const auto& [name, v] : m.parameters().entries())
    if (name == "post_sigma.bias") Var(v).mutable_value().fill(std::log(std::exp(1.0 - 1e-4) - 1.0));
  ModelBatch b;
  b.window = rand_window(2, g, rng);
  for (int k = 0; k < 2; ++k) {
    b.actions.push_back(rand_var({2, 2}, rng));
    b.next_frames.push_back(b.window.frames.back());
    b.next_us.push_back(b.window.us.back());
  }
  m.mode = ModelMode::kStochastic;
  const ModelLoss l = model_loss(m, b, 1e-3, rng, {3, 0.2, 0});
  CHECK(std::abs(l.total.item()) < 1e-12);

  // Random targets, beta 0.
  Rng rng2(10);
  ForwardModel r(tiny_model(), g, NormStats{}, rng2);
  r.mode = ModelMode::kStochastic;
  b.next_frames = {rand_var({2, 3, g.height, g.width}, rng2), rand_var({2, 3, g.height, g.width}, rng2)};
  const ModelLoss l0 = model_loss(r, b, 0.0, rng2, {3, 0.2, 0});
  CHECK(l0.kl > 0.0);
  CHECK(l0.total.item() == l0.recon);
}

TEST_CASE("model_loss gradient matches finite differences") {
  Rng rng(11);
  GridConfig g;
  g.height = 7;
  g.width = 5;
  ModelConfig c = tiny_model();
  c.conv1 = 2;
  c.conv2 = 3;
  c.hidden = 5;
  c.n_z = 2;
  ForwardModel m(c, g, NormStats{}, rng);
  ModelBatch b;
  b.window = rand_window(2, g, rng);
  for (int k = 0; k < 2; ++k) {
    b.actions.push_back(rand_var({2, 2}, rng));
    b.next_frames.push_back(rand_var({2, 3, g.height, g.width}, rng));
    b.next_us.push_back(rand_var({2, 4}, rng));
  }
  for (ModelMode mode : {ModelMode::kDeterministic, ModelMode::kStochastic}) {
    m.mode = mode;
    auto loss = [&] {
      Rng fixed(21);
      return model_loss(m, b, 0.5, fixed, {4, 0.2, 0}).total;
    };
    const double err = grad_check_params(loss, m.parameters().vars(), 1e-5, 12);
    CAPTURE(static_cast<int>(mode));
    CHECK(err < 1e-4);
  }
}

TEST_CASE("checkpoints round-trip to identical predictions") {
  Rng rng(12);
  const GridConfig g = tiny_grid();
  ForwardModel m(tiny_model(), g, NormStats{}, rng);
  m.mode = ModelMode::kStochastic;
  const ForwardModel back = ForwardModel::load(parse_container(serialize_container(m.save())));
  CHECK(back.mode == ModelMode::kStochastic);
  const Window w = rand_window(2, g, rng);
  const Var a = rand_var({2, 2}, rng), z = rand_var({2, 3}, rng);
  CHECK(m.predict(w, a, &z, {1, 0.1, 0}).image.value() == back.predict(w, a, &z, {1, 0.1, 0}).image.value());
  CHECK(serialize_container(back.save()) == serialize_container(m.save()));
}

TEST_CASE("training on a near-linear toy drives validation loss below 10% of initial") {
  Fixture f(toy::lone_cars(30, 60, 1), tiny_grid(), 2);
  Rng rng(13);
  ForwardModel m(tiny_model(), f.grid, f.norm, rng);
  ModelTrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch = 16;
  cfg.unroll = 2;
  cfg.deterministic_updates = 300;
  cfg.stochastic_updates = 0;
  cfg.eval_every = 100;
  cfg.val_batches = 2;
  const double before = validation_loss(m, f.source, cfg, 5).first;
  std::vector<std::string> phases;
  const TrainedModels t =
      train_forward_model(m, f.source, cfg, 5, [&](const std::string& p, const ForwardModel&) { phases.push_back(p); });
  const double after = validation_loss(t.deterministic, f.source, cfg, 5).first;
  CAPTURE(before);
  CAPTURE(after);
  CHECK(after < 0.1 * before);
  CHECK(phases == std::vector<std::string>{"deterministic", "stochastic"});
  CHECK(t.deterministic.mode == ModelMode::kDeterministic);
  CHECK(curves_csv(t.curve).rfind("phase,update,train_loss,val_recon,val_kl\n", 0) == 0);

  // Same seed, same parameters.
  const TrainedModels t2 = train_forward_model(m, f.source, cfg, 5);
  CHECK(serialize_container(t2.stochastic.save()) == serialize_container(t.stochastic.save()));
}

TEST_CASE("stochastic phase beats the deterministic baseline on a multimodal toy") {
  Fixture f(toy::random_leader(24, 80, 2), GridConfig{}, 1);
  Rng rng(14);
  ModelConfig c = tiny_model();
  c.conv1 = 6;
  c.conv2 = 8;
  c.hidden = 24;
  c.n_z = 4;
  ForwardModel m(c, f.grid, f.norm, rng);
  ModelTrainConfig cfg;
  cfg.lr = 2e-3;
  cfg.batch = 16;
  cfg.unroll = 1;
  cfg.deterministic_updates = 250;
  cfg.stochastic_updates = 250;
  cfg.eval_every = 250;
  cfg.val_batches = 4;
  cfg.beta = 1e-3;
  const TrainedModels t = train_forward_model(m, f.source, cfg, 6);
  const double det = validation_loss(t.deterministic, f.source, cfg, 8).first;
  const double sto = validation_loss(t.stochastic, f.source, cfg, 8).first;
  CAPTURE(det);
  CAPTURE(sto);
  CHECK(sto <= det);

  // The latent pathway is live and predictions respond to the action.
  Rng probe(15);
  const ModelBatch b = f.source(Split::kVal, 4, 1, probe);
  const Var z1 = Var::constant(prior_sample(4, c.n_z, probe)), z2 = Var::constant(prior_sample(4, c.n_z, probe));
  const Tensor p1 = t.stochastic.predict(b.window, b.actions[0], &z1, {}).image.value();
  const Tensor p2 = t.stochastic.predict(b.window, b.actions[0], &z2, {}).image.value();
  double dz = 0.0;
  for (std::size_t i = 0; i < p1.size(); ++i) dz += std::abs(p1[i] - p2[i]);
  CHECK(dz > 1e-6);
  Var a = Var::parameter(b.actions[0].value());
  const Prediction p = t.stochastic.predict(b.window, a, &z1, {});
  backward(add(sum(p.image), sum(p.u)));
  double ga = 0.0;
  for (double v : a.grad().values()) ga += std::abs(v);
  CHECK(ga > 0.0);
}

TEST_CASE("posterior KL shrinks on a deterministic toy") {
  Fixture f(toy::lone_cars(30, 60, 3), tiny_grid(), 1);
  Rng rng(16);
  ForwardModel m(tiny_model(), f.grid, f.norm, rng);
  ModelTrainConfig cfg;
  cfg.lr = 3e-3;
  cfg.batch = 16;
  cfg.unroll = 1;
  cfg.deterministic_updates = 100;
  cfg.stochastic_updates = 300;
  cfg.eval_every = 50;
  cfg.val_batches = 2;
  cfg.beta = 0.1;
  const TrainedModels t = train_forward_model(m, f.source, cfg, 7);
  double first = -1.0, last = 0.0;
  for (const CurvePoint& p : t.curve)
    if (p.phase == "stochastic") {
      if (first < 0.0) first = p.val_kl;
      last = p.val_kl;
    }
  CAPTURE(first);
  CAPTURE(last);
  // With nothing to encode, beta * KL should fall well under one nat-equivalent of loss.
  CHECK(last < first);
  CHECK(cfg.beta * last < 0.05);
}

TEST_CASE("cost head: range, accuracy and correlation on synthetic traffic") {
  SyntheticConfig sc;
  sc.n_cars = 120;
  RoadGeometry road;
  TrajectoryDataset d = generate_synthetic_traffic(sc, road, 4);
  assign_splits(d, 4, 1);
  GridConfig g;
  const auto refs = build_transitions(d, Split::kTrain, 2, 1);
  const NormStats ns = compute_norm_stats(d, refs, g, 1000, 2);
  const BatchSource src = dataset_batch_source(d, 2, 1, g, CostConfig{}, ns);
  CostPredictorConfig cfg;
  CostHeadReport rep;
  const CostPredictor head = train_cost_predictor(src, cfg, g, 3, &rep);
  CAPTURE(rep.val_mse);
  CAPTURE(rep.pearson);
  CHECK(rep.val_mse < 0.01);
  CHECK(rep.pearson > 0.9);
  Rng rng(4);
  const Var out = head(Var::constant(rng.normal({5, 3, g.height, g.width})), Var::constant(rng.normal({5, 4})));
  for (double v : out.value().values()) {
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
  }
}
