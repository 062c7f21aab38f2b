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

#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "mpur/error.hpp"
#include "mpur/uncertainty.hpp"
#include "toy_systems.hpp"

using namespace mpur;

namespace {

ModelConfig tiny_model() {
  ModelConfig c;
  c.conv1 = 4;
  c.conv2 = 6;
  c.hidden = 16;
  c.n_z = 3;
  c.dropout = 0.1;
  return c;
}

GridConfig tiny_grid() {
  GridConfig g;
  g.height = 9;
  g.width = 6;
  return g;
}

Window rand_window(std::size_t b, const GridConfig& g, Rng& rng) {
  Window w;
  for (int i = 0; i < 2; ++i) {
    w.frames.push_back(Var::constant(rng.normal({b, 3, g.height, g.width})));
    w.us.push_back(Var::constant(rng.normal({b, 4})));
  }
  return w;
}

}  // namespace

TEST_CASE("trace variance over replicas") {
  // K=3, B=2, 4 dims; identical replicas.
  Tensor same({3, 2, 4});
  for (std::size_t i = 0; i < same.size(); ++i) same[i] = static_cast<double>(i % 8) * 0.3;
  const Tensor u0 = ensemble_trace_variance(Var::constant(same)).value();
  CHECK(u0.shape() == Shape{2});
  CHECK(u0[0] == 0.0);
  CHECK(u0[1] == 0.0);

  // K=2, one dimension differs: 0 vs 2 -> population variance 1.
  Tensor two({2, 1, 5});
  two[2] = 0.0;
  two[5 + 2] = 2.0;
  CHECK(ensemble_trace_variance(Var::constant(two)).item() == doctest::Approx(1.0).epsilon(1e-15));

  // Mask order does not matter.
  Rng rng(3);
  const Tensor r = rng.normal({4, 3, 6});
  Tensor perm(r.shape());
  const std::size_t order[4] = {2, 0, 3, 1};
  for (std::size_t k = 0; k < 4; ++k)
    std::copy(r.data() + order[k] * 18, r.data() + (order[k] + 1) * 18, perm.data() + k * 18);
  const Tensor a = ensemble_trace_variance(Var::constant(r)).value();
  const Tensor b = ensemble_trace_variance(Var::constant(perm)).value();
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
    CHECK(a[i] > 0.0);
  }
  CHECK_THROWS_AS(ensemble_trace_variance(Var::constant(Tensor({1, 2, 3}))), Error);
}

TEST_CASE("uncertainty step: clean replica, non-negativity, K >= 2") {
  Rng rng(5);
  const GridConfig g = tiny_grid();
  ForwardModel m(tiny_model(), g, NormStats{}, rng);
  m.mode = ModelMode::kStochastic;
  const Window w = rand_window(3, g, rng);
  const Var a = Var::constant(rng.normal({3, 2}));
  const Var z = Var::constant(rng.normal({3, 3}));
  const UncertainStep s = predict_with_uncertainty(m, w, a, &z, 4, 11);
  const Prediction clean = m.predict(w, a, &z, {});
  CHECK(s.clean.image.shape() == clean.image.shape());
  for (std::size_t i = 0; i < clean.image.size(); ++i)
    CHECK(s.clean.image.value()[i] == doctest::Approx(clean.image.value()[i]).epsilon(1e-12));
  CHECK(s.u_raw.shape() == Shape{3});
  for (double v : s.u_raw.value().values()) CHECK(v > 0.0);

  // Same seed, same U.
  const UncertainStep s2 = predict_with_uncertainty(m, w, a, &z, 4, 11);
  CHECK(s2.u_raw.value() == s.u_raw.value());

  CHECK_THROWS_AS(predict_with_uncertainty(m, w, a, &z, 1, 11), Error);

  ModelConfig nodrop = tiny_model();
  nodrop.dropout = 0.0;
  ForwardModel m0(nodrop, g, NormStats{}, rng);
  const UncertainStep s0 = predict_with_uncertainty(m0, w, a, nullptr, 4, 11);
  for (double v : s0.u_raw.value().values()) CHECK(v == 0.0);
}

TEST_CASE("dU/da matches finite differences") {
  Rng rng(6);
  const GridConfig g = tiny_grid();
  ForwardModel m(tiny_model(), g, NormStats{}, rng);
  m.mode = ModelMode::kStochastic;
  const Window w = rand_window(2, g, rng);
  const Var z = Var::constant(rng.normal({2, 3}));
  const Tensor a0 = rng.normal({2, 2});
  const double err = grad_check(
      [&](const Var& a) { return sum(predict_with_uncertainty(m, w, a, &z, 4, 21).u_raw); }, a0, 1e-5);
  CAPTURE(err);
  CHECK(err < 1e-4);
}

TEST_CASE("hinge normalization") {
  UncertaintyCalibration c;
  c.mean = {2.0, 3.0};
  c.stddev = {0.5, 1.5};
  CHECK(normalized_u(2.0, 1, c) == 0.0);
  CHECK(normalized_u(3.0, 2, c) == 0.0);
  CHECK(normalized_u(3.0 + 2 * 1.5, 2, c) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(normalized_u(2.0 - 0.5, 1, c) == 0.0);
  CHECK_THROWS_AS(normalized_u(1.0, 0, c), Error);
  CHECK_THROWS_AS(normalized_u(1.0, 3, c), Error);

  // Graph version: identical values, zero gradient at and below the mean.
  Var u = Var::parameter(Tensor({3}, {1.0, 2.0, 4.0}));
  const Var n = normalized_u(u, 1, c);
  CHECK(n.value()[0] == 0.0);
  CHECK(n.value()[1] == 0.0);
  CHECK(n.value()[2] == doctest::Approx(4.0));
  backward(sum(n));
  CHECK(u.grad()[0] == 0.0);
  CHECK(u.grad()[1] == 0.0);
  CHECK(u.grad()[2] == doctest::Approx(2.0));
  CHECK_THROWS_AS(normalized_u(u, 3, c), Error);
}

TEST_CASE("calibration: reproducible, positive spread, persisted, sample floor") {
  TrajectoryDataset d = toy::lone_cars(20, 40, 2);
  const GridConfig g = tiny_grid();
  assign_splits(d, 6, 1);
  const NormStats ns = compute_norm_stats(d, build_transitions(d, Split::kTrain, 2, 3), g, 300, 1);
  const BatchSource src = dataset_batch_source(d, 2, 3, g, CostConfig{}, ns);
  Rng rng(7);
  ForwardModel m(tiny_model(), g, ns, rng);
  m.mode = ModelMode::kStochastic;
  UncertaintyConfig cfg;
  cfg.k_calibration = 4;
  cfg.calibration_samples = 40;
  cfg.calibration_batch = 16;
  const UncertaintyCalibration c1 = calibrate(m, src, 3, cfg, 9);
  const UncertaintyCalibration c2 = calibrate(m, src, 3, cfg, 9);
  CHECK(c1.steps() == 3);
  CHECK(c1.mean == c2.mean);
  CHECK(c1.stddev == c2.stddev);
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(c1.stddev[t] > 0.0);
    CHECK(c1.mean[t] > 0.0);
  }
  const UncertaintyCalibration back = UncertaintyCalibration::load(parse_container(serialize_container(c1.save())));
  CHECK(back.mean == c1.mean);
  CHECK(back.stddev == c1.stddev);
  CHECK(c1.csv().rfind("step,mean,stddev\n1,", 0) == 0);

  cfg.calibration_samples = 29;
  CHECK_THROWS_AS(calibrate(m, src, 3, cfg, 9), Error);
  // Source that runs dry before 30 samples.
  cfg.calibration_samples = 100;
  int calls = 0;
  const BatchSource tiny_src = [&](Split s, std::size_t, std::size_t h, Rng& r) {
    return ++calls <= 2 ? src(s, 10, h, r) : src(s, 0, h, r);
  };
  CHECK_THROWS_AS(calibrate(m, tiny_src, 3, cfg, 9), Error);
}

TEST_CASE("covariance decomposition: linear toy closed form") {
  // s = w_k + z, w in {0, 2}, z ~ N(0,1).
  Rng rng(8);
  const std::size_t m = 10000;
  std::vector<double> z(2 * m);
  for (double& v : z) v = rng.normal();
  const CovarianceTraces t = decompose_covariance(
      [&](std::size_t k, std::size_t j) { return std::vector<double>{2.0 * static_cast<double>(k) + z[k * m + j]}; },
      2, m);
  CAPTURE(t.epistemic);
  CAPTURE(t.aleatoric);
  CHECK(std::abs(t.epistemic - 1.0) < 0.05);
  CHECK(std::abs(t.aleatoric - 1.0) < 0.05);
  CHECK(std::abs(t.total - 2.0) < 0.1);
  CHECK_THROWS_AS(decompose_covariance([](std::size_t, std::size_t) { return std::vector<double>{0.0}; }, 1, 5),
                  Error);
}

TEST_CASE("covariance decomposition on small models") {
  const GridConfig g = tiny_grid();
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    Rng rng(seed);
    ForwardModel m(tiny_model(), g, NormStats{}, rng);
    m.mode = ModelMode::kStochastic;
    const Window w = rand_window(1, g, rng);
    const Var a = Var::constant(rng.normal({1, 2}));
    const CovarianceTraces t = decompose_covariance(m, w, a, 16, 64, seed);
    CAPTURE(seed);
    CHECK(t.epistemic > 0.0);
    CHECK(t.aleatoric > 0.0);
    CHECK(std::abs(t.epistemic + t.aleatoric - t.total) <= 0.05 * t.total);
    CHECK_THROWS_AS(decompose_covariance(m, w, a, 1, 64, seed), Error);
    CHECK_THROWS_AS(decompose_covariance(m, w, a, 16, 1, seed), Error);
  }

  // No dropout, no latent path: nothing varies.
  ModelConfig c = tiny_model();
  c.dropout = 0.0;
  Rng rng(4);
  ForwardModel m(c, g, NormStats{}, rng);
  const Window w = rand_window(1, g, rng);
  const CovarianceTraces t = decompose_covariance(m, w, Var::constant(rng.normal({1, 2})), 4, 4, 1);
  CHECK(t.epistemic == 0.0);
  CHECK(t.aleatoric == 0.0);
  CHECK(t.total == 0.0);
}

TEST_CASE("single-latent epistemic trace agrees with U in expectation over z") {
  const GridConfig g = tiny_grid();
  Rng rng(10);
  ForwardModel m(tiny_model(), g, NormStats{}, rng);
  m.mode = ModelMode::kStochastic;
  const Window w = rand_window(1, g, rng);
  const Var a = Var::constant(rng.normal({1, 2}));
  const std::size_t k = 8, draws = 150;
  double mean_dec = 0.0, mean_u = 0.0;
  for (std::size_t i = 0; i < draws; ++i) {
    const Var z = Var::constant(prior_sample(1, 3, rng));
    mean_u += predict_with_uncertainty(m, w, a, &z, k, 1000 + i).u_raw.item();
    const Var zk = tile0(z, k);
    const Prediction p = m.predict(w.tiled(k), tile0(a, k), &zk, DropoutSpec{5000 + i, m.config().dropout, 0, 1});
    const std::size_t di = p.image.size() / k, du = p.u.size() / k;
    mean_dec += decompose_covariance(
                    [&](std::size_t r, std::size_t) {
                      std::vector<double> v(p.image.value().data() + r * di, p.image.value().data() + (r + 1) * di);
                      v.insert(v.end(), p.u.value().data() + r * du, p.u.value().data() + (r + 1) * du);
                      return v;
                    },
                    k, 1)
                    .epistemic;
  }
  CAPTURE(mean_dec);
  CAPTURE(mean_u);
  CHECK(std::abs(mean_dec - mean_u) <= 0.1 * mean_u);
}
