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
#include <functional>

#include "doctest.h"
#include "mpur/autodiff.hpp"
#include "mpur/container.hpp"
#include "mpur/error.hpp"
#include "mpur/nn.hpp"
#include "mpur/optim.hpp"
#include "mpur/rng.hpp"
#include "op_cases.hpp"

using namespace mpur;

namespace {

using testing::probe;
using testing::randn;

constexpr double kEps = 1e-5;

}  // namespace

TEST_CASE("polynomial derivative") {
  Var x = Var::parameter(Tensor::scalar(3.0));
  backward(mul(x, x));
  CHECK(x.grad()[0] == doctest::Approx(6.0));
}

TEST_CASE("stop_gradient cuts exactly one path") {
  Var y = Var::parameter(Tensor::scalar(2.0));
  backward(add(stop_gradient(y), y));
  CHECK(y.grad()[0] == 1.0);
}

TEST_CASE("sum(relu(W x)) matches central differences") {
  const Tensor w = randn({5, 4}, 1);
  const Tensor x = randn({3, 5}, 2);
  const double err = grad_check(
      [&](const Var& wv) { return sum(relu(matmul(Var::constant(x), wv))); }, w, kEps);
  CHECK(err < 1e-6);
}

TEST_CASE("every primitive passes grad_check") {
  for (const testing::OpCase& c : testing::primitive_op_cases()) {
    const std::string name = c.name;
    CAPTURE(name);
    CHECK(grad_check(c.f, testing::op_case_input(c), kEps) < 1e-6);
  }
}

TEST_CASE("conv2d forward matches direct loops") {
  const Tensor x = randn({2, 3, 6, 5}, 1);
  const Tensor w = randn({4, 3, 3, 3}, 2);
  const Tensor b = randn({4}, 3);
  const int stride = 2, pad = 1;
  const Var y = conv2d(Var::constant(x), Var::constant(w), Var::constant(b), stride, pad);
  REQUIRE(y.shape() == Shape{2, 4, 3, 3});
  for (std::size_t n = 0; n < 2; ++n)
    for (std::size_t o = 0; o < 4; ++o)
      for (std::size_t i = 0; i < 3; ++i)
        for (std::size_t j = 0; j < 3; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < 3; ++c)
            for (int ki = 0; ki < 3; ++ki)
              for (int kj = 0; kj < 3; ++kj) {
                const int r = static_cast<int>(i) * stride - pad + ki;
                const int s = static_cast<int>(j) * stride - pad + kj;
                if (r < 0 || s < 0 || r >= 6 || s >= 5) continue;
                acc += w[((o * 3 + c) * 3 + ki) * 3 + kj] * x[((n * 3 + c) * 6 + r) * 5 + s];
              }
          CHECK(y.value()[((n * 4 + o) * 3 + i) * 3 + j] == doctest::Approx(acc).epsilon(1e-12));
        }
}

TEST_CASE("conv_transpose2d is the adjoint of conv2d") {
  // <conv(x), y> == <x, conv_transpose(y)> with shared weights and zero bias.
  const Tensor x = randn({2, 3, 7, 6}, 5);
  const Tensor w = randn({4, 3, 3, 3}, 6);
  const Var zero_o = Var::constant(Tensor({4}, 0.0));
  const Var zero_c = Var::constant(Tensor({3}, 0.0));
  const Var cx = conv2d(Var::constant(x), Var::constant(w), zero_o, 2, 1);
  const Tensor y = randn(cx.shape(), 7);
  const Var ty = conv_transpose2d(Var::constant(y), Var::constant(w), zero_c, 2, 1, 7, 6);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) lhs += cx.value()[i] * y[i];
  for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * ty.value()[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-12));
}

TEST_CASE("backward errors") {
  SUBCASE("non-scalar loss") {
    Var x = Var::parameter(Tensor({2}, 1.0));
    CHECK_THROWS_AS(backward(x), Error);
  }
  SUBCASE("non-finite value") {
    Var x = Var::parameter(Tensor::scalar(1000.0));
    try {
      exp(x);
      FAIL("expected a numeric error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kNumeric);
    }
  }
  SUBCASE("unsupported op") {
    Var x = Var::parameter(Tensor::scalar(1.0));
    Var y = make_op("opaque", Tensor::scalar(2.0), {x}, nullptr);
    try {
      backward(y);
      FAIL("expected unsupported-op error");
    } catch (const Error& e) {
      CHECK(e.code() == ErrorCode::kUnsupportedOp);
    }
  }
}

TEST_CASE("grad_check detects an intentionally wrong backward") {
  CHECK(grad_check([](const Var& x) { return sum(x); }, randn({4, 3}, 1), kEps) < 1e-9);
  auto broken_square = [](const Var& x) {
    Tensor v = x.value();
    for (double& e : v.values()) e *= e;
    return sum(make_op("broken_square", std::move(v), {x}, [](Node& self) {
      Node& in = *self.inputs[0];
      Tensor& g = in.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i)
        g[i] += self.grad[i] * 3.0 * in.value[i];  // should be 2x
    }));
  };
  CHECK(grad_check(broken_square, randn({4}, 2), kEps) > 1e-2);
}

TEST_CASE("backward is bitwise deterministic") {
  Rng rng(3);
  nn::Conv2d conv = nn::Conv2d::make(2, 3, 3, 2, 1, rng);
  const Tensor x = randn({2, 2, 6, 6}, 9);
  auto run = [&] {
    conv.weight.zero_grad();
    backward(sum(square(conv(Var::constant(x)))));
    return conv.weight.grad();
  };
  const Tensor g1 = run();
  const Tensor g2 = run();
  CHECK(g1 == g2);
}

TEST_CASE("apply_dropout contract") {
  const Var x = Var::constant(randn({50, 20}, 1));
  SUBCASE("rate 0 is the identity") {
    CHECK(apply_dropout(x, {7, 0.0, 0}).value() == x.value());
  }
  SUBCASE("same seed gives identical output") {
    CHECK(apply_dropout(x, {7, 0.3, 2}).value() == apply_dropout(x, {7, 0.3, 2}).value());
    CHECK(apply_dropout(x, {7, 0.3, 2}).value() != apply_dropout(x, {8, 0.3, 2}).value());
  }
  SUBCASE("rate 1 is rejected") {
    CHECK_THROWS_AS(apply_dropout(x, {7, 1.0, 0}), Error);
  }
  SUBCASE("inverted scaling preserves the mean") {
    const Var ones = Var::constant(Tensor({200000}, 1.0));
    const Var y = apply_dropout(ones, {11, 0.5, 0});
    double m = 0.0;
    std::size_t zeros = 0;
    for (double v : y.value().values()) {
      m += v;
      zeros += v == 0.0;
    }
    m /= static_cast<double>(y.size());
    CHECK(std::abs(m - 1.0) < 0.02);
    CHECK(std::abs(static_cast<double>(zeros) / y.size() - 0.5) < 0.01);
  }
}

TEST_CASE("container round-trips byte-exactly") {
  Container c;
  c.tensors["b"] = randn({3, 2}, 1);
  c.tensors["a"] = Tensor({1}, -0.0);
  c.tensors["z.w"] = randn({2, 2, 2}, 2, 1e300);
  c.meta["note"] = "x";
  const std::string bytes = serialize_container(c);
  const Container back = parse_container(bytes);
  CHECK(back.tensors == c.tensors);
  CHECK(back.meta == c.meta);
  CHECK(serialize_container(back) == bytes);
  CHECK(bytes.substr(0, 1) == "{");

  CHECK_THROWS_AS(parse_container("{\"format\":\"other\"}\n"), Error);
  CHECK_THROWS_AS(parse_container(bytes.substr(0, bytes.size() - 3)), Error);
  CHECK_THROWS_AS(parse_container("no newline"), Error);
}

TEST_CASE("adam minimizes a quadratic") {
  Var w = Var::parameter(Tensor({3}, 5.0));
  Adam opt({w}, {.lr = 0.1});
  for (int i = 0; i < 500; ++i) {
    opt.zero_grad();
    backward(sum(square(add_scalar(w, -1.0))));
    opt.step();
  }
  for (double v : w.value().values()) CHECK(v == doctest::Approx(1.0).epsilon(1e-3));
}
