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
#include <memory>
#include <string>
#include <vector>

#include "mpur/tensor.hpp"

namespace mpur {

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the reverse-mode graph. `backward` reads `grad` and
// accumulates into the grads of `inputs` that require them.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;

  bool is_leaf() const { return inputs.empty(); }
  Tensor& ensure_grad();
};

// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t rank() const { return node_->value.rank(); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

// Runs reverse accumulation from a scalar loss. Leaf grads accumulate across
// calls; intermediate grads are reset on every call.
void backward(const Var& loss);

// Builds an op node. If no input requires grad the result is a constant and
// `fn` is dropped. Throws kNumeric if `value` has a non-finite entry.
Var make_op(const char* op, Tensor value, std::vector<Var> inputs,
            std::function<void(Node&)> fn);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var add_scalar(const Var& a, double c);
Var neg(const Var& a);
Var relu(const Var& a);
Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var softplus(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);
Var sqrt(const Var& a);
Var square(const Var& a);
// Gradient passes only where lo < a < hi.
Var clamp(const Var& a, double lo, double hi);
// Multiplies by a constant tensor of the same shape.
Var mul_const(const Var& a, const Tensor& c);
// Adds a constant tensor of the same shape.
Var add_const(const Var& a, const Tensor& c);
Var stop_gradient(const Var& a);

// ---- linear algebra ----
Var matmul(const Var& a, const Var& b);  // [M,K] x [K,N]
// x[B,in] * w[in,out] + b[out]
Var affine(const Var& x, const Var& w, const Var& b);
// x[B,C,H,W], w[O,C,kh,kw], b[O]
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
// x[B,C,H,W], w[C,O,kh,kw], b[O]; output spatial size given explicitly.
Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride,
                     int pad, std::size_t out_h, std::size_t out_w);

// ---- reductions ----
Var sum(const Var& a);
Var mean(const Var& a);
Var sum_rows(const Var& a);  // [B, ...] -> [B]
Var mean_rows(const Var& a);  // [B, ...] -> [B]
Var max_all(const Var& a);
Var max_rows(const Var& a);  // hard max, gradient to the first argmax
// Softmax-weighted mean per row with temperature tau; lies in [min, max].
Var soft_max_rows(const Var& a, double tau);
// Population variance over the leading axis: [K, ...] -> [...].
Var variance_axis0(const Var& a);
Var mean_axis0(const Var& a);
Var l2_norm_rows(const Var& a);  // [B, ...] -> [B]

// ---- shape ----
Var reshape(const Var& a, Shape shape);
Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t len);
Var concat(const std::vector<Var>& parts, std::size_t axis);
// Repeats the whole tensor `k` times along axis 0: [B, ...] -> [k*B, ...].
Var tile0(const Var& a, std::size_t k);

// ---- dropout ----
struct DropoutMask {
  std::uint64_t seed = 0;
  double rate = 0.0;
  std::uint64_t layer = 0;

  // Binary keep-mask (1 = kept). Pure function of (seed, rate, layer, shape).
  Tensor keep(const Shape& shape) const;
  // keep / (1 - rate).
  Tensor scaled(const Shape& shape) const;
};

Var apply_dropout(const Var& x, const DropoutMask& mask);

// ---- gradient checking ----
// Max over coordinates of |analytic - numeric| / (|analytic| + |numeric| + 1e-12)
// using central differences. `max_coords` > 0 checks an evenly strided subset.
double grad_check(const std::function<Var(const Var&)>& f, const Tensor& x,
                  double eps, std::size_t max_coords = 0);

// Same measure for a loss closing over existing parameters; each parameter is
// perturbed in place and restored.
double grad_check_params(const std::function<Var()>& loss,
                         const std::vector<Var>& params, double eps,
                         std::size_t max_coords_per_param = 0);

}  // namespace mpur
