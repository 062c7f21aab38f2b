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

#include "mpur/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "gemm.hpp"
#include "mpur/error.hpp"
#include "mpur/rng.hpp"

namespace mpur {

using detail::ConvGeometry;

namespace {

void require_same_shape(const char* op, const Var& a, const Var& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::kShapeMismatch, std::string(op) + ": shapes " +
                                               shape_str(a.shape()) + " and " +
                                               shape_str(b.shape()));
  }
}

// Grad buffer of input i, or nullptr if that input does not need one.
Tensor* input_grad(Node& n, std::size_t i) {
  Node& in = *n.inputs[i];
  return in.requires_grad ? &in.ensure_grad() : nullptr;
}

const Tensor& input_value(const Node& n, std::size_t i) {
  return n.inputs[i]->value;
}

template <typename Fwd, typename Deriv>
Var unary(const char* op, const Var& a, Fwd fwd, Deriv deriv) {
  Tensor out(a.shape());
  const double* x = a.value().data();
  double* y = out.data();
  for (std::size_t i = 0; i < out.size(); ++i) y[i] = fwd(x[i]);
  return make_op(op, std::move(out), {a}, [deriv](Node& self) {
    Tensor* g = input_grad(self, 0);
    if (!g) return;
    const double* x = input_value(self, 0).data();
    const double* y = self.value.data();
    const double* gy = self.grad.data();
    double* gx = g->data();
    for (std::size_t i = 0; i < self.value.size(); ++i)
      gx[i] += gy[i] * deriv(x[i], y[i]);
  });
}

std::size_t rows_of(const Var& a) { return a.shape().at(0); }

}  // namespace

Tensor& Node::ensure_grad() {
  if (grad.empty()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  return Var(std::move(n));
}

Var Var::parameter(Tensor value) {
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->requires_grad = true;
  return Var(std::move(n));
}

Var make_op(const char* op, Tensor value, std::vector<Var> inputs,
            std::function<void(Node&)> fn) {
  if (!value.all_finite()) {
    throw Error(ErrorCode::kNumeric,
                std::string("non-finite value produced by op '") + op + "'");
  }
  auto n = std::make_shared<Node>();
  n->value = std::move(value);
  n->op = op;
  bool any = false;
  for (const Var& v : inputs) any = any || v.requires_grad();
  if (any) {
    n->requires_grad = true;
    n->inputs.reserve(inputs.size());
    for (const Var& v : inputs) n->inputs.push_back(v.node());
    n->backward = std::move(fn);
  }
  return Var(std::move(n));
}

void backward(const Var& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw Error(ErrorCode::kShapeMismatch, "backward() requires a scalar loss");
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS over nodes that require grad.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (Node* n : order) {
    if (!n->is_leaf()) n->grad = Tensor();
    if (!n->is_leaf() && !n->backward) {
      throw Error(ErrorCode::kUnsupportedOp,
                  std::string("op '") + n->op + "' has no backward rule");
    }
  }
  Node& root = *loss.node();
  root.ensure_grad();
  root.grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->is_leaf() || n->grad.empty()) continue;
    n->backward(*n);
    if (!n->grad.all_finite()) {
      throw Error(ErrorCode::kNumeric,
                  std::string("non-finite gradient at op '") + n->op + "'");
    }
  }
}

// ---------------------------------------------------------------------------
// elementwise

Var add(const Var& a, const Var& b) {
  require_same_shape("add", a, b);
  Tensor out = a.value();
  const double* y = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += y[i];
  return make_op("add", std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape("sub", a, b);
  Tensor out = a.value();
  const double* y = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= y[i];
  return make_op("sub", std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
    if (Tensor* g = input_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] -= self.grad[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape("mul", a, b);
  Tensor out = a.value();
  const double* y = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= y[i];
  return make_op("mul", std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * bv[i];
    if (Tensor* g = input_grad(self, 1))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * av[i];
  });
}

Var scale(const Var& a, double c) {
  return unary("scale", a, [c](double x) { return c * x; },
               [c](double, double) { return c; });
}

Var add_scalar(const Var& a, double c) {
  return unary("add_scalar", a, [c](double x) { return x + c; },
               [](double, double) { return 1.0; });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var relu(const Var& a) {
  return unary("relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
               [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var tanh(const Var& a) {
  return unary("tanh", a, [](double x) { return std::tanh(x); },
               [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(const Var& a) {
  return unary(
      "sigmoid", a,
      [](double x) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var softplus(const Var& a) {
  return unary(
      "softplus", a,
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) {
        if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      });
}

Var exp(const Var& a) {
  return unary("exp", a, [](double x) { return std::exp(x); },
               [](double, double y) { return y; });
}

Var log(const Var& a) {
  for (double v : a.value().values()) {
    if (!(v > 0.0)) throw Error(ErrorCode::kNumeric, "log of non-positive value");
  }
  return unary("log", a, [](double x) { return std::log(x); },
               [](double x, double) { return 1.0 / x; });
}

Var sqrt(const Var& a) {
  for (double v : a.value().values()) {
    if (v < 0.0) throw Error(ErrorCode::kNumeric, "sqrt of negative value");
  }
  return unary("sqrt", a, [](double x) { return std::sqrt(x); },
               [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var square(const Var& a) {
  return unary("square", a, [](double x) { return x * x; },
               [](double x, double) { return 2.0 * x; });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary("clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
               [lo, hi](double x, double) { return (x > lo && x < hi) ? 1.0 : 0.0; });
}

Var mul_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) {
    throw Error(ErrorCode::kShapeMismatch, "mul_const: shapes " +
                                               shape_str(a.shape()) + " and " +
                                               shape_str(c.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= c[i];
  return make_op("mul_const", std::move(out), {a}, [c](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i] * c[i];
  });
}

Var add_const(const Var& a, const Tensor& c) {
  if (a.shape() != c.shape()) {
    throw Error(ErrorCode::kShapeMismatch, "add_const: shapes " +
                                               shape_str(a.shape()) + " and " +
                                               shape_str(c.shape()));
  }
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += c[i];
  return make_op("add_const", std::move(out), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

Var stop_gradient(const Var& a) { return Var::constant(a.value()); }

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(const Var& a, const Var& b) {
  if (a.value().rank() != 2 || b.value().rank() != 2 || a.dim(1) != b.dim(0)) {
    throw Error(ErrorCode::kShapeMismatch, "matmul: shapes " + shape_str(a.shape()) +
                                               " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out({m, n});
  detail::gemm_nn(m, n, k, a.value().data(), b.value().data(), out.data(), false);
  return make_op("matmul", std::move(out), {a, b}, [m, k, n](Node& self) {
    const Tensor& av = input_value(self, 0);
    const Tensor& bv = input_value(self, 1);
    if (Tensor* g = input_grad(self, 0)) {
      auto bt = detail::transpose(bv.data(), k, n);
      detail::gemm_nn(m, k, n, self.grad.data(), bt.data(), g->data(), true);
    }
    if (Tensor* g = input_grad(self, 1)) {
      detail::gemm_tn(k, n, m, av.data(), self.grad.data(), g->data());
    }
  });
}

Var affine(const Var& x, const Var& w, const Var& b) {
  if (x.value().rank() != 2 || w.value().rank() != 2 || x.dim(1) != w.dim(0) ||
      b.size() != w.dim(1)) {
    throw Error(ErrorCode::kShapeMismatch, "affine: shapes " + shape_str(x.shape()) +
                                               ", " + shape_str(w.shape()) + ", " +
                                               shape_str(b.shape()));
  }
  const std::size_t rows = x.dim(0), in = x.dim(1), out_dim = w.dim(1);
  Tensor out({rows, out_dim});
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(b.value().data(), out_dim, out.data() + r * out_dim);
  detail::gemm_nn(rows, out_dim, in, x.value().data(), w.value().data(), out.data(),
                  true);
  return make_op("affine", std::move(out), {x, w, b}, [rows, in, out_dim](Node& self) {
    const double* gy = self.grad.data();
    if (Tensor* g = input_grad(self, 0)) {
      auto wt = detail::transpose(input_value(self, 1).data(), in, out_dim);
      detail::gemm_nn(rows, in, out_dim, gy, wt.data(), g->data(), true);
    }
    if (Tensor* g = input_grad(self, 1)) {
      detail::gemm_tn(in, out_dim, rows, input_value(self, 0).data(), gy, g->data());
    }
    if (Tensor* g = input_grad(self, 2)) {
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < out_dim; ++j) (*g)[j] += gy[r * out_dim + j];
    }
  });
}

namespace {

std::size_t conv_out(std::size_t in, std::size_t k, int stride, int pad) {
  const long span = static_cast<long>(in) + 2L * pad - static_cast<long>(k);
  if (span < 0) throw Error(ErrorCode::kShapeMismatch, "conv kernel larger than input");
  return static_cast<std::size_t>(span / stride + 1);
}

// [B, C, P] <-> [B*P, C]
std::vector<double> channels_last(const double* src, std::size_t batch,
                                  std::size_t channels, std::size_t plane) {
  std::vector<double> out(batch * channels * plane);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        out[(b * plane + p) * channels + c] = src[(b * channels + c) * plane + p];
  return out;
}

void channels_first_add(const double* src, std::size_t batch, std::size_t channels,
                        std::size_t plane, double* dst) {
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t c = 0; c < channels; ++c)
      for (std::size_t p = 0; p < plane; ++p)
        dst[(b * channels + c) * plane + p] += src[(b * plane + p) * channels + c];
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(1) ||
      b.size() != wv.dim(0) || stride < 1 || pad < 0) {
    throw Error(ErrorCode::kShapeMismatch, "conv2d: shapes " + shape_str(x.shape()) +
                                               ", " + shape_str(w.shape()));
  }
  ConvGeometry g{xv.dim(0), xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(2), wv.dim(3),
                 stride,    pad,       0,         0};
  g.out_h = conv_out(g.height, g.kh, stride, pad);
  g.out_w = conv_out(g.width, g.kw, stride, pad);
  const std::size_t out_ch = wv.dim(0);
  const std::size_t plane = g.out_h * g.out_w;

  auto cols = std::make_shared<std::vector<double>>(g.rows() * g.cols());
  detail::im2col(g, xv.data(), cols->data());
  auto wt = detail::transpose(wv.data(), out_ch, g.cols());
  std::vector<double> mat(g.rows() * out_ch);
  detail::gemm_nn(g.rows(), out_ch, g.cols(), cols->data(), wt.data(), mat.data(),
                  false);
  Tensor out({g.batch, out_ch, g.out_h, g.out_w});
  channels_first_add(mat.data(), g.batch, out_ch, plane, out.data());
  for (std::size_t bi = 0; bi < g.batch; ++bi)
    for (std::size_t c = 0; c < out_ch; ++c) {
      double* p = out.data() + (bi * out_ch + c) * plane;
      const double bias = b.value()[c];
      for (std::size_t i = 0; i < plane; ++i) p[i] += bias;
    }

  return make_op("conv2d", std::move(out), {x, w, b},
                 [g, out_ch, plane, cols](Node& self) {
                   auto gmat = channels_last(self.grad.data(), g.batch, out_ch, plane);
                   if (Tensor* gw = input_grad(self, 1)) {
                     // gw[O, CK] += gmat^T * cols
                     detail::gemm_tn(out_ch, g.cols(), g.rows(), gmat.data(),
                                     cols->data(), gw->data());
                   }
                   if (Tensor* gx = input_grad(self, 0)) {
                     std::vector<double> gcols(g.rows() * g.cols());
                     detail::gemm_nn(g.rows(), g.cols(), out_ch, gmat.data(),
                                     input_value(self, 1).data(), gcols.data(), false);
                     detail::col2im(g, gcols.data(), gx->data());
                   }
                   if (Tensor* gb = input_grad(self, 2)) {
                     for (std::size_t r = 0; r < g.rows(); ++r)
                       for (std::size_t c = 0; c < out_ch; ++c)
                         (*gb)[c] += gmat[r * out_ch + c];
                   }
                 });
}

Var conv_transpose2d(const Var& x, const Var& w, const Var& b, int stride, int pad,
                     std::size_t out_h, std::size_t out_w) {
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (xv.rank() != 4 || wv.rank() != 4 || xv.dim(1) != wv.dim(0) ||
      b.size() != wv.dim(1) || stride < 1 || pad < 0) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv_transpose2d: shapes " + shape_str(x.shape()) + ", " +
                    shape_str(w.shape()));
  }
  const std::size_t batch = xv.dim(0), in_ch = xv.dim(1), in_h = xv.dim(2),
                    in_w = xv.dim(3), out_ch = wv.dim(1);
  // The geometry of the forward convolution this op is the adjoint of.
  ConvGeometry g{batch, out_ch, out_h, out_w, wv.dim(2), wv.dim(3), stride, pad, 0, 0};
  g.out_h = conv_out(out_h, g.kh, stride, pad);
  g.out_w = conv_out(out_w, g.kw, stride, pad);
  if (g.out_h != in_h || g.out_w != in_w) {
    throw Error(ErrorCode::kShapeMismatch,
                "conv_transpose2d: output size incompatible with input " +
                    shape_str(x.shape()));
  }
  const std::size_t in_plane = in_h * in_w;
  const std::size_t out_plane = out_h * out_w;

  auto xmat = std::make_shared<std::vector<double>>(
      channels_last(xv.data(), batch, in_ch, in_plane));
  std::vector<double> cols(g.rows() * g.cols());
  detail::gemm_nn(g.rows(), g.cols(), in_ch, xmat->data(), wv.data(), cols.data(),
                  false);
  Tensor out({batch, out_ch, out_h, out_w});
  detail::col2im(g, cols.data(), out.data());
  for (std::size_t bi = 0; bi < batch; ++bi)
    for (std::size_t c = 0; c < out_ch; ++c) {
      double* p = out.data() + (bi * out_ch + c) * out_plane;
      const double bias = b.value()[c];
      for (std::size_t i = 0; i < out_plane; ++i) p[i] += bias;
    }

  return make_op(
      "conv_transpose2d", std::move(out), {x, w, b},
      [g, in_ch, in_plane, out_plane, xmat](Node& self) {
        const bool need_cols = self.inputs[0]->requires_grad || self.inputs[1]->requires_grad;
        std::vector<double> gcols;
        if (need_cols) {
          gcols.resize(g.rows() * g.cols());
          detail::im2col(g, self.grad.data(), gcols.data());
        }
        if (Tensor* gx = input_grad(self, 0)) {
          auto wt = detail::transpose(input_value(self, 1).data(), in_ch, g.cols());
          std::vector<double> gxm(g.rows() * in_ch);
          detail::gemm_nn(g.rows(), in_ch, g.cols(), gcols.data(), wt.data(),
                          gxm.data(), false);
          channels_first_add(gxm.data(), g.batch, in_ch, in_plane, gx->data());
        }
        if (Tensor* gw = input_grad(self, 1)) {
          detail::gemm_tn(in_ch, g.cols(), g.rows(), xmat->data(), gcols.data(),
                          gw->data());
        }
        if (Tensor* gb = input_grad(self, 2)) {
          for (std::size_t bi = 0; bi < g.batch; ++bi)
            for (std::size_t c = 0; c < g.channels; ++c) {
              const double* p = self.grad.data() + (bi * g.channels + c) * out_plane;
              double s = 0.0;
              for (std::size_t i = 0; i < out_plane; ++i) s += p[i];
              (*gb)[c] += s;
            }
        }
      });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(const Var& a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return make_op("sum", Tensor::scalar(s), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const double gy = self.grad[0];
      for (double& v : g->values()) v += gy;
    }
  });
}

Var mean(const Var& a) { return scale(sum(a), 1.0 / static_cast<double>(a.size())); }

Var sum_rows(const Var& a) {
  const std::size_t rows = rows_of(a);
  const std::size_t cols = a.size() / rows;
  Tensor out({rows});
  const double* x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += x[r * cols + j];
    out[r] = s;
  }
  return make_op("sum_rows", std::move(out), {a}, [rows, cols](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < cols; ++j) (*g)[r * cols + j] += self.grad[r];
  });
}

Var mean_rows(const Var& a) {
  return scale(sum_rows(a), static_cast<double>(rows_of(a)) / static_cast<double>(a.size()));
}

Var max_all(const Var& a) {
  const auto vals = a.value().values();
  const std::size_t arg =
      static_cast<std::size_t>(std::max_element(vals.begin(), vals.end()) - vals.begin());
  return make_op("max_all", Tensor::scalar(vals[arg]), {a}, [arg](Node& self) {
    if (Tensor* g = input_grad(self, 0)) (*g)[arg] += self.grad[0];
  });
}

Var max_rows(const Var& a) {
  const std::size_t rows = rows_of(a);
  const std::size_t cols = a.size() / rows;
  Tensor out({rows});
  std::vector<std::size_t> arg(rows);
  const double* x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x + r * cols;
    arg[r] = static_cast<std::size_t>(std::max_element(row, row + cols) - row);
    out[r] = row[arg[r]];
  }
  return make_op("max_rows", std::move(out), {a}, [cols, arg](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t r = 0; r < arg.size(); ++r) (*g)[r * cols + arg[r]] += self.grad[r];
  });
}

Var soft_max_rows(const Var& a, double tau) {
  const std::size_t rows = rows_of(a);
  const std::size_t cols = a.size() / rows;
  Tensor out({rows});
  auto weights = std::make_shared<std::vector<double>>(a.size());
  const double* x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = x + r * cols;
    double* w = weights->data() + r * cols;
    const double mx = *std::max_element(row, row + cols);
    double z = 0.0;
    for (std::size_t j = 0; j < cols; ++j) z += (w[j] = std::exp(tau * (row[j] - mx)));
    double y = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      w[j] /= z;
      y += w[j] * row[j];
    }
    out[r] = y;
  }
  return make_op("soft_max_rows", std::move(out), {a},
                 [rows, cols, tau, weights](Node& self) {
                   Tensor* g = input_grad(self, 0);
                   if (!g) return;
                   const double* x = input_value(self, 0).data();
                   for (std::size_t r = 0; r < rows; ++r) {
                     const double y = self.value[r];
                     const double gy = self.grad[r];
                     for (std::size_t j = 0; j < cols; ++j) {
                       const std::size_t i = r * cols + j;
                       (*g)[i] += gy * (*weights)[i] * (1.0 + tau * (x[i] - y));
                     }
                   }
                 });
}

Var mean_axis0(const Var& a) {
  const std::size_t k = rows_of(a);
  const std::size_t inner = a.size() / k;
  Shape shape(a.shape().begin() + 1, a.shape().end());
  if (shape.empty()) shape = {1};
  Tensor out(shape, 0.0);
  const double* x = a.value().data();
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < inner; ++j) out[j] += x[r * inner + j];
  for (double& v : out.values()) v /= static_cast<double>(k);
  return make_op("mean_axis0", std::move(out), {a}, [k, inner](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t j = 0; j < inner; ++j)
          (*g)[r * inner + j] += self.grad[j] / static_cast<double>(k);
  });
}

Var variance_axis0(const Var& a) {
  const std::size_t k = rows_of(a);
  const std::size_t inner = a.size() / k;
  Shape shape(a.shape().begin() + 1, a.shape().end());
  if (shape.empty()) shape = {1};
  auto mu = std::make_shared<std::vector<double>>(inner, 0.0);
  const double* x = a.value().data();
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < inner; ++j) (*mu)[j] += x[r * inner + j];
  for (double& v : *mu) v /= static_cast<double>(k);
  Tensor out(shape, 0.0);
  for (std::size_t r = 0; r < k; ++r)
    for (std::size_t j = 0; j < inner; ++j) {
      const double d = x[r * inner + j] - (*mu)[j];
      out[j] += d * d;
    }
  for (double& v : out.values()) v /= static_cast<double>(k);
  return make_op("variance_axis0", std::move(out), {a}, [k, inner, mu](Node& self) {
    Tensor* g = input_grad(self, 0);
    if (!g) return;
    const double* x = input_value(self, 0).data();
    const double c = 2.0 / static_cast<double>(k);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t j = 0; j < inner; ++j)
        (*g)[r * inner + j] += self.grad[j] * c * (x[r * inner + j] - (*mu)[j]);
  });
}

Var l2_norm_rows(const Var& a) {
  const std::size_t rows = rows_of(a);
  const std::size_t cols = a.size() / rows;
  Tensor out({rows});
  const double* x = a.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::size_t j = 0; j < cols; ++j) s += x[r * cols + j] * x[r * cols + j];
    out[r] = std::sqrt(s);
  }
  return make_op("l2_norm_rows", std::move(out), {a}, [rows, cols](Node& self) {
    Tensor* g = input_grad(self, 0);
    if (!g) return;
    const double* x = input_value(self, 0).data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double n = self.value[r];
      if (n == 0.0) continue;  // subgradient 0 at the origin
      const double c = self.grad[r] / n;
      for (std::size_t j = 0; j < cols; ++j) (*g)[r * cols + j] += c * x[r * cols + j];
    }
  });
}

// ---------------------------------------------------------------------------
// shape

Var reshape(const Var& a, Shape shape) {
  Tensor out = a.value().reshape(std::move(shape));
  return make_op("reshape", std::move(out), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += self.grad[i];
  });
}

namespace {

struct AxisSplit {
  std::size_t outer, axis, inner;
};

AxisSplit split_at(const Shape& s, std::size_t axis) {
  AxisSplit r{1, s.at(axis), 1};
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

}  // namespace

Var slice(const Var& a, std::size_t axis, std::size_t start, std::size_t len) {
  if (axis >= a.shape().size() || len == 0 || start + len > a.dim(axis)) {
    throw Error(ErrorCode::kShapeMismatch, "slice out of range on " + shape_str(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), axis);
  Shape shape = a.shape();
  shape[axis] = len;
  Tensor out(shape);
  const double* x = a.value().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(x + (o * s.axis + start) * s.inner, len * s.inner,
                out.data() + o * len * s.inner);
  return make_op("slice", std::move(out), {a}, [s, start, len](Node& self) {
    Tensor* g = input_grad(self, 0);
    if (!g) return;
    for (std::size_t o = 0; o < s.outer; ++o) {
      double* dst = g->data() + (o * s.axis + start) * s.inner;
      const double* src = self.grad.data() + o * len * s.inner;
      for (std::size_t i = 0; i < len * s.inner; ++i) dst[i] += src[i];
    }
  });
}

Var concat(const std::vector<Var>& parts, std::size_t axis) {
  if (parts.empty()) throw Error(ErrorCode::kInvalidArgument, "concat of nothing");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw Error(ErrorCode::kShapeMismatch, "concat axis");
  std::size_t total = 0;
  for (const Var& p : parts) {
    Shape ps = p.shape();
    if (ps.size() != shape.size()) throw Error(ErrorCode::kShapeMismatch, "concat rank");
    total += ps[axis];
    ps[axis] = shape[axis];
    if (ps != shape) {
      throw Error(ErrorCode::kShapeMismatch, "concat: incompatible " + shape_str(p.shape()));
    }
  }
  shape[axis] = total;
  const AxisSplit s = split_at(shape, axis);
  Tensor out(shape);
  std::vector<std::size_t> widths;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t w = p.dim(axis) * s.inner;
    for (std::size_t o = 0; o < s.outer; ++o)
      std::copy_n(p.value().data() + o * w, w, out.data() + o * total * s.inner + offset);
    widths.push_back(w);
    offset += w;
  }
  return make_op("concat", std::move(out), parts, [s, total, widths](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < widths.size(); ++k) {
      const std::size_t w = widths[k];
      if (Tensor* g = input_grad(self, k)) {
        for (std::size_t o = 0; o < s.outer; ++o) {
          const double* src = self.grad.data() + o * total * s.inner + off;
          double* dst = g->data() + o * w;
          for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
        }
      }
      off += w;
    }
  });
}

Var tile0(const Var& a, std::size_t k) {
  if (k == 0) throw Error(ErrorCode::kInvalidArgument, "tile0 with k = 0");
  Shape shape = a.shape();
  shape[0] *= k;
  Tensor out(shape);
  const std::size_t n = a.size();
  for (std::size_t r = 0; r < k; ++r) std::copy_n(a.value().data(), n, out.data() + r * n);
  return make_op("tile0", std::move(out), {a}, [k, n](Node& self) {
    if (Tensor* g = input_grad(self, 0))
      for (std::size_t r = 0; r < k; ++r)
        for (std::size_t i = 0; i < n; ++i) (*g)[i] += self.grad[r * n + i];
  });
}

// ---------------------------------------------------------------------------
// dropout

Tensor DropoutMask::keep(const Shape& shape) const {
  if (!(rate >= 0.0 && rate < 1.0)) {
    throw Error(ErrorCode::kInvalidArgument,
                "dropout rate must lie in [0, 1); got " + std::to_string(rate));
  }
  Tensor m(shape, 1.0);
  if (rate == 0.0) return m;
  const std::uint64_t base = hash_combine(seed, layer);
  for (std::size_t i = 0; i < m.size(); ++i) {
    const std::uint64_t h = splitmix64(base + 0x9e3779b97f4a7c15ULL * (i + 1));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    m[i] = u < rate ? 0.0 : 1.0;
  }
  return m;
}

Tensor DropoutMask::scaled(const Shape& shape) const {
  Tensor m = keep(shape);
  const double inv = 1.0 / (1.0 - rate);
  for (double& v : m.values()) v *= inv;
  return m;
}

Var apply_dropout(const Var& x, const DropoutMask& mask) {
  if (mask.rate == 0.0) return x;
  return mul_const(x, mask.scaled(x.shape()));
}

// ---------------------------------------------------------------------------
// gradient checking

namespace {

double rel_err(double a, double n) {
  return std::abs(a - n) / (std::abs(a) + std::abs(n) + 1e-12);
}

std::vector<std::size_t> probe_coords(std::size_t n, std::size_t max_coords) {
  std::vector<std::size_t> idx;
  if (max_coords == 0 || max_coords >= n) {
    idx.resize(n);
    for (std::size_t i = 0; i < n; ++i) idx[i] = i;
  } else {
    for (std::size_t j = 0; j < max_coords; ++j) idx.push_back(j * n / max_coords);
  }
  return idx;
}

double checked_item(const Var& v) {
  if (v.size() != 1) throw Error(ErrorCode::kShapeMismatch, "grad_check needs a scalar f");
  const double y = v.item();
  if (!std::isfinite(y)) throw Error(ErrorCode::kNumeric, "f is non-finite at probe point");
  return y;
}

}  // namespace

double grad_check(const std::function<Var(const Var&)>& f, const Tensor& x, double eps,
                  std::size_t max_coords) {
  Var p = Var::parameter(x);
  Var y = f(p);
  checked_item(y);
  backward(y);
  const Tensor analytic = p.has_grad() ? p.grad() : Tensor(x.shape(), 0.0);
  double worst = 0.0;
  for (std::size_t i : probe_coords(x.size(), max_coords)) {
    Tensor xp = x, xm = x;
    xp[i] += eps;
    xm[i] -= eps;
    const double fp = checked_item(f(Var::constant(xp)));
    const double fm = checked_item(f(Var::constant(xm)));
    worst = std::max(worst, rel_err(analytic[i], (fp - fm) / (2.0 * eps)));
  }
  return worst;
}

double grad_check_params(const std::function<Var()>& loss, const std::vector<Var>& params,
                         double eps, std::size_t max_coords_per_param) {
  for (Var p : params) p.zero_grad();
  backward(loss());
  double worst = 0.0;
  for (Var p : params) {
    const Tensor analytic = p.has_grad() ? p.grad() : Tensor(p.shape(), 0.0);
    Tensor& v = p.mutable_value();
    for (std::size_t i : probe_coords(v.size(), max_coords_per_param)) {
      const double orig = v[i];
      v[i] = orig + eps;
      const double fp = checked_item(loss());
      v[i] = orig - eps;
      const double fm = checked_item(loss());
      v[i] = orig;
      worst = std::max(worst, rel_err(analytic[i], (fp - fm) / (2.0 * eps)));
    }
  }
  for (Var p : params) p.zero_grad();
  return worst;
}

}  // namespace mpur
