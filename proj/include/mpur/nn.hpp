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

#include <string>
#include <utility>
#include <vector>

#include "mpur/autodiff.hpp"
#include "mpur/rng.hpp"

namespace mpur::nn {

// PyTorch-style default init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor uniform_init(const Shape& shape, std::size_t fan_in, Rng& rng, double gain = 1.0);

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [out]

  static Linear make(std::size_t in, std::size_t out, Rng& rng, double gain = 1.0);
  Var operator()(const Var& x) const { return affine(x, weight, bias); }
};

struct Conv2d {
  Var weight;  // [out, in, k, k]
  Var bias;
  int stride = 1;
  int pad = 0;

  static Conv2d make(std::size_t in, std::size_t out, std::size_t k, int stride, int pad,
                     Rng& rng);
  Var operator()(const Var& x) const { return conv2d(x, weight, bias, stride, pad); }
};

struct ConvTranspose2d {
  Var weight;  // [in, out, k, k]
  Var bias;
  int stride = 1;
  int pad = 0;
  std::size_t out_h = 0;
  std::size_t out_w = 0;

  static ConvTranspose2d make(std::size_t in, std::size_t out, std::size_t k, int stride,
                              int pad, std::size_t out_h, std::size_t out_w, Rng& rng);
  Var operator()(const Var& x) const {
    return conv_transpose2d(x, weight, bias, stride, pad, out_h, out_w);
  }
};

// Output size of a stride-s, pad-p, k-kernel convolution.
std::size_t conv_out_size(std::size_t in, std::size_t k, int stride, int pad);

// Ordered, named parameter registry.
class ParamList {
 public:
  void add(const std::string& name, const Var& v) { entries_.emplace_back(name, v); }
  void add(const std::string& prefix, const Linear& l);
  void add(const std::string& prefix, const Conv2d& c);
  void add(const std::string& prefix, const ConvTranspose2d& c);

  const std::vector<std::pair<std::string, Var>>& entries() const& { return entries_; }
  // By value on temporaries so range-for over parameters().entries() is safe.
  std::vector<std::pair<std::string, Var>> entries() && { return std::move(entries_); }
  std::vector<Var> vars() const;
  std::size_t count() const;  // total scalar parameters
  void set_requires_grad(bool on) const;

 private:
  std::vector<std::pair<std::string, Var>> entries_;
};

}  // namespace mpur::nn
