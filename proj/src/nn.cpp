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

#include "mpur/nn.hpp"

#include <cmath>

#include "mpur/error.hpp"

namespace mpur::nn {

Tensor uniform_init(const Shape& shape, std::size_t fan_in, Rng& rng, double gain) {
  Tensor t(shape);
  const double bound = gain / std::sqrt(static_cast<double>(fan_in));
  for (double& v : t.values()) v = rng.uniform(-bound, bound);
  return t;
}

Linear Linear::make(std::size_t in, std::size_t out, Rng& rng, double gain) {
  Linear l;
  l.weight = Var::parameter(uniform_init({in, out}, in, rng, gain));
  l.bias = Var::parameter(uniform_init({out}, in, rng, gain));
  return l;
}

Conv2d Conv2d::make(std::size_t in, std::size_t out, std::size_t k, int stride, int pad,
                    Rng& rng) {
  Conv2d c;
  const std::size_t fan_in = in * k * k;
  c.weight = Var::parameter(uniform_init({out, in, k, k}, fan_in, rng));
  c.bias = Var::parameter(uniform_init({out}, fan_in, rng));
  c.stride = stride;
  c.pad = pad;
  return c;
}

ConvTranspose2d ConvTranspose2d::make(std::size_t in, std::size_t out, std::size_t k,
                                      int stride, int pad, std::size_t out_h,
                                      std::size_t out_w, Rng& rng) {
  ConvTranspose2d c;
  const std::size_t fan_in = in * k * k;
  c.weight = Var::parameter(uniform_init({in, out, k, k}, fan_in, rng));
  c.bias = Var::parameter(uniform_init({out}, fan_in, rng));
  c.stride = stride;
  c.pad = pad;
  c.out_h = out_h;
  c.out_w = out_w;
  return c;
}

std::size_t conv_out_size(std::size_t in, std::size_t k, int stride, int pad) {
  const long span = static_cast<long>(in) + 2L * pad - static_cast<long>(k);
  if (span < 0) throw Error(ErrorCode::kShapeMismatch, "kernel larger than input");
  return static_cast<std::size_t>(span / stride + 1);
}

void ParamList::add(const std::string& prefix, const Linear& l) {
  add(prefix + ".weight", l.weight);
  add(prefix + ".bias", l.bias);
}

void ParamList::add(const std::string& prefix, const Conv2d& c) {
  add(prefix + ".weight", c.weight);
  add(prefix + ".bias", c.bias);
}

void ParamList::add(const std::string& prefix, const ConvTranspose2d& c) {
  add(prefix + ".weight", c.weight);
  add(prefix + ".bias", c.bias);
}

std::vector<Var> ParamList::vars() const {
  std::vector<Var> out;
  out.reserve(entries_.size());
  for (const auto& [_, v] : entries_) out.push_back(v);
  return out;
}

std::size_t ParamList::count() const {
  std::size_t n = 0;
  for (const auto& [_, v] : entries_) n += v.size();
  return n;
}

void ParamList::set_requires_grad(bool on) const {
  for (auto [_, v] : entries_) v.set_requires_grad(on);
}

}  // namespace mpur::nn
