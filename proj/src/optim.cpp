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

#include "mpur/optim.hpp"

#include <cmath>

#include "mpur/error.hpp"

namespace mpur {

Adam::Adam(std::vector<Var> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (const Var& p : params_) {
    m_.emplace_back(p.shape(), 0.0);
    v_.emplace_back(p.shape(), 0.0);
  }
}

void Adam::zero_grad() {
  for (Var& p : params_) p.zero_grad();
}

double Adam::step() {
  double sq = 0.0;
  for (const Var& p : params_) {
    if (!p.has_grad()) continue;
    for (double g : p.grad().values()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw Error(ErrorCode::kNumeric, "non-finite gradient norm");
  const double clip =
      (cfg_.grad_clip > 0.0 && norm > cfg_.grad_clip) ? cfg_.grad_clip / norm : 1.0;

  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Var& p = params_[k];
    if (!p.has_grad()) continue;
    const Tensor& g = p.grad();
    Tensor& w = p.mutable_value();
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m_[k][i] = cfg_.beta1 * m_[k][i] + (1.0 - cfg_.beta1) * gi;
      v_[k][i] = cfg_.beta2 * v_[k][i] + (1.0 - cfg_.beta2) * gi * gi;
      w[i] -= cfg_.lr * (m_[k][i] / bc1) / (std::sqrt(v_[k][i] / bc2) + cfg_.eps);
    }
  }
  return norm;
}

}  // namespace mpur
