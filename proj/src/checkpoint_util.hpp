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

#include "json.hpp"
#include "mpur/container.hpp"
#include "mpur/data.hpp"
#include "mpur/error.hpp"
#include "mpur/nn.hpp"
#include "mpur/render.hpp"

// Shared checkpoint plumbing for the model, cost head and policy.
namespace mpur::detail {

using json = nlohmann::json;

inline json norm_json(const NormStats& n) {
  return {{"image_mean", n.image_mean}, {"image_std", n.image_std}, {"u_mean", n.u_mean},
          {"u_std", n.u_std}, {"action_mean", n.action_mean}, {"action_std", n.action_std}};
}

inline NormStats norm_from_json(const json& j) {
  NormStats n;
  j.at("image_mean").get_to(n.image_mean);
  j.at("image_std").get_to(n.image_std);
  j.at("u_mean").get_to(n.u_mean);
  j.at("u_std").get_to(n.u_std);
  j.at("action_mean").get_to(n.action_mean);
  j.at("action_std").get_to(n.action_std);
  return n;
}

inline json grid_json(const GridConfig& g) {
  return {{"height", g.height}, {"width", g.width}, {"meters_per_px_lon", g.meters_per_px_lon},
          {"meters_per_px_lat", g.meters_per_px_lat}, {"marking_width_px", g.marking_width_px}};
}

inline GridConfig grid_from_json(const json& j) {
  GridConfig g;
  g.height = j.at("height");
  g.width = j.at("width");
  g.meters_per_px_lon = j.at("meters_per_px_lon");
  g.meters_per_px_lat = j.at("meters_per_px_lat");
  g.marking_width_px = j.at("marking_width_px");
  return g;
}

inline Container params_container(const nn::ParamList& params) {
  Container c;
  for (const auto& [name, v] : params.entries()) c.tensors[name] = v.value();
  return c;
}

inline void load_params(const nn::ParamList& params, const Container& c) {
  for (const auto& [name, v] : params.entries()) {
    const Tensor& t = c.at(name);
    if (t.shape() != v.shape()) {
      throw Error(ErrorCode::kShapeMismatch, "checkpoint tensor " + name + " has shape " +
                                                 shape_str(t.shape()) + ", expected " + shape_str(v.shape()));
    }
    Var(v).mutable_value() = t;
  }
}

}  // namespace mpur::detail
