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

#include "mpur/tensor.hpp"

#include <algorithm>
#include <cmath>

#include "mpur/error.hpp"

namespace mpur {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_size(shape_), fill) {
  for (std::size_t d : shape_) {
    if (d == 0) {
      throw Error(ErrorCode::kShapeMismatch,
                  "tensor dimensions must be positive: " + shape_str(shape_));
    }
  }
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
  if (shape_size(shape_) != data_.size()) {
    throw Error(ErrorCode::kShapeMismatch,
                "data length " + std::to_string(data_.size()) +
                    " does not match shape " + shape_str(shape_));
  }
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw Error(ErrorCode::kShapeMismatch,
                "item() on non-scalar tensor " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw Error(ErrorCode::kShapeMismatch, "cannot reshape " + shape_str(shape_) +
                                               " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

void Tensor::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

}  // namespace mpur
