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

#include <filesystem>
#include <map>
#include <string>
#include <string_view>

#include "json.hpp"
#include "mpur/tensor.hpp"

namespace mpur {

// Checkpoint container: one line of compact UTF-8 JSON manifest
// (tensor name -> shape, dtype "f64", byte offset into the payload), a '\n',
// then the contiguous little-endian IEEE-754 payload in name order.
struct Container {
  std::map<std::string, Tensor> tensors;
  nlohmann::json meta = nlohmann::json::object();

  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) > 0; }
};

std::string serialize_container(const Container& c);
Container parse_container(std::string_view bytes);

void write_container(const std::filesystem::path& path, const Container& c);
Container read_container(const std::filesystem::path& path);

// Whole-file helpers shared by the artifact writers.
std::string read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::string_view bytes);

}  // namespace mpur
