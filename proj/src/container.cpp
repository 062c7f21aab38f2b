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

#include "mpur/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mpur/error.hpp"

namespace mpur {

namespace {

constexpr const char* kFormat = "mpur-container";
constexpr int kVersion = 1;

void put_f64(std::string& out, double v) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(v);
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

double get_f64(const char* p) {
  std::uint64_t bits = 0;
  for (int i = 0; i < 8; ++i)
    bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
  return std::bit_cast<double>(bits);
}

}  // namespace

const Tensor& Container::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) {
    throw Error(ErrorCode::kParse, "container has no tensor '" + name + "'");
  }
  return it->second;
}

std::string serialize_container(const Container& c) {
  nlohmann::json manifest;
  manifest["format"] = kFormat;
  manifest["version"] = kVersion;
  manifest["meta"] = c.meta;
  nlohmann::json entries = nlohmann::json::object();
  std::size_t offset = 0;
  for (const auto& [name, t] : c.tensors) {
    entries[name] = {{"shape", t.shape()}, {"dtype", "f64"}, {"offset", offset}};
    offset += t.size() * 8;
  }
  manifest["tensors"] = entries;
  std::string out = manifest.dump();
  out.push_back('\n');
  out.reserve(out.size() + offset);
  for (const auto& [_, t] : c.tensors)
    for (double v : t.values()) put_f64(out, v);
  return out;
}

Container parse_container(std::string_view bytes) {
  const std::size_t nl = bytes.find('\n');
  if (nl == std::string_view::npos) {
    throw Error(ErrorCode::kParse, "container: missing manifest terminator");
  }
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(bytes.substr(0, nl));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("container manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kFormat || manifest.value("version", 0) != kVersion) {
    throw Error(ErrorCode::kParse, "container: unknown format or version");
  }
  const std::string_view payload = bytes.substr(nl + 1);
  Container c;
  c.meta = manifest.value("meta", nlohmann::json::object());
  std::size_t expected = 0;
  for (const auto& [name, e] : manifest.at("tensors").items()) {
    if (e.at("dtype") != "f64") {
      throw Error(ErrorCode::kParse, "container: tensor '" + name + "' is not f64");
    }
    Shape shape = e.at("shape").get<Shape>();
    const std::size_t offset = e.at("offset").get<std::size_t>();
    const std::size_t n = shape_size(shape);
    if (offset != expected || offset + n * 8 > payload.size()) {
      throw Error(ErrorCode::kParse, "container: bad offset for tensor '" + name + "'");
    }
    std::vector<double> values(n);
    for (std::size_t i = 0; i < n; ++i) values[i] = get_f64(payload.data() + offset + 8 * i);
    c.tensors.emplace(name, Tensor(std::move(shape), std::move(values)));
    expected = offset + n * 8;
  }
  if (expected != payload.size()) {
    throw Error(ErrorCode::kParse, "container: trailing payload bytes");
  }
  return c;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIo, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::kIo, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::kIo, "write failed for " + path.string());
}

void write_container(const std::filesystem::path& path, const Container& c) {
  write_file(path, serialize_container(c));
}

Container read_container(const std::filesystem::path& path) {
  return parse_container(read_file(path));
}

}  // namespace mpur
