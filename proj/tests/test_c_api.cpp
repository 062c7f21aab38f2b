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

#include <filesystem>
#include <string>
#include <vector>

#include "doctest.h"
#include "mpur.h"

namespace fs = std::filesystem;

namespace {

const std::string kConfig = (fs::path(MPUR_SOURCE_DIR) / "configs" / "tiny.json").string();

fs::path fresh_dir() {
  const fs::path p = fs::temp_directory_path() / "mpur_test_c_api";
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("status reporting") {
  CHECK(std::string(mpur_status_name(MPUR_E_MISSING_ARTIFACT)) == "missing_artifact");
  CHECK(mpur_run(nullptr, kConfig.c_str(), "x", nullptr) == MPUR_E_INVALID_ARGUMENT);
  CHECK(std::string(mpur_last_error()).find("command") != std::string::npos);
  CHECK(mpur_run("gen-data", "/nonexistent/config.json", "x", nullptr) == MPUR_E_IO);
  CHECK(mpur_run("gen-data", kConfig.c_str(), "x", "{not json") == MPUR_E_PARSE);
  CHECK(mpur_run("gen-data", kConfig.c_str(), "x", "{\"colour\": 1}") == MPUR_E_CONFIG);
  char* resolved = nullptr;
  REQUIRE(mpur_config_resolve(kConfig.c_str(), &resolved) == MPUR_OK);
  CHECK(std::string(mpur_last_error()).empty());
  CHECK(std::string(resolved).find("\"max_horizon\": 4") != std::string::npos);
  mpur_string_free(resolved);
}

TEST_CASE("gym-like episode through the C API") {
  const fs::path out = fresh_dir();
  CHECK(mpur_run("train-model", kConfig.c_str(), out.c_str(), nullptr) == MPUR_E_MISSING_ARTIFACT);
  REQUIRE(mpur_run("gen-data", kConfig.c_str(), out.c_str(), nullptr) == MPUR_OK);
  REQUIRE(mpur_run("train-policy", kConfig.c_str(), out.c_str(), "{\"method\": \"noop\", \"seed\": 3}") == MPUR_OK);

  mpur_dataset* d = nullptr;
  REQUIRE(mpur_dataset_load((out / "data" / "dataset.mpur").c_str(), &d) == MPUR_OK);
  size_t n_cars = 0, n_test = 0;
  CHECK(mpur_dataset_car_count(d, &n_cars) == MPUR_OK);
  CHECK(mpur_dataset_split(d, MPUR_SPLIT_TEST, nullptr, 0, &n_test) == MPUR_OK);
  REQUIRE(n_test > 0);
  CHECK(n_test < n_cars);
  std::vector<size_t> test(n_test);
  CHECK(mpur_dataset_split(d, MPUR_SPLIT_TEST, test.data(), test.size(), &n_test) == MPUR_OK);

  mpur_policy* p = nullptr;
  REQUIRE(mpur_policy_load((out / "policy" / "noop" / "seed3" / "policy.mpur").c_str(), &p) == MPUR_OK);

  mpur_episode* e = nullptr;
  CHECK(mpur_episode_create(d, n_cars, kConfig.c_str(), &e) == MPUR_E_INVALID_ARGUMENT);
  REQUIRE(mpur_episode_create(d, test[0], kConfig.c_str(), &e) == MPUR_OK);

  size_t image_size = 0;
  double u[4];
  CHECK(mpur_episode_observation(e, nullptr, 0, &image_size, u) == MPUR_OK);
  CHECK(image_size > 0);
  std::vector<double> image(image_size);
  CHECK(mpur_episode_observation(e, image.data(), image.size() - 1, nullptr, nullptr) == MPUR_E_INVALID_ARGUMENT);
  CHECK(mpur_episode_observation(e, image.data(), image.size(), nullptr, nullptr) == MPUR_OK);

  mpur_episode_result r;
  CHECK(mpur_episode_result_get(e, &r) == MPUR_E_STATE);
  mpur_vehicle start;
  CHECK(mpur_episode_ego(e, &start) == MPUR_OK);

  mpur_step_info info{};
  int steps = 0;
  while (!info.done) {
    double ds = 1.0, da = 1.0;
    REQUIRE(mpur_policy_act(p, e, 0, 0, &ds, &da) == MPUR_OK);
    CHECK(ds == 0.0);
    CHECK(da == 0.0);
    REQUIRE(mpur_episode_step(e, ds, da, &info) == MPUR_OK);
    ++steps;
    REQUIRE(steps <= 60);
  }
  CHECK(mpur_episode_step(e, 0.0, 0.0, &info) == MPUR_E_STATE);
  REQUIRE(mpur_episode_result_get(e, &r) == MPUR_OK);
  CHECK(r.steps == steps);
  CHECK(r.car_id == start.car_id);
  CHECK(r.termination == info.termination);
  CHECK(r.distance_m > 0.0);

  mpur_episode_free(e);
  mpur_policy_free(p);
  mpur_dataset_free(d);
  fs::remove_all(out);
}
