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

#include <cstdlib>
#include <cstring>
#include <exception>
#include <memory>
#include <string>

#include "mpur.h"
#include "mpur/error.hpp"
#include "mpur/harness.hpp"
#include "mpur/rng.hpp"

using namespace mpur;

struct mpur_dataset {
  TrajectoryDataset data;
};
struct mpur_model {
  std::unique_ptr<ForwardModel> model;
};
struct mpur_policy {
  std::unique_ptr<PolicyNetwork> policy;
};
struct mpur_episode {
  std::unique_ptr<ReplayEpisode> episode;
};

namespace {

thread_local std::string g_last_error;

mpur_status fail(mpur_status s, std::string msg) {
  g_last_error = std::move(msg);
  return s;
}

// Maps exceptions to status codes so nothing crosses the C boundary.
template <class F>
mpur_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return MPUR_OK;
  } catch (const Error& e) {
    return fail(static_cast<mpur_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(MPUR_E_PARSE, e.what());
  } catch (const std::bad_alloc&) {
    return fail(MPUR_E_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(MPUR_E_INTERNAL, e.what());
  } catch (...) {
    return fail(MPUR_E_INTERNAL, "unknown error");
  }
}

void need(const void* p, const char* what) {
  if (!p) throw Error(ErrorCode::kInvalidArgument, std::string(what) + " must not be NULL");
}

mpur_termination to_c(Termination t) {
  switch (t) {
    case Termination::kCollision: return MPUR_COLLISION;
    case Termination::kOffRoad: return MPUR_OFF_ROAD;
    case Termination::kEndOfSegment: return MPUR_END_OF_SEGMENT;
    case Termination::kMaxSteps: return MPUR_MAX_STEPS;
    case Termination::kNone: break;
  }
  return MPUR_RUNNING;
}

}  // namespace

extern "C" {

const char* mpur_last_error(void) { return g_last_error.c_str(); }

const char* mpur_version(void) { return "0.1.0"; }

const char* mpur_status_name(mpur_status s) {
  switch (s) {
    case MPUR_OK: return "ok";
    case MPUR_E_INVALID_ARGUMENT: return "invalid_argument";
    case MPUR_E_SHAPE_MISMATCH: return "shape_mismatch";
    case MPUR_E_NUMERIC: return "numeric";
    case MPUR_E_UNSUPPORTED_OP: return "unsupported_op";
    case MPUR_E_IO: return "io";
    case MPUR_E_PARSE: return "parse";
    case MPUR_E_CONFIG: return "config";
    case MPUR_E_MISSING_ARTIFACT: return "missing_artifact";
    case MPUR_E_STATE: return "state";
    case MPUR_E_INFEASIBLE_ACTION: return "infeasible_action";
    case MPUR_E_STATISTICS: return "statistics";
    case MPUR_E_INTERNAL: return "internal";
  }
  return "unknown";
}

mpur_status mpur_run(const char* command, const char* config_path, const char* out_dir, const char* overrides_json) {
  return guard([&] {
    need(command, "command");
    need(config_path, "config_path");
    need(out_dir, "out_dir");
    Overrides o;
    if (overrides_json && *overrides_json) o = Overrides::from_json(nlohmann::json::parse(overrides_json));
    const RunConfig cfg = apply_overrides(RunConfig::load(config_path), o, command);
    run_command(command, cfg, out_dir);
  });
}

mpur_status mpur_config_resolve(const char* config_path, char** resolved) {
  return guard([&] {
    need(config_path, "config_path");
    const RunConfig cfg = RunConfig::load(config_path);
    if (resolved) {
      const std::string s = cfg.to_json().dump(2);
      *resolved = static_cast<char*>(std::malloc(s.size() + 1));
      if (!*resolved) throw std::bad_alloc();
      std::memcpy(*resolved, s.c_str(), s.size() + 1);
    }
  });
}

void mpur_string_free(char* s) { std::free(s); }

mpur_status mpur_dataset_load(const char* path, mpur_dataset** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto d = std::make_unique<mpur_dataset>();
    d->data = load_dataset(path);
    *out = d.release();
  });
}

void mpur_dataset_free(mpur_dataset* d) { delete d; }

mpur_status mpur_dataset_car_count(const mpur_dataset* d, size_t* count) {
  return guard([&] {
    need(d, "dataset");
    need(count, "count");
    *count = d->data.cars.size();
  });
}

mpur_status mpur_dataset_split(const mpur_dataset* d, mpur_split split, size_t* indices, size_t capacity,
                               size_t* count) {
  return guard([&] {
    need(d, "dataset");
    if (split < MPUR_SPLIT_TRAIN || split > MPUR_SPLIT_SCENE_ONLY)
      throw Error(ErrorCode::kInvalidArgument, "unknown split");
    const std::vector<std::size_t> cars = d->data.cars_in(static_cast<Split>(split));
    if (count) *count = cars.size();
    if (indices)
      for (std::size_t i = 0; i < cars.size() && i < capacity; ++i) indices[i] = cars[i];
  });
}

mpur_status mpur_model_load(const char* path, mpur_model** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto m = std::make_unique<mpur_model>();
    m->model = std::make_unique<ForwardModel>(ForwardModel::load(read_container(path)));
    *out = m.release();
  });
}

void mpur_model_free(mpur_model* m) { delete m; }

mpur_status mpur_model_info(const mpur_model* m, int* stochastic, size_t* parameter_count) {
  return guard([&] {
    need(m, "model");
    if (stochastic) *stochastic = m->model->mode == ModelMode::kStochastic ? 1 : 0;
    if (parameter_count) *parameter_count = m->model->parameters().count();
  });
}

mpur_status mpur_policy_load(const char* path, mpur_policy** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    *out = nullptr;
    auto p = std::make_unique<mpur_policy>();
    p->policy = std::make_unique<PolicyNetwork>(PolicyNetwork::load(read_container(path)));
    *out = p.release();
  });
}

void mpur_policy_free(mpur_policy* p) { delete p; }

mpur_status mpur_episode_create(const mpur_dataset* d, size_t car, const char* config_path, mpur_episode** out) {
  return guard([&] {
    need(d, "dataset");
    need(out, "out");
    *out = nullptr;
    if (car >= d->data.cars.size()) throw Error(ErrorCode::kInvalidArgument, "car index out of range");
    const RunConfig cfg = config_path ? RunConfig::load(config_path) : RunConfig{};
    auto e = std::make_unique<mpur_episode>();
    e->episode = std::make_unique<ReplayEpisode>(d->data, car, env_config(cfg));
    *out = e.release();
  });
}

void mpur_episode_free(mpur_episode* e) { delete e; }

mpur_status mpur_episode_step(mpur_episode* e, double dspeed, double dangle, mpur_step_info* info) {
  return guard([&] {
    need(e, "episode");
    if (e->episode->done()) throw Error(ErrorCode::kState, "episode already terminated");
    const ReplayEpisode::StepOutput s = e->episode->step(Action{dspeed, dangle});
    if (info) {
      info->proximity_cost = s.cost.proximity;
      info->lane_cost = s.cost.lane;
      info->done = s.done ? 1 : 0;
      info->termination = s.done ? to_c(s.done->termination) : MPUR_RUNNING;
    }
  });
}

mpur_status mpur_episode_ego(const mpur_episode* e, mpur_vehicle* out) {
  return guard([&] {
    need(e, "episode");
    need(out, "out");
    const VehicleState& v = e->episode->ego();
    *out = {v.position.x, v.position.y, v.velocity.x, v.velocity.y, v.length, v.width, v.car_id};
  });
}

mpur_status mpur_episode_observation(const mpur_episode* e, double* image, size_t capacity, size_t* image_size,
                                     double u[4]) {
  return guard([&] {
    need(e, "episode");
    const State& s = e->episode->window().back();
    if (image_size) *image_size = s.image.size();
    if (image) {
      if (capacity < s.image.size()) throw Error(ErrorCode::kInvalidArgument, "image buffer too small");
      std::memcpy(image, s.image.data(), s.image.size() * sizeof(double));
    }
    if (u)
      for (int i = 0; i < 4; ++i) u[i] = s.u[i];
  });
}

mpur_status mpur_episode_result_get(const mpur_episode* e, mpur_episode_result* out) {
  return guard([&] {
    need(e, "episode");
    need(out, "out");
    if (!e->episode->done()) throw Error(ErrorCode::kState, "episode is still running");
    const EpisodeResult& r = *e->episode->result();
    *out = {r.distance, r.success ? 1 : 0, to_c(r.termination), r.steps, r.car_id};
  });
}

mpur_status mpur_policy_act(const mpur_policy* p, const mpur_episode* e, int sample, uint64_t seed, double* dspeed,
                            double* dangle) {
  return guard([&] {
    need(p, "policy");
    need(e, "episode");
    need(dspeed, "dspeed");
    need(dangle, "dangle");
    Rng rng(seed);
    const Action a = p->policy->act(e->episode->window(), e->episode->ego().velocity,
                                    sample ? ActMode::kSample : ActMode::kMean, &rng);
    *dspeed = a.dspeed;
    *dangle = a.dangle;
  });
}

}  // extern "C"
