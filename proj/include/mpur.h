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

#ifndef MPUR_H_
#define MPUR_H_

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(__GNUC__)
#define MPUR_API __attribute__((visibility("default")))
#else
#define MPUR_API
#endif

typedef enum mpur_status {
  MPUR_OK = 0,
  MPUR_E_INVALID_ARGUMENT = 1,
  MPUR_E_SHAPE_MISMATCH = 2,
  MPUR_E_NUMERIC = 3,
  MPUR_E_UNSUPPORTED_OP = 4,
  MPUR_E_IO = 5,
  MPUR_E_PARSE = 6,
  MPUR_E_CONFIG = 7,
  MPUR_E_MISSING_ARTIFACT = 8,
  MPUR_E_STATE = 9,
  MPUR_E_INFEASIBLE_ACTION = 10,
  MPUR_E_STATISTICS = 11,
  MPUR_E_INTERNAL = 100
} mpur_status;

typedef enum mpur_split {
  MPUR_SPLIT_TRAIN = 0,
  MPUR_SPLIT_VAL = 1,
  MPUR_SPLIT_TEST = 2,
  MPUR_SPLIT_SCENE_ONLY = 3
} mpur_split;

typedef enum mpur_termination {
  MPUR_RUNNING = 0,
  MPUR_COLLISION = 1,
  MPUR_OFF_ROAD = 2,
  MPUR_END_OF_SEGMENT = 3,
  MPUR_MAX_STEPS = 4
} mpur_termination;

typedef struct mpur_dataset mpur_dataset;
typedef struct mpur_model mpur_model;
typedef struct mpur_policy mpur_policy;
typedef struct mpur_episode mpur_episode;

typedef struct mpur_vehicle {
  double x, y;    /* meters */
  double vx, vy;  /* meters per step */
  double length, width;
  int64_t car_id;
} mpur_vehicle;

typedef struct mpur_step_info {
  double proximity_cost;
  double lane_cost;
  int done;
  mpur_termination termination;
} mpur_step_info;

typedef struct mpur_episode_result {
  double distance_m;
  int success;
  mpur_termination termination;
  int steps;
  int64_t car_id;
} mpur_episode_result;

/* Message for the last failed call on this thread; "" after success. */
MPUR_API const char* mpur_last_error(void);
MPUR_API const char* mpur_version(void);
MPUR_API const char* mpur_status_name(mpur_status s);

/* Runs one pipeline subcommand (gen-data, train-model, calibrate,
 * train-policy, evaluate, report). `overrides_json` may be NULL or an object
 * with any of seed, method, rollout, latent_source, lambda. */
MPUR_API mpur_status mpur_run(const char* command, const char* config_path, const char* out_dir,
                              const char* overrides_json);

/* Parses and validates a config; writes the resolved JSON when `resolved` is
 * non-NULL (caller frees with mpur_string_free). */
MPUR_API mpur_status mpur_config_resolve(const char* config_path, char** resolved);
MPUR_API void mpur_string_free(char* s);

MPUR_API mpur_status mpur_dataset_load(const char* path, mpur_dataset** out);
MPUR_API void mpur_dataset_free(mpur_dataset* d);
MPUR_API mpur_status mpur_dataset_car_count(const mpur_dataset* d, size_t* count);
/* Dataset indices of the cars in a split, written up to `capacity`; `count`
 * receives the full number. */
MPUR_API mpur_status mpur_dataset_split(const mpur_dataset* d, mpur_split split, size_t* indices,
                                        size_t capacity, size_t* count);

MPUR_API mpur_status mpur_model_load(const char* path, mpur_model** out);
MPUR_API void mpur_model_free(mpur_model* m);
MPUR_API mpur_status mpur_model_info(const mpur_model* m, int* stochastic, size_t* parameter_count);

MPUR_API mpur_status mpur_policy_load(const char* path, mpur_policy** out);
MPUR_API void mpur_policy_free(mpur_policy* p);

/* Gym-like episode: the car at dataset index `car` is controlled, all others
 * replay. `config_path` may be NULL for defaults. The dataset must outlive
 * the episode. */
MPUR_API mpur_status mpur_episode_create(const mpur_dataset* d, size_t car, const char* config_path,
                                         mpur_episode** out);
MPUR_API void mpur_episode_free(mpur_episode* e);
MPUR_API mpur_status mpur_episode_step(mpur_episode* e, double dspeed, double dangle, mpur_step_info* info);
MPUR_API mpur_status mpur_episode_ego(const mpur_episode* e, mpur_vehicle* out);
/* Latest ego-centric image as [3, H, W] doubles plus the 4-vector of ego
 * measurements. Either buffer may be NULL; `image_size` receives 3*H*W. */
MPUR_API mpur_status mpur_episode_observation(const mpur_episode* e, double* image, size_t capacity,
                                              size_t* image_size, double u[4]);
/* MPUR_E_STATE until the episode has terminated. */
MPUR_API mpur_status mpur_episode_result_get(const mpur_episode* e, mpur_episode_result* out);

/* Action for the current episode state. `sample` = 0 uses the mean. */
MPUR_API mpur_status mpur_policy_act(const mpur_policy* p, const mpur_episode* e, int sample, uint64_t seed,
                                     double* dspeed, double* dangle);

#ifdef __cplusplus
}
#endif

#endif  // MPUR_H_
