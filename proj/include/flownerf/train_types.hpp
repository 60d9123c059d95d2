// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "flownerf/dsk.hpp"
#include "flownerf/fields.hpp"
#include "flownerf/losses.hpp"
#include "flownerf/nn.hpp"
#include "flownerf/render.hpp"

namespace flownerf {

struct TrainConfig {
  int ray_batch = 1024;
  float lr_start = 5e-4f;
  float lr_end = 8e-5f;
  int total_steps = 30000;
  std::uint64_t seed = 1;
  bool dsk_enabled = false;
  int checkpoint_interval = 5000;
  int threads = 2;
  LossWeights loss;
  SamplerConfig sampler;
  FieldConfig field;
  KernelConfig kernel;

  void validate() const;
};

/// Exponential decay hitting both endpoints exactly:
/// lr(t) = lr_start * (lr_end / lr_start)^(t / total_steps).
float lr_schedule(int step, const TrainConfig& cfg);

struct LossBreakdown {
  double cb = 0, pho = 0, ali = 0, geo = 0, z = 0, data = 0, dy = 0, ds = 0;
  double cyc = 0;  // diagnostic; not part of the total
  double total = 0;
  float lr = 0;
};

/// Adam with the usual bias correction; all state is float32 so checkpoints
/// restore training bit-exactly.
struct AdamState {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  int step_count = 0;
  std::map<std::string, std::vector<float>> m;
  std::map<std::string, std::vector<float>> v;

  /// Applies one update from the gradients currently held by the parameters.
  void update(ParamStore& params, float lr);
};

}  // namespace flownerf
