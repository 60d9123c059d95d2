// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>

#include "flownerf/train_types.hpp"

namespace flownerf {

/// Options shared by the train/render/eval commands, merged from a JSON
/// config file and command-line overrides. Unknown keys are rejected; every
/// field has a documented default (see configs/ in the repository).
struct RunConfig {
  std::string manifest;  // scene manifest path
  std::string out = "out";
  TrainConfig train;
};

RunConfig load_run_config(const std::string& path);

}  // namespace flownerf
