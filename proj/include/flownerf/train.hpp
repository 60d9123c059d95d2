// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "flownerf/data_io.hpp"
#include "flownerf/dsk.hpp"
#include "flownerf/fields.hpp"
#include "flownerf/losses.hpp"
#include "flownerf/render.hpp"
#include "flownerf/train_types.hpp"

namespace flownerf {

/// Scene fully loaded into memory and ready for training/evaluation.
struct SceneData {
  SceneManifest manifest;
  std::vector<FloatGrid> images;        // observations (blurred when blur mode)
  std::vector<FloatGrid> sharp_images;  // empty grids unless blur mode
  std::vector<FloatGrid> depths;
  std::vector<FloatGrid> masks;
  std::vector<FloatGrid> flows_fwd;     // empty grid on the last frame
  std::vector<FloatGrid> flows_bwd;     // empty grid on the first frame
  std::vector<Pose> poses;
  std::vector<int> train_frames;
  std::vector<int> holdout_frames;
  NdcSpace ndc;

  static SceneData load(const SceneManifest& manifest);
  int frame_count() const { return static_cast<int>(images.size()); }
  float normalized_time(int frame) const {
    return frame_count() > 1
               ? static_cast<float>(frame) / static_cast<float>(frame_count() - 1)
               : 0.0f;
  }
};

enum class RenderBranch { kFull, kStatic, kDynamic };

struct LossBundle {
  LossComponents parts;
  Tensor geo, z, cyc;
  Tensor total;
  LossBreakdown values() const;
};

class Trainer {
 public:
  Trainer(SceneData scene, const TrainConfig& cfg);

  /// Forward pass of the full training objective on the batch keyed by
  /// `step_index`. Deterministic for a fixed (seed, step_index).
  LossBundle compute_losses(int step_index);

  /// One optimization step; throws NumericError naming the first non-finite
  /// loss component.
  LossBreakdown step(int step_index);

  /// Sharp inference render (the blur kernel is never consulted).
  FloatGrid render_image(const Pose& pose, float time,
                         RenderBranch branch = RenderBranch::kFull) const;

  void save_checkpoint(const std::string& path) const;
  /// Restores parameters, optimizer state and the step counter; rejects
  /// mismatched formats without applying partial state.
  void load_checkpoint(const std::string& path);

  int current_step() const { return step_; }
  const SceneData& scene() const { return scene_; }
  const TrainConfig& config() const { return cfg_; }
  ParamStore& params() { return params_; }
  const StaticField& static_field() const { return static_field_; }
  const DynamicField& dynamic_field() const { return dynamic_field_; }

  struct Batch;

 private:
  Batch assemble_batch(int step_index) const;
  LossBundle losses_plain(const Batch& batch, int step_index);
  LossBundle losses_dsk(const Batch& batch, int step_index);

  SceneData scene_;
  TrainConfig cfg_;
  CounterRng rng_;
  ParamStore params_;
  StaticField static_field_;
  DynamicField dynamic_field_;
  std::unique_ptr<DeformableKernel> kernel_;
  AdamState adam_;
  int step_ = 0;
};

}  // namespace flownerf
