// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "flownerf/nn.hpp"
#include "flownerf/tensor.hpp"

namespace flownerf {

struct EncodingConfig {
  int num_freqs_position = 10;
  int num_freqs_direction = 4;
  int num_freqs_time = 4;
  bool include_identity = true;

  int encoded_dim(int input_dim, int num_freqs) const {
    return input_dim * (2 * num_freqs + (include_identity ? 1 : 0));
  }
};

/// Sinusoidal feature expansion of a [M,C] batch.
Tensor encode(const Tensor& x, int num_freqs, bool include_identity);

struct FieldConfig {
  int depth = 6;
  int width = 128;
  int skip_layer = 3;       // encoded position re-fed at this trunk layer
  int color_hidden = 0;     // 0: width / 2
  EncodingConfig encoding;

  int color_hidden_width() const { return color_hidden > 0 ? color_hidden : width / 2; }
};

struct StaticFieldOutput {
  Tensor rgb;    // [M,3] in [0,1]
  Tensor sigma;  // [M,1] >= 0
};

struct DynamicFieldOutput {
  Tensor rgb;       // [M,3] in [0,1]
  Tensor sigma;     // [M,1] >= 0
  Tensor flow_fwd;  // [M,3] scene flow to the next frame, NDC units/frame
  Tensor flow_bwd;  // [M,3] scene flow to the previous frame
};

/// Time-invariant radiance field: (position, direction) -> (color, density).
/// Density goes through softplus with the head bias starting at -1, so a fresh
/// field is close to transparent; color goes through sigmoid.
class StaticField {
 public:
  StaticField() = default;
  StaticField(const FieldConfig& cfg, ParamStore& store, const CounterRng& rng,
              const std::string& prefix = "static");

  StaticFieldOutput eval(const Tensor& pos, const Tensor& dir) const;
  const FieldConfig& config() const { return cfg_; }

 private:
  FieldConfig cfg_;
  Mlp trunk_;
  Linear sigma_head_;
  Linear color_hidden_;
  Linear color_out_;
};

/// Time-conditioned field adding forward/backward scene flow heads. Flow head
/// weights start at zero so warping degenerates to the identity at step 0.
class DynamicField {
 public:
  DynamicField() = default;
  DynamicField(const FieldConfig& cfg, ParamStore& store, const CounterRng& rng,
               const std::string& prefix = "dynamic");

  /// `time` is [M,1], frame index normalized to [0,1].
  DynamicFieldOutput eval(const Tensor& pos, const Tensor& dir, const Tensor& time) const;
  const FieldConfig& config() const { return cfg_; }

 private:
  FieldConfig cfg_;
  Mlp trunk_;
  Linear sigma_head_;
  Linear color_hidden_;
  Linear color_out_;
  Linear flow_fwd_head_;
  Linear flow_bwd_head_;
};

}  // namespace flownerf
