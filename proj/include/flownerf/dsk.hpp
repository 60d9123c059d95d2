// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "flownerf/camera.hpp"
#include "flownerf/nn.hpp"
#include "flownerf/tensor.hpp"

namespace flownerf {

struct KernelConfig {
  int n_positions = 5;    // simulated rays per pixel, must stay in (0, 8)
  int embed_dim = 32;     // per-training-image embedding width
  int hidden = 64;
  int freq_pixel = 4;     // positional encoding of the normalized pixel coord
  float scale = 0.01f;    // raw offsets are damped by this fixed factor
  float embed_sigma = 0.01f;
};

/// Canonical seed positions around a pixel: index 0 is the center (it serves
/// as the alignment-restricted ray), the rest sit on a unit-pixel-radius ring.
std::vector<std::array<float, 2>> canonical_offsets(int n);

/// One expanded batch: n_positions optimized rays per input ray, ready for
/// rendering, plus the quantities the alignment loss needs.
struct KernelExpansion {
  std::vector<NdcRays> rays;      // n entries of [B,3] NDC origins/dirs
  std::vector<Tensor> viewdirs;   // n entries of [B,3] normalized world dirs
  Tensor weights;                 // [B,n], softmax-normalized mixing weights
  Tensor pixel0;                  // [B,2] actual pixel of the restricted ray
  Tensor pixel_offset0;           // [B,2] q_0 - p
  Tensor origin_offset0;          // [B,3] origin offset of the restricted ray
};

/// Blur-forming kernel: per input ray it predicts n_positions origin/pixel
/// offsets and mixing weights from the pixel position, a canonical seed
/// offset, and a learned per-image embedding. The head is zero-initialized so
/// training starts from the identity expansion; raw offsets are scaled by
/// 0.01 to keep the kernel from deforming faster than the radiance fields.
/// Inference never constructs an expansion.
class DeformableKernel {
 public:
  DeformableKernel() = default;
  /// `embedding_frames` lists the frame indices that own an embedding row
  /// (the training frames).
  DeformableKernel(const KernelConfig& cfg, const std::vector<int>& embedding_frames,
                   int total_frames, ParamStore& store, const CounterRng& rng);

  /// Expands rays through pixels (u,v) of the given frames against the
  /// per-frame camera poses. Throws if a frame has no embedding.
  KernelExpansion expand(const std::vector<float>& u, const std::vector<float>& v,
                         const std::vector<int>& frames,
                         const std::vector<Pose>& frame_poses,
                         const Camera& intrinsics, const NdcSpace& ndc) const;

  const KernelConfig& config() const { return cfg_; }

 private:
  KernelConfig cfg_;
  std::vector<int> frame_row_;  // frame index -> embedding row, -1 if absent
  Tensor embeddings_;           // [num_training_frames, embed_dim]
  Linear hidden1_;
  Linear hidden2_;
  Linear head_;                 // -> (origin offset 3, pixel offset 2, weight logit 1)
};

/// Eq.-style color mixing: b = sum_q w_q c_q with normalized weights.
Tensor mix_colors(const std::vector<Tensor>& colors, const Tensor& weights);

}  // namespace flownerf
