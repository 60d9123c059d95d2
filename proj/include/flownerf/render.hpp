// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <vector>

#include "flownerf/camera.hpp"
#include "flownerf/fields.hpp"
#include "flownerf/rng.hpp"
#include "flownerf/tensor.hpp"

namespace flownerf {

/// Epsilon for weight-normalized divisions (expected depth, flow projection).
inline constexpr float kWeightEps = 1e-8f;

struct SamplerConfig {
  int k_coarse = 64;
  int k_fine = 64;
  bool append_backstop = false;  // opaque far-plane sample; off by default

  int k_total() const { return k_coarse + k_fine; }
};

/// Stratified positions over [t_near, t_far]: one uniform draw per equal-width
/// bin. Keyed by (step, ray) so results are schedule-independent.
std::vector<float> sample_ray(const CounterRng& rng, std::uint64_t step,
                              std::uint64_t ray_id, int k, float t_near = 0.0f,
                              float t_far = 1.0f);

/// Inverse-transform resampling from the piecewise-constant pdf given by
/// `weights` over the coarse bins; returns the merged sorted list of
/// coarse + fine positions. Falls back to uniform when all weights vanish.
std::vector<float> hierarchical_resample(const std::vector<float>& coarse_t,
                                         const std::vector<float>& weights,
                                         int k_fine, const CounterRng& rng,
                                         std::uint64_t step, std::uint64_t ray_id,
                                         float t_near = 0.0f, float t_far = 1.0f);

/// Deltas between consecutive samples; the last sample's delta extends to
/// t_far.
std::vector<float> deltas_from_ts(const std::vector<float>& ts, int rays, int k,
                                  float t_far = 1.0f);

struct CompositeOut {
  Tensor color;    // [R,3]
  Tensor weights;  // [R,K]
  Tensor acc;      // [R,1] sum of weights
};

/// Standard emission-absorption quadrature:
/// alpha_k = 1 - exp(-sigma_k delta_k), T_k = exp(-sum_{j<k} sigma_j delta_j),
/// W_k = T_k alpha_k, color = sum_k W_k c_k.
CompositeOut composite(const Tensor& rgb, const Tensor& sigma, const Tensor& deltas);

struct FusedOut {
  Tensor color;      // [R,3]
  Tensor weights;    // [R,K] of the fused density
  Tensor w_static;   // [R,K], W * sigma_s / (sigma_s + sigma_d)
  Tensor w_dynamic;  // [R,K], W * sigma_d / (sigma_s + sigma_d)
  Tensor acc;        // [R,1]
};

/// Density-additive fusion of the two branches. The per-sample weights split
/// in proportion to density, so w_static + w_dynamic == weights and either
/// branch being empty reduces exactly to the other branch's composite.
FusedOut fuse_composite(const Tensor& rgb_s, const Tensor& sigma_s,
                        const Tensor& rgb_d, const Tensor& sigma_d,
                        const Tensor& deltas);

/// Expected sample position sum(W t) / max(sum(W), eps), [R,1].
Tensor expected_depth(const Tensor& weights, const Tensor& ts);

struct ProjectedFlow {
  Tensor pixel_delta;        // [R,2] pixel displacement into the neighbor frame
  std::vector<float> valid;  // 0 where the displaced point is behind the camera
};

/// Expected displaced point sum(W (x+f)) / max(sum(W), eps), mapped back to
/// world and projected through the neighbor camera; returns the displacement
/// from the ray's own pixel.
ProjectedFlow project_flow(const Tensor& positions, const Tensor& flows,
                           const Tensor& weights, const NdcSpace& ndc,
                           const Tensor& neighbor_world_to_cam,  // [R,9]
                           const Tensor& neighbor_cam_pos,       // [R,3]
                           float fx, float fy, float cx, float cy,
                           const Tensor& pixel);  // [R,2]

}  // namespace flownerf
