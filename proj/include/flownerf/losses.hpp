// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "flownerf/tensor.hpp"

namespace flownerf {

struct LossWeights {
  float beta_data = 0.1f;   // on the combined geometric prior
  float beta_ali = 0.1f;    // on the kernel alignment loss
  float beta_dy = 0.05f;    // on dynamic-density suppression
  float beta_ds = 0.01f;    // on the dynamic/static cross entropy
  float beta_z = 0.2f;      // depth term inside the geometric prior
  float lambda_o = 0.1f;    // origin-offset term of the alignment loss
  float flow_threshold = 0.005f;  // static flow bound, NDC units/frame
  int eps_window = 12;      // sliding-window half-width, in sample indices
  float log_clamp = 1e-6f;  // lower clamp inside the cross-entropy log
};

/// Every loss below averages over its batch so magnitudes are independent of
/// batch size. Masked variants divide by the number of valid entries.

/// Mean squared L2 color error over rays. pred/target are [R,3].
Tensor loss_cb(const Tensor& pred, const Tensor& target);

/// Mean squared L2 color error over valid (ray, neighbor) pairs.
/// warped/target are [P,3]; mask is [P,1] with 1 for valid pairs.
Tensor loss_pho(const Tensor& warped, const Tensor& target, const Tensor& mask);

/// Diagnostic only (excluded from the training total): weighted mean L1 norm
/// of f_fwd(x) + f_bwd(x + f_fwd(x)). flows are [M,3]; weights [M,1].
Tensor loss_cyc(const Tensor& flow_fwd, const Tensor& flow_bwd_at_displaced,
                const Tensor& weights);

/// Mean L1 over valid (ray, neighbor) pairs of projected vs supervised 2D
/// flow, in pixels. predicted/target are [P,2]; mask [P,1].
Tensor loss_geo(const Tensor& predicted, const Tensor& target, const Tensor& mask);

/// Mean L1 of per-frame normalized depths. Both operands are normalized by a
/// median shift and mean-absolute scale before comparison; `pred`/`target`
/// are [R,1], `frame_of` maps each ray to its frame id, `mask` excludes rays
/// (e.g. dynamic pixels) from the loss. Frames with no depth spread are
/// skipped.
Tensor loss_z(const Tensor& pred, const std::vector<float>& target,
              const std::vector<int>& frame_of, const std::vector<float>& mask);

/// L_geo + beta_z * L_z.
Tensor loss_data(const Tensor& geo, const Tensor& z, float beta_z);

/// Mean dynamic density over samples whose flow magnitude is at or below the
/// static threshold; zero when nothing qualifies. sigma_d is [R,K]; the gate
/// is computed from flow magnitudes outside the tape (a step function of the
/// flows has zero gradient almost everywhere).
Tensor loss_dy(const Tensor& sigma_d, const std::vector<float>& flow_mag,
               float flow_threshold);

/// Dynamic/static cross entropy: box-filter the dynamic weights with
/// half-width eps_window, then average W^D_i * log(clamp(W^S_i)) over all
/// samples. Non-positive by construction; minimizing pushes the two weight
/// distributions apart along each ray.
Tensor loss_ds(const Tensor& w_dynamic, const Tensor& w_static, int eps_window,
               float log_clamp);

/// Mean over rays of ||q0 - p|| + lambda_o ||delta_o_0||. Inputs are the
/// restricted ray's pixel offset [R,2] and origin offset [R,3].
Tensor loss_ali(const Tensor& pixel_offset0, const Tensor& origin_offset0,
                float lambda_o);

struct LossComponents {
  Tensor cb;
  Tensor pho;
  Tensor data;
  Tensor ali;
  Tensor dy;
  Tensor ds;
};

/// L = L_cb + L_pho + b1 L_data + b2 L_ali + b3 L_dy + b4 L_Ds.
/// The flow cycle loss is deliberately absent from the total.
Tensor loss_total(const LossComponents& c, const LossWeights& w);

}  // namespace flownerf
