// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/dsk.hpp"

#include <cmath>

#include "flownerf/errors.hpp"

namespace flownerf {

std::vector<std::array<float, 2>> canonical_offsets(int n) {
  if (n <= 0 || n >= 8)
    throw ConfigError("kernel: n_positions must lie in (0, 8), got " +
                      std::to_string(n));
  std::vector<std::array<float, 2>> out;
  out.push_back({0.0f, 0.0f});
  constexpr float kTwoPi = 6.28318530717958647692f;
  for (int i = 1; i < n; ++i) {
    const float ang = kTwoPi * static_cast<float>(i - 1) / static_cast<float>(n - 1);
    out.push_back({std::cos(ang), std::sin(ang)});
  }
  return out;
}

DeformableKernel::DeformableKernel(const KernelConfig& cfg,
                                   const std::vector<int>& embedding_frames,
                                   int total_frames, ParamStore& store,
                                   const CounterRng& rng)
    : cfg_(cfg) {
  canonical_offsets(cfg.n_positions);  // validates the range
  frame_row_.assign(static_cast<size_t>(total_frames), -1);
  for (size_t i = 0; i < embedding_frames.size(); ++i) {
    const int f = embedding_frames[i];
    if (f < 0 || f >= total_frames)
      throw ConfigError("kernel: embedding frame " + std::to_string(f) +
                        " out of range");
    frame_row_[static_cast<size_t>(f)] = static_cast<int>(i);
  }

  const int rows = static_cast<int>(embedding_frames.size());
  std::vector<float> emb(static_cast<size_t>(rows) * cfg.embed_dim);
  for (size_t i = 0; i < emb.size(); ++i)
    emb[i] = cfg.embed_sigma * rng.normal(CounterRng::kInit, 0xd5cull, i);
  embeddings_ = store.create({rows, cfg.embed_dim}, std::move(emb), "kernel.embed");

  const int in_dim = 2 * (1 + 2 * cfg.freq_pixel) + 2 + cfg.embed_dim;
  hidden1_ = Linear(in_dim, cfg.hidden, store, rng, "kernel.h1");
  hidden2_ = Linear(cfg.hidden, cfg.hidden, store, rng, "kernel.h2");
  head_ = Linear(cfg.hidden, 6, store, rng, "kernel.head", 1.0f, /*zero_init=*/true);
}

KernelExpansion DeformableKernel::expand(const std::vector<float>& u,
                                         const std::vector<float>& v,
                                         const std::vector<int>& frames,
                                         const std::vector<Pose>& frame_poses,
                                         const Camera& intrinsics,
                                         const NdcSpace& ndc) const {
  const int b = static_cast<int>(u.size());
  std::vector<int> rows(static_cast<size_t>(b));
  for (int i = 0; i < b; ++i) {
    const int f = frames[static_cast<size_t>(i)];
    if (f < 0 || f >= static_cast<int>(frame_row_.size()) ||
        frame_row_[static_cast<size_t>(f)] < 0)
      throw ConfigError("kernel: no embedding for frame " + std::to_string(f) +
                        "; the kernel expands training rays only");
    rows[static_cast<size_t>(i)] = frame_row_[static_cast<size_t>(f)];
  }

  // constants shared by all n positions
  std::vector<float> uv(static_cast<size_t>(b) * 2);
  std::vector<float> uv_norm(static_cast<size_t>(b) * 2);
  std::vector<float> rot(static_cast<size_t>(b) * 9);
  std::vector<float> cam_pos(static_cast<size_t>(b) * 3);
  for (int i = 0; i < b; ++i) {
    uv[static_cast<size_t>(i) * 2] = u[static_cast<size_t>(i)];
    uv[static_cast<size_t>(i) * 2 + 1] = v[static_cast<size_t>(i)];
    uv_norm[static_cast<size_t>(i) * 2] =
        2.0f * u[static_cast<size_t>(i)] / static_cast<float>(intrinsics.width) - 1.0f;
    uv_norm[static_cast<size_t>(i) * 2 + 1] =
        2.0f * v[static_cast<size_t>(i)] / static_cast<float>(intrinsics.height) - 1.0f;
    const Pose& pose = frame_poses[static_cast<size_t>(frames[static_cast<size_t>(i)])];
    for (int k = 0; k < 9; ++k) rot[static_cast<size_t>(i) * 9 + k] = pose.rotation.m[static_cast<size_t>(k)];
    cam_pos[static_cast<size_t>(i) * 3] = pose.translation.x;
    cam_pos[static_cast<size_t>(i) * 3 + 1] = pose.translation.y;
    cam_pos[static_cast<size_t>(i) * 3 + 2] = pose.translation.z;
  }
  const Tensor pixel_t = Tensor::from({b, 2}, uv);
  const Tensor enc_p = posenc(Tensor::from({b, 2}, uv_norm), cfg_.freq_pixel, true);
  const Tensor embed = take_rows(embeddings_, rows);
  const Tensor base_in = concat({enc_p, embed}, 1);
  const Tensor rot_t = reshape(Tensor::from({b, 9}, rot), {b, 3, 3});
  const Tensor cam_pos_t = Tensor::from({b, 3}, cam_pos);

  const auto offsets = canonical_offsets(cfg_.n_positions);
  KernelExpansion out;
  std::vector<Tensor> logits;
  for (int q = 0; q < cfg_.n_positions; ++q) {
    const Tensor q_off = broadcast_to(
        Tensor::from({1, 2}, {offsets[static_cast<size_t>(q)][0],
                              offsets[static_cast<size_t>(q)][1]}),
        {b, 2});
    const Tensor h = relu(hidden2_.forward(
        relu(hidden1_.forward(concat({base_in, q_off}, 1)))));
    const Tensor raw = head_.forward(h);  // [B,6]
    const Tensor origin_off = cfg_.scale * slice(raw, 1, 0, 3);
    const Tensor pixel_off = cfg_.scale * slice(raw, 1, 3, 2);
    logits.push_back(slice(raw, 1, 5, 1));

    const Tensor pix_q = pixel_t + q_off + pixel_off;  // [B,2]
    // direction through the moved pixel, rotated into the world
    const Tensor dx = (slice(pix_q, 1, 0, 1) - intrinsics.cx) / intrinsics.fx;
    const Tensor dy = (intrinsics.cy - slice(pix_q, 1, 1, 1)) / intrinsics.fy;
    const Tensor d_cam = concat({dx, dy, Tensor::full({b, 1}, -1.0f)}, 1);
    const Tensor d_world =
        reshape(sum_axis(rot_t * reshape(d_cam, {b, 1, 3}), 2), {b, 3});
    const Tensor o_world = cam_pos_t + origin_off;

    out.rays.push_back(ndc_transform_batch(o_world, d_world, ndc));
    out.viewdirs.push_back(d_world / l2norm_last(d_world));
    if (q == 0) {
      out.pixel0 = pix_q;
      out.pixel_offset0 = pixel_off;
      out.origin_offset0 = origin_off;
    }
  }
  out.weights = softmax_last(concat(logits, 1));
  return out;
}

Tensor mix_colors(const std::vector<Tensor>& colors, const Tensor& weights) {
  if (static_cast<int>(colors.size()) != weights.dim(1))
    throw ShapeError("mix_colors: " + std::to_string(colors.size()) +
                     " colors vs weights " + shape_str(weights.shape()));
  Tensor mixed;
  for (size_t q = 0; q < colors.size(); ++q) {
    const Tensor term = slice(weights, 1, static_cast<int>(q), 1) * colors[q];
    mixed = q == 0 ? term : mixed + term;
  }
  return mixed;
}

}  // namespace flownerf
