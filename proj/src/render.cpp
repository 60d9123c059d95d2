// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/render.hpp"

#include <algorithm>
#include <cmath>

#include "flownerf/errors.hpp"

namespace flownerf {

std::vector<float> sample_ray(const CounterRng& rng, std::uint64_t step,
                              std::uint64_t ray_id, int k, float t_near, float t_far) {
  if (k < 2) throw ConfigError("sample_ray: need at least 2 samples");
  std::vector<float> ts(static_cast<size_t>(k));
  const float bin = (t_far - t_near) / static_cast<float>(k);
  for (int i = 0; i < k; ++i) {
    const float u = rng.uniform(CounterRng::kStratified, step, ray_id,
                                static_cast<std::uint64_t>(i));
    ts[static_cast<size_t>(i)] = t_near + (static_cast<float>(i) + u) * bin;
  }
  return ts;
}

std::vector<float> hierarchical_resample(const std::vector<float>& coarse_t,
                                         const std::vector<float>& weights,
                                         int k_fine, const CounterRng& rng,
                                         std::uint64_t step, std::uint64_t ray_id,
                                         float t_near, float t_far) {
  const int kc = static_cast<int>(coarse_t.size());
  double total = 0.0;
  for (float w : weights) total += std::max(0.0f, w);

  std::vector<float> fine(static_cast<size_t>(k_fine));
  if (total <= 0.0) {
    // uniform fallback
    for (int i = 0; i < k_fine; ++i) {
      const float u = rng.uniform(CounterRng::kResample, step, ray_id,
                                  static_cast<std::uint64_t>(i));
      fine[static_cast<size_t>(i)] =
          t_near + (static_cast<float>(i) + u) / static_cast<float>(k_fine) *
                       (t_far - t_near);
    }
  } else {
    // cdf over the kc stratification bins
    std::vector<double> cdf(static_cast<size_t>(kc) + 1, 0.0);
    for (int i = 0; i < kc; ++i)
      cdf[static_cast<size_t>(i) + 1] =
          cdf[static_cast<size_t>(i)] + std::max(0.0f, weights[static_cast<size_t>(i)]) / total;
    cdf[static_cast<size_t>(kc)] = 1.0;
    const float bin = (t_far - t_near) / static_cast<float>(kc);
    for (int i = 0; i < k_fine; ++i) {
      const float uu = rng.uniform(CounterRng::kResample, step, ray_id,
                                   static_cast<std::uint64_t>(i));
      const double u = (static_cast<double>(i) + uu) / k_fine;  // stratified in cdf space
      const auto it = std::upper_bound(cdf.begin() + 1, cdf.end(), u);
      const int b = std::min<int>(kc - 1, static_cast<int>(it - cdf.begin()) - 1);
      const double lo = cdf[static_cast<size_t>(b)];
      const double hi = cdf[static_cast<size_t>(b) + 1];
      const double frac = hi > lo ? (u - lo) / (hi - lo) : 0.5;
      fine[static_cast<size_t>(i)] =
          t_near + (static_cast<float>(b) + static_cast<float>(frac)) * bin;
    }
  }

  std::vector<float> merged;
  merged.reserve(coarse_t.size() + fine.size());
  merged.insert(merged.end(), coarse_t.begin(), coarse_t.end());
  merged.insert(merged.end(), fine.begin(), fine.end());
  std::sort(merged.begin(), merged.end());
  return merged;
}

std::vector<float> deltas_from_ts(const std::vector<float>& ts, int rays, int k,
                                  float t_far) {
  std::vector<float> deltas(ts.size());
  for (int r = 0; r < rays; ++r) {
    const size_t base = static_cast<size_t>(r) * k;
    for (int i = 0; i + 1 < k; ++i)
      deltas[base + i] = ts[base + i + 1] - ts[base + i];
    deltas[base + k - 1] = t_far - ts[base + k - 1];
  }
  return deltas;
}

CompositeOut composite(const Tensor& rgb, const Tensor& sigma, const Tensor& deltas) {
  const int r = sigma.dim(0), k = sigma.dim(1);
  const Tensor tau = sigma * deltas;                       // [R,K]
  const Tensor alpha = 1.0f - exp(neg(tau));               // [R,K]
  const Tensor trans = exp(neg(cumsum_exclusive_last(tau)));
  CompositeOut out;
  out.weights = trans * alpha;
  out.color = reshape(sum_axis(reshape(out.weights, {r, k, 1}) * rgb, 1), {r, 3});
  out.acc = sum_axis(out.weights, 1);
  return out;
}

FusedOut fuse_composite(const Tensor& rgb_s, const Tensor& sigma_s,
                        const Tensor& rgb_d, const Tensor& sigma_d,
                        const Tensor& deltas) {
  const int r = sigma_s.dim(0), k = sigma_s.dim(1);
  const Tensor sigma = sigma_s + sigma_d;
  const Tensor tau = sigma * deltas;
  const Tensor alpha = 1.0f - exp(neg(tau));
  const Tensor trans = exp(neg(cumsum_exclusive_last(tau)));
  const Tensor weights = trans * alpha;
  // density-proportional split; safe_div keeps empty samples at exactly 0
  const Tensor w_s = weights * safe_div(sigma_s, sigma);
  const Tensor w_d = weights * safe_div(sigma_d, sigma);
  FusedOut out;
  out.weights = weights;
  out.w_static = w_s;
  out.w_dynamic = w_d;
  out.color = reshape(
      sum_axis(reshape(w_s, {r, k, 1}) * rgb_s + reshape(w_d, {r, k, 1}) * rgb_d, 1),
      {r, 3});
  out.acc = sum_axis(weights, 1);
  return out;
}

Tensor expected_depth(const Tensor& weights, const Tensor& ts) {
  const Tensor acc = sum_axis(weights, 1);
  return sum_axis(weights * ts, 1) / maximum(acc, Tensor::scalar(kWeightEps));
}

ProjectedFlow project_flow(const Tensor& positions, const Tensor& flows,
                           const Tensor& weights, const NdcSpace& ndc,
                           const Tensor& neighbor_world_to_cam,
                           const Tensor& neighbor_cam_pos, float fx, float fy,
                           float cx, float cy, const Tensor& pixel) {
  const int r = positions.dim(0), k = positions.dim(1);
  const Tensor w3 = reshape(weights, {r, k, 1});
  const Tensor displaced = positions + flows;
  const Tensor acc = sum_axis(weights, 1);  // [R,1]
  const Tensor expectation = reshape(sum_axis(w3 * displaced, 1), {r, 3}) /
                             maximum(acc, Tensor::scalar(kWeightEps));
  const Tensor world = world_from_ndc_batch(expectation, ndc);
  ProjectedFlow out;
  const Tensor pix = project_points_batch(world, neighbor_world_to_cam,
                                          neighbor_cam_pos, fx, fy, cx, cy,
                                          &out.valid);
  out.pixel_delta = pix - pixel;
  return out;
}

}  // namespace flownerf
