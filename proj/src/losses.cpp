// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/losses.hpp"

#include <algorithm>
#include <cmath>

#include "flownerf/errors.hpp"

namespace flownerf {

namespace {

Tensor clamp(const Tensor& x, float lo, float hi) {
  return neg(maximum(neg(maximum(x, Tensor::scalar(lo))), Tensor::scalar(-hi)));
}

// sum(mask * per_row) / max(count, 1)
Tensor masked_mean(const Tensor& per_row, const Tensor& mask) {
  double count = 0.0;
  for (float m : mask.data()) count += m;
  return sum(per_row * mask) / static_cast<float>(std::max(1.0, count));
}

}  // namespace

Tensor loss_cb(const Tensor& pred, const Tensor& target) {
  if (pred.shape() != target.shape())
    throw ShapeError("loss_cb: shapes " + shape_str(pred.shape()) + " vs " +
                     shape_str(target.shape()));
  return sum(square(pred - target)) / static_cast<float>(pred.dim(0));
}

Tensor loss_pho(const Tensor& warped, const Tensor& target, const Tensor& mask) {
  const Tensor per_pair = sum_axis(square(warped - target), 1);
  return masked_mean(per_pair, mask);
}

Tensor loss_cyc(const Tensor& flow_fwd, const Tensor& flow_bwd_at_displaced,
                const Tensor& weights) {
  const Tensor per_point = sum_axis(abs(flow_fwd + flow_bwd_at_displaced), 1);
  double wsum = 0.0;
  for (float w : weights.data()) wsum += w;
  return sum(per_point * weights) / static_cast<float>(std::max(1e-12, wsum));
}

Tensor loss_geo(const Tensor& predicted, const Tensor& target, const Tensor& mask) {
  const Tensor per_pair = sum_axis(abs(predicted - target), 1);
  return masked_mean(per_pair, mask);
}

Tensor loss_z(const Tensor& pred, const std::vector<float>& target,
              const std::vector<int>& frame_of, const std::vector<float>& mask) {
  const int r = pred.dim(0);
  if (static_cast<int>(target.size()) != r || static_cast<int>(frame_of.size()) != r ||
      static_cast<int>(mask.size()) != r)
    throw ShapeError("loss_z: mismatched batch arrays for " + shape_str(pred.shape()));

  int max_frame = -1;
  for (int f : frame_of) max_frame = std::max(max_frame, f);

  Tensor total = Tensor::scalar(0.0f);
  double count = 0.0;
  const Tensor pred_row = reshape(pred, {1, r});
  const auto& pv = pred.data();

  for (int f = 0; f <= max_frame; ++f) {
    std::vector<int> idx;
    for (int i = 0; i < r; ++i)
      if (frame_of[static_cast<size_t>(i)] == f && mask[static_cast<size_t>(i)] > 0.5f)
        idx.push_back(i);
    if (idx.size() < 2) continue;

    // target statistics (shift = median, scale = mean absolute deviation)
    std::vector<double> tv;
    tv.reserve(idx.size());
    for (int i : idx) tv.push_back(target[static_cast<size_t>(i)]);
    std::vector<double> sorted = tv;
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(sorted.size() / 2),
                     sorted.end());
    const double t_med = sorted[sorted.size() / 2];
    double t_scale = 0.0;
    for (double v : tv) t_scale += std::fabs(v - t_med);
    t_scale /= static_cast<double>(tv.size());

    // prediction statistics; the median element is picked from forward values
    // and gathered so the gradient flows into it
    std::vector<int> order = idx;
    std::sort(order.begin(), order.end(), [&](int a, int b) {
      return pv[static_cast<size_t>(a)] < pv[static_cast<size_t>(b)];
    });
    const int med_idx = order[order.size() / 2];
    double p_spread = 0.0;
    for (int i : idx)
      p_spread += std::fabs(pv[static_cast<size_t>(i)] - pv[static_cast<size_t>(med_idx)]);
    if (t_scale < 1e-8 || p_spread / static_cast<double>(idx.size()) < 1e-8)
      continue;  // degenerate frame, no depth spread

    const Tensor med = gather_samples(pred_row, {med_idx}, 1);  // [1,1]
    const Tensor dev = pred - reshape(med, {1, 1});             // [R,1]

    std::vector<float> sel(static_cast<size_t>(r), 0.0f);
    for (int i : idx) sel[static_cast<size_t>(i)] = 1.0f;
    const Tensor sel_t = Tensor::from({r, 1}, sel);

    const Tensor scale =
        sum(abs(dev) * sel_t) / static_cast<float>(idx.size());  // on tape
    const Tensor pred_norm = dev / maximum(scale, Tensor::scalar(1e-8f));

    std::vector<float> t_norm(static_cast<size_t>(r), 0.0f);
    for (int i : idx)
      t_norm[static_cast<size_t>(i)] = static_cast<float>(
          (target[static_cast<size_t>(i)] - t_med) / std::max(t_scale, 1e-12));
    const Tensor t_norm_t = Tensor::from({r, 1}, t_norm);

    total = total + sum(abs(pred_norm - t_norm_t) * sel_t);
    count += static_cast<double>(idx.size());
  }
  if (count == 0.0) return Tensor::scalar(0.0f);
  return total / static_cast<float>(count);
}

Tensor loss_data(const Tensor& geo, const Tensor& z, float beta_z) {
  return geo + beta_z * z;
}

Tensor loss_dy(const Tensor& sigma_d, const std::vector<float>& flow_mag,
               float flow_threshold) {
  if (static_cast<int>(flow_mag.size()) != sigma_d.numel())
    throw ShapeError("loss_dy: flow magnitudes do not match " +
                     shape_str(sigma_d.shape()));
  std::vector<float> gate(flow_mag.size(), 0.0f);
  double count = 0.0;
  for (size_t i = 0; i < flow_mag.size(); ++i)
    if (flow_mag[i] <= flow_threshold) {
      gate[i] = 1.0f;
      count += 1.0;
    }
  if (count == 0.0) return Tensor::scalar(0.0f);
  const Tensor gate_t = Tensor::from(sigma_d.shape(), std::move(gate));
  return sum(sigma_d * gate_t) / static_cast<float>(count);
}

Tensor loss_ds(const Tensor& w_dynamic, const Tensor& w_static, int eps_window,
               float log_clamp) {
  if (w_dynamic.shape() != w_static.shape())
    throw ShapeError("loss_ds: shapes " + shape_str(w_dynamic.shape()) + " vs " +
                     shape_str(w_static.shape()));
  const int r = w_dynamic.dim(0), k = w_dynamic.dim(1);
  const int eps = eps_window;

  // windowed sum via inclusive cumsum: W^D_i = C[min(i+eps,K-1)] - C[i-eps-1]
  const Tensor c = cumsum_exclusive_last(w_dynamic) + w_dynamic;
  Tensor upper;
  if (eps >= k) {
    upper = broadcast_to(slice(c, 1, k - 1, 1), {r, k});
  } else if (eps == 0) {
    upper = c;
  } else {
    upper = concat({slice(c, 1, eps, k - eps),
                    broadcast_to(slice(c, 1, k - 1, 1), {r, eps})}, 1);
  }
  Tensor lower;
  if (eps + 1 >= k) {
    lower = Tensor::zeros({r, k});
  } else {
    lower = concat({Tensor::zeros({r, eps + 1}), slice(c, 1, 0, k - eps - 1)}, 1);
  }
  const Tensor w_big = upper - lower;
  return mean(w_big * log(clamp(w_static, log_clamp, 1.0f)));
}

Tensor loss_ali(const Tensor& pixel_offset0, const Tensor& origin_offset0,
                float lambda_o) {
  return mean(l2norm_last(pixel_offset0) + lambda_o * l2norm_last(origin_offset0));
}

Tensor loss_total(const LossComponents& c, const LossWeights& w) {
  return c.cb + c.pho + w.beta_data * c.data + w.beta_ali * c.ali +
         w.beta_dy * c.dy + w.beta_ds * c.ds;
}

}  // namespace flownerf
