// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <optional>
#include <string>
#include <vector>

#include "flownerf/data_io.hpp"

namespace flownerf {

/// Reported when the mean squared error is exactly zero.
inline constexpr double kPsnrInfinite = 1e9;

/// Peak signal-to-noise ratio in dB for [0,1] images: the per-channel MSEs
/// are averaged over the three channels, PSNR = 10 log10(1 / MSE).
/// An optional mask restricts the computation to pixels where mask > 0.5.
double psnr(const FloatGrid& a, const FloatGrid& b, const FloatGrid* mask = nullptr);

/// Structural similarity: grayscale conversion 0.299R + 0.587G + 0.114B,
/// 11x11 Gaussian window with sigma 1.5, c1 = 0.01^2, c2 = 0.03^2; mean of
/// the local map. With a mask, averages over windows centered on masked
/// pixels. Errors if the images are smaller than the window.
double ssim(const FloatGrid& a, const FloatGrid& b, const FloatGrid* mask = nullptr);

struct RegionMetrics {
  double psnr = 0;
  double ssim = 0;
  long pixel_count = 0;
  bool present = false;  // false when the region covers no pixels
};

struct MetricReport {
  int frame = -1;
  RegionMetrics full;
  RegionMetrics dynamic_region;
  RegionMetrics static_region;
  std::optional<double> lpips;  // reserved for externally computed values
};

MetricReport evaluate_pair(const FloatGrid& rendered, const FloatGrid& reference,
                           const FloatGrid& dynamic_mask, int frame);

/// Line-oriented table with a header row; one record per image pair.
std::string format_metric_table(const std::vector<MetricReport>& reports);

}  // namespace flownerf
