// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/metrics.hpp"

#include <cmath>
#include <sstream>

#include "flownerf/errors.hpp"

namespace flownerf {

namespace {

void check_same(const FloatGrid& a, const FloatGrid& b, const char* who) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw ShapeError(std::string(who) + ": image dimensions differ: " +
                     std::to_string(a.width) + "x" + std::to_string(a.height) + "x" +
                     std::to_string(a.channels) + " vs " + std::to_string(b.width) +
                     "x" + std::to_string(b.height) + "x" + std::to_string(b.channels));
}

std::vector<double> to_gray(const FloatGrid& img) {
  std::vector<double> g(static_cast<size_t>(img.width) * img.height);
  for (int y = 0; y < img.height; ++y)
    for (int x = 0; x < img.width; ++x)
      g[static_cast<size_t>(y) * img.width + x] = 0.299 * img.at(x, y, 0) +
                                                  0.587 * img.at(x, y, 1) +
                                                  0.114 * img.at(x, y, 2);
  return g;
}

constexpr int kWin = 11;

std::vector<double> gaussian_kernel() {
  std::vector<double> k(kWin);
  const double sigma = 1.5;
  double sum = 0;
  for (int i = 0; i < kWin; ++i) {
    const double d = i - (kWin - 1) / 2.0;
    k[static_cast<size_t>(i)] = std::exp(-d * d / (2 * sigma * sigma));
    sum += k[static_cast<size_t>(i)];
  }
  for (double& v : k) v /= sum;
  return k;
}

}  // namespace

double psnr(const FloatGrid& a, const FloatGrid& b, const FloatGrid* mask) {
  check_same(a, b, "psnr");
  double mse = 0;
  long count = 0;
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      if (mask && mask->at(x, y) <= 0.5f) continue;
      for (int c = 0; c < a.channels; ++c) {
        const double d = static_cast<double>(a.at(x, y, c)) - b.at(x, y, c);
        mse += d * d;
      }
      ++count;
    }
  if (count == 0) throw ShapeError("psnr: empty region");
  mse /= static_cast<double>(count) * a.channels;
  if (mse == 0.0) return kPsnrInfinite;
  return 10.0 * std::log10(1.0 / mse);
}

double ssim(const FloatGrid& a, const FloatGrid& b, const FloatGrid* mask) {
  check_same(a, b, "ssim");
  if (a.width < kWin || a.height < kWin)
    throw ShapeError("ssim: image smaller than the " + std::to_string(kWin) +
                     "x" + std::to_string(kWin) + " window");
  const std::vector<double> ga = to_gray(a);
  const std::vector<double> gb = to_gray(b);
  const std::vector<double> kern = gaussian_kernel();
  const int w = a.width, h = a.height;
  const int half = kWin / 2;
  constexpr double c1 = 0.01 * 0.01;
  constexpr double c2 = 0.03 * 0.03;

  // separable Gaussian filtering of the five moment images
  auto blur = [&](const std::vector<double>& src) {
    std::vector<double> tmp(static_cast<size_t>(w) * h, 0.0);
    std::vector<double> dst(static_cast<size_t>(w) * h, 0.0);
    for (int y = 0; y < h; ++y)
      for (int x = half; x < w - half; ++x) {
        double acc = 0;
        for (int i = 0; i < kWin; ++i)
          acc += kern[static_cast<size_t>(i)] * src[static_cast<size_t>(y) * w + x - half + i];
        tmp[static_cast<size_t>(y) * w + x] = acc;
      }
    for (int y = half; y < h - half; ++y)
      for (int x = half; x < w - half; ++x) {
        double acc = 0;
        for (int i = 0; i < kWin; ++i)
          acc += kern[static_cast<size_t>(i)] * tmp[(static_cast<size_t>(y - half + i)) * w + x];
        dst[static_cast<size_t>(y) * w + x] = acc;
      }
    return dst;
  };

  std::vector<double> aa(ga.size()), bb(ga.size()), ab(ga.size());
  for (size_t i = 0; i < ga.size(); ++i) {
    aa[i] = ga[i] * ga[i];
    bb[i] = gb[i] * gb[i];
    ab[i] = ga[i] * gb[i];
  }
  const std::vector<double> mu_a = blur(ga);
  const std::vector<double> mu_b = blur(gb);
  const std::vector<double> m_aa = blur(aa);
  const std::vector<double> m_bb = blur(bb);
  const std::vector<double> m_ab = blur(ab);

  double total = 0;
  long count = 0;
  for (int y = half; y < h - half; ++y)
    for (int x = half; x < w - half; ++x) {
      if (mask && mask->at(x, y) <= 0.5f) continue;
      const size_t i = static_cast<size_t>(y) * w + x;
      const double va = m_aa[i] - mu_a[i] * mu_a[i];
      const double vb = m_bb[i] - mu_b[i] * mu_b[i];
      const double cov = m_ab[i] - mu_a[i] * mu_b[i];
      const double s = ((2 * mu_a[i] * mu_b[i] + c1) * (2 * cov + c2)) /
                       ((mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2));
      total += s;
      ++count;
    }
  if (count == 0) throw ShapeError("ssim: empty region");
  return total / static_cast<double>(count);
}

MetricReport evaluate_pair(const FloatGrid& rendered, const FloatGrid& reference,
                           const FloatGrid& dynamic_mask, int frame) {
  MetricReport rep;
  rep.frame = frame;
  rep.full.psnr = psnr(rendered, reference);
  rep.full.ssim = ssim(rendered, reference);
  rep.full.pixel_count = static_cast<long>(rendered.width) * rendered.height;
  rep.full.present = true;

  FloatGrid inverse = dynamic_mask;
  long dyn_count = 0;
  for (size_t i = 0; i < inverse.data.size(); ++i) {
    if (dynamic_mask.data[i] > 0.5f) ++dyn_count;
    inverse.data[i] = dynamic_mask.data[i] > 0.5f ? 0.0f : 1.0f;
  }
  const long total = static_cast<long>(rendered.width) * rendered.height;
  if (dyn_count > 0) {
    rep.dynamic_region.psnr = psnr(rendered, reference, &dynamic_mask);
    rep.dynamic_region.ssim = ssim(rendered, reference, &dynamic_mask);
    rep.dynamic_region.pixel_count = dyn_count;
    rep.dynamic_region.present = true;
  }
  if (dyn_count < total) {
    rep.static_region.psnr = psnr(rendered, reference, &inverse);
    rep.static_region.ssim = ssim(rendered, reference, &inverse);
    rep.static_region.pixel_count = total - dyn_count;
    rep.static_region.present = true;
  }
  return rep;
}

std::string format_metric_table(const std::vector<MetricReport>& reports) {
  std::ostringstream out;
  out << "frame\tpsnr\tssim\tpsnr_dynamic\tssim_dynamic\tpsnr_static\tssim_static\tlpips\n";
  auto fmt = [](const RegionMetrics& r, bool is_psnr) {
    if (!r.present) return std::string("absent");
    const double v = is_psnr ? r.psnr : r.ssim;
    if (is_psnr && v >= kPsnrInfinite) return std::string("inf");
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.4f", v);
    return std::string(buf);
  };
  for (const MetricReport& r : reports) {
    out << r.frame << "\t" << fmt(r.full, true) << "\t" << fmt(r.full, false) << "\t"
        << fmt(r.dynamic_region, true) << "\t" << fmt(r.dynamic_region, false) << "\t"
        << fmt(r.static_region, true) << "\t" << fmt(r.static_region, false) << "\t"
        << (r.lpips ? std::to_string(*r.lpips) : "na") << "\n";
  }
  return out.str();
}

}  // namespace flownerf
