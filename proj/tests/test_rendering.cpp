// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "flownerf/camera.hpp"
#include "flownerf/errors.hpp"
#include "flownerf/render.hpp"
#include "flownerf/rng.hpp"

using namespace flownerf;

namespace {

Camera test_camera() {
  Camera cam;
  cam.fx = cam.fy = 70.0f;
  cam.cx = 32.0f;
  cam.cy = 32.0f;
  cam.width = 64;
  cam.height = 64;
  cam.near = 0.6f;
  cam.far = 10.0f;
  return cam;
}

NdcSpace test_ndc() {
  const Camera cam = test_camera();
  return {cam.fx, cam.fy, static_cast<float>(cam.width),
          static_cast<float>(cam.height), cam.near};
}

std::vector<float> random_values(int n, float lo, float hi, std::uint64_t key) {
  CounterRng rng{1234};
  std::vector<float> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    v[static_cast<size_t>(i)] =
        lo + (hi - lo) * rng.uniform(CounterRng::kTest, key, static_cast<std::uint64_t>(i));
  return v;
}

// midpoint sample positions over [0,1] with deltas covering each bin's tail
void slab_samples(int k, std::vector<float>* ts, std::vector<float>* deltas) {
  ts->resize(static_cast<size_t>(k));
  for (int i = 0; i < k; ++i)
    (*ts)[static_cast<size_t>(i)] = (static_cast<float>(i) + 0.5f) / static_cast<float>(k);
  *deltas = deltas_from_ts(*ts, 1, k);
}

}  // namespace

TEST_CASE("generate_rays geometry") {
  const Camera cam = test_camera();
  SUBCASE("principal point looks along the camera forward axis") {
    const Ray r = ray_through(cam, cam.cx, cam.cy);
    CHECK(r.dir.x == 0.0f);
    CHECK(r.dir.y == 0.0f);
    CHECK(r.dir.z == -1.0f);
  }
  SUBCASE("horizontally adjacent pixels differ only in x") {
    const std::vector<Ray> rays = generate_rays(cam, {{10, 20}, {11, 20}}, 0);
    CHECK(rays[0].dir.x != rays[1].dir.x);
    CHECK(rays[0].dir.y == rays[1].dir.y);
    CHECK(rays[0].dir.z == rays[1].dir.z);
  }
  SUBCASE("a 512x288 image yields 147456 rays") {
    Camera big = cam;
    big.width = 512;
    big.height = 288;
    big.cx = 256;
    big.cy = 144;
    std::vector<std::pair<int, int>> pixels;
    pixels.reserve(512 * 288);
    for (int v = 0; v < 288; ++v)
      for (int u = 0; u < 512; ++u) pixels.emplace_back(u, v);
    CHECK(generate_rays(big, pixels, 0).size() == 147456);
  }
  SUBCASE("out-of-bounds pixels are rejected") {
    CHECK_THROWS_AS(generate_rays(cam, {{64, 0}}, 0), ConfigError);
  }
}

TEST_CASE("ndc transform boundaries and round trip") {
  const NdcSpace ndc = test_ndc();
  SUBCASE("depth equal to near maps to z = -1") {
    const Vec3 p = ndc_from_world({0.0f, 0.0f, -ndc.near}, ndc);
    CHECK(p.z == doctest::Approx(-1.0).epsilon(1e-6));
  }
  SUBCASE("depth to infinity approaches z = +1") {
    const Vec3 p = ndc_from_world({0.0f, 0.0f, -1e8f}, ndc);
    CHECK(p.z == doctest::Approx(1.0).epsilon(1e-5));
  }
  SUBCASE("round trip over random points stays within 1e-4") {
    float worst = 0.0f;
    for (int i = 0; i < 100; ++i) {
      const std::vector<float> v = random_values(3, 0.0f, 1.0f, 0x900 + static_cast<std::uint64_t>(i));
      const Vec3 w{(v[0] - 0.5f) * 2.0f, (v[1] - 0.5f) * 2.0f, -(0.7f + 4.0f * v[2])};
      const Vec3 round = ndc_from_world(world_from_ndc(ndc_from_world(w, ndc), ndc), ndc);
      const Vec3 first = ndc_from_world(w, ndc);
      worst = std::max({worst, std::fabs(round.x - first.x),
                        std::fabs(round.y - first.y), std::fabs(round.z - first.z)});
    }
    CHECK(worst < 1e-4f);
  }
  SUBCASE("ray behind the near plane is rejected") {
    Ray r;
    r.origin = {0, 0, -2.0f};
    r.dir = {0, 0, -1.0f};
    CHECK_THROWS_AS(ndc_transform(r, ndc), NumericError);
  }
  SUBCASE("ndc ray spans the scene: t=0 at near, t=1 at infinity") {
    Ray r;
    r.origin = {0.1f, -0.2f, 0.0f};
    r.dir = {0.05f, 0.02f, -1.0f};
    const Ray n = ndc_transform(r, ndc);
    CHECK(n.origin.z == doctest::Approx(-1.0).epsilon(1e-5));
    CHECK(n.origin.z + n.dir.z == doctest::Approx(1.0).epsilon(1e-5));
  }
}

TEST_CASE("stratified sampling") {
  CounterRng rng{5};
  SUBCASE("two samples stay in their halves") {
    for (int trial = 0; trial < 50; ++trial) {
      const std::vector<float> ts = sample_ray(rng, 0, static_cast<std::uint64_t>(trial), 2);
      CHECK(ts[0] >= 0.0f);
      CHECK(ts[0] < 0.5f);
      CHECK(ts[1] >= 0.5f);
      CHECK(ts[1] < 1.0f);
    }
  }
  SUBCASE("samples strictly increase") {
    const std::vector<float> ts = sample_ray(rng, 3, 7, 64);
    for (size_t i = 1; i < ts.size(); ++i) CHECK(ts[i] > ts[i - 1]);
  }
  SUBCASE("occupancy over many draws is uniform within 2%") {
    const int k = 64, draws = 40000, bins = 128;
    std::vector<long> hist(bins, 0);
    for (int d = 0; d < draws; ++d) {
      const std::vector<float> ts = sample_ray(rng, 11, static_cast<std::uint64_t>(d), k);
      for (float t : ts)
        ++hist[static_cast<size_t>(std::min(bins - 1, static_cast<int>(t * bins)))];
    }
    const double expected = static_cast<double>(draws) * k / bins;
    for (long h : hist)
      CHECK(std::fabs(static_cast<double>(h) - expected) / expected < 0.02);
  }
}

TEST_CASE("hierarchical resampling") {
  CounterRng rng{6};
  const int kc = 64;
  std::vector<float> coarse(static_cast<size_t>(kc));
  for (int i = 0; i < kc; ++i)
    coarse[static_cast<size_t>(i)] = (static_cast<float>(i) + 0.5f) / kc;

  SUBCASE("one-hot weights concentrate the fine samples") {
    std::vector<float> w(static_cast<size_t>(kc), 0.0f);
    w[20] = 1.0f;
    const std::vector<float> merged =
        hierarchical_resample(coarse, w, 64, rng, 0, 0);
    int in_bin = 0;
    const float lo = 20.0f / kc, hi = 21.0f / kc;
    for (float t : merged)
      if (t >= lo && t < hi) ++in_bin;
    // 64 fine samples plus the one coarse sample that owns the bin
    CHECK(in_bin >= static_cast<int>(0.9 * 64));
  }
  SUBCASE("uniform weights give near-uniform samples (KS < 0.05)") {
    std::vector<float> w(static_cast<size_t>(kc), 1.0f);
    std::vector<float> samples;
    for (int d = 0; d < 200; ++d) {
      const std::vector<float> merged =
          hierarchical_resample(coarse, w, 64, rng, 1, static_cast<std::uint64_t>(d));
      // keep only the fine samples: drop the known coarse positions
      size_t ci = 0;
      for (float t : merged) {
        if (ci < coarse.size() && t == coarse[ci]) {
          ++ci;
        } else {
          samples.push_back(t);
        }
      }
    }
    REQUIRE(samples.size() >= 10000);
    std::sort(samples.begin(), samples.end());
    double ks = 0.0;
    for (size_t i = 0; i < samples.size(); ++i) {
      const double ecdf_hi = static_cast<double>(i + 1) / static_cast<double>(samples.size());
      const double ecdf_lo = static_cast<double>(i) / static_cast<double>(samples.size());
      ks = std::max({ks, std::fabs(ecdf_hi - samples[i]), std::fabs(ecdf_lo - samples[i])});
    }
    CHECK(ks < 0.05);
  }
  SUBCASE("all-zero weights fall back to uniform with 128 totals") {
    const std::vector<float> w(static_cast<size_t>(kc), 0.0f);
    const std::vector<float> merged = hierarchical_resample(coarse, w, 64, rng, 2, 0);
    CHECK(merged.size() == 128);
    CHECK(std::is_sorted(merged.begin(), merged.end()));
    double max_gap = 0.0;
    for (size_t i = 1; i < merged.size(); ++i)
      max_gap = std::max(max_gap, static_cast<double>(merged[i] - merged[i - 1]));
    CHECK(max_gap < 0.05);  // nothing piles up anywhere
  }
}

TEST_CASE("composite slab oracle") {
  const float sigma_v = 0.1f;
  const float cols[3] = {0.8f, 0.5f, 0.3f};
  auto slab_error = [&](int k) {
    std::vector<float> ts, deltas;
    slab_samples(k, &ts, &deltas);
    std::vector<float> rgb(static_cast<size_t>(k) * 3);
    for (int i = 0; i < k; ++i)
      for (int c = 0; c < 3; ++c) rgb[static_cast<size_t>(i) * 3 + c] = cols[c];
    const CompositeOut out = composite(Tensor::from({1, k, 3}, rgb),
                                       Tensor::full({1, k}, sigma_v),
                                       Tensor::from({1, k}, deltas));
    double err = 0.0;
    for (int c = 0; c < 3; ++c) {
      const double expect = cols[c] * (1.0 - std::exp(-static_cast<double>(sigma_v)));
      err = std::max(err, std::fabs(out.color.data()[static_cast<size_t>(c)] - expect));
    }
    return err;
  };
  const double e64 = slab_error(64);
  const double e128 = slab_error(128);
  const double e256 = slab_error(256);
  CHECK(e64 < 1e-3);
  CHECK(e64 / e128 >= 1.5);   // roughly O(1/K)
  CHECK(e128 / e256 >= 1.5);
}

TEST_CASE("composite edge cases") {
  SUBCASE("empty space renders black with zero accumulation") {
    const int k = 16;
    std::vector<float> ts, deltas;
    slab_samples(k, &ts, &deltas);
    const CompositeOut out = composite(Tensor::full({1, k, 3}, 0.7f),
                                       Tensor::zeros({1, k}),
                                       Tensor::from({1, k}, deltas));
    for (int c = 0; c < 3; ++c) CHECK(out.color.data()[static_cast<size_t>(c)] == 0.0f);
    CHECK(out.acc.data()[0] == 0.0f);
  }
  SUBCASE("an opaque first sample hides everything behind it") {
    const int k = 8;
    std::vector<float> ts, deltas;
    slab_samples(k, &ts, &deltas);
    std::vector<float> sigma(static_cast<size_t>(k), 5.0f);
    sigma[0] = 1e6f;
    std::vector<float> rgb(static_cast<size_t>(k) * 3, 0.2f);
    rgb[0] = 0.9f;
    rgb[1] = 0.1f;
    rgb[2] = 0.5f;
    const CompositeOut out = composite(Tensor::from({1, k, 3}, rgb),
                                       Tensor::from({1, k}, sigma),
                                       Tensor::from({1, k}, deltas));
    CHECK(out.color.data()[0] == doctest::Approx(0.9).epsilon(1e-5));
    CHECK(out.color.data()[1] == doctest::Approx(0.1).epsilon(1e-5));
    CHECK(out.weights.data()[0] == doctest::Approx(1.0).epsilon(1e-5));
    for (int i = 1; i < k; ++i)
      CHECK(out.weights.data()[static_cast<size_t>(i)] < 1e-5f);
  }
  SUBCASE("weights are in range and sum to one with an opaque backstop") {
    const int k = 32, r = 50;
    const std::vector<float> deltas_row = [&] {
      std::vector<float> ts, d;
      slab_samples(k, &ts, &d);
      return d;
    }();
    std::vector<float> sigma = random_values(r * k, 0.0f, 8.0f, 0xaa);
    std::vector<float> deltas(static_cast<size_t>(r) * k);
    for (int i = 0; i < r; ++i) {
      sigma[static_cast<size_t>(i) * k + k - 1] = 1e7f;  // backstop
      std::copy(deltas_row.begin(), deltas_row.end(),
                deltas.begin() + static_cast<long>(i) * k);
    }
    const CompositeOut out = composite(Tensor::full({r, k, 3}, 0.5f),
                                       Tensor::from({r, k}, sigma),
                                       Tensor::from({r, k}, deltas));
    for (float w : out.weights.data()) CHECK(w >= 0.0f);
    for (int i = 0; i < r; ++i) {
      CHECK(out.acc.data()[static_cast<size_t>(i)] <= 1.0f + 1e-5f);
      CHECK(out.acc.data()[static_cast<size_t>(i)] == doctest::Approx(1.0).epsilon(1e-5));
    }
  }
}

TEST_CASE("fusion identities") {
  const int r = 1000, k = 24;
  std::vector<float> ts, deltas_row;
  slab_samples(k, &ts, &deltas_row);
  std::vector<float> deltas(static_cast<size_t>(r) * k);
  for (int i = 0; i < r; ++i)
    std::copy(deltas_row.begin(), deltas_row.end(), deltas.begin() + static_cast<long>(i) * k);
  const Tensor deltas_t = Tensor::from({r, k}, deltas);
  const Tensor sigma_s = Tensor::from({r, k}, random_values(r * k, 0.0f, 6.0f, 0xb0));
  const Tensor sigma_d = Tensor::from({r, k}, random_values(r * k, 0.0f, 6.0f, 0xb1));
  const Tensor rgb_s = Tensor::from({r, k, 3}, random_values(r * k * 3, 0.0f, 1.0f, 0xb2));
  const Tensor rgb_d = Tensor::from({r, k, 3}, random_values(r * k * 3, 0.0f, 1.0f, 0xb3));

  SUBCASE("zero dynamic density reduces exactly to the static composite") {
    const FusedOut fused =
        fuse_composite(rgb_s, sigma_s, rgb_d, Tensor::zeros({r, k}), deltas_t);
    const CompositeOut plain = composite(rgb_s, sigma_s, deltas_t);
    for (size_t i = 0; i < fused.color.data().size(); ++i)
      CHECK(fused.color.data()[i] == plain.color.data()[i]);
    for (size_t i = 0; i < fused.weights.data().size(); ++i) {
      CHECK(fused.weights.data()[i] == plain.weights.data()[i]);
      CHECK(fused.w_static.data()[i] == plain.weights.data()[i]);
      CHECK(fused.w_dynamic.data()[i] == 0.0f);
    }
  }
  SUBCASE("zero static density reduces exactly to the dynamic composite") {
    const FusedOut fused =
        fuse_composite(rgb_s, Tensor::zeros({r, k}), rgb_d, sigma_d, deltas_t);
    const CompositeOut plain = composite(rgb_d, sigma_d, deltas_t);
    for (size_t i = 0; i < fused.color.data().size(); ++i)
      CHECK(fused.color.data()[i] == plain.color.data()[i]);
  }
  SUBCASE("per-sample weights split the fused weight exactly") {
    const FusedOut fused = fuse_composite(rgb_s, sigma_s, rgb_d, sigma_d, deltas_t);
    float worst = 0.0f;
    for (size_t i = 0; i < fused.weights.data().size(); ++i)
      worst = std::max(worst, std::fabs(fused.w_static.data()[i] +
                                        fused.w_dynamic.data()[i] -
                                        fused.weights.data()[i]));
    CHECK(worst < 1e-5f);
  }
}

TEST_CASE("warped composite properties") {
  // a gaussian blob translating rigidly with exact flows: the warped render
  // must reproduce the unwarped one
  const int r = 12, k = 48;
  const Vec3 v{0.07f, -0.03f, 0.04f};
  std::vector<float> ts_v, deltas_row;
  slab_samples(k, &ts_v, &deltas_row);

  auto blob_sigma = [&](const Vec3& x, const Vec3& center) {
    const Vec3 d = x - center;
    return 25.0f * std::exp(-d.dot(d) / 0.02f);
  };

  const Vec3 center0{0.0f, 0.05f, 0.3f};
  std::vector<float> pos(static_cast<size_t>(r) * k * 3);
  std::vector<float> sig_i(static_cast<size_t>(r) * k);
  std::vector<float> sig_j_warped(static_cast<size_t>(r) * k);
  std::vector<float> deltas(static_cast<size_t>(r) * k);
  for (int i = 0; i < r; ++i) {
    const Vec3 o{-0.3f + 0.05f * static_cast<float>(i), -0.1f, -0.4f};
    const Vec3 d{0.2f, 0.15f, 1.4f};
    for (int s = 0; s < k; ++s) {
      const Vec3 x = o + d * ts_v[static_cast<size_t>(s)];
      const size_t idx = static_cast<size_t>(i) * k + s;
      pos[idx * 3] = x.x;
      pos[idx * 3 + 1] = x.y;
      pos[idx * 3 + 2] = x.z;
      sig_i[idx] = blob_sigma(x, center0);
      sig_j_warped[idx] = blob_sigma(x + v, center0 + v);  // field at time j, displaced
      deltas[idx] = deltas_row[static_cast<size_t>(s)];
    }
  }
  const Tensor deltas_t = Tensor::from({r, k}, deltas);
  const Tensor rgb = Tensor::full({r, k, 3}, 0.6f);

  const CompositeOut base = composite(rgb, Tensor::from({r, k}, sig_i), deltas_t);
  const CompositeOut warped =
      composite(rgb, Tensor::from({r, k}, sig_j_warped), deltas_t);
  for (size_t i = 0; i < base.color.data().size(); ++i)
    CHECK(warped.color.data()[i] ==
          doctest::Approx(base.color.data()[i]).epsilon(1e-3));

  // zero flow: displaced positions are bit-identical, so a field evaluated at
  // them gives bit-identical samples and the composite matches exactly
  const Tensor pos_t = Tensor::from({r, k, 3}, pos);
  const Tensor displaced = pos_t + Tensor::zeros({r, k, 3});
  for (size_t i = 0; i < pos_t.data().size(); ++i)
    CHECK(displaced.data()[i] == pos_t.data()[i]);
}

TEST_CASE("projected flow oracles") {
  const Camera cam = test_camera();
  const NdcSpace ndc = test_ndc();
  const Mat3 wtc = cam.pose.rotation.transposed();
  auto rot_rows = [&](int r) {
    std::vector<float> rot(static_cast<size_t>(r) * 9);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < 9; ++j) rot[static_cast<size_t>(i) * 9 + j] = wtc.m[static_cast<size_t>(j)];
    return rot;
  };

  SUBCASE("zero flow with the same camera projects to zero displacement") {
    const int k = 8;
    const float u = 22.5f, v = 40.5f;
    const Ray ray = ndc_transform(ray_through(cam, u, v), ndc);
    std::vector<float> pos(static_cast<size_t>(k) * 3);
    std::vector<float> w(static_cast<size_t>(k), 0.1f);
    for (int s = 0; s < k; ++s) {
      const float t = (static_cast<float>(s) + 0.5f) / k;
      pos[static_cast<size_t>(s) * 3] = ray.origin.x + t * ray.dir.x;
      pos[static_cast<size_t>(s) * 3 + 1] = ray.origin.y + t * ray.dir.y;
      pos[static_cast<size_t>(s) * 3 + 2] = ray.origin.z + t * ray.dir.z;
    }
    const ProjectedFlow out = project_flow(
        Tensor::from({1, k, 3}, pos), Tensor::zeros({1, k, 3}),
        Tensor::from({1, k}, w), ndc, Tensor::from({1, 9}, rot_rows(1)),
        Tensor::zeros({1, 3}), cam.fx, cam.fy, cam.cx, cam.cy,
        Tensor::from({1, 2}, {u, v}));
    CHECK(out.valid[0] == 1.0f);
    CHECK(std::fabs(out.pixel_delta.data()[0]) < 1e-3f);
    CHECK(std::fabs(out.pixel_delta.data()[1]) < 1e-3f);
  }

  SUBCASE("single opaque sample translated by a known world offset") {
    const float u = 22.5f, v = 40.5f;
    const Vec3 delta_w{0.06f, -0.04f, 0.0f};
    const Ray ray = ndc_transform(ray_through(cam, u, v), ndc);
    const float t = 0.4f;
    const Vec3 x_ndc = ray.origin + ray.dir * t;
    const Vec3 x_world = world_from_ndc(x_ndc, ndc);
    const Vec3 x_moved = x_world + delta_w;
    const Vec3 flow_ndc = ndc_from_world(x_moved, ndc) - x_ndc;

    const ProjectedFlow out = project_flow(
        Tensor::from({1, 1, 3}, {x_ndc.x, x_ndc.y, x_ndc.z}),
        Tensor::from({1, 1, 3}, {flow_ndc.x, flow_ndc.y, flow_ndc.z}),
        Tensor::from({1, 1}, {0.999f}), ndc, Tensor::from({1, 9}, rot_rows(1)),
        Tensor::zeros({1, 3}), cam.fx, cam.fy, cam.cx, cam.cy,
        Tensor::from({1, 2}, {u, v}));
    float pu = 0, pv = 0;
    REQUIRE(project_point(cam, x_moved, &pu, &pv));
    CHECK(out.pixel_delta.data()[0] == doctest::Approx(pu - u).epsilon(0.0).scale(1).epsilon(0.1));
    CHECK(std::fabs(out.pixel_delta.data()[0] - (pu - u)) < 0.1f);
    CHECK(std::fabs(out.pixel_delta.data()[1] - (pv - v)) < 0.1f);
  }

  SUBCASE("uniform world flow on a fronto-parallel plane is constant in pixels") {
    const Vec3 vel{0.05f, 0.02f, 0.0f};
    const float plane_z = -1.8f;
    const int r = 25;
    std::vector<float> pos(static_cast<size_t>(r) * 3);
    std::vector<float> flow(static_cast<size_t>(r) * 3);
    std::vector<float> pix(static_cast<size_t>(r) * 2);
    int w = 0;
    for (int iy = 0; iy < 5; ++iy)
      for (int ix = 0; ix < 5; ++ix, ++w) {
        const float u = 12.5f + 10.0f * static_cast<float>(ix);
        const float v = 12.5f + 10.0f * static_cast<float>(iy);
        const Ray ray = ray_through(cam, u, v);
        const float s = plane_z / ray.dir.z;  // origin at 0
        const Vec3 x_world = ray.origin + ray.dir * s;
        const Vec3 x_ndc = ndc_from_world(x_world, ndc);
        const Vec3 f_ndc = ndc_from_world(x_world + vel, ndc) - x_ndc;
        pos[static_cast<size_t>(w) * 3] = x_ndc.x;
        pos[static_cast<size_t>(w) * 3 + 1] = x_ndc.y;
        pos[static_cast<size_t>(w) * 3 + 2] = x_ndc.z;
        flow[static_cast<size_t>(w) * 3] = f_ndc.x;
        flow[static_cast<size_t>(w) * 3 + 1] = f_ndc.y;
        flow[static_cast<size_t>(w) * 3 + 2] = f_ndc.z;
        pix[static_cast<size_t>(w) * 2] = u;
        pix[static_cast<size_t>(w) * 2 + 1] = v;
      }
    const ProjectedFlow out = project_flow(
        Tensor::from({r, 1, 3}, pos), Tensor::from({r, 1, 3}, flow),
        Tensor::full({r, 1}, 0.98f), ndc, Tensor::from({r, 9}, rot_rows(r)),
        Tensor::zeros({r, 3}), cam.fx, cam.fy, cam.cx, cam.cy,
        Tensor::from({r, 2}, pix));
    const float du0 = out.pixel_delta.data()[0];
    const float dv0 = out.pixel_delta.data()[1];
    for (int i = 1; i < r; ++i) {
      CHECK(std::fabs(out.pixel_delta.data()[static_cast<size_t>(i) * 2] - du0) < 0.1f);
      CHECK(std::fabs(out.pixel_delta.data()[static_cast<size_t>(i) * 2 + 1] - dv0) < 0.1f);
    }
  }

  SUBCASE("points behind the camera are flagged") {
    // ndc z beyond +1 maps to positive camera-space z, i.e. behind the camera
    std::vector<float> rot = rot_rows(1);
    const ProjectedFlow out = project_flow(
        Tensor::from({1, 1, 3}, {0.0f, 0.0f, 3.0f}),
        Tensor::zeros({1, 1, 3}), Tensor::from({1, 1}, {0.9f}), test_ndc(),
        Tensor::from({1, 9}, rot), Tensor::zeros({1, 3}), cam.fx, cam.fy, cam.cx,
        cam.cy, Tensor::zeros({1, 2}));
    CHECK(out.valid[0] == 0.0f);
  }
}

TEST_CASE("expected depth") {
  SUBCASE("single opaque sample returns its position") {
    const Tensor d = expected_depth(Tensor::from({1, 3}, {0.0f, 0.97f, 0.0f}),
                                    Tensor::from({1, 3}, {0.1f, 0.3f, 0.7f}));
    CHECK(d.data()[0] == doctest::Approx(0.3).epsilon(1e-6));
  }
  SUBCASE("two equal weights average the positions") {
    const Tensor d = expected_depth(Tensor::from({1, 2}, {0.4f, 0.4f}),
                                    Tensor::from({1, 2}, {0.2f, 0.6f}));
    CHECK(d.data()[0] == doctest::Approx(0.4).epsilon(1e-6));
  }
  SUBCASE("homogeneous slab matches 64-bit quadrature within 1e-3") {
    // midpoint samples with full-bin deltas: each weight is the exact bin
    // mass, so the only discrepancy is the within-bin centroid offset
    const int k = 64;
    const double sigma_v = 2.0;
    std::vector<float> ts(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i)
      ts[static_cast<size_t>(i)] = (static_cast<float>(i) + 0.5f) / k;
    const CompositeOut out = composite(Tensor::full({1, k, 3}, 0.5f),
                                       Tensor::full({1, k}, static_cast<float>(sigma_v)),
                                       Tensor::full({1, k}, 1.0f / k));
    const Tensor d = expected_depth(out.weights, Tensor::from({1, k}, ts));

    const int steps = 2000000;
    double num = 0, den = 0;
    for (int i = 0; i < steps; ++i) {
      const double t = (static_cast<double>(i) + 0.5) / steps;
      const double w = sigma_v * std::exp(-sigma_v * t);
      num += w * t;
      den += w;
    }
    CHECK(std::fabs(d.data()[0] - num / den) < 1e-3);
  }
}
