// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "flownerf/dsk.hpp"
#include "flownerf/errors.hpp"
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
  return {cam.fx, cam.fy, 64.0f, 64.0f, cam.near};
}

struct Fixture {
  ParamStore store;
  CounterRng rng{11};
  KernelConfig cfg;
  std::vector<Pose> poses;
  std::unique_ptr<DeformableKernel> kernel;

  explicit Fixture(int frames = 4) {
    poses.resize(static_cast<size_t>(frames));
    for (int i = 0; i < frames; ++i)
      poses[static_cast<size_t>(i)].translation = {0.02f * static_cast<float>(i), 0.0f, 0.0f};
    std::vector<int> train_frames;
    for (int i = 0; i < frames - 1; ++i) train_frames.push_back(i);  // last held out
    kernel = std::make_unique<DeformableKernel>(cfg, train_frames, frames, store, rng);
  }
};

}  // namespace

TEST_CASE("canonical offsets put the restricted ray at the center") {
  const auto offsets = canonical_offsets(5);
  REQUIRE(offsets.size() == 5);
  CHECK(offsets[0][0] == 0.0f);
  CHECK(offsets[0][1] == 0.0f);
  for (int i = 1; i < 5; ++i) {
    const float r = std::sqrt(offsets[static_cast<size_t>(i)][0] * offsets[static_cast<size_t>(i)][0] +
                              offsets[static_cast<size_t>(i)][1] * offsets[static_cast<size_t>(i)][1]);
    CHECK(r == doctest::Approx(1.0).epsilon(1e-6));
  }
  CHECK_THROWS_AS(canonical_offsets(0), ConfigError);
  CHECK_THROWS_AS(canonical_offsets(8), ConfigError);
}

TEST_CASE("zero-initialized kernel expands to the identity") {
  Fixture fx;
  const std::vector<float> u = {10.5f, 40.5f, 22.5f};
  const std::vector<float> v = {8.5f, 33.5f, 60.5f};
  const std::vector<int> frames = {0, 1, 2};
  const KernelExpansion exp =
      fx.kernel->expand(u, v, frames, fx.poses, test_camera(), test_ndc());

  SUBCASE("exactly n_positions rays come out") {
    CHECK(exp.rays.size() == 5);
    CHECK(exp.weights.dim(1) == 5);
  }
  SUBCASE("all offsets are zero and weights are uniform 1/N") {
    for (float w : exp.weights.data())
      CHECK(w == doctest::Approx(0.2).epsilon(1e-7));
    for (float d : exp.pixel_offset0.data()) CHECK(d == 0.0f);
    for (float d : exp.origin_offset0.data()) CHECK(d == 0.0f);
    // restricted ray passes through the original pixel
    for (int i = 0; i < 3; ++i) {
      CHECK(exp.pixel0.data()[static_cast<size_t>(i) * 2] == u[static_cast<size_t>(i)]);
      CHECK(exp.pixel0.data()[static_cast<size_t>(i) * 2 + 1] == v[static_cast<size_t>(i)]);
    }
  }
  SUBCASE("the restricted ray matches the plain un-offset ray") {
    Camera cam = test_camera();
    for (int i = 0; i < 3; ++i) {
      cam.pose = fx.poses[static_cast<size_t>(frames[static_cast<size_t>(i)])];
      const Ray plain = ndc_transform(
          ray_through(cam, u[static_cast<size_t>(i)], v[static_cast<size_t>(i)]), test_ndc());
      CHECK(exp.rays[0].origin.data()[static_cast<size_t>(i) * 3] ==
            doctest::Approx(plain.origin.x).epsilon(1e-5));
      CHECK(exp.rays[0].origin.data()[static_cast<size_t>(i) * 3 + 2] ==
            doctest::Approx(plain.origin.z).epsilon(1e-5));
      CHECK(exp.rays[0].dir.data()[static_cast<size_t>(i) * 3] ==
            doctest::Approx(plain.dir.x).epsilon(1e-5));
      CHECK(exp.rays[0].dir.data()[static_cast<size_t>(i) * 3 + 2] ==
            doctest::Approx(plain.dir.z).epsilon(1e-5));
    }
  }
}

TEST_CASE("raw head outputs are applied at one hundredth scale") {
  Fixture fx;
  // with zero head weights the head bias IS the raw output for every input
  std::vector<float>& bias = fx.store.at("kernel.head.bias").mutable_data();
  bias = {1.5f, -2.0f, 0.5f, 3.0f, -4.0f, 0.7f};
  const KernelExpansion exp =
      fx.kernel->expand({20.5f}, {30.5f}, {0}, fx.poses, test_camera(), test_ndc());
  CHECK(exp.origin_offset0.data()[0] == doctest::Approx(0.015).epsilon(1e-6));
  CHECK(exp.origin_offset0.data()[1] == doctest::Approx(-0.02).epsilon(1e-6));
  CHECK(exp.origin_offset0.data()[2] == doctest::Approx(0.005).epsilon(1e-6));
  CHECK(exp.pixel_offset0.data()[0] == doctest::Approx(0.03).epsilon(1e-6));
  CHECK(exp.pixel_offset0.data()[1] == doctest::Approx(-0.04).epsilon(1e-6));
  // equal logits on every ray keep the weights uniform
  for (float w : exp.weights.data()) CHECK(w == doctest::Approx(0.2).epsilon(1e-7));
}

TEST_CASE("mixing weights stay normalized for random kernels") {
  Fixture fx;
  // randomize the head so the expansion is no longer the identity
  CounterRng noise{77};
  std::vector<float>& hw = fx.store.at("kernel.head.weight").mutable_data();
  for (size_t i = 0; i < hw.size(); ++i)
    hw[i] = 2.0f * noise.uniform(CounterRng::kTest, 1, i) - 1.0f;

  std::vector<float> u, v;
  std::vector<int> frames;
  for (int i = 0; i < 64; ++i) {
    u.push_back(1.5f + static_cast<float>(i % 8) * 8.0f);
    v.push_back(2.5f + static_cast<float>(i / 8) * 7.0f);
    frames.push_back(i % 3);
  }
  const KernelExpansion exp =
      fx.kernel->expand(u, v, frames, fx.poses, test_camera(), test_ndc());
  for (int i = 0; i < 64; ++i) {
    double s = 0;
    for (int q = 0; q < 5; ++q)
      s += exp.weights.data()[static_cast<size_t>(i) * 5 + q];
    CHECK(std::fabs(s - 1.0) < 1e-6);
    for (int q = 0; q < 5; ++q)
      CHECK(exp.weights.data()[static_cast<size_t>(i) * 5 + q] >= 0.0f);
  }
}

TEST_CASE("expanding a frame without an embedding is an error") {
  Fixture fx;  // frame 3 is held out
  CHECK_THROWS_AS(
      fx.kernel->expand({10.5f}, {10.5f}, {3}, fx.poses, test_camera(), test_ndc()),
      ConfigError);
}

TEST_CASE("mix_colors") {
  SUBCASE("identical colors are preserved under any weights") {
    const Tensor c = Tensor::from({1, 3}, {0.3f, 0.6f, 0.9f});
    const Tensor w = Tensor::from({1, 3}, {0.5f, 0.25f, 0.25f});
    const Tensor mixed = mix_colors({c, c, c}, w);
    for (int i = 0; i < 3; ++i)
      CHECK(mixed.data()[static_cast<size_t>(i)] ==
            doctest::Approx(c.data()[static_cast<size_t>(i)]).epsilon(1e-6));
  }
  SUBCASE("one-hot weights select a single color") {
    const Tensor a = Tensor::from({1, 3}, {1.0f, 0.0f, 0.0f});
    const Tensor b = Tensor::from({1, 3}, {0.0f, 1.0f, 0.0f});
    const Tensor w = Tensor::from({1, 2}, {0.0f, 1.0f});
    const Tensor mixed = mix_colors({a, b}, w);
    CHECK(mixed.data()[0] == 0.0f);
    CHECK(mixed.data()[1] == 1.0f);
  }
  SUBCASE("equal weights average two colors") {
    const Tensor a = Tensor::from({1, 3}, {1.0f, 0.0f, 0.0f});
    const Tensor b = Tensor::from({1, 3}, {0.0f, 1.0f, 0.0f});
    const Tensor w = Tensor::from({1, 2}, {0.5f, 0.5f});
    const Tensor mixed = mix_colors({a, b}, w);
    CHECK(mixed.data()[0] == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(mixed.data()[1] == doctest::Approx(0.5).epsilon(1e-7));
    CHECK(mixed.data()[2] == 0.0f);
  }
  SUBCASE("convex mixtures of in-range colors stay in range") {
    CounterRng rng{5};
    std::vector<Tensor> colors;
    std::vector<float> logits;
    for (int q = 0; q < 5; ++q) {
      std::vector<float> c(12);
      for (size_t i = 0; i < c.size(); ++i)
        c[i] = rng.uniform(CounterRng::kTest, static_cast<std::uint64_t>(q), i);
      colors.push_back(Tensor::from({4, 3}, c));
    }
    std::vector<float> lg(20);
    for (size_t i = 0; i < lg.size(); ++i)
      lg[i] = 4.0f * rng.uniform(CounterRng::kTest, 9, i) - 2.0f;
    const Tensor w = softmax_last(Tensor::from({4, 5}, lg));
    const Tensor mixed = mix_colors(colors, w);
    for (float v : mixed.data()) {
      CHECK(v >= 0.0f);
      CHECK(v <= 1.0f);
    }
  }
}

TEST_CASE("kernel gradients flow through the expansion") {
  Fixture fx;
  CounterRng noise{78};
  std::vector<float>& hw = fx.store.at("kernel.head.weight").mutable_data();
  for (size_t i = 0; i < hw.size(); ++i)
    hw[i] = 0.5f * (2.0f * noise.uniform(CounterRng::kTest, 2, i) - 1.0f);
  // boost the embeddings so every input feature carries signal
  std::vector<float>& emb = fx.store.at("kernel.embed").mutable_data();
  for (size_t i = 0; i < emb.size(); ++i)
    emb[i] = 0.8f * (2.0f * noise.uniform(CounterRng::kTest, 3, i) - 1.0f);

  std::vector<float> u, v;
  std::vector<int> frames;
  for (int i = 0; i < 8; ++i) {
    u.push_back(3.7f + 7.3f * static_cast<float>(i));
    v.push_back(58.2f - 6.9f * static_cast<float>(i));
    frames.push_back(i % 3);
  }
  auto f = [&] {
    const KernelExpansion exp =
        fx.kernel->expand(u, v, frames, fx.poses, test_camera(), test_ndc());
    Tensor acc = sum(square(exp.weights)) + sum(square(exp.pixel_offset0)) +
                 sum(square(exp.origin_offset0));
    for (int q = 0; q < 5; ++q)
      acc = acc + sum(square(exp.rays[static_cast<size_t>(q)].origin)) +
            sum(square(exp.rays[static_cast<size_t>(q)].dir));
    return acc;
  };
  std::vector<Tensor> checked;
  for (const Tensor& p : fx.store.tensors())
    if (p.name() != "kernel.head.bias") checked.push_back(p);
  CHECK(finite_diff_check(f, checked, 1e-3) < 1e-2);

  // the weight logits share the head bias, so its softmax contribution
  // cancels; the remaining gradient comes only from the offset entries
  backward(f());
  const std::vector<float>& bias_grad = fx.store.at("kernel.head.bias").grad();
  CHECK(std::fabs(bias_grad[5]) < 1e-4f);
  for (int i = 0; i < 5; ++i)
    CHECK(std::fabs(bias_grad[static_cast<size_t>(i)]) > 1e-4f);
}
