// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "flownerf/fields.hpp"
#include "flownerf/rng.hpp"
#include "flownerf/train_types.hpp"

using namespace flownerf;

namespace {

FieldConfig micro_config() {
  FieldConfig cfg;
  cfg.depth = 3;
  cfg.width = 32;
  cfg.skip_layer = 2;
  cfg.encoding.num_freqs_position = 4;
  cfg.encoding.num_freqs_direction = 0;
  cfg.encoding.num_freqs_time = 3;
  return cfg;
}

std::vector<float> random_values(int n, float lo, float hi, std::uint64_t key) {
  CounterRng rng{99};
  std::vector<float> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    v[static_cast<size_t>(i)] =
        lo + (hi - lo) * rng.uniform(CounterRng::kTest, key, static_cast<std::uint64_t>(i));
  return v;
}

// Plain supervised fit of a field's outputs with Adam; used by the overfit
// micro-tests below.
void fit(ParamStore& store, const std::function<Tensor()>& loss, int steps,
         float lr = 3e-3f) {
  AdamState adam;
  for (int s = 0; s < steps; ++s) {
    backward(loss());
    adam.update(store, lr);
  }
}

}  // namespace

TEST_CASE("encode layout and sizes") {
  SUBCASE("zeros with two frequencies") {
    const Tensor e = encode(Tensor::from({1, 1}, {0.0f}), 2, true);
    REQUIRE(e.numel() == 5);
    CHECK(e.data()[0] == 0.0f);  // identity
    CHECK(e.data()[1] == 0.0f);  // sin(pi 0)
    CHECK(e.data()[2] == 1.0f);  // cos(pi 0)
    CHECK(e.data()[3] == 0.0f);  // sin(2 pi 0)
    CHECK(e.data()[4] == 1.0f);  // cos(2 pi 0)
  }
  SUBCASE("3-vector with 10 frequencies is 63 wide") {
    const Tensor e = encode(Tensor::from({1, 3}, {0.1f, 0.2f, 0.3f}), 10, true);
    CHECK(e.numel() == 63);
    EncodingConfig cfg;
    CHECK(cfg.encoded_dim(3, 10) == 63);
  }
  SUBCASE("injective on 1000 random points") {
    const int n = 1000;
    const Tensor pts = Tensor::from({n, 3}, random_values(n * 3, -1.0f, 1.0f, 0x5));
    const Tensor enc = encode(pts, 6, true);
    std::set<std::vector<float>> seen;
    const int dim = enc.dim(1);
    for (int i = 0; i < n; ++i) {
      std::vector<float> row(enc.data().begin() + static_cast<long>(i) * dim,
                             enc.data().begin() + static_cast<long>(i + 1) * dim);
      seen.insert(std::move(row));
    }
    CHECK(static_cast<int>(seen.size()) == n);
  }
}

TEST_CASE("static field contracts") {
  CounterRng rng{3};
  ParamStore store;
  StaticField field(micro_config(), store, rng);
  const int n = 64;
  const Tensor pos = Tensor::from({n, 3}, random_values(n * 3, -1.0f, 1.0f, 0x21));
  const Tensor dir = Tensor::from({n, 3}, random_values(n * 3, -1.0f, 1.0f, 0x22));

  SUBCASE("fresh field is nearly transparent") {
    const StaticFieldOutput out = field.eval(pos, dir);
    for (float s : out.sigma.data()) CHECK(s < 1.0f);
  }
  SUBCASE("evaluation is deterministic") {
    const StaticFieldOutput a = field.eval(pos, dir);
    const StaticFieldOutput b = field.eval(pos, dir);
    for (int i = 0; i < n; ++i) CHECK(a.sigma.data()[static_cast<size_t>(i)] ==
                                      b.sigma.data()[static_cast<size_t>(i)]);
    for (int i = 0; i < 3 * n; ++i) CHECK(a.rgb.data()[static_cast<size_t>(i)] ==
                                          b.rgb.data()[static_cast<size_t>(i)]);
  }
}

TEST_CASE("output ranges hold on random inputs") {
  CounterRng rng{4};
  ParamStore store;
  StaticField sf(micro_config(), store, rng, "s");
  DynamicField df(micro_config(), store, rng, "d");
  const int n = 10000;
  const Tensor pos = Tensor::from({n, 3}, random_values(n * 3, -1.5f, 1.5f, 0x31));
  const Tensor dir = Tensor::from({n, 3}, random_values(n * 3, -1.0f, 1.0f, 0x32));
  const Tensor time = Tensor::from({n, 1}, random_values(n, 0.0f, 1.0f, 0x33));

  const StaticFieldOutput so = sf.eval(pos, dir);
  const DynamicFieldOutput dyo = df.eval(pos, dir, time);
  for (float s : so.sigma.data()) CHECK(s >= 0.0f);
  for (float s : dyo.sigma.data()) CHECK(s >= 0.0f);
  for (float c : so.rgb.data()) {
    CHECK(c >= 0.0f);
    CHECK(c <= 1.0f);
  }
  for (float c : dyo.rgb.data()) {
    CHECK(c >= 0.0f);
    CHECK(c <= 1.0f);
  }
  for (float f : dyo.flow_fwd.data()) CHECK(std::isfinite(f));
  for (float f : dyo.flow_bwd.data()) CHECK(std::isfinite(f));
}

TEST_CASE("fresh dynamic field predicts zero flow") {
  CounterRng rng{5};
  ParamStore store;
  DynamicField df(micro_config(), store, rng);
  const int n = 32;
  const DynamicFieldOutput out =
      df.eval(Tensor::from({n, 3}, random_values(n * 3, -1, 1, 0x41)),
              Tensor::from({n, 3}, random_values(n * 3, -1, 1, 0x42)),
              Tensor::from({n, 1}, random_values(n, 0, 1, 0x43)));
  for (float f : out.flow_fwd.data()) CHECK(std::fabs(f) < 0.1f);
  for (float f : out.flow_bwd.data()) CHECK(std::fabs(f) < 0.1f);
}

TEST_CASE("field gradients pass the finite difference oracle") {
  CounterRng rng{6};
  ParamStore store;
  FieldConfig cfg = micro_config();
  cfg.width = 12;
  cfg.depth = 2;
  cfg.skip_layer = -1;
  StaticField sf(cfg, store, rng, "s");
  DynamicField df(cfg, store, rng, "d");
  const int n = 6;
  const Tensor pos = Tensor::from({n, 3}, random_values(n * 3, -1, 1, 0x51));
  const Tensor dir = Tensor::from({n, 3}, random_values(n * 3, -1, 1, 0x52));
  const Tensor time = Tensor::from({n, 1}, random_values(n, 0, 1, 0x53));

  auto f = [&] {
    const StaticFieldOutput so = sf.eval(pos, dir);
    const DynamicFieldOutput dyo = df.eval(pos, dir, time);
    return sum(so.sigma) + sum(square(so.rgb)) + sum(dyo.sigma) +
           sum(square(dyo.rgb)) + sum(square(dyo.flow_fwd)) + sum(square(dyo.flow_bwd));
  };
  CHECK(finite_diff_check(f, store.tensors(), 1e-3) < 1e-2);
}

TEST_CASE("static field overfits an opaque box on a line") {
  CounterRng rng{8};
  ParamStore store;
  StaticField field(micro_config(), store, rng);

  // positions along the z axis; the box occupies z in [-0.25, 0.25]
  const int n = 96;
  std::vector<float> pos(static_cast<size_t>(n) * 3, 0.0f);
  std::vector<float> target_sigma(static_cast<size_t>(n));
  std::vector<float> target_red(static_cast<size_t>(n) * 3, 0.0f);
  for (int i = 0; i < n; ++i) {
    const float z = -1.0f + 2.0f * static_cast<float>(i) / (n - 1);
    pos[static_cast<size_t>(i) * 3 + 2] = z;
    const bool inside = std::fabs(z) < 0.25f;
    target_sigma[static_cast<size_t>(i)] = inside ? 40.0f : 0.0f;
    target_red[static_cast<size_t>(i) * 3] = inside ? 1.0f : 0.0f;
  }
  const Tensor pos_t = Tensor::from({n, 3}, pos);
  const Tensor dir_t = Tensor::zeros({n, 3});
  const Tensor sig_t = Tensor::from({n, 1}, target_sigma);
  const Tensor red_t = Tensor::from({n, 3}, target_red);

  fit(store, [&] {
    const StaticFieldOutput out = field.eval(pos_t, dir_t);
    return mean(square(out.sigma - sig_t)) + mean(square(out.rgb - red_t));
  }, 400, 5e-3f);

  const StaticFieldOutput out = field.eval(pos_t, dir_t);
  double inside_min = 1e30, outside_max = 0.0;
  for (int i = 0; i < n; ++i) {
    const float z = pos[static_cast<size_t>(i) * 3 + 2];
    const float s = out.sigma.data()[static_cast<size_t>(i)];
    if (std::fabs(z) < 0.18f)
      inside_min = std::min(inside_min, static_cast<double>(s));
    else if (std::fabs(z) > 0.35f)
      outside_max = std::max(outside_max, static_cast<double>(s));
  }
  CHECK(inside_min / std::max(outside_max, 1e-30) >= 100.0);
}

TEST_CASE("dynamic field fits a translating point and its flow") {
  CounterRng rng{9};
  ParamStore store;
  DynamicField field(micro_config(), store, rng);

  // a point moving along +x at constant NDC velocity v per frame step
  const float v = 0.08f;
  const int frames = 8;
  const int per_frame = 24;
  const int n = frames * per_frame;
  std::vector<float> pos(static_cast<size_t>(n) * 3);
  std::vector<float> time(static_cast<size_t>(n));
  std::vector<float> sig(static_cast<size_t>(n));
  std::vector<float> flow_f(static_cast<size_t>(n) * 3, 0.0f);
  std::vector<float> flow_b(static_cast<size_t>(n) * 3, 0.0f);
  CounterRng data_rng{17};
  int w = 0;
  for (int f = 0; f < frames; ++f) {
    const float cx = -0.3f + v * static_cast<float>(f);
    for (int s = 0; s < per_frame; ++s, ++w) {
      const bool on_point = s % 2 == 0;
      float x;
      if (on_point) {
        x = cx;
      } else {
        x = -0.8f + 1.6f * data_rng.uniform(CounterRng::kTest,
                                            static_cast<std::uint64_t>(f),
                                            static_cast<std::uint64_t>(s));
        if (std::fabs(x - cx) < 0.1f) x += 0.25f;
      }
      pos[static_cast<size_t>(w) * 3] = x;
      pos[static_cast<size_t>(w) * 3 + 1] = 0.0f;
      pos[static_cast<size_t>(w) * 3 + 2] = 0.0f;
      time[static_cast<size_t>(w)] = static_cast<float>(f) / (frames - 1);
      sig[static_cast<size_t>(w)] = on_point ? 30.0f : 0.0f;
      if (on_point) {
        flow_f[static_cast<size_t>(w) * 3] = v;
        flow_b[static_cast<size_t>(w) * 3] = -v;
      }
    }
  }
  const Tensor pos_t = Tensor::from({n, 3}, pos);
  const Tensor dir_t = Tensor::zeros({n, 3});
  const Tensor time_t = Tensor::from({n, 1}, time);
  const Tensor sig_t = Tensor::from({n, 1}, sig);
  const Tensor ff_t = Tensor::from({n, 3}, flow_f);
  const Tensor fb_t = Tensor::from({n, 3}, flow_b);

  fit(store, [&] {
    const DynamicFieldOutput out = field.eval(pos_t, dir_t, time_t);
    return mean(square(out.sigma - sig_t)) + 30.0f * mean(square(out.flow_fwd - ff_t)) +
           30.0f * mean(square(out.flow_bwd - fb_t));
  }, 600, 5e-3f);

  // flow at the moving point's location, mid sequence
  const int mid = 3;
  const float cx = -0.3f + v * static_cast<float>(mid);
  const DynamicFieldOutput probe =
      field.eval(Tensor::from({1, 3}, {cx, 0.0f, 0.0f}), Tensor::zeros({1, 3}),
                 Tensor::from({1, 1}, {static_cast<float>(mid) / (frames - 1)}));
  CHECK(probe.flow_fwd.data()[0] == doctest::Approx(v).epsilon(0.2));

  // time conditioning: density at a dynamic location differs between t=0 and t=1
  const float x0 = -0.3f;
  const DynamicFieldOutput at_t0 =
      field.eval(Tensor::from({1, 3}, {x0, 0.0f, 0.0f}), Tensor::zeros({1, 3}),
                 Tensor::from({1, 1}, {0.0f}));
  const DynamicFieldOutput at_t1 =
      field.eval(Tensor::from({1, 3}, {x0, 0.0f, 0.0f}), Tensor::zeros({1, 3}),
                 Tensor::from({1, 1}, {1.0f}));
  CHECK(std::fabs(at_t0.sigma.data()[0] - at_t1.sigma.data()[0]) > 1.0f);
}
