// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <functional>

#include "flownerf/errors.hpp"
#include "flownerf/nn.hpp"
#include "flownerf/rng.hpp"
#include "flownerf/tensor.hpp"

using namespace flownerf;

namespace {

std::vector<float> random_values(int n, float lo, float hi, std::uint64_t key) {
  CounterRng rng{42};
  std::vector<float> v(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i)
    v[static_cast<size_t>(i)] =
        lo + (hi - lo) * rng.uniform(CounterRng::kTest, key, static_cast<std::uint64_t>(i));
  return v;
}

// Weighted-sum head so every element sees a distinct upstream gradient.
Tensor weighted_sum(const Tensor& x, std::uint64_t key) {
  const Tensor w = Tensor::from(x.shape(), random_values(x.numel(), 0.3f, 1.7f, key));
  return sum(x * w);
}

}  // namespace

TEST_CASE("forward op worked examples") {
  const Tensor r = relu(Tensor::from({3}, {-1.0f, 0.0f, 2.0f}));
  CHECK(r.data()[0] == 0.0f);
  CHECK(r.data()[1] == 0.0f);
  CHECK(r.data()[2] == 2.0f);

  CHECK(sigmoid(Tensor::scalar(0.0f)).item() == doctest::Approx(0.5).epsilon(1e-7));

  const Tensor s = softmax_last(Tensor::from({1, 3}, {0.7f, 0.7f, 0.7f}));
  for (int i = 0; i < 3; ++i)
    CHECK(s.data()[static_cast<size_t>(i)] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));
}

TEST_CASE("shape mismatch errors name the op and shapes") {
  const Tensor a = Tensor::zeros({2, 3});
  const Tensor b = Tensor::zeros({4, 5});
  CHECK_THROWS_WITH_AS(add(a, b),
                       "add: shapes [2,3] and [4,5] are not broadcastable", ShapeError);
  CHECK_THROWS_WITH_AS(matmul(a, b),
                       "matmul: incompatible shapes [2,3] and [4,5]", ShapeError);
}

TEST_CASE("backward analytic examples") {
  SUBCASE("d/dx x^2 at 3") {
    Tensor x = Tensor::param({1}, {3.0f}, "x");
    backward(square(x));
    CHECK(x.grad()[0] == doctest::Approx(6.0).epsilon(1e-6));
  }
  SUBCASE("d/dx sigmoid at 0") {
    Tensor x = Tensor::param({1}, {0.0f}, "x");
    backward(sigmoid(x));
    CHECK(x.grad()[0] == doctest::Approx(0.25).epsilon(1e-6));
  }
  SUBCASE("root must be scalar") {
    Tensor x = Tensor::param({3}, {1, 2, 3}, "x");
    CHECK_THROWS_AS(backward(square(x)), NumericError);
  }
  SUBCASE("detached root is rejected") {
    const Tensor c = Tensor::scalar(1.0f);
    CHECK_THROWS_AS(backward(square(c)), NumericError);
  }
}

TEST_CASE("finite_diff_check worked examples") {
  SUBCASE("sum of squares is exact for central differences") {
    // values on the 2^-10 grid keep the perturbed squares exactly
    // representable, so only the checker's own arithmetic is exercised
    const float g = 1.0f / 1024.0f;
    Tensor p = Tensor::param({4}, {307 * g, -1228 * g, 717 * g, 2048 * g}, "p");
    const double err =
        finite_diff_check([&] { return sum(square(p)); }, {p}, static_cast<double>(g));
    CHECK(err < 1e-6);
  }
  SUBCASE("constant function has zero error") {
    Tensor p = Tensor::param({3}, {1.0f, 2.0f, 3.0f}, "p");
    const double err =
        finite_diff_check([&] { return sum(mul(p, Tensor::zeros({3}))); }, {p}, 1e-3);
    CHECK(err == 0.0);
  }
}

TEST_CASE("two-layer mlp gradients match finite differences") {
  CounterRng rng{7};
  ParamStore store;
  Linear l1(5, 8, store, rng, "l1");
  Linear l2(8, 1, store, rng, "l2");
  const Tensor x = Tensor::from({4, 5}, random_values(20, -1.0f, 1.0f, 0x11));
  auto f = [&] { return mean(l2.forward(relu(l1.forward(x)))); };
  const double err = finite_diff_check(f, store.tensors(), 1e-3);
  CHECK(err < 1e-3);
}

// Randomized gradient property test for every registered differentiable op.
TEST_CASE("per-op finite difference sweep") {
  auto check_unary = [](const std::string& name, std::function<Tensor(const Tensor&)> op,
                        float lo, float hi) {
    Tensor x = Tensor::param({3, 4}, random_values(12, lo, hi, std::hash<std::string>{}(name)), "x");
    const double err =
        finite_diff_check([&] { return weighted_sum(op(x), 0x77); }, {x}, 1e-3);
    CHECK_MESSAGE(err < 1e-3, name << " rel err " << err);
  };

  check_unary("neg", [](const Tensor& x) { return neg(x); }, -2, 2);
  check_unary("relu", [](const Tensor& x) { return relu(x); }, 0.1f, 2);
  check_unary("sigmoid", [](const Tensor& x) { return sigmoid(x); }, -2, 2);
  check_unary("softplus", [](const Tensor& x) { return softplus(x); }, -2, 2);
  check_unary("exp", [](const Tensor& x) { return exp(x); }, -1, 1);
  check_unary("log", [](const Tensor& x) { return log(x); }, 0.5f, 3);
  check_unary("sqrt", [](const Tensor& x) { return sqrt(x); }, 0.5f, 3);
  check_unary("square", [](const Tensor& x) { return square(x); }, -2, 2);
  check_unary("abs", [](const Tensor& x) { return abs(x); }, 0.2f, 2);
  // trig ranges keep the derivative away from its zeros so the relative
  // finite-difference error stays meaningful
  check_unary("sin", [](const Tensor& x) { return sin(x); }, -1.0f, 1.0f);
  check_unary("cos", [](const Tensor& x) { return cos(x); }, 0.45f, 2.7f);
  {
    // fixed pattern whose softmax jacobian has no small entries
    std::vector<float> xv, wv;
    for (int r = 0; r < 3; ++r) {
      for (float v : {0.2f, 0.6f, 1.0f, 1.4f}) xv.push_back(v);
      for (float v : {7.0f, 0.5f, 2.5f, 6.0f}) wv.push_back(v);
    }
    Tensor x = Tensor::param({3, 4}, xv, "x");
    const Tensor w = Tensor::from({3, 4}, wv);
    const double err = finite_diff_check(
        [&] { return sum(softmax_last(x) * w); }, {x}, 1e-3);
    CHECK_MESSAGE(err < 1e-3, "softmax rel err " << err);
  }
  check_unary("cumsum_exclusive",
              [](const Tensor& x) { return cumsum_exclusive_last(x); }, -2, 2);
  check_unary("l2norm", [](const Tensor& x) { return l2norm_last(x); }, 0.3f, 2);
  check_unary("posenc", [](const Tensor& x) { return posenc(x, 3, true); }, -1, 1);
  check_unary("sum_axis", [](const Tensor& x) { return sum_axis(x, 1); }, -2, 2);
  check_unary("mean_axis", [](const Tensor& x) { return mean_axis(x, 0); }, -2, 2);
  check_unary("max_last", [](const Tensor& x) { return max_last(x); }, -2, 2);
  check_unary("mean", [](const Tensor& x) { return mean(x); }, -2, 2);
  check_unary("reshape", [](const Tensor& x) { return reshape(x, {4, 3}); }, -2, 2);
  check_unary("slice", [](const Tensor& x) { return slice(x, 1, 1, 2); }, -2, 2);
  check_unary("broadcast",
              [](const Tensor& x) { return broadcast_to(reshape(x, {3, 4, 1}), {3, 4, 5}); },
              -2, 2);

  auto check_binary = [](const std::string& name,
                         std::function<Tensor(const Tensor&, const Tensor&)> op,
                         float lo, float hi) {
    Tensor a = Tensor::param({3, 4}, random_values(12, lo, hi, 0xa0), "a");
    Tensor b = Tensor::param({3, 4}, random_values(12, lo, hi, 0xb0), "b");
    const double err =
        finite_diff_check([&] { return weighted_sum(op(a, b), 0x78); }, {a, b}, 1e-3);
    CHECK_MESSAGE(err < 1e-3, name << " rel err " << err);
  };
  check_binary("add", [](const Tensor& a, const Tensor& b) { return add(a, b); }, -2, 2);
  check_binary("sub", [](const Tensor& a, const Tensor& b) { return sub(a, b); }, -2, 2);
  check_binary("mul", [](const Tensor& a, const Tensor& b) { return mul(a, b); }, -2, 2);
  check_binary("div", [](const Tensor& a, const Tensor& b) { return div(a, b); }, 0.5f, 2);
  check_binary("safe_div",
               [](const Tensor& a, const Tensor& b) { return safe_div(a, b); }, 0.5f, 2);
  // keep the operands separated so the max never switches branch inside the step
  {
    Tensor a = Tensor::param({2, 3}, {1.0f, 5.0f, 2.0f, -1.0f, 0.5f, 4.0f}, "a");
    Tensor b = Tensor::param({2, 3}, {2.0f, 1.0f, 0.2f, 1.5f, 2.5f, -2.0f}, "b");
    const double err = finite_diff_check(
        [&] { return weighted_sum(maximum(a, b), 0x79); }, {a, b}, 1e-3);
    CHECK_MESSAGE(err < 1e-3, "maximum rel err " << err);
  }
  {
    Tensor a = Tensor::param({3, 4}, random_values(12, -1, 1, 0xc0), "a");
    Tensor b = Tensor::param({4, 2}, random_values(8, -1, 1, 0xc1), "b");
    const double err = finite_diff_check(
        [&] { return weighted_sum(matmul(a, b), 0x7a); }, {a, b}, 1e-3);
    CHECK_MESSAGE(err < 1e-3, "matmul rel err " << err);
  }
  {
    Tensor t = Tensor::param({4, 6}, random_values(24, -1, 1, 0xd0), "t");
    std::vector<int> idx;
    for (int r = 0; r < 4; ++r)
      for (int j = 0; j < 3; ++j) idx.push_back((j * 2 + r) % 6);
    const double err = finite_diff_check(
        [&] { return weighted_sum(gather_samples(t, idx, 3), 0x7b); }, {t}, 1e-3);
    CHECK_MESSAGE(err < 1e-3, "gather_samples rel err " << err);
  }
  {
    Tensor t = Tensor::param({5, 3}, random_values(15, -1, 1, 0xd1), "t");
    const double err = finite_diff_check(
        [&] { return weighted_sum(take_rows(t, {0, 2, 2, 4}), 0x7c); }, {t}, 1e-3);
    CHECK_MESSAGE(err < 1e-3, "take_rows rel err " << err);
  }
  {
    Tensor a = Tensor::param({2, 3}, random_values(6, -1, 1, 0xd2), "a");
    Tensor b = Tensor::param({2, 2}, random_values(4, -1, 1, 0xd3), "b");
    const double err = finite_diff_check(
        [&] { return weighted_sum(concat({a, b}, 1), 0x7d); }, {a, b}, 1e-3);
    CHECK_MESSAGE(err < 1e-3, "concat rel err " << err);
  }
}

TEST_CASE("linearity of backward") {
  Tensor p = Tensor::param({6}, random_values(6, -1, 1, 0xe0), "p");
  auto grad_of = [&](std::function<Tensor()> f) {
    backward(f());
    return p.grad();
  };
  auto f = [&] { return sum(square(p)); };
  auto g = [&] { return sum(sin(p) * exp(p * 0.3f)); };
  const float a = 1.7f, b = -0.6f;

  const std::vector<float> gf = grad_of(f);
  const std::vector<float> gg = grad_of(g);
  const std::vector<float> gc = grad_of([&] { return a * f() + b * g(); });
  for (int i = 0; i < 6; ++i) {
    const double expect = static_cast<double>(a) * gf[static_cast<size_t>(i)] +
                          static_cast<double>(b) * gg[static_cast<size_t>(i)];
    CHECK(gc[static_cast<size_t>(i)] == doctest::Approx(expect).epsilon(1e-6));
  }
}

TEST_CASE("forward determinism is bit exact") {
  auto run = [] {
    CounterRng rng{123};
    ParamStore store;
    Linear l1(6, 12, store, rng, "l1");
    Linear l2(12, 3, store, rng, "l2");
    const Tensor x = Tensor::from({8, 6}, random_values(48, -1, 1, 0xf0));
    return softmax_last(l2.forward(relu(l1.forward(x)))).data();
  };
  const std::vector<float> a = run();
  const std::vector<float> b = run();
  REQUIRE(a.size() == b.size());
  for (size_t i = 0; i < a.size(); ++i) CHECK(a[i] == b[i]);
}

TEST_CASE("gradient accumulates when a tensor is used twice") {
  Tensor x = Tensor::param({1}, {2.0f}, "x");
  backward(mul(x, x));  // d/dx x*x = 2x = 4
  CHECK(x.grad()[0] == doctest::Approx(4.0).epsilon(1e-6));
}

TEST_CASE("no-grad mode records nothing") {
  Tensor x = Tensor::param({2}, {1.0f, 2.0f}, "x");
  NoGradGuard ng;
  const Tensor y = sum(square(x));
  CHECK_FALSE(y.requires_grad());
  CHECK(y.node()->inputs.empty());
}
