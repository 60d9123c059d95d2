// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#include "flownerf/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <unordered_map>
#include <unordered_set>

#include "flownerf/errors.hpp"

extern "C" void openblas_set_num_threads(int);

namespace flownerf {

namespace {

thread_local bool g_grad_enabled = true;
thread_local bool g_precise = false;
int g_compute_threads = 2;

double nan_d() { return std::numeric_limits<double>::quiet_NaN(); }

// 64-bit shadow of a scalar node, falling back to the float32 value.
double hi_of(const NodePtr& n) {
  if (n->hi_value.size() == 1) return n->hi_value[0];
  if (!std::isnan(n->hi)) return n->hi;
  return n->numel() == 1 ? static_cast<double>(n->value[0]) : nan_d();
}

// Precise-mode view of a node's values: its float64 shadow when recorded,
// otherwise the widened float32 data.
std::vector<double> wide_values(const NodePtr& n) {
  if (static_cast<int>(n->hi_value.size()) == n->numel()) return n->hi_value;
  return std::vector<double>(n->value.begin(), n->value.end());
}

void finish_precise(const NodePtr& n) {
  if (n->numel() == 1 && !n->hi_value.empty()) n->hi = n->hi_value[0];
}

NodePtr make_node(Op op, Shape shape, std::vector<NodePtr> inputs) {
  auto n = std::make_shared<Node>();
  n->op = op;
  n->shape = std::move(shape);
  n->value.resize(static_cast<size_t>(n->numel()));
  if (g_grad_enabled) {
    for (const auto& in : inputs)
      if (in->requires_grad) {
        n->requires_grad = true;
        break;
      }
  }
  // Inputs are only retained while recording; pure inference keeps no graph.
  if (g_grad_enabled)
    n->inputs = std::move(inputs);
  return n;
}

void ensure_grad(const NodePtr& n) {
  if (n->grad.empty()) n->grad.assign(static_cast<size_t>(n->numel()), 0.0f);
}

}  // namespace

int numel_of(const Shape& s) {
  int n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kSafeDiv: return "safe_div";
    case Op::kMaximum: return "maximum";
    case Op::kMatmul: return "matmul";
    case Op::kNeg: return "neg";
    case Op::kRelu: return "relu";
    case Op::kSigmoid: return "sigmoid";
    case Op::kSoftplus: return "softplus";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kSqrt: return "sqrt";
    case Op::kSquare: return "square";
    case Op::kAbs: return "abs";
    case Op::kSin: return "sin";
    case Op::kCos: return "cos";
    case Op::kSum: return "sum";
    case Op::kSumAxis: return "sum_axis";
    case Op::kMean: return "mean";
    case Op::kMeanAxis: return "mean_axis";
    case Op::kMaxLast: return "max_last";
    case Op::kSoftmaxLast: return "softmax_last";
    case Op::kCumsumExclLast: return "cumsum_exclusive_last";
    case Op::kL2NormLast: return "l2norm_last";
    case Op::kPosenc: return "posenc";
    case Op::kConcat: return "concat";
    case Op::kSlice: return "slice";
    case Op::kBroadcast: return "broadcast";
    case Op::kReshape: return "reshape";
    case Op::kGatherSamples: return "gather_samples";
    case Op::kTakeRows: return "take_rows";
  }
  return "?";
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

PreciseGuard::PreciseGuard() : prev_(g_precise) { g_precise = true; }
PreciseGuard::~PreciseGuard() { g_precise = prev_; }

void set_compute_threads(int n) {
  g_compute_threads = std::max(1, n);
  openblas_set_num_threads(g_compute_threads);
}

int compute_threads() { return g_compute_threads; }

// ---------------------------------------------------------------------------
// Construction

Tensor Tensor::zeros(const Shape& s) { return full(s, 0.0f); }

Tensor Tensor::full(const Shape& s, float v) {
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->value.assign(static_cast<size_t>(n->numel()), v);
  return Tensor(std::move(n));
}

Tensor Tensor::from(const Shape& s, std::vector<float> data) {
  if (static_cast<int>(data.size()) != numel_of(s))
    throw ShapeError("tensor: " + std::to_string(data.size()) +
                     " values do not fill shape " + shape_str(s));
  auto n = std::make_shared<Node>();
  n->shape = s;
  n->value = std::move(data);
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(float v) { return full({1}, v); }

Tensor Tensor::param(const Shape& s, std::vector<float> data, std::string name) {
  Tensor t = from(s, std::move(data));
  t.node()->requires_grad = true;
  t.node()->name = std::move(name);
  return t;
}

float Tensor::item() const {
  if (numel() != 1)
    throw ShapeError("item: tensor has shape " + shape_str(shape()));
  return n_->value[0];
}

double Tensor::item_hi() const {
  if (numel() != 1)
    throw ShapeError("item_hi: tensor has shape " + shape_str(shape()));
  return hi_of(n_);
}

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

Shape broadcast_shape(const char* who, const Shape& a, const Shape& b) {
  const size_t r = std::max(a.size(), b.size());
  Shape out(r, 1);
  for (size_t i = 0; i < r; ++i) {
    const int da = i < a.size() ? a[a.size() - 1 - i] : 1;
    const int db = i < b.size() ? b[b.size() - 1 - i] : 1;
    if (da != db && da != 1 && db != 1)
      throw ShapeError(std::string(who) + ": shapes " + shape_str(a) + " and " +
                       shape_str(b) + " are not broadcastable");
    out[r - 1 - i] = std::max(da, db);
  }
  return out;
}

}  // namespace

Tensor broadcast_to(const Tensor& x, const Shape& target) {
  if (x.shape() == target) return x;
  const Shape& s = x.shape();
  const size_t rt = target.size();
  if (s.size() > rt)
    throw ShapeError("broadcast: cannot broadcast " + shape_str(s) + " to " +
                     shape_str(target));
  // strides of x aligned to the target's trailing axes; 0 on expanded axes
  std::vector<long> xstride(rt, 0);
  long acc = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    const size_t si = s.size() - 1 - i;
    const size_t ti = rt - 1 - i;
    const int ds = s[si];
    const int dt = target[ti];
    if (ds != dt && ds != 1)
      throw ShapeError("broadcast: cannot broadcast " + shape_str(s) + " to " +
                       shape_str(target));
    xstride[ti] = (ds == 1) ? 0 : acc;
    acc *= ds;
  }
  auto out = make_node(Op::kBroadcast, target, {x.node()});
  const float* src = x.data().data();
  float* dst = out->value.data();
  const int n = out->numel();
  std::vector<double> wide;
  double* dst_hi = nullptr;
  if (g_precise) {
    wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(n));
    dst_hi = out->hi_value.data();
  }
  std::vector<int> idx(rt, 0);
  long off = 0;
  for (int flat = 0; flat < n; ++flat) {
    dst[flat] = src[off];
    if (dst_hi) dst_hi[flat] = wide[static_cast<size_t>(off)];
    for (size_t a = rt; a-- > 0;) {
      ++idx[a];
      off += xstride[a];
      if (idx[a] < target[a]) break;
      off -= static_cast<long>(idx[a]) * xstride[a];
      idx[a] = 0;
    }
  }
  finish_precise(out);
  return Tensor(out);
}

namespace {

// Accumulate grad of a broadcast output back onto the (smaller) input.
void broadcast_backward(const NodePtr& n) {
  const NodePtr& in = n->inputs[0];
  if (!in->requires_grad) return;
  ensure_grad(in);
  const Shape& s = in->shape;
  const Shape& target = n->shape;
  const size_t rt = target.size();
  std::vector<long> xstride(rt, 0);
  long acc = 1;
  for (size_t i = 0; i < s.size(); ++i) {
    const size_t si = s.size() - 1 - i;
    const size_t ti = rt - 1 - i;
    xstride[ti] = (s[si] == 1) ? 0 : acc;
    acc *= s[si];
  }
  const float* g = n->grad.data();
  float* gi = in->grad.data();
  const int total = n->numel();
  std::vector<int> idx(rt, 0);
  long off = 0;
  for (int flat = 0; flat < total; ++flat) {
    gi[off] += g[flat];
    for (size_t a = rt; a-- > 0;) {
      ++idx[a];
      off += xstride[a];
      if (idx[a] < target[a]) break;
      off -= static_cast<long>(idx[a]) * xstride[a];
      idx[a] = 0;
    }
  }
}

// ---------------------------------------------------------------------------
// Elementwise kernels

// F2 computes the float64 shadow; it sees both the float32 operands (for
// branch decisions, which must follow the float path) and the wide operands.
template <typename F, typename F2>
Tensor binary_op_mixed(Op op, const char* who, const Tensor& a0, const Tensor& b0,
                       F f, F2 f2) {
  Tensor a = a0, b = b0;
  if (a.shape() != b.shape()) {
    const Shape bs = broadcast_shape(who, a.shape(), b.shape());
    a = broadcast_to(a, bs);
    b = broadcast_to(b, bs);
  }
  auto out = make_node(op, a.shape(), {a.node(), b.node()});
  const float* pa = a.data().data();
  const float* pb = b.data().data();
  float* po = out->value.data();
  const int n = out->numel();
  for (int i = 0; i < n; ++i) po[i] = f(pa[i], pb[i]);
  if (g_precise) {
    const std::vector<double> wa = wide_values(a.node());
    const std::vector<double> wb = wide_values(b.node());
    out->hi_value.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      out->hi_value[static_cast<size_t>(i)] =
          f2(pa[i], pb[i], wa[static_cast<size_t>(i)], wb[static_cast<size_t>(i)]);
    finish_precise(out);
  }
  return Tensor(out);
}

template <typename F>
Tensor binary_op(Op op, const char* who, const Tensor& a0, const Tensor& b0, F f) {
  return binary_op_mixed(op, who, a0, b0, f,
                         [&f](float, float, double wa, double wb) { return f(wa, wb); });
}

template <typename F>
Tensor unary_op(Op op, const Tensor& x, F f) {
  auto out = make_node(op, x.shape(), {x.node()});
  const float* px = x.data().data();
  float* po = out->value.data();
  const int n = out->numel();
  for (int i = 0; i < n; ++i) po[i] = f(px[i]);
  if (g_precise) {
    const std::vector<double> wx = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
      out->hi_value[static_cast<size_t>(i)] = f(wx[static_cast<size_t>(i)]);
    finish_precise(out);
  }
  return Tensor(out);
}

double apply_scalar_hi(Op op, double a, double b) {
  switch (op) {
    case Op::kAdd: return a + b;
    case Op::kSub: return a - b;
    case Op::kMul: return a * b;
    case Op::kDiv: return a / b;
    case Op::kSafeDiv: return b == 0.0 ? 0.0 : a / b;
    case Op::kMaximum: return std::max(a, b);
    case Op::kNeg: return -a;
    case Op::kRelu: return a > 0 ? a : 0.0;
    case Op::kSigmoid: return a >= 0 ? 1.0 / (1.0 + std::exp(-a))
                                     : std::exp(a) / (1.0 + std::exp(a));
    case Op::kSoftplus: return std::max(a, 0.0) + std::log1p(std::exp(-std::fabs(a)));
    case Op::kExp: return std::exp(a);
    case Op::kLog: return std::log(a);
    case Op::kSqrt: return std::sqrt(a);
    case Op::kSquare: return a * a;
    case Op::kAbs: return std::fabs(a);
    case Op::kSin: return std::sin(a);
    case Op::kCos: return std::cos(a);
    default: return nan_d();
  }
}

// Keep the 64-bit shadow alive through scalar arithmetic so that loss values
// and the finite-difference checker see better than float32 resolution.
void propagate_hi(const NodePtr& out) {
  if (out->numel() != 1 || out->inputs.empty()) return;
  for (const auto& in : out->inputs)
    if (in->numel() != 1) return;
  const double a = hi_of(out->inputs[0]);
  const double b = out->inputs.size() > 1 ? hi_of(out->inputs[1]) : nan_d();
  const double h = apply_scalar_hi(out->op, a, b);
  if (!std::isnan(h)) out->hi = h;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  Tensor t = binary_op(Op::kAdd, "add", a, b, [](auto x, auto y) { return x + y; });
  propagate_hi(t.node());
  return t;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  Tensor t = binary_op(Op::kSub, "sub", a, b, [](auto x, auto y) { return x - y; });
  propagate_hi(t.node());
  return t;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  Tensor t = binary_op(Op::kMul, "mul", a, b, [](auto x, auto y) { return x * y; });
  propagate_hi(t.node());
  return t;
}

Tensor div(const Tensor& a, const Tensor& b) {
  Tensor t = binary_op(Op::kDiv, "div", a, b, [](auto x, auto y) { return x / y; });
  propagate_hi(t.node());
  return t;
}

Tensor safe_div(const Tensor& a, const Tensor& b) {
  Tensor t = binary_op_mixed(
      Op::kSafeDiv, "safe_div", a, b,
      [](float x, float y) { return y == 0.0f ? 0.0f : x / y; },
      [](float, float y, double wa, double wb) { return y == 0.0f ? 0.0 : wa / wb; });
  propagate_hi(t.node());
  return t;
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  Tensor t = binary_op_mixed(
      Op::kMaximum, "maximum", a, b,
      [](float x, float y) { return x >= y ? x : y; },
      [](float x, float y, double wa, double wb) { return x >= y ? wa : wb; });
  propagate_hi(t.node());
  return t;
}

Tensor neg(const Tensor& x) {
  Tensor t = unary_op(Op::kNeg, x, [](auto v) { return -v; });
  propagate_hi(t.node());
  return t;
}

Tensor relu(const Tensor& x) {
  Tensor t = unary_op(Op::kRelu, x, [](auto v) { return v > 0 ? v : decltype(v)(0); });
  // the float64 shadow must stay on the float path's linear piece
  if (!t.node()->hi_value.empty()) {
    const float* px = x.data().data();
    const std::vector<double> wx = wide_values(x.node());
    for (int i = 0; i < t.numel(); ++i)
      t.node()->hi_value[static_cast<size_t>(i)] =
          px[i] > 0.0f ? wx[static_cast<size_t>(i)] : 0.0;
  }
  propagate_hi(t.node());
  return t;
}

Tensor sigmoid(const Tensor& x) {
  Tensor t = unary_op(Op::kSigmoid, x, [](auto v) {
    using T = decltype(v);
    if (v >= T(0)) return T(1) / (T(1) + std::exp(-v));
    const T e = std::exp(v);
    return e / (T(1) + e);
  });
  propagate_hi(t.node());
  return t;
}

Tensor softplus(const Tensor& x) {
  Tensor t = unary_op(Op::kSoftplus, x, [](auto v) {
    using T = decltype(v);
    return std::max(v, T(0)) + std::log1p(std::exp(-std::fabs(v)));
  });
  propagate_hi(t.node());
  return t;
}

Tensor exp(const Tensor& x) {
  Tensor t = unary_op(Op::kExp, x, [](auto v) { return std::exp(v); });
  propagate_hi(t.node());
  return t;
}

Tensor log(const Tensor& x) {
  Tensor t = unary_op(Op::kLog, x, [](auto v) { return std::log(v); });
  propagate_hi(t.node());
  return t;
}

Tensor sqrt(const Tensor& x) {
  Tensor t = unary_op(Op::kSqrt, x, [](auto v) { return std::sqrt(v); });
  propagate_hi(t.node());
  return t;
}

Tensor square(const Tensor& x) {
  Tensor t = unary_op(Op::kSquare, x, [](auto v) { return v * v; });
  propagate_hi(t.node());
  return t;
}

Tensor abs(const Tensor& x) {
  Tensor t = unary_op(Op::kAbs, x, [](auto v) { return std::fabs(v); });
  if (!t.node()->hi_value.empty()) {
    const float* px = x.data().data();
    const std::vector<double> wx = wide_values(x.node());
    for (int i = 0; i < t.numel(); ++i)
      t.node()->hi_value[static_cast<size_t>(i)] =
          px[i] >= 0.0f ? wx[static_cast<size_t>(i)] : -wx[static_cast<size_t>(i)];
  }
  propagate_hi(t.node());
  return t;
}

Tensor sin(const Tensor& x) {
  return unary_op(Op::kSin, x, [](auto v) { return std::sin(v); });
}

Tensor cos(const Tensor& x) {
  return unary_op(Op::kCos, x, [](auto v) { return std::cos(v); });
}

Tensor operator+(const Tensor& a, float b) { return add(a, Tensor::scalar(b)); }
Tensor operator+(float a, const Tensor& b) { return add(Tensor::scalar(a), b); }
Tensor operator-(const Tensor& a, float b) { return sub(a, Tensor::scalar(b)); }
Tensor operator-(float a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
Tensor operator*(const Tensor& a, float b) { return mul(a, Tensor::scalar(b)); }
Tensor operator*(float a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
Tensor operator/(const Tensor& a, float b) { return div(a, Tensor::scalar(b)); }
Tensor operator/(float a, const Tensor& b) { return div(Tensor::scalar(a), b); }

// ---------------------------------------------------------------------------
// Matmul

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " and " + shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  auto out = make_node(Op::kMatmul, {m, n}, {a.node(), b.node()});
  cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0f,
              a.data().data(), k, b.data().data(), n, 0.0f, out->value.data(), n);
  if (g_precise) {
    const std::vector<double> wa = wide_values(a.node());
    const std::vector<double> wb = wide_values(b.node());
    out->hi_value.assign(static_cast<size_t>(out->numel()), 0.0);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, wa.data(),
                k, wb.data(), n, 0.0, out->hi_value.data(), n);
    finish_precise(out);
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& x) {
  auto out = make_node(Op::kSum, {1}, {x.node()});
  double acc = 0.0;
  if (g_precise) {
    for (double v : wide_values(x.node())) acc += v;
    out->hi_value = {acc};
  } else {
    for (float v : x.data()) acc += v;
  }
  out->value[0] = static_cast<float>(acc);
  out->hi = acc;
  return Tensor(out);
}

Tensor mean(const Tensor& x) {
  auto out = make_node(Op::kMean, {1}, {x.node()});
  double acc = 0.0;
  if (g_precise) {
    for (double v : wide_values(x.node())) acc += v;
  } else {
    for (float v : x.data()) acc += v;
  }
  acc /= std::max(1, x.numel());
  if (g_precise) out->hi_value = {acc};
  out->value[0] = static_cast<float>(acc);
  out->hi = acc;
  return Tensor(out);
}

namespace {

void axis_extents(const Shape& s, int axis, int* outer, int* red, int* inner) {
  *outer = 1;
  *inner = 1;
  for (int i = 0; i < axis; ++i) *outer *= s[static_cast<size_t>(i)];
  *red = s[static_cast<size_t>(axis)];
  for (size_t i = static_cast<size_t>(axis) + 1; i < s.size(); ++i) *inner *= s[i];
}

Tensor reduce_axis(Op op, const Tensor& x, int axis) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank())
    throw ShapeError(std::string(op_name(op)) + ": axis out of range for " +
                     shape_str(x.shape()));
  Shape os = x.shape();
  os[static_cast<size_t>(axis)] = 1;
  auto out = make_node(op, os, {x.node()});
  out->iattr = {axis};
  int outer, red, inner;
  axis_extents(x.shape(), axis, &outer, &red, &inner);
  const float* px = x.data().data();
  float* po = out->value.data();
  const double scale = op == Op::kMeanAxis ? 1.0 / red : 1.0;
  std::vector<double> wide;
  if (g_precise) {
    wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(out->numel()));
  }
  for (int o = 0; o < outer; ++o)
    for (int i = 0; i < inner; ++i) {
      double acc = 0.0;
      const float* base = px + static_cast<long>(o) * red * inner + i;
      for (int r = 0; r < red; ++r) acc += base[static_cast<long>(r) * inner];
      po[o * inner + i] = static_cast<float>(acc * scale);
      if (g_precise) {
        double acc_hi = 0.0;
        const double* base_hi = wide.data() + static_cast<long>(o) * red * inner + i;
        for (int r = 0; r < red; ++r) acc_hi += base_hi[static_cast<long>(r) * inner];
        out->hi_value[static_cast<size_t>(o * inner + i)] = acc_hi * scale;
      }
    }
  finish_precise(out);
  if (out->numel() == 1 && !g_precise) out->hi = static_cast<double>(po[0]);
  return Tensor(out);
}

}  // namespace

Tensor sum_axis(const Tensor& x, int axis) { return reduce_axis(Op::kSumAxis, x, axis); }
Tensor mean_axis(const Tensor& x, int axis) { return reduce_axis(Op::kMeanAxis, x, axis); }

Tensor max_last(const Tensor& x) {
  const int k = x.dim(x.rank() - 1);
  const int rows = x.numel() / k;
  Shape os = x.shape();
  os.back() = 1;
  auto out = make_node(Op::kMaxLast, os, {x.node()});
  out->indices.resize(static_cast<size_t>(rows));
  const float* px = x.data().data();
  float* po = out->value.data();
  for (int r = 0; r < rows; ++r) {
    const float* row = px + static_cast<long>(r) * k;
    int best = 0;
    for (int j = 1; j < k; ++j)
      if (row[j] > row[best]) best = j;
    po[r] = row[best];
    out->indices[static_cast<size_t>(r)] = best;
  }
  if (g_precise) {
    const std::vector<double> wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r)
      out->hi_value[static_cast<size_t>(r)] =
          wide[static_cast<size_t>(r) * k + out->indices[static_cast<size_t>(r)]];
    finish_precise(out);
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Fused row ops

Tensor softmax_last(const Tensor& x) {
  const int k = x.dim(x.rank() - 1);
  const int rows = x.numel() / k;
  auto out = make_node(Op::kSoftmaxLast, x.shape(), {x.node()});
  const float* px = x.data().data();
  float* po = out->value.data();
  for (int r = 0; r < rows; ++r) {
    const float* row = px + static_cast<long>(r) * k;
    float* orow = po + static_cast<long>(r) * k;
    float m = row[0];
    for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      orow[j] = std::exp(row[j] - m);
      s += orow[j];
    }
    const float inv = static_cast<float>(1.0 / s);
    for (int j = 0; j < k; ++j) orow[j] *= inv;
  }
  if (g_precise) {
    const std::vector<double> wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(out->numel()));
    for (int r = 0; r < rows; ++r) {
      const double* row = wide.data() + static_cast<long>(r) * k;
      double* orow = out->hi_value.data() + static_cast<long>(r) * k;
      double m = row[0];
      for (int j = 1; j < k; ++j) m = std::max(m, row[j]);
      double s = 0.0;
      for (int j = 0; j < k; ++j) {
        orow[j] = std::exp(row[j] - m);
        s += orow[j];
      }
      for (int j = 0; j < k; ++j) orow[j] /= s;
    }
  }
  return Tensor(out);
}

Tensor cumsum_exclusive_last(const Tensor& x) {
  const int k = x.dim(x.rank() - 1);
  const int rows = x.numel() / k;
  auto out = make_node(Op::kCumsumExclLast, x.shape(), {x.node()});
  const float* px = x.data().data();
  float* po = out->value.data();
  for (int r = 0; r < rows; ++r) {
    const float* row = px + static_cast<long>(r) * k;
    float* orow = po + static_cast<long>(r) * k;
    double acc = 0.0;
    for (int j = 0; j < k; ++j) {
      orow[j] = static_cast<float>(acc);
      acc += row[j];
    }
  }
  if (g_precise) {
    const std::vector<double> wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(out->numel()));
    for (int r = 0; r < rows; ++r) {
      const double* row = wide.data() + static_cast<long>(r) * k;
      double* orow = out->hi_value.data() + static_cast<long>(r) * k;
      double acc = 0.0;
      for (int j = 0; j < k; ++j) {
        orow[j] = acc;
        acc += row[j];
      }
    }
  }
  return Tensor(out);
}

Tensor l2norm_last(const Tensor& x) {
  const int k = x.dim(x.rank() - 1);
  const int rows = x.numel() / k;
  Shape os = x.shape();
  os.back() = 1;
  auto out = make_node(Op::kL2NormLast, os, {x.node()});
  const float* px = x.data().data();
  float* po = out->value.data();
  for (int r = 0; r < rows; ++r) {
    const float* row = px + static_cast<long>(r) * k;
    double acc = 0.0;
    for (int j = 0; j < k; ++j) acc += static_cast<double>(row[j]) * row[j];
    po[r] = static_cast<float>(std::sqrt(acc));
  }
  if (g_precise) {
    const std::vector<double> wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(rows));
    for (int r = 0; r < rows; ++r) {
      const double* row = wide.data() + static_cast<long>(r) * k;
      double acc = 0.0;
      for (int j = 0; j < k; ++j) acc += row[j] * row[j];
      out->hi_value[static_cast<size_t>(r)] = std::sqrt(acc);
    }
    finish_precise(out);
  }
  if (out->numel() == 1 && !g_precise) out->hi = static_cast<double>(po[0]);
  return Tensor(out);
}

Tensor posenc(const Tensor& x, int freqs, bool include_identity) {
  if (x.rank() != 2)
    throw ShapeError("posenc: expected a [M,C] tensor, got " + shape_str(x.shape()));
  const int m = x.dim(0), c = x.dim(1);
  const int block = (include_identity ? 1 : 0) + 2 * freqs;
  auto out = make_node(Op::kPosenc, {m, c * block}, {x.node()});
  out->iattr = {freqs, include_identity ? 1 : 0};
  const float* px = x.data().data();
  float* po = out->value.data();
  constexpr float kPi = 3.14159265358979323846f;
  for (int i = 0; i < m; ++i) {
    const float* row = px + static_cast<long>(i) * c;
    float* orow = po + static_cast<long>(i) * c * block;
    for (int j = 0; j < c; ++j) {
      float* blk = orow + static_cast<long>(j) * block;
      int w = 0;
      if (include_identity) blk[w++] = row[j];
      float freq = kPi;
      for (int f = 0; f < freqs; ++f) {
        blk[w++] = std::sin(freq * row[j]);
        blk[w++] = std::cos(freq * row[j]);
        freq *= 2.0f;
      }
    }
  }
  if (g_precise) {
    const std::vector<double> wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(out->numel()));
    constexpr double kPiD = 3.14159265358979323846;
    for (int i = 0; i < m; ++i) {
      const double* row = wide.data() + static_cast<long>(i) * c;
      double* orow = out->hi_value.data() + static_cast<long>(i) * c * block;
      for (int j = 0; j < c; ++j) {
        double* blk = orow + static_cast<long>(j) * block;
        int w = 0;
        if (include_identity) blk[w++] = row[j];
        double freq = kPiD;
        for (int f = 0; f < freqs; ++f) {
          blk[w++] = std::sin(freq * row[j]);
          blk[w++] = std::cos(freq * row[j]);
          freq *= 2.0;
        }
      }
    }
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Data movement

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw ShapeError("concat: no inputs");
  const int rank = xs[0].rank();
  if (axis < 0) axis += rank;
  Shape os = xs[0].shape();
  int total = 0;
  for (const Tensor& t : xs) {
    if (t.rank() != rank)
      throw ShapeError("concat: rank mismatch between " + shape_str(xs[0].shape()) +
                       " and " + shape_str(t.shape()));
    for (int i = 0; i < rank; ++i)
      if (i != axis && t.dim(i) != os[static_cast<size_t>(i)])
        throw ShapeError("concat: shapes " + shape_str(xs[0].shape()) + " and " +
                         shape_str(t.shape()) + " differ off-axis");
    total += t.dim(axis);
  }
  os[static_cast<size_t>(axis)] = total;
  std::vector<NodePtr> ins;
  ins.reserve(xs.size());
  for (const Tensor& t : xs) ins.push_back(t.node());
  auto out = make_node(Op::kConcat, os, std::move(ins));
  out->iattr = {axis};
  int outer, cat, inner;
  axis_extents(os, axis, &outer, &cat, &inner);
  float* po = out->value.data();
  long dst_off = 0;
  for (const Tensor& t : xs) {
    const int ka = t.dim(axis);
    const float* ps = t.data().data();
    for (int o = 0; o < outer; ++o)
      std::memcpy(po + (static_cast<long>(o) * cat + dst_off) * inner,
                  ps + static_cast<long>(o) * ka * inner,
                  static_cast<size_t>(ka) * inner * sizeof(float));
    dst_off += ka;
  }
  if (g_precise) {
    out->hi_value.resize(static_cast<size_t>(out->numel()));
    dst_off = 0;
    for (const Tensor& t : xs) {
      const int ka = t.dim(axis);
      const std::vector<double> wide = wide_values(t.node());
      for (int o = 0; o < outer; ++o)
        std::copy(wide.begin() + static_cast<long>(o) * ka * inner,
                  wide.begin() + static_cast<long>(o + 1) * ka * inner,
                  out->hi_value.begin() + (static_cast<long>(o) * cat + dst_off) * inner);
      dst_off += ka;
    }
    finish_precise(out);
  }
  return Tensor(out);
}

Tensor slice(const Tensor& x, int axis, int start, int len) {
  if (axis < 0) axis += x.rank();
  if (axis < 0 || axis >= x.rank() || start < 0 || len < 0 ||
      start + len > x.dim(axis))
    throw ShapeError("slice: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") on axis " +
                     std::to_string(axis) + " of " + shape_str(x.shape()));
  Shape os = x.shape();
  os[static_cast<size_t>(axis)] = len;
  auto out = make_node(Op::kSlice, os, {x.node()});
  out->iattr = {axis, start, len};
  int outer, full, inner;
  axis_extents(x.shape(), axis, &outer, &full, &inner);
  const float* px = x.data().data();
  float* po = out->value.data();
  for (int o = 0; o < outer; ++o)
    std::memcpy(po + static_cast<long>(o) * len * inner,
                px + (static_cast<long>(o) * full + start) * inner,
                static_cast<size_t>(len) * inner * sizeof(float));
  if (g_precise) {
    const std::vector<double> wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(out->numel()));
    for (int o = 0; o < outer; ++o)
      std::copy(wide.begin() + (static_cast<long>(o) * full + start) * inner,
                wide.begin() + (static_cast<long>(o) * full + start + len) * inner,
                out->hi_value.begin() + static_cast<long>(o) * len * inner);
    finish_precise(out);
  }
  return Tensor(out);
}

Tensor reshape(const Tensor& x, const Shape& target) {
  Shape t = target;
  int auto_axis = -1;
  int prod = 1;
  for (size_t i = 0; i < t.size(); ++i) {
    if (t[i] == -1) {
      auto_axis = static_cast<int>(i);
    } else {
      prod *= t[i];
    }
  }
  if (auto_axis >= 0) t[static_cast<size_t>(auto_axis)] = x.numel() / std::max(1, prod);
  if (numel_of(t) != x.numel())
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                     shape_str(target));
  auto out = make_node(Op::kReshape, t, {x.node()});
  out->value = x.data();
  if (g_precise) out->hi_value = wide_values(x.node());
  if (x.numel() == 1) out->hi = hi_of(x.node());
  return Tensor(out);
}

Tensor gather_samples(const Tensor& x, const std::vector<int>& idx, int k_out) {
  if (x.rank() != 2 && x.rank() != 3)
    throw ShapeError("gather_samples: expected [R,K] or [R,K,C], got " +
                     shape_str(x.shape()));
  const int r = x.dim(0), k = x.dim(1);
  const int inner = x.rank() == 3 ? x.dim(2) : 1;
  if (static_cast<int>(idx.size()) != r * k_out)
    throw ShapeError("gather_samples: index count " + std::to_string(idx.size()) +
                     " does not match " + std::to_string(r) + "x" +
                     std::to_string(k_out));
  Shape os = x.shape();
  os[1] = k_out;
  auto out = make_node(Op::kGatherSamples, os, {x.node()});
  out->iattr = {k, k_out, inner};
  out->indices = idx;
  const float* px = x.data().data();
  float* po = out->value.data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < k_out; ++j) {
      const int src = idx[static_cast<size_t>(i) * k_out + j];
      std::memcpy(po + (static_cast<long>(i) * k_out + j) * inner,
                  px + (static_cast<long>(i) * k + src) * inner,
                  static_cast<size_t>(inner) * sizeof(float));
    }
  if (g_precise) {
    const std::vector<double> wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(out->numel()));
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < k_out; ++j) {
        const int src = idx[static_cast<size_t>(i) * k_out + j];
        std::copy(wide.begin() + (static_cast<long>(i) * k + src) * inner,
                  wide.begin() + (static_cast<long>(i) * k + src + 1) * inner,
                  out->hi_value.begin() + (static_cast<long>(i) * k_out + j) * inner);
      }
    finish_precise(out);
  }
  return Tensor(out);
}

Tensor take_rows(const Tensor& x, const std::vector<int>& rows) {
  if (x.rank() != 2)
    throw ShapeError("take_rows: expected a [N,C] tensor, got " + shape_str(x.shape()));
  const int c = x.dim(1);
  auto out = make_node(Op::kTakeRows, {static_cast<int>(rows.size()), c}, {x.node()});
  out->indices = rows;
  const float* px = x.data().data();
  float* po = out->value.data();
  for (size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= x.dim(0))
      throw ShapeError("take_rows: row " + std::to_string(rows[i]) +
                       " out of range for " + shape_str(x.shape()));
    std::memcpy(po + i * static_cast<size_t>(c),
                px + static_cast<size_t>(rows[i]) * c,
                static_cast<size_t>(c) * sizeof(float));
  }
  if (g_precise) {
    const std::vector<double> wide = wide_values(x.node());
    out->hi_value.resize(static_cast<size_t>(out->numel()));
    for (size_t i = 0; i < rows.size(); ++i)
      std::copy(wide.begin() + static_cast<size_t>(rows[i]) * c,
                wide.begin() + static_cast<size_t>(rows[i] + 1) * c,
                out->hi_value.begin() + i * static_cast<size_t>(c));
    finish_precise(out);
  }
  return Tensor(out);
}

// ---------------------------------------------------------------------------
// Backward

namespace {

void backward_dispatch(const NodePtr& n) {
  const float* g = n->grad.data();
  const int total = n->numel();
  auto want = [](const NodePtr& in) { return in->requires_grad; };

  switch (n->op) {
    case Op::kLeaf:
      return;
    case Op::kBroadcast:
      broadcast_backward(n);
      return;
    case Op::kAdd: {
      for (int s = 0; s < 2; ++s) {
        const NodePtr& in = n->inputs[static_cast<size_t>(s)];
        if (!want(in)) continue;
        ensure_grad(in);
        for (int i = 0; i < total; ++i) in->grad[static_cast<size_t>(i)] += g[i];
      }
      return;
    }
    case Op::kSub: {
      const NodePtr& a = n->inputs[0];
      const NodePtr& b = n->inputs[1];
      if (want(a)) {
        ensure_grad(a);
        for (int i = 0; i < total; ++i) a->grad[static_cast<size_t>(i)] += g[i];
      }
      if (want(b)) {
        ensure_grad(b);
        for (int i = 0; i < total; ++i) b->grad[static_cast<size_t>(i)] -= g[i];
      }
      return;
    }
    case Op::kMul: {
      const NodePtr& a = n->inputs[0];
      const NodePtr& b = n->inputs[1];
      if (want(a)) {
        ensure_grad(a);
        const float* pb = b->value.data();
        for (int i = 0; i < total; ++i) a->grad[static_cast<size_t>(i)] += g[i] * pb[i];
      }
      if (want(b)) {
        ensure_grad(b);
        const float* pa = a->value.data();
        for (int i = 0; i < total; ++i) b->grad[static_cast<size_t>(i)] += g[i] * pa[i];
      }
      return;
    }
    case Op::kDiv: {
      const NodePtr& a = n->inputs[0];
      const NodePtr& b = n->inputs[1];
      const float* pa = a->value.data();
      const float* pb = b->value.data();
      if (want(a)) {
        ensure_grad(a);
        for (int i = 0; i < total; ++i) a->grad[static_cast<size_t>(i)] += g[i] / pb[i];
      }
      if (want(b)) {
        ensure_grad(b);
        for (int i = 0; i < total; ++i)
          b->grad[static_cast<size_t>(i)] -= g[i] * pa[i] / (pb[i] * pb[i]);
      }
      return;
    }
    case Op::kSafeDiv: {
      const NodePtr& a = n->inputs[0];
      const NodePtr& b = n->inputs[1];
      const float* pa = a->value.data();
      const float* pb = b->value.data();
      if (want(a)) {
        ensure_grad(a);
        for (int i = 0; i < total; ++i)
          if (pb[i] != 0.0f) a->grad[static_cast<size_t>(i)] += g[i] / pb[i];
      }
      if (want(b)) {
        ensure_grad(b);
        for (int i = 0; i < total; ++i)
          if (pb[i] != 0.0f)
            b->grad[static_cast<size_t>(i)] -= g[i] * pa[i] / (pb[i] * pb[i]);
      }
      return;
    }
    case Op::kMaximum: {
      const NodePtr& a = n->inputs[0];
      const NodePtr& b = n->inputs[1];
      const float* pa = a->value.data();
      const float* pb = b->value.data();
      if (want(a)) {
        ensure_grad(a);
        for (int i = 0; i < total; ++i)
          if (pa[i] >= pb[i]) a->grad[static_cast<size_t>(i)] += g[i];
      }
      if (want(b)) {
        ensure_grad(b);
        for (int i = 0; i < total; ++i)
          if (pb[i] > pa[i]) b->grad[static_cast<size_t>(i)] += g[i];
      }
      return;
    }
    case Op::kMatmul: {
      const NodePtr& a = n->inputs[0];
      const NodePtr& b = n->inputs[1];
      const int m = a->shape[0], k = a->shape[1], nn = b->shape[1];
      if (want(a)) {
        ensure_grad(a);
        // dA += g * B^T
        cblas_sgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, nn, 1.0f, g, nn,
                    b->value.data(), nn, 1.0f, a->grad.data(), k);
      }
      if (want(b)) {
        ensure_grad(b);
        // dB += A^T * g
        cblas_sgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, nn, m, 1.0f,
                    a->value.data(), k, g, nn, 1.0f, b->grad.data(), nn);
      }
      return;
    }
    case Op::kNeg: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      for (int i = 0; i < total; ++i) a->grad[static_cast<size_t>(i)] -= g[i];
      return;
    }
    case Op::kRelu: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* pa = a->value.data();
      for (int i = 0; i < total; ++i)
        if (pa[i] > 0.0f) a->grad[static_cast<size_t>(i)] += g[i];
      return;
    }
    case Op::kSigmoid: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* y = n->value.data();
      for (int i = 0; i < total; ++i)
        a->grad[static_cast<size_t>(i)] += g[i] * y[i] * (1.0f - y[i]);
      return;
    }
    case Op::kSoftplus: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* pa = a->value.data();
      for (int i = 0; i < total; ++i) {
        const float v = pa[i];
        const float s = v >= 0.0f ? 1.0f / (1.0f + std::exp(-v))
                                  : std::exp(v) / (1.0f + std::exp(v));
        a->grad[static_cast<size_t>(i)] += g[i] * s;
      }
      return;
    }
    case Op::kExp: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* y = n->value.data();
      for (int i = 0; i < total; ++i) a->grad[static_cast<size_t>(i)] += g[i] * y[i];
      return;
    }
    case Op::kLog: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* pa = a->value.data();
      for (int i = 0; i < total; ++i) a->grad[static_cast<size_t>(i)] += g[i] / pa[i];
      return;
    }
    case Op::kSqrt: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* y = n->value.data();
      for (int i = 0; i < total; ++i)
        a->grad[static_cast<size_t>(i)] += g[i] * 0.5f / y[i];
      return;
    }
    case Op::kSquare: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* pa = a->value.data();
      for (int i = 0; i < total; ++i)
        a->grad[static_cast<size_t>(i)] += g[i] * 2.0f * pa[i];
      return;
    }
    case Op::kAbs: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* pa = a->value.data();
      for (int i = 0; i < total; ++i) {
        if (pa[i] > 0.0f)
          a->grad[static_cast<size_t>(i)] += g[i];
        else if (pa[i] < 0.0f)
          a->grad[static_cast<size_t>(i)] -= g[i];
      }
      return;
    }
    case Op::kSin: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* pa = a->value.data();
      for (int i = 0; i < total; ++i)
        a->grad[static_cast<size_t>(i)] += g[i] * std::cos(pa[i]);
      return;
    }
    case Op::kCos: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float* pa = a->value.data();
      for (int i = 0; i < total; ++i)
        a->grad[static_cast<size_t>(i)] -= g[i] * std::sin(pa[i]);
      return;
    }
    case Op::kSum: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const float gv = g[0];
      const int an = a->numel();
      for (int i = 0; i < an; ++i) a->grad[static_cast<size_t>(i)] += gv;
      return;
    }
    case Op::kMean: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int an = a->numel();
      const float gv = g[0] / static_cast<float>(std::max(1, an));
      for (int i = 0; i < an; ++i) a->grad[static_cast<size_t>(i)] += gv;
      return;
    }
    case Op::kSumAxis:
    case Op::kMeanAxis: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int axis = n->iattr[0];
      int outer, red, inner;
      axis_extents(a->shape, axis, &outer, &red, &inner);
      const float scale = n->op == Op::kMeanAxis ? 1.0f / static_cast<float>(red) : 1.0f;
      for (int o = 0; o < outer; ++o)
        for (int r = 0; r < red; ++r)
          for (int i = 0; i < inner; ++i)
            a->grad[static_cast<size_t>((static_cast<long>(o) * red + r) * inner + i)] +=
                g[o * inner + i] * scale;
      return;
    }
    case Op::kMaxLast: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int k = a->shape.back();
      const int rows = a->numel() / k;
      for (int r = 0; r < rows; ++r)
        a->grad[static_cast<size_t>(r) * k + n->indices[static_cast<size_t>(r)]] += g[r];
      return;
    }
    case Op::kSoftmaxLast: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int k = a->shape.back();
      const int rows = a->numel() / k;
      const float* y = n->value.data();
      for (int r = 0; r < rows; ++r) {
        const float* yr = y + static_cast<long>(r) * k;
        const float* gr = g + static_cast<long>(r) * k;
        double dot = 0.0;
        for (int j = 0; j < k; ++j) dot += static_cast<double>(gr[j]) * yr[j];
        float* ga = a->grad.data() + static_cast<long>(r) * k;
        for (int j = 0; j < k; ++j)
          ga[j] += yr[j] * (gr[j] - static_cast<float>(dot));
      }
      return;
    }
    case Op::kCumsumExclLast: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int k = a->shape.back();
      const int rows = a->numel() / k;
      for (int r = 0; r < rows; ++r) {
        const float* gr = g + static_cast<long>(r) * k;
        float* ga = a->grad.data() + static_cast<long>(r) * k;
        double acc = 0.0;
        for (int j = k - 1; j >= 0; --j) {
          ga[j] += static_cast<float>(acc);
          acc += gr[j];
        }
      }
      return;
    }
    case Op::kL2NormLast: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int k = a->shape.back();
      const int rows = a->numel() / k;
      const float* pa = a->value.data();
      const float* y = n->value.data();
      for (int r = 0; r < rows; ++r) {
        const float denom = std::max(y[r], 1e-12f);
        const float gr = g[r] / denom;
        float* ga = a->grad.data() + static_cast<long>(r) * k;
        const float* ar = pa + static_cast<long>(r) * k;
        if (y[r] == 0.0f) continue;  // subgradient 0 at the origin
        for (int j = 0; j < k; ++j) ga[j] += gr * ar[j];
      }
      return;
    }
    case Op::kPosenc: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int freqs = n->iattr[0];
      const bool id = n->iattr[1] != 0;
      const int c = a->shape[1];
      const int m = a->shape[0];
      const int block = (id ? 1 : 0) + 2 * freqs;
      const float* y = n->value.data();
      constexpr float kPi = 3.14159265358979323846f;
      for (int i = 0; i < m; ++i) {
        float* ga = a->grad.data() + static_cast<long>(i) * c;
        for (int j = 0; j < c; ++j) {
          const long base = (static_cast<long>(i) * c + j) * block;
          const float* gb = g + base;
          const float* yb = y + base;
          double acc = 0.0;
          int w = 0;
          if (id) acc += gb[w++];
          float freq = kPi;
          for (int f = 0; f < freqs; ++f) {
            // d/dx sin(wx) = w cos(wx); cos(wx) is the adjacent output value.
            acc += static_cast<double>(freq) * gb[w] * yb[w + 1];
            acc -= static_cast<double>(freq) * gb[w + 1] * yb[w];
            w += 2;
            freq *= 2.0f;
          }
          ga[j] += static_cast<float>(acc);
        }
      }
      return;
    }
    case Op::kConcat: {
      const int axis = n->iattr[0];
      int outer, cat, inner;
      axis_extents(n->shape, axis, &outer, &cat, &inner);
      long src_off = 0;
      for (const NodePtr& in : n->inputs) {
        const int ka = in->shape[static_cast<size_t>(axis)];
        if (want(in)) {
          ensure_grad(in);
          for (int o = 0; o < outer; ++o) {
            const float* gs = g + (static_cast<long>(o) * cat + src_off) * inner;
            float* gd = in->grad.data() + static_cast<long>(o) * ka * inner;
            for (long i = 0; i < static_cast<long>(ka) * inner; ++i) gd[i] += gs[i];
          }
        }
        src_off += ka;
      }
      return;
    }
    case Op::kSlice: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int axis = n->iattr[0], start = n->iattr[1], len = n->iattr[2];
      int outer, full, inner;
      axis_extents(a->shape, axis, &outer, &full, &inner);
      for (int o = 0; o < outer; ++o) {
        const float* gs = g + static_cast<long>(o) * len * inner;
        float* gd = a->grad.data() + (static_cast<long>(o) * full + start) * inner;
        for (long i = 0; i < static_cast<long>(len) * inner; ++i) gd[i] += gs[i];
      }
      return;
    }
    case Op::kReshape: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      for (int i = 0; i < total; ++i) a->grad[static_cast<size_t>(i)] += g[i];
      return;
    }
    case Op::kGatherSamples: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int k = n->iattr[0], k_out = n->iattr[1], inner = n->iattr[2];
      const int r = n->shape[0];
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < k_out; ++j) {
          const int src = n->indices[static_cast<size_t>(i) * k_out + j];
          const float* gs = g + (static_cast<long>(i) * k_out + j) * inner;
          float* gd = a->grad.data() + (static_cast<long>(i) * k + src) * inner;
          for (int q = 0; q < inner; ++q) gd[q] += gs[q];
        }
      return;
    }
    case Op::kTakeRows: {
      const NodePtr& a = n->inputs[0];
      if (!want(a)) return;
      ensure_grad(a);
      const int c = a->shape[1];
      for (size_t i = 0; i < n->indices.size(); ++i) {
        const float* gs = g + i * static_cast<size_t>(c);
        float* gd = a->grad.data() + static_cast<size_t>(n->indices[i]) * c;
        for (int q = 0; q < c; ++q) gd[q] += gs[q];
      }
      return;
    }
  }
}

}  // namespace

void backward(const Tensor& root) {
  if (root.numel() != 1)
    throw NumericError("backward: root must be scalar, got shape " +
                       shape_str(root.shape()));
  if (!root.requires_grad())
    throw NumericError("backward: root is detached from the tape");

  // Iterative post-order DFS: children (inputs) before parents.
  std::vector<NodePtr> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<NodePtr, size_t>> stack;
  stack.emplace_back(root.node(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      NodePtr child = node->inputs[next++];
      if (child->requires_grad && !visited.count(child.get())) {
        visited.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (const NodePtr& n : order) n->grad.clear();
  ensure_grad(root.node());
  root.node()->grad[0] = 1.0f;

  for (size_t i = order.size(); i-- > 0;) {
    const NodePtr& n = order[i];
    backward_dispatch(n);
    if (n->op != Op::kLeaf) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

double finite_diff_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double step) {
  // drop any gradients left over from earlier sweeps; backward only clears
  // what the current root reaches
  for (const Tensor& p : params) p.node()->grad.clear();
  Tensor base = f();
  backward(base);
  std::vector<std::vector<float>> analytic;
  analytic.reserve(params.size());
  for (const Tensor& p : params) {
    if (p.grad().empty())
      analytic.emplace_back(static_cast<size_t>(p.numel()), 0.0f);
    else
      analytic.push_back(p.grad());
  }

  double worst = 0.0;
  NoGradGuard ng;
  PreciseGuard precise;
  for (size_t pi = 0; pi < params.size(); ++pi) {
    std::vector<float>& data = const_cast<Tensor&>(params[pi]).mutable_data();
    for (size_t i = 0; i < data.size(); ++i) {
      const float saved = data[i];
      data[i] = static_cast<float>(static_cast<double>(saved) + step);
      const double up = f().item_hi();
      const double step_up = static_cast<double>(data[i]) - saved;
      data[i] = static_cast<float>(static_cast<double>(saved) - step);
      const double down = f().item_hi();
      const double step_down = static_cast<double>(saved) - data[i];
      data[i] = saved;
      // use the realized float32 steps, not the nominal one
      const double fd = (up - down) / (step_up + step_down);
      const double err =
          std::fabs(static_cast<double>(analytic[pi][i]) - fd) / (std::fabs(fd) + 1e-8);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

}  // namespace flownerf
