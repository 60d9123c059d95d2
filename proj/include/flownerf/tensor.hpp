// Copyright Contributors to the flownerf Project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <string>
#include <vector>

namespace flownerf {

using Shape = std::vector<int>;

int numel_of(const Shape& s);
std::string shape_str(const Shape& s);

/// Operation kinds recorded on the tape. Every differentiable kind is covered
/// by a randomized finite-difference property test.
enum class Op : std::uint8_t {
  kLeaf,
  // binary elementwise
  kAdd, kSub, kMul, kDiv, kSafeDiv, kMaximum,
  kMatmul,
  // unary elementwise
  kNeg, kRelu, kSigmoid, kSoftplus, kExp, kLog, kSqrt, kSquare, kAbs, kSin, kCos,
  // reductions
  kSum, kSumAxis, kMean, kMeanAxis, kMaxLast,
  // fused rows
  kSoftmaxLast, kCumsumExclLast, kL2NormLast, kPosenc,
  // data movement
  kConcat, kSlice, kBroadcast, kReshape, kGatherSamples, kTakeRows,
};

const char* op_name(Op op);

/// One recorded node: forward value plus everything backward needs.
struct Node {
  Op op = Op::kLeaf;
  Shape shape;
  std::vector<float> value;
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<int> iattr;    // op parameters: axis, slice bounds, target shape, ...
  std::vector<int> indices;  // gather/argmax indices
  std::vector<float> grad;   // allocated during backward
  double hi = std::numeric_limits<double>::quiet_NaN();  // 64-bit shadow for scalars
  std::vector<double> hi_value;  // full 64-bit shadow, precise mode only
  bool requires_grad = false;
  std::string name;  // non-empty for named parameters

  int numel() const { return numel_of(shape); }
};

using NodePtr = std::shared_ptr<Node>;

/// Dense float32 array with an implicit define-by-run tape. Copies share the
/// underlying node; the tape is the DAG of `inputs` references and is rebuilt
/// from scratch on every forward pass.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : n_(std::move(n)) {}

  static Tensor zeros(const Shape& s);
  static Tensor full(const Shape& s, float v);
  static Tensor from(const Shape& s, std::vector<float> data);
  static Tensor scalar(float v);
  /// Trainable leaf. Named parameters are what backward() reports gradients for.
  static Tensor param(const Shape& s, std::vector<float> data, std::string name);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const { return n_->shape; }
  int rank() const { return static_cast<int>(n_->shape.size()); }
  int dim(int i) const { return n_->shape[static_cast<size_t>(i)]; }
  int numel() const { return n_->numel(); }

  const std::vector<float>& data() const { return n_->value; }
  std::vector<float>& mutable_data() { return n_->value; }
  float item() const;
  /// 64-bit value for scalars produced by reductions; falls back to the
  /// float32 value when no higher-precision shadow was recorded.
  double item_hi() const;

  bool requires_grad() const { return n_->requires_grad; }
  const std::vector<float>& grad() const { return n_->grad; }
  const std::string& name() const { return n_->name; }
  NodePtr node() const { return n_; }

 private:
  NodePtr n_;
};

bool grad_enabled();

/// Disables tape recording in scope; forward values are still computed.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Runs a full float64 shadow alongside the float32 forward. The finite
/// difference oracle uses it so its resolution is not bounded by float32
/// output quantization; ordinary training never turns it on.
struct PreciseGuard {
  PreciseGuard();
  ~PreciseGuard();
  PreciseGuard(const PreciseGuard&) = delete;
  PreciseGuard& operator=(const PreciseGuard&) = delete;

 private:
  bool prev_;
};

// ---- elementwise (shapes broadcast under numpy trailing-alignment rules) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
/// a/b with the convention x/0 == 0 (gradients are also zero there).
Tensor safe_div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sin(const Tensor& x);
Tensor cos(const Tensor& x);

// ---- matmul: [M,K] x [K,N] -> [M,N] ----
Tensor matmul(const Tensor& a, const Tensor& b);

// ---- reductions (axis variants keep the reduced axis as size 1) ----
Tensor sum(const Tensor& x);
Tensor sum_axis(const Tensor& x, int axis);
Tensor mean(const Tensor& x);
Tensor mean_axis(const Tensor& x, int axis);
Tensor max_last(const Tensor& x);

// ---- fused row ops over the last axis ----
Tensor softmax_last(const Tensor& x);
/// y_k = sum_{j<k} x_j per row.
Tensor cumsum_exclusive_last(const Tensor& x);
/// Euclidean norm over the last axis, kept as size 1. Gradient is 0 at the
/// origin.
Tensor l2norm_last(const Tensor& x);
/// Sinusoidal positional encoding of [M,C]: per component, optional identity
/// followed by (sin(2^k pi x), cos(2^k pi x)) for k = 0..freqs-1.
Tensor posenc(const Tensor& x, int freqs, bool include_identity);

// ---- data movement ----
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor slice(const Tensor& x, int axis, int start, int len);
Tensor broadcast_to(const Tensor& x, const Shape& target);
Tensor reshape(const Tensor& x, const Shape& target);
/// Per-row reindex of axis 1: x is [R,K] or [R,K,C]; idx has R*k_out entries
/// in [0,K). Used to merge coarse and fine samples in depth order.
Tensor gather_samples(const Tensor& x, const std::vector<int>& idx, int k_out);
/// Row lookup into a [N,C] table (per-frame embeddings).
Tensor take_rows(const Tensor& x, const std::vector<int>& rows);

// ---- convenience operators ----
inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
Tensor operator+(const Tensor& a, float b);
Tensor operator+(float a, const Tensor& b);
Tensor operator-(const Tensor& a, float b);
Tensor operator-(float a, const Tensor& b);
Tensor operator*(const Tensor& a, float b);
Tensor operator*(float a, const Tensor& b);
Tensor operator/(const Tensor& a, float b);
Tensor operator/(float a, const Tensor& b);

/// Reverse-mode sweep from a scalar root. Gradients of all reachable
/// grad-requiring leaves are left in their `grad` buffers; every node is
/// visited exactly once in reverse topological order.
void backward(const Tensor& root);

/// Max over all parameter elements of
/// |analytic - central_difference| / (|central_difference| + 1e-8),
/// with the differences accumulated in 64-bit. `f` must be deterministic.
double finite_diff_check(const std::function<Tensor()>& f,
                         const std::vector<Tensor>& params, double step);

/// Thread budget for BLAS kernels. Fixed per process for reproducibility.
void set_compute_threads(int n);
int compute_threads();

}  // namespace flownerf
