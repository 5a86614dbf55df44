#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/StdVector>

#include "ise3/so3.hpp"

namespace ise3::diff {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

/// Dense row-major 64-bit tensor. Ranks 0..2 also expose a matrix view:
/// rank 0 is 1x1, rank 1 is 1xn. Storage is aligned to Eigen's widest packet so
/// vectorized reductions split the same way on every run.
class Tensor {
 public:
  using Shape = std::vector<std::size_t>;

  Tensor() : values_(1, 0.0) {}
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double v) { return Tensor(Shape{}, std::vector<double>{v}); }
  static Tensor matrix(std::size_t rows, std::size_t cols, double fill = 0.0) {
    return Tensor(Shape{rows, cols}, fill);
  }
  static Tensor from_matrix(const Eigen::Ref<const RowMatrix>& m);

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }
  std::span<double> values() { return values_; }
  std::span<const double> values() const { return values_; }
  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }
  double& at(std::size_t r, std::size_t c) { return values_[r * cols() + c]; }
  double at(std::size_t r, std::size_t c) const { return values_[r * cols() + c]; }
  double item() const;

  MatrixMap mat() { return MatrixMap(values_.data(), rows(), cols()); }
  ConstMatrixMap mat() const { return ConstMatrixMap(values_.data(), rows(), cols()); }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  bool all_finite() const;
  void fill(double v);
  std::string shape_string() const;

  bool operator==(const Tensor& other) const { return shape_ == other.shape_ && values_ == other.values_; }

 private:
  Shape shape_;
  std::vector<double, Eigen::aligned_allocator<double>> values_;
};

using NodeId = std::uint32_t;
class Tape;

/// Handle to a recorded value on a Tape.
class Var {
 public:
  Var() = default;
  Var(Tape* tape, NodeId id) : tape_(tape), id_(id) {}

  const Tensor& value() const;
  NodeId id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  NodeId id_ = 0;
};

/// Parent gradient buffers handed to a backward rule. Entry k is null when
/// parent k does not need a gradient; otherwise it is zero-initialized on
/// first access and rules accumulate into it.
class GradSink {
 public:
  Tensor* operator[](std::size_t k);

 private:
  friend class Tape;
  GradSink(const Tape& tape, std::span<const NodeId> parents, std::vector<std::optional<Tensor>>& grads)
      : tape_(tape), parents_(parents), grads_(grads) {}
  const Tape& tape_;
  std::span<const NodeId> parents_;
  std::vector<std::optional<Tensor>>& grads_;
};

using BackwardFn = std::function<void(const Tensor& grad_out, GradSink& parents)>;

/// Result of Tape::backward: one buffer per node reachable from the root.
class Gradients {
 public:
  /// Null when `v` is unreachable from the root or does not require grad.
  const Tensor* find(const Var& v) const;
  /// Gradient of `v`, zeros when unreachable.
  Tensor of(const Var& v) const;

 private:
  friend class Tape;
  std::vector<std::optional<Tensor>> grads_;
};

/// Append-only record of differentiable operations. Owned by one thread.
class Tape {
 public:
  /// In checked mode every recorded value is scanned for NaN/Inf.
  explicit Tape(bool checked = false) : checked_(checked) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Tensor value);
  /// Leaf that receives a gradient (parameters, differentiable inputs).
  Var leaf(Tensor value);
  /// Records an operation. The node requires grad iff some parent does; `fn`
  /// is dropped otherwise.
  Var record(const char* op, Tensor value, std::initializer_list<Var> parents, BackwardFn fn);
  Var record(const char* op, Tensor value, std::span<const Var> parents, BackwardFn fn);

  Gradients backward(const Var& root) const;

  bool checked() const { return checked_; }
  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(NodeId id) const { return nodes_[id].value; }
  bool requires_grad(NodeId id) const { return nodes_[id].requires_grad; }
  const char* op(NodeId id) const { return nodes_[id].op; }
  std::span<const NodeId> parents(NodeId id) const { return nodes_[id].parents; }

  /// Degenerate relative positions clamped by sph_basis.
  std::size_t clamp_events() const { return clamp_events_; }
  void note_clamp() { ++clamp_events_; }

 private:
  struct Node {
    const char* op;
    Tensor value;
    std::vector<NodeId> parents;
    BackwardFn backward;
    bool requires_grad;
  };
  Var push(const char* op, Tensor value, std::vector<NodeId> parents, BackwardFn fn, bool requires_grad);

  std::deque<Node> nodes_;
  bool checked_;
  std::size_t clamp_events_ = 0;
};

// Primitives. Binary elementwise ops accept `b` with the shape of `a`, a
// single element, a 1 x cols row or a rows x 1 column (rank-2 `a`).
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var shift(const Var& a, double c);
Var matmul(const Var& a, const Var& b);
/// x * w + b with `b` a row of w.cols() entries added to every row.
Var affine(const Var& x, const Var& w, const Var& b);
/// Rank-2 concatenation along axis 0 (rows) or 1 (columns).
Var concat(std::span<const Var> parts, int axis);
Var concat(std::initializer_list<Var> parts, int axis);
/// Rank-2 half-open range [begin, end) along `axis`.
Var slice(const Var& a, int axis, std::size_t begin, std::size_t end);
Var sum(const Var& a);
/// Rank-2 reduction; keeps the reduced axis with extent 1.
Var sum(const Var& a, int axis);
Var power(const Var& a, double p);
/// sqrt(sum_k x_k^2 + eps) over the last axis: rank 2 -> rows x 1, rank 1 -> scalar.
Var sqrt_norm(const Var& a, double eps);
Var exp(const Var& a);
/// Rank-2 softmax along `axis`, max-subtracted.
Var softmax(const Var& a, int axis);
Var relu(const Var& a);
/// Stacks equal-shaped tensors along a new leading axis.
Var stack(std::span<const Var> parts);
Var stack(std::initializer_list<Var> parts);
/// Identity forward, no gradient to `a`.
Var stop_gradient(const Var& a);
/// Rows x[first[k]] - x[second[k]] of a rank-2 tensor.
Var gather_diff(const Var& x, std::span<const std::size_t> first, std::span<const std::size_t> second);
/// Equivariant basis of every row of `rel` (E x 3) -> E x layout.size(). The
/// backward pass uses the analytic harmonic gradients. Rows shorter than
/// so3::kMinRadius are clamped and counted on the tape.
Var sph_basis(const Var& rel, const so3::BasisLayout& layout);

/// Central finite-difference check of a scalar function of several tensors.
struct GradCheckReport {
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  std::size_t entries = 0;
};
using ScalarFn = std::function<Var(Tape&, std::span<const Var>)>;
/// Relative error per entry is |analytic - numeric| / max(|analytic|, |numeric|, floor);
/// the floor keeps near-zero entries from being judged on truncation noise.
GradCheckReport gradient_check(const ScalarFn& f, const std::vector<Tensor>& inputs, double h = 1e-5,
                               double floor = 1e-4);

}  // namespace ise3::diff
