#pragma once

// Dense tensors with reverse-mode differentiation.
//
// A Tensor is a shared handle onto a graph node. Operations on tensors that
// require gradients record a backward rule; backward() walks the recorded
// graph once in reverse topological order. Tensors that do not require
// gradients carry no graph, so inference pays only for the arithmetic.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "osfa/rng.hpp"

namespace osfa {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

/// Shape or broadcast mismatch between operands.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// NaN or Inf produced by a forward pass.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Misuse of the differentiation graph (detached loss, non-scalar loss).
class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;
  bool leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad and accumulates into inputs' grad buffers.
  std::function<void(Node&)> backward;
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  /// Rank-0 zero.
  Tensor();
  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value);
  /// Trainable leaf.
  static Tensor parameter(Shape shape, std::vector<T> values);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> data() const { return node_->value; }
  /// Writable view; only legal on leaves (parameter updates, fills).
  std::span<T> mutable_data();
  T item() const;
  T operator[](std::size_t flat) const { return node_->value[flat]; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->leaf; }
  const char* op_name() const { return node_->op; }

  /// Same values, no graph.
  Tensor detach() const;
  /// Deep copy of values into a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  /// Stable identity of the underlying node, used as a gradient-map key.
  const Node<T>* id() const { return node_.get(); }

  std::shared_ptr<Node<T>> node() const { return node_; }
  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Gradients of trainable leaves produced by backward().
template <typename T>
class GradMap {
 public:
  /// nullptr when the leaf was not reached by the loss.
  const Tensor<T>* find(const Tensor<T>& leaf) const;
  const Tensor<T>& at(const Tensor<T>& leaf) const;
  bool contains(const Tensor<T>& leaf) const { return find(leaf) != nullptr; }
  std::size_t size() const { return grads_.size(); }

  void insert(const Node<T>* key, Tensor<T> grad) { grads_.insert_or_assign(key, std::move(grad)); }

 private:
  std::unordered_map<const Node<T>*, Tensor<T>> grads_;
};

template <typename T>
GradMap<T> backward(const Tensor<T>& loss);

/// While alive, operations on this thread record no graph (inference).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// ---------------------------------------------------------------------------
// Elementwise

enum class ElementwiseOp { Add, Sub, Mul, Relu, Exp, Neg };

/// Binary ops require equal shapes; `b` may be rank-0 to broadcast a scalar.
/// Unary ops ignore `b`.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> relu(const Tensor<T>& a);
template <typename T> Tensor<T> exp(const Tensor<T>& a);
template <typename T> Tensor<T> neg(const Tensor<T>& a);
template <typename T> Tensor<T> abs(const Tensor<T>& a);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& a);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// Explicit broadcast: dimension d of `a` maps to axis `axes[d]` of `shape`;
/// every other axis of `shape` is a repeat. Backward sums over repeats.
template <typename T>
Tensor<T> expand(const Tensor<T>& a, Shape shape, std::vector<std::size_t> axes);

/// Concatenate along `axis`; other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis);

/// [M,N] -> [N,M]
template <typename T>
Tensor<T> transpose(const Tensor<T>& a);

/// Select `indices` along `axis`.
template <typename T>
Tensor<T> take(const Tensor<T>& a, std::size_t axis, std::span<const std::size_t> indices);

// ---------------------------------------------------------------------------
// Reductions

enum class ReduceOp { Sum, Mean, Max };

/// Reduce over `axes` (empty = all axes); reduced axes are dropped.
template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& a, std::vector<std::size_t> axes = {});

template <typename T> Tensor<T> sum(const Tensor<T>& a) { return reduce(ReduceOp::Sum, a); }
template <typename T> Tensor<T> mean(const Tensor<T>& a) { return reduce(ReduceOp::Mean, a); }

// ---------------------------------------------------------------------------
// Layers

/// Direct 2-D convolution. input [C_in,H,W], kernel [C_out,C_in,k,k] with
/// k odd, optional bias [C_out]. Output extents (H + 2*pad - k)/stride + 1.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad);
template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad);

/// [M,K] x [K,N] -> [M,N]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Softmax along the last axis of a rank-2 tensor.
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a);

/// Cosine similarity between vector v [C] and every column of F [C,H,W],
/// giving [1,H,W]. Locations where either norm is zero yield 0.
template <typename T>
Tensor<T> cosine_map(const Tensor<T>& v, const Tensor<T>& F);

/// Mean binary cross-entropy between logits [n] and fixed {0,1} targets,
/// evaluated in the numerically stable log-sum-exp form.
template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> targets);

/// Rectangle in feature-map coordinates (continuous, pixel-edge convention).
struct FeatureRect {
  double x0, y0, x1, y1;
};

/// RoI align: K x K bilinear samples at bin centers of each rect over
/// F [C,H,W]; output [R,C,K,K]. Sample coordinates clamp to the map, so the
/// interpolation weights always sum to one.
template <typename T>
Tensor<T> roi_align(const Tensor<T>& F, std::span<const FeatureRect> rects, std::size_t K);

// ---------------------------------------------------------------------------
// Random tensors

template <typename T>
Tensor<T> rng_normal(Rng& rng, Shape shape);
template <typename T>
Tensor<T> rng_uniform(Rng& rng, double lo, double hi, Shape shape);

namespace debug {
/// Test hook: scale the backward rule of the named op by 1.5 ("" clears).
void corrupt_backward(std::string_view op_name);
bool backward_corrupted(std::string_view op_name);
}  // namespace debug

}  // namespace osfa
