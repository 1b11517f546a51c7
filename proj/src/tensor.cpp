#include "osfa/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <mutex>
#include <numeric>
#include <sstream>
#include <unordered_set>

namespace osfa {

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "," : "") << shape[i];
  }
  os << ']';
  return os.str();
}

namespace debug {
namespace {
std::atomic<bool> g_corruption_active{false};
std::mutex g_corruption_mutex;
std::string g_corrupted_op;
}  // namespace

void corrupt_backward(std::string_view op_name) {
  std::lock_guard lock(g_corruption_mutex);
  g_corrupted_op = std::string(op_name);
  g_corruption_active = !op_name.empty();
}

bool backward_corrupted(std::string_view op_name) {
  if (!g_corruption_active.load(std::memory_order_relaxed)) {
    return false;
  }
  std::lock_guard lock(g_corruption_mutex);
  return g_corrupted_op == op_name;
}
}  // namespace debug

namespace {
thread_local bool t_grad_enabled = true;
}  // namespace

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }
bool grad_enabled() { return t_grad_enabled; }

namespace {

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

template <typename T>
T corruption(const char* op) {
  return debug::backward_corrupted(op) ? T(1.5) : T(1);
}

template <typename T>
std::vector<T>& grad_of(Node<T>& n) {
  if (n.grad.empty()) {
    n.grad.assign(n.value.size(), T(0));
  }
  return n.grad;
}

template <typename T>
void check_finite(const char* op, const std::vector<T>& v) {
  for (const T x : v) {
    if (!std::isfinite(x)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

// Builds a result tensor; attaches inputs and backward rule only when some
// input requires a gradient.
template <typename T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> value,
                      std::vector<NodePtr<T>> inputs, std::function<void(Node<T>&)> rule) {
  check_finite(op, value);
  auto node = std::make_shared<Node<T>>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->op = op;
  node->leaf = false;
  const bool needs = t_grad_enabled && std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr<T>& n) { return n->requires_grad; });
  if (needs) {
    node->requires_grad = true;
    node->inputs = std::move(inputs);
    node->backward = std::move(rule);
  }
  return Tensor<T>(std::move(node));
}

std::vector<std::size_t> strides_of(const Shape& s) {
  std::vector<std::size_t> st(s.size(), 1);
  for (std::size_t i = s.size(); i-- > 1;) {
    st[i - 1] = st[i] * s[i];
  }
  return st;
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor() : node_(std::make_shared<Node<T>>()) {
  node_->value.assign(1, T(0));
}

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values, bool requires_grad)
    : node_(std::make_shared<Node<T>>()) {
  if (numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + to_string(shape) + " cannot hold " +
                     std::to_string(values.size()) + " values");
  }
  for (const std::size_t d : shape) {
    if (d == 0) {
      throw ShapeError("tensor extents must be positive, got " + to_string(shape));
    }
  }
  node_->shape = std::move(shape);
  node_->value = std::move(values);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const std::size_t n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value) {
  return Tensor(Shape{}, std::vector<T>{value});
}

template <typename T>
Tensor<T> Tensor<T>::parameter(Shape shape, std::vector<T> values) {
  return Tensor(std::move(shape), std::move(values), true);
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (!node_->leaf) {
    throw GraphError(std::string("cannot write into the output of ") + node_->op);
  }
  return node_->value;
}

template <typename T>
T Tensor<T>::item() const {
  if (node_->value.size() != 1) {
    throw ShapeError("item() on tensor of shape " + to_string(node_->shape));
  }
  return node_->value[0];
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(node_->shape, node_->value, false);
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->value, requires_grad);
}

template <typename T>
const Tensor<T>* GradMap<T>::find(const Tensor<T>& leaf) const {
  const auto it = grads_.find(leaf.id());
  return it == grads_.end() ? nullptr : &it->second;
}

template <typename T>
const Tensor<T>& GradMap<T>::at(const Tensor<T>& leaf) const {
  const Tensor<T>* g = find(leaf);
  if (g == nullptr) {
    throw GraphError("leaf received no gradient");
  }
  return *g;
}

template <typename T>
GradMap<T> backward(const Tensor<T>& loss) {
  if (!loss.requires_grad()) {
    throw GraphError("backward() on a tensor detached from any trainable leaf");
  }
  if (loss.size() != 1) {
    throw GraphError("backward() needs a scalar loss, got shape " + to_string(loss.shape()));
  }

  // Iterative post-order DFS gives a topological order (inputs first).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  Node<T>* root = loss.node().get();
  stack.emplace_back(root, 0);
  visited.insert(root);
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) {
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (Node<T>* n : order) {
    n->grad.clear();
  }
  root->grad.assign(1, T(1));

  GradMap<T> out;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->grad.empty()) {
      continue;
    }
    if (n->leaf) {
      out.insert(n, Tensor<T>(n->shape, std::move(n->grad)));
    } else if (n->backward) {
      n->backward(*n);
    }
    n->grad.clear();
    n->grad.shrink_to_fit();
  }
  return out;
}

// ---------------------------------------------------------------------------
// Elementwise

namespace {

template <typename T>
void require_binary_shapes(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape() && !b.shape().empty()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  }
}

template <typename T, typename F, typename GA, typename GB>
Tensor<T> binary(const char* op, const Tensor<T>& a, const Tensor<T>& b, F f, GA da, GB db) {
  require_binary_shapes(op, a, b);
  const bool scalar_b = b.shape().empty() && !a.shape().empty();
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const auto av = a.data();
  const auto bv = b.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[i], bv[scalar_b ? 0 : i]);
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>(op, a.shape(), std::move(out), {an, bn},
                        [an, bn, scalar_b, da, db, op](Node<T>& self) {
                          const T c = corruption<T>(op);
                          const std::size_t n = self.value.size();
                          if (an->requires_grad) {
                            auto& g = grad_of(*an);
                            for (std::size_t i = 0; i < n; ++i) {
                              g[i] += c * self.grad[i] *
                                      da(an->value[i], bn->value[scalar_b ? 0 : i]);
                            }
                          }
                          if (bn->requires_grad) {
                            auto& g = grad_of(*bn);
                            for (std::size_t i = 0; i < n; ++i) {
                              g[scalar_b ? 0 : i] += c * self.grad[i] *
                                                     db(an->value[i], bn->value[scalar_b ? 0 : i]);
                            }
                          }
                        });
}

template <typename T, typename F, typename G>
Tensor<T> unary(const char* op, const Tensor<T>& a, F f, G d) {
  const std::size_t n = a.size();
  std::vector<T> out(n);
  const auto av = a.data();
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = f(av[i]);
  }
  auto an = a.node();
  return make_result<T>(op, a.shape(), std::move(out), {an}, [an, d, op](Node<T>& self) {
    const T c = corruption<T>(op);
    auto& g = grad_of(*an);
    for (std::size_t i = 0; i < self.value.size(); ++i) {
      g[i] += c * self.grad[i] * d(an->value[i], self.value[i]);
    }
  });
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return unary<T>(
      "relu", a, [](T x) { return x > T(0) ? x : T(0); },
      [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return unary<T>(
      "exp", a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return unary<T>(
      "neg", a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return unary<T>(
      "abs", a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  return unary<T>(
      "sigmoid", a,
      [](T x) {
        return x >= T(0) ? T(1) / (T(1) + std::exp(-x)) : std::exp(x) / (T(1) + std::exp(x));
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  return unary<T>(
      "scale", a, [factor](T x) { return x * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  switch (op) {
    case ElementwiseOp::Add:
      return add(a, b);
    case ElementwiseOp::Sub:
      return sub(a, b);
    case ElementwiseOp::Mul:
      return mul(a, b);
    case ElementwiseOp::Relu:
      return relu(a);
    case ElementwiseOp::Exp:
      return exp(a);
    case ElementwiseOp::Neg:
      return neg(a);
  }
  throw std::invalid_argument("unknown elementwise op");
}

// ---------------------------------------------------------------------------
// Structural

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.size()) {
    throw ShapeError("reshape " + to_string(a.shape()) + " -> " + to_string(shape));
  }
  auto an = a.node();
  return make_result<T>("reshape", std::move(shape), an->value, {an}, [an](Node<T>& self) {
    auto& g = grad_of(*an);
    for (std::size_t i = 0; i < g.size(); ++i) {
      g[i] += self.grad[i];
    }
  });
}

template <typename T>
Tensor<T> expand(const Tensor<T>& a, Shape shape, std::vector<std::size_t> axes) {
  if (axes.size() != a.rank()) {
    throw ShapeError("expand: " + std::to_string(axes.size()) + " axes for rank-" +
                     std::to_string(a.rank()) + " input");
  }
  for (std::size_t d = 0; d < axes.size(); ++d) {
    if (axes[d] >= shape.size() || shape[axes[d]] != a.dim(d) ||
        (d > 0 && axes[d] <= axes[d - 1])) {
      throw ShapeError("expand: cannot map " + to_string(a.shape()) + " into " + to_string(shape));
    }
  }
  // input stride seen along each output axis (0 on broadcast axes)
  const auto in_strides = strides_of(a.shape());
  auto step = std::make_shared<std::vector<std::size_t>>(shape.size(), 0);
  for (std::size_t d = 0; d < axes.size(); ++d) (*step)[axes[d]] = in_strides[d];
  const std::size_t n = numel(shape);
  const auto for_each = [shape, step, n](auto&& f) {
    const std::size_t R = shape.size();
    std::vector<std::size_t> idx(R, 0);
    std::size_t s = 0;
    for (std::size_t flat = 0; flat < n; ++flat) {
      f(flat, s);
      for (std::size_t d = R; d-- > 0;) {
        s += (*step)[d];
        if (++idx[d] < shape[d]) break;
        s -= (*step)[d] * shape[d];
        idx[d] = 0;
      }
    }
  };
  std::vector<T> out(n);
  const auto av = a.data();
  for_each([&](std::size_t flat, std::size_t s) { out[flat] = av[s]; });
  auto an = a.node();
  return make_result<T>("expand", std::move(shape), std::move(out), {an}, [an, for_each](Node<T>& self) {
    const T c = corruption<T>("expand");
    auto& g = grad_of(*an);
    for_each([&](std::size_t flat, std::size_t s) { g[s] += c * self.grad[flat]; });
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::size_t axis) {
  if (parts.empty()) {
    throw ShapeError("concat of zero tensors");
  }
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) {
    throw ShapeError("concat axis out of range for " + to_string(shape));
  }
  std::size_t total = 0;
  for (const auto& p : parts) {
    Shape s = p.shape();
    if (s.size() != shape.size()) {
      throw ShapeError("concat rank mismatch");
    }
    total += s[axis];
    s[axis] = shape[axis];
    if (s != shape) {
      throw ShapeError("concat: " + to_string(p.shape()) + " vs " + to_string(parts[0].shape()));
    }
  }
  shape[axis] = total;
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];

  std::vector<T> out(numel(shape));
  std::vector<NodePtr<T>> nodes;
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t len = p.dim(axis) * inner;
    const auto pv = p.data();
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(pv.begin() + o * len, len, out.begin() + o * total * inner + offset);
    }
    nodes.push_back(p.node());
    offsets.push_back(offset);
    offset += len;
  }
  const std::size_t row = total * inner;
  return make_result<T>("concat", std::move(shape), std::move(out), nodes,
                        [nodes, offsets, outer, row](Node<T>& self) {
                          for (std::size_t k = 0; k < nodes.size(); ++k) {
                            if (!nodes[k]->requires_grad) continue;
                            auto& g = grad_of(*nodes[k]);
                            const std::size_t len = g.size() / outer;
                            for (std::size_t o = 0; o < outer; ++o) {
                              for (std::size_t i = 0; i < len; ++i) {
                                g[o * len + i] += self.grad[o * row + offsets[k] + i];
                              }
                            }
                          }
                        });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.rank() != 2) {
    throw ShapeError("transpose expects rank 2, got " + to_string(a.shape()));
  }
  const std::size_t M = a.dim(0), N = a.dim(1);
  std::vector<T> out(M * N);
  const auto av = a.data();
  for (std::size_t i = 0; i < M; ++i) {
    for (std::size_t j = 0; j < N; ++j) out[j * M + i] = av[i * N + j];
  }
  auto an = a.node();
  return make_result<T>("transpose", Shape{N, M}, std::move(out), {an}, [an, M, N](Node<T>& self) {
    auto& g = grad_of(*an);
    for (std::size_t i = 0; i < M; ++i) {
      for (std::size_t j = 0; j < N; ++j) g[i * N + j] += self.grad[j * M + i];
    }
  });
}

template <typename T>
Tensor<T> take(const Tensor<T>& a, std::size_t axis, std::span<const std::size_t> indices) {
  if (axis >= a.rank()) {
    throw ShapeError("take axis out of range for " + to_string(a.shape()));
  }
  if (indices.empty()) {
    throw ShapeError("take with no indices");
  }
  for (const std::size_t i : indices) {
    if (i >= a.dim(axis)) {
      throw ShapeError("take index " + std::to_string(i) + " out of range for " + to_string(a.shape()));
    }
  }
  Shape shape = a.shape();
  const std::size_t extent = shape[axis];
  shape[axis] = indices.size();
  std::size_t outer = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
  std::size_t inner = 1;
  for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
  std::vector<T> out(numel(shape));
  const auto av = a.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t k = 0; k < indices.size(); ++k) {
      std::copy_n(av.begin() + (o * extent + indices[k]) * inner, inner,
                  out.begin() + (o * indices.size() + k) * inner);
    }
  }
  auto an = a.node();
  std::vector<std::size_t> idx(indices.begin(), indices.end());
  return make_result<T>("take", std::move(shape), std::move(out), {an},
                        [an, idx, outer, inner, extent](Node<T>& self) {
                          auto& g = grad_of(*an);
                          for (std::size_t o = 0; o < outer; ++o) {
                            for (std::size_t k = 0; k < idx.size(); ++k) {
                              for (std::size_t i = 0; i < inner; ++i) {
                                g[(o * extent + idx[k]) * inner + i] +=
                                    self.grad[(o * idx.size() + k) * inner + i];
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename T>
Tensor<T> reduce(ReduceOp op, const Tensor<T>& a, std::vector<std::size_t> axes) {
  const Shape& in_shape = a.shape();
  if (axes.empty()) {
    axes.resize(in_shape.size());
    std::iota(axes.begin(), axes.end(), std::size_t{0});
  }
  std::vector<bool> reduced(in_shape.size(), false);
  for (const std::size_t ax : axes) {
    if (ax >= in_shape.size() || reduced[ax]) {
      throw ShapeError("reduce: invalid axis " + std::to_string(ax) + " for " + to_string(in_shape));
    }
    reduced[ax] = true;
  }
  if (a.size() == 0) {
    throw ShapeError("reduce over an empty tensor");
  }
  Shape out_shape;
  for (std::size_t d = 0; d < in_shape.size(); ++d) {
    if (!reduced[d]) out_shape.push_back(in_shape[d]);
  }
  const std::size_t n_out = numel(out_shape);
  const std::size_t count = a.size() / n_out;
  const auto in_strides = strides_of(in_shape);
  const auto out_strides = strides_of(out_shape);

  // Destination of every input element, walked with an odometer.
  std::vector<std::size_t> step(in_shape.size(), 0);
  for (std::size_t d = 0, od = 0; d < in_shape.size(); ++d) {
    if (!reduced[d]) step[d] = out_strides[od++];
  }
  auto dst = std::make_shared<std::vector<std::size_t>>(a.size());
  {
    std::vector<std::size_t> idx(in_shape.size(), 0);
    std::size_t o = 0;
    for (std::size_t flat = 0; flat < a.size(); ++flat) {
      (*dst)[flat] = o;
      for (std::size_t d = in_shape.size(); d-- > 0;) {
        o += step[d];
        if (++idx[d] < in_shape[d]) break;
        o -= step[d] * in_shape[d];
        idx[d] = 0;
      }
    }
  }

  const auto av = a.data();
  std::vector<T> out(n_out, op == ReduceOp::Max ? -std::numeric_limits<T>::infinity() : T(0));
  auto argmax = std::make_shared<std::vector<std::size_t>>();
  if (op == ReduceOp::Max) {
    argmax->assign(n_out, 0);
    for (std::size_t flat = 0; flat < a.size(); ++flat) {
      const std::size_t o = (*dst)[flat];
      if (av[flat] > out[o]) {
        out[o] = av[flat];
        (*argmax)[o] = flat;
      }
    }
  } else {
    for (std::size_t flat = 0; flat < a.size(); ++flat) {
      out[(*dst)[flat]] += av[flat];
    }
    if (op == ReduceOp::Mean) {
      for (auto& v : out) v /= static_cast<T>(count);
    }
  }

  const char* name = op == ReduceOp::Sum ? "sum" : (op == ReduceOp::Mean ? "mean" : "max");
  auto an = a.node();
  return make_result<T>(name, std::move(out_shape), std::move(out), {an},
                        [an, dst, argmax, op, count](Node<T>& self) {
                          auto& g = grad_of(*an);
                          if (op == ReduceOp::Max) {
                            for (std::size_t o = 0; o < self.grad.size(); ++o) {
                              g[(*argmax)[o]] += self.grad[o];
                            }
                            return;
                          }
                          const T f = op == ReduceOp::Mean ? T(1) / static_cast<T>(count) : T(1);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            g[i] += f * self.grad[(*dst)[i]];
                          }
                        });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  std::size_t cin, h, w, cout, k, stride, pad, oh, ow;
};

// Output columns ox whose input column ox*stride + kx - pad lies in [0, w).
inline std::pair<std::size_t, std::size_t> valid_range(std::size_t out, std::size_t in,
                                                       std::size_t kx, std::size_t stride,
                                                       std::size_t pad) {
  const long lo_num = static_cast<long>(pad) - static_cast<long>(kx);
  long lo = lo_num <= 0 ? 0 : (lo_num + static_cast<long>(stride) - 1) / static_cast<long>(stride);
  const long hi_num = static_cast<long>(in) - 1 + static_cast<long>(pad) - static_cast<long>(kx);
  long hi = hi_num < 0 ? 0 : hi_num / static_cast<long>(stride) + 1;
  hi = std::min<long>(hi, static_cast<long>(out));
  lo = std::min(lo, hi);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

template <typename T>
Tensor<T> conv2d_impl(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>* bias,
                      std::size_t stride, std::size_t pad) {
  if (input.rank() != 3 || kernel.rank() != 4) {
    throw ShapeError("conv2d expects input [C,H,W] and kernel [O,C,k,k], got " +
                     to_string(input.shape()) + " and " + to_string(kernel.shape()));
  }
  ConvGeom g{input.dim(0), input.dim(1), input.dim(2), kernel.dim(0), kernel.dim(2), stride, pad, 0, 0};
  if (kernel.dim(1) != g.cin || kernel.dim(3) != g.k) {
    throw ShapeError("conv2d kernel " + to_string(kernel.shape()) + " incompatible with input " +
                     to_string(input.shape()));
  }
  if (g.k % 2 == 0) {
    throw ShapeError("conv2d kernel size must be odd, got " + std::to_string(g.k));
  }
  if (stride == 0) {
    throw ShapeError("conv2d stride must be positive");
  }
  if (bias != nullptr && bias->shape() != Shape{g.cout}) {
    throw ShapeError("conv2d bias " + to_string(bias->shape()) + " for " + std::to_string(g.cout) +
                     " output channels");
  }
  const long oh = (static_cast<long>(g.h) + 2 * static_cast<long>(pad) - static_cast<long>(g.k)) /
                      static_cast<long>(stride) + 1;
  const long ow = (static_cast<long>(g.w) + 2 * static_cast<long>(pad) - static_cast<long>(g.k)) /
                      static_cast<long>(stride) + 1;
  if (g.h + 2 * pad < g.k || g.w + 2 * pad < g.k || oh <= 0 || ow <= 0) {
    throw ShapeError("conv2d: non-positive output extent for input " + to_string(input.shape()) +
                     " with k=" + std::to_string(g.k) + " stride=" + std::to_string(stride) +
                     " pad=" + std::to_string(pad));
  }
  g.oh = static_cast<std::size_t>(oh);
  g.ow = static_cast<std::size_t>(ow);

  // im2col: row r = (ci, ky, kx), column p = (oy, ox); padded taps stay zero
  const std::size_t P = g.oh * g.ow, CKK = g.cin * g.k * g.k;
  auto col = std::make_shared<std::vector<T>>(CKK * P, T(0));
  const T* in = input.data().data();
  for (std::size_t ci = 0; ci < g.cin; ++ci) {
    const T* ic = in + ci * g.h * g.w;
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      const auto [oy0, oy1] = valid_range(g.oh, g.h, ky, stride, pad);
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const auto [ox0, ox1] = valid_range(g.ow, g.w, kx, stride, pad);
        T* crow = col->data() + ((ci * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = oy0; oy < oy1; ++oy) {
          // unsigned wrap of (kx - pad) cancels against ox * stride >= pad - kx
          const std::size_t base = (oy * stride + ky - pad) * g.w + kx - pad;
          for (std::size_t ox = ox0; ox < ox1; ++ox) crow[oy * g.ow + ox] = ic[base + ox * stride];
        }
      }
    }
  }

  const T* w = kernel.data().data();
  std::vector<T> out(g.cout * P, T(0));
  for (std::size_t co = 0; co < g.cout; ++co) {
    T* oc = out.data() + co * P;
    if (bias != nullptr) {
      std::fill_n(oc, P, bias->data()[co]);
    }
    for (std::size_t r = 0; r < CKK; ++r) {
      const T wv = w[co * CKK + r];
      const T* crow = col->data() + r * P;
      for (std::size_t p = 0; p < P; ++p) oc[p] += wv * crow[p];
    }
  }

  auto in_n = input.node();
  auto k_n = kernel.node();
  std::vector<NodePtr<T>> inputs{in_n, k_n};
  NodePtr<T> b_n = bias != nullptr ? bias->node() : nullptr;
  if (b_n) inputs.push_back(b_n);
  return make_result<T>(
      "conv2d", Shape{g.cout, g.oh, g.ow}, std::move(out), inputs, [in_n, k_n, b_n, g, col](Node<T>& self) {
        const T c = corruption<T>("conv2d");
        const T* gout = self.grad.data();
        const std::size_t P = g.oh * g.ow, CKK = g.cin * g.k * g.k;
        if (b_n && b_n->requires_grad) {
          auto& gb = grad_of(*b_n);
          for (std::size_t co = 0; co < g.cout; ++co) {
            T acc = 0;
            for (std::size_t i = 0; i < P; ++i) acc += gout[co * P + i];
            gb[co] += c * acc;
          }
        }
        const T* w = k_n->value.data();
        if (k_n->requires_grad) {
          T* gw = grad_of(*k_n).data();
          for (std::size_t co = 0; co < g.cout; ++co) {
            const T* goc = gout + co * P;
            for (std::size_t r = 0; r < CKK; ++r) {
              const T* crow = col->data() + r * P;
              T acc = 0;
              for (std::size_t p = 0; p < P; ++p) acc += goc[p] * crow[p];
              gw[co * CKK + r] += c * acc;
            }
          }
        }
        if (!in_n->requires_grad) return;
        std::vector<T> gcol(CKK * P, T(0));
        for (std::size_t co = 0; co < g.cout; ++co) {
          const T* goc = gout + co * P;
          for (std::size_t r = 0; r < CKK; ++r) {
            const T wv = c * w[co * CKK + r];
            T* grow = gcol.data() + r * P;
            for (std::size_t p = 0; p < P; ++p) grow[p] += wv * goc[p];
          }
        }
        T* gin = grad_of(*in_n).data();
        for (std::size_t ci = 0; ci < g.cin; ++ci) {
          T* gic = gin + ci * g.h * g.w;
          for (std::size_t ky = 0; ky < g.k; ++ky) {
            const auto [oy0, oy1] = valid_range(g.oh, g.h, ky, g.stride, g.pad);
            for (std::size_t kx = 0; kx < g.k; ++kx) {
              const auto [ox0, ox1] = valid_range(g.ow, g.w, kx, g.stride, g.pad);
              const T* grow = gcol.data() + ((ci * g.k + ky) * g.k + kx) * P;
              for (std::size_t oy = oy0; oy < oy1; ++oy) {
                const std::size_t base = (oy * g.stride + ky - g.pad) * g.w + kx - g.pad;
                for (std::size_t ox = ox0; ox < ox1; ++ox) gic[base + ox * g.stride] += grow[oy * g.ow + ox];
              }
            }
          }
        }
      });
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, std::size_t stride, std::size_t pad) {
  return conv2d_impl<T>(input, kernel, nullptr, stride, pad);
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                 std::size_t stride, std::size_t pad) {
  return conv2d_impl<T>(input, kernel, &bias, stride, pad);
}

// ---------------------------------------------------------------------------
// Dense layers and fused ops

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  const std::size_t M = a.dim(0), K = a.dim(1), N = b.dim(1);
  std::vector<T> out(M * N, T(0));
  const T* A = a.data().data();
  const T* B = b.data().data();
  for (std::size_t i = 0; i < M; ++i) {
    T* crow = out.data() + i * N;
    for (std::size_t k = 0; k < K; ++k) {
      const T av = A[i * K + k];
      if (av == T(0)) continue;
      const T* brow = B + k * N;
      for (std::size_t j = 0; j < N; ++j) crow[j] += av * brow[j];
    }
  }
  auto an = a.node();
  auto bn = b.node();
  return make_result<T>("matmul", Shape{M, N}, std::move(out), {an, bn}, [an, bn, M, K, N](Node<T>& self) {
    const T c = corruption<T>("matmul");
    const T* G = self.grad.data();
    if (an->requires_grad) {
      auto& ga = grad_of(*an);
      const T* B = bn->value.data();
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          T acc = 0;
          for (std::size_t j = 0; j < N; ++j) acc += G[i * N + j] * B[k * N + j];
          ga[i * K + k] += c * acc;
        }
      }
    }
    if (bn->requires_grad) {
      auto& gb = grad_of(*bn);
      const T* A = an->value.data();
      for (std::size_t i = 0; i < M; ++i) {
        for (std::size_t k = 0; k < K; ++k) {
          const T av = c * A[i * K + k];
          if (av == T(0)) continue;
          T* gbrow = gb.data() + k * N;
          for (std::size_t j = 0; j < N; ++j) gbrow[j] += av * G[i * N + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  if (a.rank() != 2) {
    throw ShapeError("softmax_rows expects rank 2, got " + to_string(a.shape()));
  }
  const std::size_t R = a.dim(0), P = a.dim(1);
  std::vector<T> out(R * P);
  const auto av = a.data();
  for (std::size_t r = 0; r < R; ++r) {
    T m = av[r * P];
    for (std::size_t p = 1; p < P; ++p) m = std::max(m, av[r * P + p]);
    T z = 0;
    for (std::size_t p = 0; p < P; ++p) {
      out[r * P + p] = std::exp(av[r * P + p] - m);
      z += out[r * P + p];
    }
    for (std::size_t p = 0; p < P; ++p) out[r * P + p] /= z;
  }
  auto an = a.node();
  return make_result<T>("softmax", a.shape(), std::move(out), {an}, [an, R, P](Node<T>& self) {
    const T c = corruption<T>("softmax");
    auto& g = grad_of(*an);
    for (std::size_t r = 0; r < R; ++r) {
      T dot = 0;
      for (std::size_t p = 0; p < P; ++p) dot += self.grad[r * P + p] * self.value[r * P + p];
      for (std::size_t p = 0; p < P; ++p) {
        g[r * P + p] += c * self.value[r * P + p] * (self.grad[r * P + p] - dot);
      }
    }
  });
}

template <typename T>
Tensor<T> cosine_map(const Tensor<T>& v, const Tensor<T>& F) {
  if (v.rank() != 1 || F.rank() != 3 || v.dim(0) != F.dim(0)) {
    throw ShapeError("cosine_map: vector " + to_string(v.shape()) + " vs map " + to_string(F.shape()));
  }
  const std::size_t C = F.dim(0), P = F.dim(1) * F.dim(2);
  const auto vv = v.data();
  const auto fv = F.data();
  T nv2 = 0;
  for (const T x : vv) nv2 += x * x;
  const T nv = std::sqrt(nv2);
  std::vector<T> dot(P, T(0)), nf2(P, T(0));
  for (std::size_t c = 0; c < C; ++c) {
    const T vc = vv[c];
    const T* row = fv.data() + c * P;
    for (std::size_t p = 0; p < P; ++p) {
      dot[p] += vc * row[p];
      nf2[p] += row[p] * row[p];
    }
  }
  std::vector<T> out(P, T(0));
  auto nf = std::make_shared<std::vector<T>>(P);
  for (std::size_t p = 0; p < P; ++p) {
    (*nf)[p] = std::sqrt(nf2[p]);
    if (nv > T(0) && (*nf)[p] > T(0)) {
      out[p] = dot[p] / (nv * (*nf)[p]);
    }
  }
  auto vn = v.node();
  auto fn = F.node();
  return make_result<T>(
      "cosine_map", Shape{1, F.dim(1), F.dim(2)}, std::move(out), {vn, fn},
      [vn, fn, nf, nv, C, P](Node<T>& self) {
        const T c = corruption<T>("cosine_map");
        const T* V = vn->value.data();
        const T* Fd = fn->value.data();
        T* gv = vn->requires_grad ? grad_of(*vn).data() : nullptr;
        T* gf = fn->requires_grad ? grad_of(*fn).data() : nullptr;
        for (std::size_t p = 0; p < P; ++p) {
          const T n = (*nf)[p];
          if (nv == T(0) || n == T(0)) continue;
          const T g = c * self.grad[p];
          const T cosv = self.value[p];
          const T inv = T(1) / (nv * n);
          for (std::size_t ch = 0; ch < C; ++ch) {
            const T f = Fd[ch * P + p];
            if (gv) gv[ch] += g * (f * inv - cosv * V[ch] / (nv * nv));
            if (gf) gf[ch * P + p] += g * (V[ch] * inv - cosv * f / (n * n));
          }
        }
      });
}

template <typename T>
Tensor<T> bce_with_logits(const Tensor<T>& logits, std::span<const T> targets) {
  if (logits.rank() != 1 || logits.dim(0) != targets.size()) {
    throw ShapeError("bce_with_logits: logits " + to_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  }
  const std::size_t n = targets.size();
  const auto z = logits.data();
  T total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    total += std::max(z[i], T(0)) - z[i] * targets[i] + std::log1p(std::exp(-std::abs(z[i])));
  }
  auto ln = logits.node();
  std::vector<T> y(targets.begin(), targets.end());
  return make_result<T>("bce", Shape{}, {total / static_cast<T>(n)}, {ln}, [ln, y](Node<T>& self) {
    const T c = corruption<T>("bce");
    auto& g = grad_of(*ln);
    const T scale = c * self.grad[0] / static_cast<T>(y.size());
    for (std::size_t i = 0; i < y.size(); ++i) {
      const T z = ln->value[i];
      const T s = z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
      g[i] += scale * (s - y[i]);
    }
  });
}

template <typename T>
Tensor<T> roi_align(const Tensor<T>& F, std::span<const FeatureRect> rects, std::size_t K) {
  if (F.rank() != 3) {
    throw ShapeError("roi_align expects [C,H,W], got " + to_string(F.shape()));
  }
  if (rects.empty() || K == 0) {
    throw ShapeError("roi_align needs at least one rect and K > 0");
  }
  const std::size_t C = F.dim(0), H = F.dim(1), W = F.dim(2), R = rects.size();
  struct Tap {
    std::size_t i00, i01, i10, i11;
    double w00, w01, w10, w11;
  };
  auto taps = std::make_shared<std::vector<Tap>>(R * K * K);
  for (std::size_t r = 0; r < R; ++r) {
    const FeatureRect& b = rects[r];
    if (!(b.x1 > b.x0) || !(b.y1 > b.y0)) {
      throw ShapeError("roi_align: degenerate rect");
    }
    const double bw = (b.x1 - b.x0) / static_cast<double>(K);
    const double bh = (b.y1 - b.y0) / static_cast<double>(K);
    for (std::size_t i = 0; i < K; ++i) {
      const double y = std::clamp(b.y0 + (static_cast<double>(i) + 0.5) * bh - 0.5, 0.0,
                                  static_cast<double>(H - 1));
      const auto y0 = static_cast<std::size_t>(std::floor(y));
      const std::size_t y1 = std::min(y0 + 1, H - 1);
      const double ly = y - static_cast<double>(y0);
      for (std::size_t j = 0; j < K; ++j) {
        const double x = std::clamp(b.x0 + (static_cast<double>(j) + 0.5) * bw - 0.5, 0.0,
                                    static_cast<double>(W - 1));
        const auto x0 = static_cast<std::size_t>(std::floor(x));
        const std::size_t x1 = std::min(x0 + 1, W - 1);
        const double lx = x - static_cast<double>(x0);
        (*taps)[(r * K + i) * K + j] = Tap{y0 * W + x0, y0 * W + x1, y1 * W + x0, y1 * W + x1,
                                           (1 - ly) * (1 - lx), (1 - ly) * lx, ly * (1 - lx), ly * lx};
      }
    }
  }
  const std::size_t KK = K * K, P = H * W;
  std::vector<T> out(R * C * KK);
  const T* f = F.data().data();
  for (std::size_t r = 0; r < R; ++r) {
    for (std::size_t c = 0; c < C; ++c) {
      const T* fc = f + c * P;
      T* o = out.data() + (r * C + c) * KK;
      for (std::size_t q = 0; q < KK; ++q) {
        const Tap& t = (*taps)[r * KK + q];
        o[q] = static_cast<T>(t.w00 * fc[t.i00] + t.w01 * fc[t.i01] + t.w10 * fc[t.i10] +
                              t.w11 * fc[t.i11]);
      }
    }
  }
  auto fn = F.node();
  return make_result<T>("roi_align", Shape{R, C, K, K}, std::move(out), {fn},
                        [fn, taps, R, C, KK, P](Node<T>& self) {
                          const T cc = corruption<T>("roi_align");
                          auto& g = grad_of(*fn);
                          for (std::size_t r = 0; r < R; ++r) {
                            for (std::size_t c = 0; c < C; ++c) {
                              T* gc = g.data() + c * P;
                              const T* go = self.grad.data() + (r * C + c) * KK;
                              for (std::size_t q = 0; q < KK; ++q) {
                                const auto& t = (*taps)[r * KK + q];
                                const T v = cc * go[q];
                                gc[t.i00] += static_cast<T>(t.w00) * v;
                                gc[t.i01] += static_cast<T>(t.w01) * v;
                                gc[t.i10] += static_cast<T>(t.w10) * v;
                                gc[t.i11] += static_cast<T>(t.w11) * v;
                              }
                            }
                          }
                        });
}

// ---------------------------------------------------------------------------
// Random tensors

template <typename T>
Tensor<T> rng_normal(Rng& rng, Shape shape) {
  const std::size_t n = numel(shape);
  std::vector<T> v(n);
  for (auto& x : v) x = static_cast<T>(rng.normal());
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> rng_uniform(Rng& rng, double lo, double hi, Shape shape) {
  if (!(lo < hi)) {
    throw std::invalid_argument("rng_uniform: lo must be < hi");
  }
  const std::size_t n = numel(shape);
  std::vector<T> v(n);
  for (auto& x : v) {
    x = static_cast<T>(rng.uniform(lo, hi));
    // float rounding of a value just below hi can reach hi
    if (!(static_cast<double>(x) < hi)) x = std::nextafter(static_cast<T>(hi), static_cast<T>(lo));
  }
  return Tensor<T>(std::move(shape), std::move(v));
}

// ---------------------------------------------------------------------------
// Explicit instantiations

#define OSFA_INSTANTIATE(T)                                                                        \
  template class Tensor<T>;                                                                        \
  template class GradMap<T>;                                                                       \
  template GradMap<T> backward<T>(const Tensor<T>&);                                               \
  template Tensor<T> elementwise<T>(ElementwiseOp, const Tensor<T>&, const Tensor<T>&);            \
  template Tensor<T> add<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> sub<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> mul<T>(const Tensor<T>&, const Tensor<T>&);                                   \
  template Tensor<T> relu<T>(const Tensor<T>&);                                                    \
  template Tensor<T> exp<T>(const Tensor<T>&);                                                     \
  template Tensor<T> neg<T>(const Tensor<T>&);                                                     \
  template Tensor<T> abs<T>(const Tensor<T>&);                                                     \
  template Tensor<T> sigmoid<T>(const Tensor<T>&);                                                 \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                \
  template Tensor<T> reshape<T>(const Tensor<T>&, Shape);                                          \
  template Tensor<T> expand<T>(const Tensor<T>&, Shape, std::vector<std::size_t>);                 \
  template Tensor<T> concat<T>(const std::vector<Tensor<T>>&, std::size_t);                        \
  template Tensor<T> transpose<T>(const Tensor<T>&);                                             \
  template Tensor<T> take<T>(const Tensor<T>&, std::size_t, std::span<const std::size_t>);         \
  template Tensor<T> reduce<T>(ReduceOp, const Tensor<T>&, std::vector<std::size_t>);              \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, std::size_t, std::size_t);      \
  template Tensor<T> conv2d<T>(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, std::size_t,  \
                               std::size_t);                                                       \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> softmax_rows<T>(const Tensor<T>&);                                            \
  template Tensor<T> cosine_map<T>(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> bce_with_logits<T>(const Tensor<T>&, std::span<const T>);                     \
  template Tensor<T> roi_align<T>(const Tensor<T>&, std::span<const FeatureRect>, std::size_t);    \
  template Tensor<T> rng_normal<T>(Rng&, Shape);                                                   \
  template Tensor<T> rng_uniform<T>(Rng&, double, double, Shape);

OSFA_INSTANTIATE(float)
OSFA_INSTANTIATE(double)

#undef OSFA_INSTANTIATE

}  // namespace osfa
