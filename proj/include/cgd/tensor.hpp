#pragma once

/**
 * @file tensor.hpp
 * @brief Dense float64 tensors with reverse-mode automatic differentiation.
 *
 * A Tensor is a cheap shared handle to a graph node. Operations on tensors that
 * require gradients record a backward closure on the result; backward() walks the
 * recorded graph in reverse topological order and accumulates gradients (+=) into
 * every reachable tensor that requires them. Leaf gradients persist until
 * zero_grad().
 */

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cgd {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a backward pass touches the node
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline thread_local int no_grad_depth = 0;

}  // namespace detail

/// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() { ++detail::no_grad_depth; }
  ~NoGradGuard() { --detail::no_grad_depth; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;
};

inline bool grad_mode_enabled() { return detail::no_grad_depth == 0; }

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (auto extent : shape) {
      if (extent == 0) throw std::invalid_argument("tensor extents must be positive, got " + shape_str(shape));
    }
    if (data.size() != shape_numel(shape)) {
      throw std::invalid_argument("tensor data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) { return full(std::move(shape), 0.0, requires_grad); }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) { return Tensor({}, {value}, requires_grad); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t ndim() const { return node().shape.size(); }
  std::size_t dim(std::size_t axis) const { return node().shape.at(axis); }
  std::size_t numel() const { return node().data.size(); }

  std::span<const double> data() const { return node().data; }
  /// Direct write access; intended for leaves (parameter updates, data filling).
  std::span<double> mutable_data() { return node().data; }
  double operator[](std::size_t i) const { return node().data[i]; }
  double item() const {
    if (numel() != 1) throw std::invalid_argument("item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool value) { node().requires_grad = value; }

  bool has_grad() const { return !node().grad.empty(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw std::logic_error("tensor has no gradient");
    return node().grad;
  }
  std::span<double> mutable_grad() { return node().grad_buffer(); }
  void zero_grad() { node().grad.clear(); }

  /// Copy of the values without any graph history.
  Tensor detach() const { return Tensor(shape(), node().data, false); }
  const char* op_name() const { return node().op; }
  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  detail::Node& node() const {
    if (!node_) throw std::logic_error("use of undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

/// Backward closure for a recorded op. It receives the output node (whose grad is
/// populated) and accumulates into the gradient buffers of the inputs that need them.
using BackwardFn = std::function<void(detail::Node& out)>;

/**
 * Creates the output of an operation. When grad mode is on and any input requires
 * gradients, the result records `inputs` and `backward`; otherwise it is a plain leaf.
 * Custom differentiable ops (e.g. fused losses) are built on this.
 */
inline Tensor make_op(const char* op, Shape shape, std::vector<double> data, std::vector<Tensor> inputs,
                      BackwardFn backward) {
  Tensor out(std::move(shape), std::move(data), false);
  bool track = grad_mode_enabled() &&
               std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
  auto& node = *out.node_ptr();
  node.op = op;
  if (track) {
    node.requires_grad = true;
    node.inputs.reserve(inputs.size());
    for (auto& t : inputs) node.inputs.push_back(t.node_ptr());
    node.backward = std::move(backward);
  }
  return out;
}

/// Gradient buffer of input `i` of a recorded op, or nullptr when that input is not tracked.
inline std::vector<double>* input_grad(detail::Node& out, std::size_t i) {
  auto& in = *out.inputs[i];
  return in.requires_grad ? &in.grad_buffer() : nullptr;
}

/// Ops reachable from a loss, in the order backward() replays them (output first).
struct ComputationRecord {
  std::vector<detail::Node*> ops;

  std::size_t size() const { return ops.size(); }
  std::vector<std::string> op_names() const {
    std::vector<std::string> names;
    for (auto* n : ops) names.emplace_back(n->op);
    return names;
  }
};

inline ComputationRecord record_of(const Tensor& loss) {
  ComputationRecord rec;
  std::vector<detail::Node*> post_order;
  std::unordered_set<detail::Node*> seen;
  // Iterative DFS; a node is emitted after all of its inputs.
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  auto* root = loss.node_ptr().get();
  if (!root->requires_grad) return rec;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      auto* child = node->inputs[next++].get();
      if (child->requires_grad && !seen.count(child)) {
        seen.insert(child);
        stack.emplace_back(child, 0);
      }
      continue;
    }
    post_order.push_back(node);
    stack.pop_back();
  }
  for (auto it = post_order.rbegin(); it != post_order.rend(); ++it) {
    if ((*it)->backward) rec.ops.push_back(*it);
  }
  return rec;
}

/**
 * Accumulates d(loss)/d(t) into every tracked ancestor t of `loss`. The recorded
 * graph is released afterwards, so a second call on the same loss is rejected.
 */
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw std::invalid_argument("backward() needs a scalar loss, got shape " + shape_str(loss.shape()));
  auto& root = *loss.node_ptr();
  if (root.consumed) throw std::logic_error("backward() already called on this graph");
  if (!root.requires_grad) throw std::invalid_argument("loss does not depend on any tensor that requires grad");
  auto rec = record_of(loss);
  root.grad_buffer()[0] += 1.0;
  for (auto* node : rec.ops) {
    if (!node->grad.empty()) node->backward(*node);
  }
  std::vector<std::shared_ptr<detail::Node>> released;  // keeps nodes alive until every op is marked
  for (auto* node : rec.ops) {
    node->consumed = true;
    node->backward = nullptr;
    for (auto& in : node->inputs) released.push_back(std::move(in));
    node->inputs.clear();
  }
}

namespace detail {

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                                shape_str(b.shape()));
  }
}

// (outer, extent, inner) factorisation of a shape around one axis.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& shape, std::size_t axis, const char* op) {
  if (axis >= shape.size()) {
    throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                                shape_str(shape));
  }
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

// Row-major dense kernels. All accumulate into C.
// C[M,N] += A[M,K] * B[K,N]
inline void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[M,N] += A[M,K] * B[N,K]^T
inline void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * k;
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
      c[i * n + j] += acc;
    }
  }
}

// C[M,N] += A[K,M]^T * B[K,N]
inline void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const double* a, const double* b, double* c) {
  for (std::size_t p = 0; p < k; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      double av = arow[i];
      if (av == 0.0) continue;
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename Fwd, typename Deriv>
Tensor unary_op(const char* op, const Tensor& x, Fwd fwd, Deriv deriv) {
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_op(op, x.shape(), std::move(out), {x}, [deriv](Node& o) {
    auto* g = input_grad(o, 0);
    if (!g) return;
    const auto& xin = o.inputs[0]->data;
    for (std::size_t i = 0; i < xin.size(); ++i) (*g)[i] += o.grad[i] * deriv(xin[i], o.data[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "add");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] + b[i];
  return make_op("add", a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (auto* g = input_grad(o, k))
        for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "sub");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] - b[i];
  return make_op("sub", a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    if (auto* g = input_grad(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    if (auto* g = input_grad(o, 1))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] -= o.grad[i];
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "mul");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] * b[i];
  return make_op("mul", a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    const auto& av = o.inputs[0]->data;
    const auto& bv = o.inputs[1]->data;
    if (auto* g = input_grad(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * bv[i];
    if (auto* g = input_grad(o, 1))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] * av[i];
  });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  detail::check_same_shape(a, b, "div");
  std::vector<double> out(a.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a[i] / b[i];
  return make_op("div", a.shape(), std::move(out), {a, b}, [](detail::Node& o) {
    const auto& bv = o.inputs[1]->data;
    if (auto* g = input_grad(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i] / bv[i];
    if (auto* g = input_grad(o, 1))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] -= o.grad[i] * o.data[i] / bv[i];
  });
}

inline Tensor scale(const Tensor& x, double s) {
  return detail::unary_op("scale", x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

inline Tensor add_scalar(const Tensor& x, double s) {
  return detail::unary_op("add_scalar", x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

inline Tensor relu(const Tensor& x) {
  return detail::unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

inline Tensor exp(const Tensor& x) {
  return detail::unary_op("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

inline Tensor log(const Tensor& x) {
  return detail::unary_op("log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

/// max(x, floor) elementwise; gradient passes only where x > floor.
inline Tensor clamp_min(const Tensor& x, double floor) {
  return detail::unary_op(
      "clamp_min", x, [floor](double v) { return v > floor ? v : floor; },
      [floor](double v, double) { return v > floor ? 1.0 : 0.0; });
}

/**
 * x^exponent elementwise. A non-integer exponent needs a nonnegative base. At base 0
 * the gradient is taken as 0 unless exponent == 1, so fractional roots stay finite.
 */
inline Tensor pow(const Tensor& x, double exponent) {
  bool integral = std::floor(exponent) == exponent;
  if (!integral) {
    for (double v : x.data()) {
      if (v < 0.0) throw std::invalid_argument("pow: negative base with non-integer exponent");
    }
  }
  return detail::unary_op(
      "pow", x, [exponent](double v) { return std::pow(v, exponent); },
      [exponent](double v, double) {
        if (v == 0.0) return exponent == 1.0 ? 1.0 : 0.0;
        return exponent * std::pow(v, exponent - 1.0);
      });
}

// ---------------------------------------------------------------------------
// Shape manipulation

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(x.data().begin(), x.data().end());
  return make_op("reshape", std::move(shape), std::move(out), {x}, [](detail::Node& o) {
    if (auto* g = input_grad(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
  });
}

inline Tensor transpose(const Tensor& x) {
  if (x.ndim() != 2) throw std::invalid_argument("transpose expects a matrix, got " + shape_str(x.shape()));
  std::size_t r = x.dim(0), c = x.dim(1);
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = in[i * c + j];
  return make_op("transpose", {c, r}, std::move(out), {x}, [r, c](detail::Node& o) {
    if (auto* g = input_grad(o, 0))
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) (*g)[i * c + j] += o.grad[j * r + i];
  });
}

inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
  Shape shape = parts[0].shape();
  if (axis >= shape.size()) throw std::invalid_argument("concat: axis out of range");
  std::size_t total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != shape.size()) throw std::invalid_argument("concat: rank mismatch");
    for (std::size_t d = 0; d < shape.size(); ++d) {
      if (d != axis && p.dim(d) != shape[d]) {
        throw std::invalid_argument("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(shape));
      }
    }
    total += p.dim(axis);
  }
  shape[axis] = total;
  auto split = detail::split_axis(shape, axis, "concat");
  std::vector<double> out(shape_numel(shape));
  std::vector<std::size_t> offsets;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    std::size_t ext = p.dim(axis);
    auto in = p.data();
    for (std::size_t o = 0; o < split.outer; ++o)
      std::copy_n(in.begin() + o * ext * split.inner, ext * split.inner,
                  out.begin() + (o * total + offset) * split.inner);
    offset += ext;
  }
  return make_op("concat", shape, std::move(out), parts, [split, offsets, total](detail::Node& o) {
    for (std::size_t k = 0; k < o.inputs.size(); ++k) {
      auto* g = input_grad(o, k);
      if (!g) continue;
      std::size_t ext = o.inputs[k]->data.size() / (split.outer * split.inner);
      for (std::size_t r = 0; r < split.outer; ++r)
        for (std::size_t i = 0; i < ext * split.inner; ++i)
          (*g)[r * ext * split.inner + i] += o.grad[(r * total + offsets[k]) * split.inner + i];
    }
  });
}

/// Elements [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  auto split = detail::split_axis(x.shape(), axis, "slice");
  if (begin >= end || end > split.extent) {
    throw std::invalid_argument("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                                ") invalid for extent " + std::to_string(split.extent));
  }
  Shape shape = x.shape();
  std::size_t ext = end - begin;
  shape[axis] = ext;
  std::vector<double> out(shape_numel(shape));
  auto in = x.data();
  for (std::size_t o = 0; o < split.outer; ++o)
    std::copy_n(in.begin() + (o * split.extent + begin) * split.inner, ext * split.inner,
                out.begin() + o * ext * split.inner);
  return make_op("slice", shape, std::move(out), {x}, [split, begin, ext](detail::Node& o) {
    if (auto* g = input_grad(o, 0))
      for (std::size_t r = 0; r < split.outer; ++r)
        for (std::size_t i = 0; i < ext * split.inner; ++i)
          (*g)[(r * split.extent + begin) * split.inner + i] += o.grad[r * ext * split.inner + i];
  });
}

/// Splits along `axis` at the given extents; inverse of concat.
inline std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& extents) {
  std::vector<Tensor> parts;
  std::size_t begin = 0;
  for (auto e : extents) {
    parts.push_back(slice(x, axis, begin, begin + e));
    begin += e;
  }
  if (begin != x.dim(axis)) throw std::invalid_argument("split: extents do not cover the axis");
  return parts;
}

// ---------------------------------------------------------------------------
// Reductions (the reduced axis is removed)

inline Tensor sum_reduce(const Tensor& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "sum_reduce");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t e = 0; e < s.extent; ++e)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += in[(o * s.extent + e) * s.inner + i];
  return make_op("sum_reduce", shape, std::move(out), {x}, [s](detail::Node& o) {
    if (auto* g = input_grad(o, 0))
      for (std::size_t r = 0; r < s.outer; ++r)
        for (std::size_t e = 0; e < s.extent; ++e)
          for (std::size_t i = 0; i < s.inner; ++i) (*g)[(r * s.extent + e) * s.inner + i] += o.grad[r * s.inner + i];
  });
}

inline Tensor mean_reduce(const Tensor& x, std::size_t axis) {
  return scale(sum_reduce(x, axis), 1.0 / static_cast<double>(x.dim(axis)));
}

/// Maximum along `axis`; the gradient goes to the first index attaining it.
inline Tensor max_reduce(const Tensor& x, std::size_t axis) {
  auto s = detail::split_axis(x.shape(), axis, "max_reduce");
  Shape shape = x.shape();
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  std::vector<double> out(s.outer * s.inner);
  std::vector<std::size_t> arg(s.outer * s.inner);
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.extent) * s.inner + i;
      for (std::size_t e = 1; e < s.extent; ++e) {
        std::size_t idx = (o * s.extent + e) * s.inner + i;
        if (in[idx] > in[best]) best = idx;
      }
      out[o * s.inner + i] = in[best];
      arg[o * s.inner + i] = best;
    }
  return make_op("max_reduce", shape, std::move(out), {x}, [arg = std::move(arg)](detail::Node& o) {
    if (auto* g = input_grad(o, 0))
      for (std::size_t j = 0; j < arg.size(); ++j) (*g)[arg[j]] += o.grad[j];
  });
}

inline Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return make_op("sum", {}, {acc}, {x}, [](detail::Node& o) {
    if (auto* g = input_grad(o, 0))
      for (auto& v : *g) v += o.grad[0];
  });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

// ---------------------------------------------------------------------------
// Linear algebra and normalisation

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<double> out(m * n, 0.0);
  detail::gemm_nn(m, n, k, a.data().data(), b.data().data(), out.data());
  return make_op("matmul", {m, n}, std::move(out), {a, b}, [m, k, n](detail::Node& o) {
    const auto& av = o.inputs[0]->data;
    const auto& bv = o.inputs[1]->data;
    if (auto* g = input_grad(o, 0)) detail::gemm_nt(m, k, n, o.grad.data(), bv.data(), g->data());
    if (auto* g = input_grad(o, 1)) detail::gemm_tn(k, n, m, av.data(), o.grad.data(), g->data());
  });
}

/// x / max(||x||_2, epsilon), norms taken along `axis`.
inline Tensor l2_normalize(const Tensor& x, std::size_t axis, double epsilon = 1e-12) {
  auto s = detail::split_axis(x.shape(), axis, "l2_normalize");
  std::vector<double> out(x.numel());
  std::vector<double> denom(s.outer * s.inner);
  auto in = x.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t i = 0; i < s.inner; ++i) {
      double sq = 0.0;
      for (std::size_t e = 0; e < s.extent; ++e) {
        double v = in[(o * s.extent + e) * s.inner + i];
        sq += v * v;
      }
      double d = std::max(std::sqrt(sq), epsilon);
      denom[o * s.inner + i] = d;
      for (std::size_t e = 0; e < s.extent; ++e) {
        std::size_t idx = (o * s.extent + e) * s.inner + i;
        out[idx] = in[idx] / d;
      }
    }
  return make_op("l2_normalize", x.shape(), std::move(out), {x}, [s, epsilon, denom = std::move(denom)](detail::Node& o) {
    auto* g = input_grad(o, 0);
    if (!g) return;
    for (std::size_t r = 0; r < s.outer; ++r)
      for (std::size_t i = 0; i < s.inner; ++i) {
        double d = denom[r * s.inner + i];
        bool clamped = d <= epsilon;
        double dot = 0.0;
        if (!clamped)
          for (std::size_t e = 0; e < s.extent; ++e) {
            std::size_t idx = (r * s.extent + e) * s.inner + i;
            dot += o.data[idx] * o.grad[idx];
          }
        for (std::size_t e = 0; e < s.extent; ++e) {
          std::size_t idx = (r * s.extent + e) * s.inner + i;
          (*g)[idx] += (o.grad[idx] - o.data[idx] * dot) / d;
        }
      }
  });
}

/// Row-wise log-softmax of an N x M matrix.
inline Tensor log_softmax(const Tensor& x) {
  if (x.ndim() != 2) throw std::invalid_argument("log_softmax expects a matrix, got " + shape_str(x.shape()));
  std::size_t n = x.dim(0), m = x.dim(1);
  std::vector<double> out(x.numel());
  auto in = x.data();
  for (std::size_t r = 0; r < n; ++r) {
    const double* row = in.data() + r * m;
    double mx = *std::max_element(row, row + m);
    double acc = 0.0;
    for (std::size_t j = 0; j < m; ++j) acc += std::exp(row[j] - mx);
    double lse = mx + std::log(acc);
    for (std::size_t j = 0; j < m; ++j) out[r * m + j] = row[j] - lse;
  }
  return make_op("log_softmax", x.shape(), std::move(out), {x}, [n, m](detail::Node& o) {
    auto* g = input_grad(o, 0);
    if (!g) return;
    for (std::size_t r = 0; r < n; ++r) {
      double gsum = 0.0;
      for (std::size_t j = 0; j < m; ++j) gsum += o.grad[r * m + j];
      for (std::size_t j = 0; j < m; ++j) (*g)[r * m + j] += o.grad[r * m + j] - std::exp(o.data[r * m + j]) * gsum;
    }
  });
}

/// Adds bias[c] to every element of channel c, where channels are axis 1 of x.
inline Tensor bias_add(const Tensor& x, const Tensor& bias) {
  if (x.ndim() < 2 || bias.ndim() != 1 || bias.dim(0) != x.dim(1)) {
    throw std::invalid_argument("bias_add: bias " + shape_str(bias.shape()) + " does not match channels of " +
                                shape_str(x.shape()));
  }
  auto s = detail::split_axis(x.shape(), 1, "bias_add");
  std::vector<double> out(x.data().begin(), x.data().end());
  auto b = bias.data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t c = 0; c < s.extent; ++c)
      for (std::size_t i = 0; i < s.inner; ++i) out[(o * s.extent + c) * s.inner + i] += b[c];
  return make_op("bias_add", x.shape(), std::move(out), {x, bias}, [s](detail::Node& o) {
    if (auto* g = input_grad(o, 0))
      for (std::size_t i = 0; i < o.grad.size(); ++i) (*g)[i] += o.grad[i];
    if (auto* g = input_grad(o, 1))
      for (std::size_t r = 0; r < s.outer; ++r)
        for (std::size_t c = 0; c < s.extent; ++c)
          for (std::size_t i = 0; i < s.inner; ++i) (*g)[c] += o.grad[(r * s.extent + c) * s.inner + i];
  });
}

/**
 * 2-D cross-correlation. input is N x C x H x W, weight is O x C x K x K (square
 * kernels). Implemented as im2col followed by a matrix product per sample.
 */
inline Tensor conv2d(const Tensor& input, const Tensor& weight, std::size_t stride, std::size_t padding) {
  if (input.ndim() != 4) throw std::invalid_argument("conv2d: input must be NCHW, got " + shape_str(input.shape()));
  if (weight.ndim() != 4 || weight.dim(2) != weight.dim(3)) {
    throw std::invalid_argument("conv2d: weight must be O x C x K x K, got " + shape_str(weight.shape()));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t n = input.dim(0), c = input.dim(1), h = input.dim(2), w = input.dim(3);
  const std::size_t oc = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != c) {
    throw std::invalid_argument("conv2d: input has " + std::to_string(c) + " channels but weight expects " +
                                std::to_string(weight.dim(1)));
  }
  if (h + 2 * padding < k || w + 2 * padding < k) {
    throw std::invalid_argument("conv2d: kernel " + std::to_string(k) + " larger than padded input " +
                                shape_str(input.shape()));
  }
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (w + 2 * padding - k) / stride + 1;
  const std::size_t ckk = c * k * k, spatial = oh * ow;

  // cols[n] is (C*K*K) x (OH*OW)
  std::vector<double> cols(n * ckk * spatial, 0.0);
  auto in = input.data();
  for (std::size_t b = 0; b < n; ++b) {
    double* col = cols.data() + b * ckk * spatial;
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t ky = 0; ky < k; ++ky)
        for (std::size_t kx = 0; kx < k; ++kx) {
          double* dst = col + ((ch * k + ky) * k + kx) * spatial;
          const double* src = in.data() + (b * c + ch) * h * w;
          for (std::size_t y = 0; y < oh; ++y) {
            auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(padding);
            if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
            for (std::size_t x = 0; x < ow; ++x) {
              auto ix = static_cast<std::ptrdiff_t>(x * stride + kx) - static_cast<std::ptrdiff_t>(padding);
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              dst[y * ow + x] = src[iy * static_cast<std::ptrdiff_t>(w) + ix];
            }
          }
        }
  }
  std::vector<double> out(n * oc * spatial, 0.0);
  for (std::size_t b = 0; b < n; ++b)
    detail::gemm_nn(oc, spatial, ckk, weight.data().data(), cols.data() + b * ckk * spatial,
                    out.data() + b * oc * spatial);

  return make_op("conv2d", {n, oc, oh, ow}, std::move(out), {input, weight},
                 [=, cols = std::move(cols)](detail::Node& o) {
                   const auto& wv = o.inputs[1]->data;
                   if (auto* gw = input_grad(o, 1)) {
                     for (std::size_t b = 0; b < n; ++b)
                       detail::gemm_nt(oc, ckk, spatial, o.grad.data() + b * oc * spatial,
                                       cols.data() + b * ckk * spatial, gw->data());
                   }
                   auto* gx = input_grad(o, 0);
                   if (!gx) return;
                   std::vector<double> dcol(ckk * spatial);
                   for (std::size_t b = 0; b < n; ++b) {
                     std::fill(dcol.begin(), dcol.end(), 0.0);
                     detail::gemm_tn(ckk, spatial, oc, wv.data(), o.grad.data() + b * oc * spatial, dcol.data());
                     for (std::size_t ch = 0; ch < c; ++ch)
                       for (std::size_t ky = 0; ky < k; ++ky)
                         for (std::size_t kx = 0; kx < k; ++kx) {
                           const double* src = dcol.data() + ((ch * k + ky) * k + kx) * spatial;
                           double* dst = gx->data() + (b * c + ch) * h * w;
                           for (std::size_t y = 0; y < oh; ++y) {
                             auto iy = static_cast<std::ptrdiff_t>(y * stride + ky) - static_cast<std::ptrdiff_t>(padding);
                             if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
                             for (std::size_t x = 0; x < ow; ++x) {
                               auto ix = static_cast<std::ptrdiff_t>(x * stride + kx) - static_cast<std::ptrdiff_t>(padding);
                               if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
                               dst[iy * static_cast<std::ptrdiff_t>(w) + ix] += src[y * ow + x];
                             }
                           }
                         }
                   }
                 });
}

}  // namespace cgd
