#pragma once

// Dense rank-5 tensors (batch, channel, depth, height, width) with a recorded
// graph for reverse-mode differentiation.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tcip/error.hpp"

namespace tcip {

using Index = std::int64_t;

struct Shape {
  std::array<Index, 5> dims{1, 1, 1, 1, 1};

  constexpr Shape() = default;
  constexpr Shape(Index n, Index c, Index d, Index h, Index w) : dims{n, c, d, h, w} {}

  constexpr Index n() const { return dims[0]; }
  constexpr Index c() const { return dims[1]; }
  constexpr Index d() const { return dims[2]; }
  constexpr Index h() const { return dims[3]; }
  constexpr Index w() const { return dims[4]; }
  constexpr Index spatial() const { return dims[2] * dims[3] * dims[4]; }
  constexpr Index numel() const { return dims[0] * dims[1] * spatial(); }

  constexpr Index offset(Index in, Index ic, Index iz, Index iy, Index ix) const {
    return (((in * dims[1] + ic) * dims[2] + iz) * dims[3] + iy) * dims[4] + ix;
  }

  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < 5; ++i) {
      if (i) s += ",";
      s += std::to_string(dims[i]);
    }
    return s + ")";
  }
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents' grads.
  std::function<void(Node&)> backward_fn;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// True while operations record the graph needed by backward().
inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Disables graph recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(const Shape& shape, double fill = 0.0, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (Index d : shape.dims)
      if (d <= 0) throw ShapeError("tensor dimensions must be positive, got " + shape.str());
    node_->shape = shape;
    node_->value.assign(static_cast<std::size_t>(shape.numel()), fill);
    node_->requires_grad = requires_grad;
  }

  static Tensor from_data(const Shape& shape, std::vector<double> data, bool requires_grad = false) {
    if (static_cast<Index>(data.size()) != shape.numel())
      throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " + shape.str());
    Tensor t(shape, 0.0, requires_grad);
    t.node_->value = std::move(data);
    return t;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor(Shape{}, v, requires_grad); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  Index numel() const { return node_->shape.numel(); }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  const std::vector<double>& values() const { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on non-scalar tensor " + shape().str());
    return node_->value[0];
  }

  double at(Index n, Index c, Index z, Index y, Index x) const {
    return node_->value[static_cast<std::size_t>(shape().offset(n, c, z, y, x))];
  }
  double& at(Index n, Index c, Index z, Index y, Index x) {
    return node_->value[static_cast<std::size_t>(shape().offset(n, c, z, y, x))];
  }

  /// Same values, cut from the graph.
  Tensor detach() const {
    Tensor t(shape());
    t.node_->value = node_->value;
    return t;
  }

  const char* op_name() const { return node_->op; }

  // Graph plumbing used by op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Allocates an op result. Parents are recorded only when one of them needs a
/// gradient and recording is enabled; otherwise backward is never attached.
inline Tensor make_result(const Shape& shape, const char* op, std::initializer_list<const Tensor*> inputs) {
  Tensor out(shape);
  auto& node = *out.node();
  node.op = op;
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor* t : inputs) any = any || (t->defined() && t->requires_grad());
  if (!any) return out;
  node.requires_grad = true;
  // Undefined optional inputs (e.g. a missing bias) keep their slot as null.
  for (const Tensor* t : inputs) node.parents.push_back(t->node());
  return out;
}

inline bool wants_grad(const Node& out, std::size_t parent) {
  return out.parents.size() > parent && out.parents[parent] && out.parents[parent]->requires_grad;
}

}  // namespace detail

/// Propagates d(root)/d(leaf) into every reachable tensor that requires a
/// gradient. Contributions from multiple paths are summed.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.numel() != 1)
    throw ShapeError("backward() requires a scalar root, got " + (root.defined() ? root.shape().str() : "undefined"));
  if (!root.requires_grad()) return;

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* parent = node->parents[next++].get();
      if (parent && parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->ensure_grad()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

inline bool all_finite(std::span<const double> values) {
  return std::all_of(values.begin(), values.end(), [](double v) { return std::isfinite(v); });
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

}  // namespace tcip
