// Copyright 2026 The advmlm Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//    http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.
// ==============================================================================

// Dense tensors with a reverse-mode differentiation graph.
//
// A Tensor is a shared handle to a graph node. Every node gets a monotonically
// increasing id when it is created, so inputs always carry smaller ids than
// the nodes computed from them. backward() replays the reachable sub-graph in
// strictly decreasing id order.
//
// Leaves accumulate gradients across backward() calls until zero_grad().
// Intermediate gradients are scratch and are released after each pass.

#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

namespace advmlm {

/// Raised when a caller breaks a shape or mode precondition.
class ContractViolation : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised when a NaN/Inf reaches a check barrier or a differentiated op
/// leaves its domain.
class NumericFault : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline void require(bool cond, std::string_view what) {
  if (!cond) throw ContractViolation(std::string(what));
}

namespace detail {

inline std::uint64_t next_node_id() {
  thread_local std::uint64_t counter = 0;
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

template <class S>
struct Node {
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;

  Shape shape;
  Array value;
  Array grad;
  bool requires_grad = false;
  std::uint64_t id = next_node_id();
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs that require grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return !backward; }

  Array& grad_buffer() {
    if (grad.size() != value.size()) grad = Array::Zero(value.size());
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : saved_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = saved_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

template <class S>
class Tensor {
 public:
  using Scalar = S;
  using Array = Eigen::Array<S, Eigen::Dynamic, 1>;
  using NodePtr = std::shared_ptr<detail::Node<S>>;

  Tensor() = default;

  Tensor(Shape shape, Array value, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<S>>()) {
    require(numel(shape) == value.size(),
            "tensor: product(shape) " + shape_str(shape) + " != data length " +
                std::to_string(value.size()));
    node_->shape = std::move(shape);
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }

  Tensor(Shape shape, std::initializer_list<S> values, bool requires_grad = false)
      : Tensor(std::move(shape), to_array(values), requires_grad) {}

  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Zero(n), requires_grad);
  }
  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), S(1), requires_grad);
  }
  static Tensor full(Shape shape, S v, bool requires_grad = false) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, v), requires_grad);
  }
  static Tensor scalar(S v, bool requires_grad = false) {
    return Tensor(Shape{}, Array::Constant(1, v), requires_grad);
  }
  static Tensor from_vector(Shape shape, const std::vector<S>& v, bool requires_grad = false) {
    Array a(static_cast<Index>(v.size()));
    for (std::size_t i = 0; i < v.size(); ++i) a[static_cast<Index>(i)] = v[i];
    return Tensor(std::move(shape), std::move(a), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const NodePtr& node() const { return node_; }
  std::uint64_t id() const { return node_->id; }
  const char* op_name() const { return node_->op; }

  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  Index size() const { return node_->value.size(); }
  Index dim(int d) const { return node_->shape[static_cast<std::size_t>(normalize_dim(d))]; }
  int normalize_dim(int d) const {
    const int r = rank();
    const int nd = d < 0 ? d + r : d;
    require(nd >= 0 && nd < r, "tensor: dim " + std::to_string(d) + " out of range for rank " +
                                   std::to_string(r));
    return nd;
  }

  const Array& value() const { return node_->value; }
  /// In-place access for optimizers and initializers. Leaves only.
  Array& mutable_value() {
    require(node_->is_leaf(), "tensor: mutable_value on a non-leaf");
    return node_->value;
  }
  const S* data() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    require(node_->is_leaf(), "tensor: set_requires_grad on a non-leaf");
    node_->requires_grad = on;
  }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const Array& grad() const {
    require(has_grad(), "tensor: no gradient has been accumulated");
    return node_->grad;
  }
  /// Gradient or zeros when nothing has been accumulated yet.
  Array grad_or_zero() const { return has_grad() ? node_->grad : Array::Zero(size()); }
  void zero_grad() { node_->grad = Array(); }

  S item() const {
    require(size() == 1, "tensor: item() on a tensor with " + std::to_string(size()) + " elements");
    return node_->value[0];
  }

  S at(std::initializer_list<Index> idx) const { return node_->value[flat_index(idx)]; }

  Index flat_index(std::initializer_list<Index> idx) const {
    require(static_cast<int>(idx.size()) == rank(), "tensor: index rank mismatch");
    Index flat = 0;
    std::size_t d = 0;
    for (Index i : idx) {
      require(i >= 0 && i < node_->shape[d], "tensor: index out of range");
      flat = flat * node_->shape[d] + i;
      ++d;
    }
    return flat;
  }

  /// Accumulates dLoss/dLeaf into every reachable leaf that requires grad.
  void backward() const;

 private:
  static Array to_array(std::initializer_list<S> values) {
    Array a(static_cast<Index>(values.size()));
    Index i = 0;
    for (S v : values) a[i++] = v;
    return a;
  }

  NodePtr node_;
};

/// Builds an op result. Records a graph node only when grad mode is on and
/// some input requires grad; otherwise the result is a constant.
template <class S>
Tensor<S> make_result(Shape shape, typename Tensor<S>::Array value,
                      std::initializer_list<Tensor<S>> inputs, const char* op,
                      std::function<void(detail::Node<S>&)> backward) {
  Tensor<S> out(std::move(shape), std::move(value));
  bool any = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

template <class S>
Tensor<S> make_result(Shape shape, typename Tensor<S>::Array value,
                      const std::vector<Tensor<S>>& inputs, const char* op,
                      std::function<void(detail::Node<S>&)> backward) {
  Tensor<S> out(std::move(shape), std::move(value));
  bool any = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) any = any || in.requires_grad();
  }
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.op = op;
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward = std::move(backward);
  return out;
}

template <class S>
void Tensor<S>::backward() const {
  require(defined(), "backward: undefined tensor");
  require(size() == 1, "backward: loss must be a scalar, got shape " + shape_str(shape()));
  if (!node_->requires_grad) return;

  using NodeT = detail::Node<S>;
  std::vector<NodeT*> order;
  std::unordered_set<NodeT*> seen;
  std::vector<NodeT*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    NodeT* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(), [](const NodeT* a, const NodeT* b) { return a->id > b->id; });

  for (NodeT* n : order) {
    if (!n->is_leaf()) n->grad = Array::Zero(n->value.size());
  }
  node_->grad_buffer()[0] += S(1);
  for (NodeT* n : order) {
    if (!n->is_leaf()) n->backward(*n);
  }
  for (NodeT* n : order) {
    if (!n->is_leaf()) n->grad = Array();
  }
}

template <class S>
bool all_finite(const Eigen::Array<S, Eigen::Dynamic, 1>& a) {
  return a.isFinite().all();
}

/// Check barrier: throws NumericFault when the tensor holds NaN/Inf.
template <class S>
void check_finite(const Tensor<S>& t, std::string_view where) {
  if (!all_finite<S>(t.value())) throw NumericFault("non-finite value at " + std::string(where));
}

template <class S>
void check_finite_grad(const Tensor<S>& t, std::string_view where) {
  if (t.has_grad() && !all_finite<S>(t.grad()))
    throw NumericFault("non-finite gradient at " + std::string(where));
}

}  // namespace advmlm
