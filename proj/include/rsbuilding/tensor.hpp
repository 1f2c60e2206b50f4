#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <unordered_set>
#include <utility>
#include <vector>

#include "rsbuilding/errors.hpp"

namespace rsb {

enum class ElemKind { f32, f64 };

inline std::string to_string(ElemKind kind) { return kind == ElemKind::f32 ? "f32" : "f64"; }

inline ElemKind parse_elem_kind(std::string_view text) {
  if (text == "f32") return ElemKind::f32;
  if (text == "f64") return ElemKind::f64;
  throw ConfigError("unknown element kind '" + std::string(text) + "' (expected f32 or f64)");
}

template <typename T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Real T>
constexpr ElemKind elem_kind_of() {
  return std::is_same_v<T, float> ? ElemKind::f32 : ElemKind::f64;
}

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Graph recording switch. Forward passes executed while disabled build no
// backward closures, which is what evaluation and finite differencing want.
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

class NoGradGuard {
 public:
  NoGradGuard() : previous_(grad_mode_flag()) { grad_mode_flag() = false; }
  ~NoGradGuard() { grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

template <Real T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads self.grad and accumulates into the parents' grad buffers.
  std::function<void(Node&)> backward;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <Real T>
void check_finite(const char* op, std::span<const T> values) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw NumericError(std::string("non-finite value produced by ") + op + " at flat index " +
                         std::to_string(i));
    }
  }
}

}  // namespace detail

// Dense row-major tensor handle with an optional gradient slot. Copies of a
// Tensor share the same storage (reference semantics, like a parameter
// handle); use clone() for an independent copy.
template <Real T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<detail::Node<T>>()) {
    if (rsb::numel(shape) != data.size()) {
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    }
    detail::check_finite<T>("tensor construction", data);
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = rsb::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    const auto n = rsb::numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, value), requires_grad);
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor(Shape{}, std::vector<T>{value}, requires_grad);
  }

  static Tensor from_node(NodePtr node) {
    Tensor t;
    t.node_ = std::move(node);
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const { return shape().at(axis); }
  std::size_t numel() const { return node().data.size(); }
  static constexpr ElemKind elem_kind() { return elem_kind_of<T>(); }

  std::span<const T> data() const { return node().data; }
  // Direct write access; only for leaves (parameters, optimizer updates).
  std::span<T> mutable_data() { return node().data; }
  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node().data[0];
  }
  T operator[](std::size_t i) const { return node().data[i]; }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool value) { node().requires_grad = value; }
  bool has_grad() const { return !node().grad.empty(); }
  std::span<const T> grad() const { return node().grad; }
  std::span<T> mutable_grad() { return node().grad_buffer(); }
  void zero_grad() { std::fill(node().grad.begin(), node().grad.end(), T(0)); }

  // New leaf holding a copy of the values.
  Tensor clone() const { return Tensor(shape(), node().data, requires_grad()); }
  Tensor detach() const { return Tensor(shape(), node().data, false); }

  const void* identity() const { return node_.get(); }
  detail::Node<T>& node() const {
    if (!node_) throw ContractError("use of an undefined tensor");
    return *node_;
  }
  const NodePtr& node_ptr() const { return node_; }

  // Reverse-mode pass from a scalar. Leaf gradients accumulate (the caller
  // zeroes them between steps); intermediate gradients are reset first.
  void backward() const;

 private:
  NodePtr node_;
};

// Builds the output of an operation. The backward closure is recorded only
// when grad mode is on and some input requires a gradient.
template <Real T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      std::initializer_list<const Tensor<T>*> inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  detail::check_finite<T>(op, data);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_mode_flag()) {
    bool any = false;
    for (const auto* in : inputs) any = any || in->requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto* in : inputs) node->parents.push_back(in->node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

template <Real T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data,
                      const std::vector<Tensor<T>>& inputs,
                      std::function<void(detail::Node<T>&)> backward) {
  detail::check_finite<T>(op, data);
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->op = op;
  if (grad_mode_flag()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      node->requires_grad = true;
      for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
      node->backward = std::move(backward);
    }
  }
  return Tensor<T>::from_node(std::move(node));
}

template <Real T>
void Tensor<T>::backward() const {
  auto& root = node();
  if (root.data.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) return;

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(&root, 0);
  visited.insert(&root);
  while (!stack.empty()) {
    auto& [current, next_parent] = stack.back();
    if (next_parent < current->parents.size()) {
      auto* parent = current->parents[next_parent++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(current);
      stack.pop_back();
    }
  }

  for (auto* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), T(0));
  }
  root.grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    auto* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// Accumulation target for parent i of an op node, or nullptr if that parent
// does not take gradients.
template <Real T>
std::vector<T>* parent_grad(detail::Node<T>& self, std::size_t i) {
  auto& p = *self.parents[i];
  return p.requires_grad ? &p.grad_buffer() : nullptr;
}

}  // namespace rsb
