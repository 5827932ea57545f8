#pragma once

// Dense tensors that record a reverse-mode differentiation graph.
//
// A Tensor is a cheap handle onto a shared Node. Ops build new Nodes whose
// backward closures capture exactly the values they need (the op record);
// backward() walks the graph once in reverse topological order.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "cstnet/errors.hpp"

namespace cstnet {

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  scale,
  sigmoid,
  relu,
  reshape,
  permute,
  matmul,
  softmax,
  conv2d,
  adaptive_avg_pool2d,
  batch_norm,
  mean_axis,
  sum,
  standardize,
  ncc_volume,
  pairwise_distances,
  batch_hard_triplet,
  label_smooth_ce,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::relu: return "relu";
    case OpKind::reshape: return "reshape";
    case OpKind::permute: return "permute";
    case OpKind::matmul: return "matmul";
    case OpKind::softmax: return "softmax";
    case OpKind::conv2d: return "conv2d";
    case OpKind::adaptive_avg_pool2d: return "adaptive_avg_pool2d";
    case OpKind::batch_norm: return "batch_norm";
    case OpKind::mean_axis: return "mean_axis";
    case OpKind::sum: return "sum";
    case OpKind::standardize: return "standardize";
    case OpKind::ncc_volume: return "ncc_volume";
    case OpKind::pairwise_distances: return "pairwise_distances";
    case OpKind::batch_hard_triplet: return "batch_hard_triplet";
    case OpKind::label_smooth_ce: return "label_smooth_ce";
  }
  return "?";
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on this thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  OpKind kind = OpKind::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into the inputs' grads.
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return kind == OpKind::leaf; }

  std::vector<T>& ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<Node<T>>;

  Tensor() = default;
  explicit Tensor(NodePtr node) : node_(std::move(node)) {}

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(values.size()) + " values");
    node_ = std::make_shared<Node<T>>();
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(shape_numel(shape), T(0)), requires_grad);
  }
  static Tensor ones(const Shape& shape, bool requires_grad = false) {
    return full(shape, T(1), requires_grad);
  }
  static Tensor full(const Shape& shape, T value, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(shape_numel(shape), value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  template <typename Rng>
  static Tensor uniform(const Shape& shape, T lo, T hi, Rng& rng, bool requires_grad = false) {
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor(shape, std::move(v), requires_grad);
  }
  template <typename Rng>
  static Tensor randn(const Shape& shape, Rng& rng, T stddev = T(1), bool requires_grad = false) {
    std::normal_distribution<double> dist(0.0, static_cast<double>(stddev));
    std::vector<T> v(shape_numel(shape));
    for (auto& x : v) x = static_cast<T>(dist(rng));
    return Tensor(shape, std::move(v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }

  std::span<const T> data() const { return node_->data; }
  // Mutable access is for leaves (parameters, inputs); mutating an interior
  // node invalidates its consumers' saved values.
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& values() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }
  bool has_grad() const { return node_->grad.size() == node_->data.size(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T operator[](std::size_t i) const { return node_->data[i]; }

  OpKind kind() const { return node_->kind; }
  const NodePtr& node() const { return node_; }

  // Fresh leaf sharing no graph history; values are copied.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  void backward() const;

 private:
  NodePtr node_;
};

// Builds the result node of an op. The backward closure is recorded only when
// grad mode is on and at least one input participates in differentiation.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> data, OpKind kind,
                      std::initializer_list<Tensor<T>> inputs,
                      std::function<void(Node<T>&)> backward_fn) {
  Tensor<T> out(std::move(shape), std::move(data));
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || in.requires_grad();
  if (!any) return out;
  auto& node = *out.node();
  node.requires_grad = true;
  node.kind = kind;
  for (const auto& in : inputs) node.inputs.push_back(in.node());
  node.backward_fn = std::move(backward_fn);
  return out;
}

template <typename T>
void Tensor<T>::backward() const {
  if (numel() != 1)
    throw ContractError("backward() needs a scalar loss, got shape " + shape_str(shape()));
  if (!requires_grad()) throw ContractError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node<T>* child = n->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  // Interior grads are per-pass scratch; leaves accumulate across calls.
  for (auto* n : order)
    if (!n->is_leaf()) n->grad.assign(n->data.size(), T(0));
  node_->ensure_grad()[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->is_leaf() || !n->backward_fn) continue;
    n->backward_fn(*n);
  }
  for (auto* n : order)
    if (!n->is_leaf()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
}

using Tensord = Tensor<double>;
using Tensorf = Tensor<float>;

}  // namespace cstnet
