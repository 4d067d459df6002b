#pragma once

// Dense row-major tensors with a tape-free reverse-mode autodiff graph.
//
// Every op eagerly computes its value and, when any input requires a
// gradient, records its inputs plus a closure that pushes the output
// gradient back into them. BasicTensor::backward() walks the recorded DAG
// in reverse topological order. Storage type is a template parameter so the
// same model code can run in float for training and double for gradient
// verification; reductions always accumulate in double.

#include <algorithm>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "owt/errors.hpp"

namespace owt {

using Shape = std::vector<std::size_t>;
using Accum = double;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // allocated iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this node's grad and accumulates into inputs' grads.
  std::function<void(Node&)> backward;
};

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
class BasicTensor {
 public:
  using value_type = T;
  using NodeType = detail::Node<T>;
  using NodePtr = std::shared_ptr<NodeType>;
  using BackwardFn = std::function<void(NodeType&)>;

  BasicTensor() = default;

  static BasicTensor from_data(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (shape.empty()) shape = {1};
    for (std::size_t extent : shape) {
      if (extent == 0) throw DimensionError("tensor extents must be positive, got " + shape_string(shape));
    }
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_string(shape) + " needs " +
                           std::to_string(shape_numel(shape)) + " values, got " +
                           std::to_string(data.size()));
    }
    auto node = std::make_shared<NodeType>();
    node->shape = std::move(shape);
    node->value = std::move(data);
    node->requires_grad = requires_grad;
    if (requires_grad) node->grad.assign(node->value.size(), T{0});
    return BasicTensor(std::move(node));
  }

  static BasicTensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, T{0}), requires_grad);
  }

  static BasicTensor full(Shape shape, T fill, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return from_data(std::move(shape), std::vector<T>(n, fill), requires_grad);
  }

  static BasicTensor scalar(T v, bool requires_grad = false) {
    return from_data({1}, {v}, requires_grad);
  }

  // Builds an op result. Graph edges are recorded only when grad mode is on
  // and at least one input participates in differentiation.
  static BasicTensor make_result(Shape shape, std::vector<T> value,
                                 std::initializer_list<BasicTensor> inputs, BackwardFn backward) {
    return make_result(std::move(shape), std::move(value),
                       std::vector<BasicTensor>(inputs), std::move(backward));
  }

  static BasicTensor make_result(Shape shape, std::vector<T> value,
                                 const std::vector<BasicTensor>& inputs, BackwardFn backward) {
    auto node = std::make_shared<NodeType>();
    node->shape = std::move(shape);
    node->value = std::move(value);
    bool needs = false;
    if (grad_enabled()) {
      for (const auto& in : inputs) needs = needs || in.requires_grad();
    }
    if (needs) {
      node->requires_grad = true;
      node->grad.assign(node->value.size(), T{0});
      node->inputs.reserve(inputs.size());
      for (const auto& in : inputs) node->inputs.push_back(in.node_);
      node->backward = std::move(backward);
    }
    return BasicTensor(std::move(node));
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return node_->shape.at(axis); }
  std::size_t numel() const { return node_->value.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return rank() >= 2 ? node_->shape[1] : 1; }

  std::span<const T> data() const { return node_->value; }
  // Direct writes are meant for leaves (parameters, inputs) between graph builds.
  std::span<T> mutable_data() { return node_->value; }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return !node_->backward; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_string(shape()));
    return node_->value[0];
  }
  T at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }

  void zero_grad() {
    std::fill(node_->grad.begin(), node_->grad.end(), T{0});
  }

  // Value copy with no graph history.
  BasicTensor detach(bool requires_grad = false) const {
    return from_data(shape(), node_->value, requires_grad);
  }

  // Accumulates d(this)/d(leaf) into every reachable leaf that requires grad.
  // Intermediate grads are reset first, so repeated calls add up only at leaves.
  void backward() const {
    if (numel() != 1) {
      throw ContractError("backward() needs a scalar root, got shape " + shape_string(shape()));
    }
    if (!requires_grad()) throw ContractError("backward() root does not require grad");

    std::vector<NodeType*> order;
    std::unordered_set<NodeType*> seen;
    std::vector<std::pair<NodeType*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->inputs.size()) {
        NodeType* child = node->inputs[next++].get();
        if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }

    for (NodeType* n : order) {
      if (n->backward) std::fill(n->grad.begin(), n->grad.end(), T{0});
    }
    node_->grad[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      if ((*it)->backward) (*it)->backward(**it);
    }
  }

  const NodePtr& node() const { return node_; }

 private:
  explicit BasicTensor(NodePtr node) : node_(std::move(node)) {}

  NodePtr node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

}  // namespace owt
