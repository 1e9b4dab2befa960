#pragma once

// Dense tensors with tape-free reverse-mode differentiation.
//
// Every operation that consumes a tensor requiring gradients records a node
// holding its inputs and a backward closure. Nodes are ordered by a global
// creation counter, so sorting the reachable set by that counter (descending)
// is a valid reverse topological order; backward() relies on this.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace umamba {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    os << (i ? "x" : "") << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

inline std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Multiply-accumulate instrumentation. Operations add their MAC count here
// in the forward pass; the counter is per thread.
inline std::uint64_t& mac_counter() {
  thread_local std::uint64_t count = 0;
  return count;
}

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    if (values.size() != numel(shape)) {
      throw ShapeError("tensor data length " + std::to_string(values.size()) +
                       " does not match shape " + umamba::to_string(shape));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->seq = detail::next_seq();
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor filled(Shape shape, double value, bool requires_grad = false) {
    const auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return checked().shape; }
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t i) const { return shape().at(i); }
  std::size_t size() const { return checked().value.size(); }

  std::span<const double> values() const { return checked().value; }
  // Direct access for optimizers and initializers; bypasses the graph.
  std::span<double> mutable_values() { return checked().value; }
  double item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + umamba::to_string(shape()));
    return checked().value[0];
  }
  double at(std::size_t row, std::size_t col) const {
    return checked().value[row * dim(1) + col];
  }

  bool requires_grad() const { return defined() && node_->requires_grad; }
  void set_requires_grad(bool on) { checked().requires_grad = on; }

  // Empty span when no gradient has reached this tensor.
  std::span<const double> grad() const { return checked().grad; }
  std::span<double> mutable_grad() { return checked().ensure_grad(); }
  void zero_grad() { checked().grad.clear(); }

  // Copy of the values without graph history.
  Tensor detach() const { return Tensor(shape(), checked().value, false); }

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  detail::Node& checked() const {
    if (!node_) throw std::logic_error("access to an undefined tensor");
    return *node_;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (!grad_mode()) return false;
  for (const Tensor* t : inputs) {
    if (t && t->requires_grad()) return true;
  }
  return false;
}

// Builds an op result. `backward` receives the output node (whose grad is
// populated) and must accumulate into the grads of the inputs that need it.
template <class Backward>
Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs, Backward&& backward) {
  Tensor out(std::move(shape), std::move(values));
  if (should_record(inputs)) {
    Node& node = *out.node();
    node.requires_grad = true;
    for (const Tensor* t : inputs) {
      if (t && t->requires_grad()) node.parents.push_back(t->node());
    }
    node.backward = std::forward<Backward>(backward);
  }
  return out;
}

// Grad buffer of an input if it participates in differentiation, else null.
inline std::vector<double>* grad_of(const Tensor& t) {
  if (!t.defined() || !t.requires_grad()) return nullptr;
  return &t.node()->ensure_grad();
}

}  // namespace detail

// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate across
// calls; interior graph structure is released afterwards.
inline void backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw ShapeError("backward requires a scalar loss");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward on a tensor that does not require grad");
  }
  // Owning references keep every node alive while the graph is released.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::shared_ptr<detail::Node>> stack{loss.node()};
  while (!stack.empty()) {
    std::shared_ptr<detail::Node> n = std::move(stack.back());
    stack.pop_back();
    if (!seen.insert(n.get()).second) continue;
    for (const auto& p : n->parents) stack.push_back(p);
    order.push_back(std::move(n));
  }
  std::sort(order.begin(), order.end(), [](const auto& a, const auto& b) { return a->seq > b->seq; });

  loss.node()->ensure_grad()[0] += 1.0;
  for (const auto& n : order) {
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
  for (const auto& n : order) {
    if (n->backward) {
      n->backward = nullptr;
      n->parents.clear();
    }
  }
}

}  // namespace umamba
