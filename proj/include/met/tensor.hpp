#pragma once

// Dense row-major double tensors with a reverse-mode tape.
//
// A Tensor is a shared handle to a graph node. Copies alias the same node;
// use clone() for an independent leaf. Ops on inputs that require grad record
// their inputs and a backward closure on the output node; node sequence
// numbers are assigned at creation, so sorting by them yields a topological
// order of the recorded computation.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "met/errors.hpp"

namespace met {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

namespace detail {

inline std::atomic<std::uint64_t>& sequence_counter() {
  static std::atomic<std::uint64_t> counter{0};
  return counter;
}

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until touched by backward
  bool requires_grad = false;
  std::uint64_t seq = 0;
  std::string op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

}  // namespace detail

/// Disables tape recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false) {
    for (auto e : shape)
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    if (shape_numel(shape) != values.size())
      throw DimensionError("tensor data length " + std::to_string(values.size()) +
                           " does not match shape " + shape_str(shape));
    node_ = std::make_shared<detail::Node>();
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
    node_->seq = detail::sequence_counter()++;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor filled(Shape shape, double v, bool requires_grad = false) {
    auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor({1}, {v}, requires_grad);
  }
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false) {
    return Tensor({rows, cols}, std::move(values), requires_grad);
  }
  static Tensor identity(std::size_t n) {
    auto t = zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.node_->value[i * n + i] = 1.0;
    return t;
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }
  /// Leading extent for rank-2, 1 for vectors.
  std::size_t rows() const { return rank() >= 2 ? numel() / cols() : 1; }
  /// Trailing extent.
  std::size_t cols() const { return node_->shape.back(); }

  std::span<const double> data() const { return node_->value; }
  /// Writable view for leaf parameters (optimizer updates, initializers).
  std::span<double> mutable_data() { return node_->value; }
  double operator[](std::size_t i) const { return node_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return node_->value[r * cols() + c]; }
  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  std::span<const double> grad() const { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  const std::string& op() const { return node_->op; }
  std::uint64_t id() const { return node_->seq; }

  /// Independent leaf with copied values.
  Tensor clone(bool requires_grad = false) const {
    return Tensor(shape(), node_->value, requires_grad);
  }

  std::shared_ptr<detail::Node> node() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

/// A named model tensor. Frozen parameters never receive gradients.
struct Parameter {
  std::string name;
  Tensor tensor;
  bool trainable = false;
};

namespace detail {

inline bool recording() { return !grad_disabled(); }

/// Creates an op output. Inputs and the backward closure are only kept when
/// recording and some input requires grad.
inline Tensor make_result(Shape shape, std::vector<double> values, std::string op,
                          std::vector<Tensor> inputs, std::function<void(Node&)> backward) {
  bool needs = false;
  if (recording())
    for (const auto& t : inputs) needs = needs || t.requires_grad();
  Tensor out(std::move(shape), std::move(values), needs);
  auto node = out.node();
  node->op = std::move(op);
  if (needs) {
    for (const auto& t : inputs) node->inputs.push_back(t.node());
    node->backward = std::move(backward);
  }
  return out;
}

}  // namespace detail

/// One entry of the recorded computation.
struct OpRecord {
  std::string op;
  std::vector<std::uint64_t> inputs;
  std::uint64_t output;
};

/// The recorded computation reaching `root`, in topological (creation) order.
inline std::vector<OpRecord> computation_record(const Tensor& root) {
  std::vector<detail::Node*> nodes;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{root.node().get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    nodes.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->seq < b->seq; });
  std::vector<OpRecord> out;
  for (auto* n : nodes) {
    if (n->inputs.empty()) continue;
    OpRecord r{n->op, {}, n->seq};
    for (auto& in : n->inputs) r.inputs.push_back(in->seq);
    out.push_back(std::move(r));
  }
  return out;
}

/// Reverse accumulation from a scalar. Leaf gradients accumulate across calls
/// until zero_grad(); every recorded op is visited exactly once, in reverse
/// creation order.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1)
    throw DimensionError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) return;

  std::vector<detail::Node*> nodes;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{loss.node().get()};
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || !seen.insert(n).second) continue;
    nodes.push_back(n);
    for (auto& in : n->inputs) stack.push_back(in.get());
  }
  std::sort(nodes.begin(), nodes.end(), [](auto* a, auto* b) { return a->seq > b->seq; });

  for (auto* n : nodes)
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;

  for (auto* n : nodes) {
    if (!n->backward) continue;
    for (auto& in : n->inputs)
      if (in->requires_grad) in->ensure_grad();
    n->backward(*n);
  }
  // interior gradients are scratch
  for (auto* n : nodes)
    if (n->backward && n != loss.node().get()) std::vector<double>().swap(n->grad);
}

/// Runs backward and returns gradients of the trainable parameters reached.
/// Frozen parameters never appear in the result.
inline std::map<std::string, Tensor> backward(const Tensor& loss, std::span<Parameter> params) {
  for (auto& p : params) p.tensor.zero_grad();
  backward(loss);
  std::map<std::string, Tensor> out;
  for (auto& p : params) {
    if (!p.trainable || !p.tensor.has_grad()) continue;
    auto g = p.tensor.grad();
    out.emplace(p.name, Tensor(p.tensor.shape(), std::vector<double>(g.begin(), g.end())));
  }
  return out;
}

}  // namespace met
