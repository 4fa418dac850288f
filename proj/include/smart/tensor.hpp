#pragma once

// Dense row-major float64 tensors with a dynamic reverse-mode tape.
//
// A Tensor is a shared handle: copying it aliases the same storage, matching
// how parameters are threaded through the model. Use clone() for a deep copy.
// Differentiable operations live in ops.hpp; this header only holds storage,
// the grad-mode switches and backward().

#include <cmath>
#include <cstddef>
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

namespace smart {

using Shape = std::vector<std::size_t>;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

namespace detail {

struct TensorImpl;

struct GradNode {
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  // Reads out.grad and accumulates into the inputs' grad buffers.
  std::function<void(TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool graph_consumed = false;
  std::shared_ptr<GradNode> node;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

inline bool& validation_mode() {
  static bool enabled = false;
  return enabled;
}

}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode(); }

/// While alive, operations record no graph (teacher forward, evaluation).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Validation mode makes every operation reject non-finite outputs.
inline void set_validation(bool enabled) { detail::validation_mode() = enabled; }
inline bool validation_enabled() { return detail::validation_mode(); }

class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    impl_->data.assign(smart::numel(shape), fill);
    impl_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<double> values)
      : impl_(std::make_shared<detail::TensorImpl>()) {
    if (smart::numel(shape) != values.size()) {
      throw ShapeError("tensor shape " + to_string(shape) + " holds " +
                       std::to_string(smart::numel(shape)) + " values, got " +
                       std::to_string(values.size()));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(values);
  }

  Tensor(Shape shape, std::initializer_list<double> values)
      : Tensor(std::move(shape), std::vector<double>(values)) {}

  static Tensor scalar(double value) { return Tensor(Shape{}, std::vector<double>{value}); }

  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t dim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }

  double item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::span<const double> grad() const { return impl_->grad; }
  std::span<double> mutable_grad() { return impl_->grad_buffer(); }
  void zero_grad() { impl_->grad.clear(); }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool value) {
    impl_->requires_grad = value;
    return *this;
  }

  /// Deep copy of the values; the copy is a detached leaf.
  Tensor clone() const {
    Tensor out(impl_->shape, impl_->data);
    out.impl_->requires_grad = impl_->requires_grad;
    return out;
  }

  /// Detached copy that never requires grad.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

namespace detail {

inline void check_finite(const TensorImpl& t, const char* op) {
  for (double v : t.data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
}

/// Wraps freshly computed values into a tensor and, when any input tracks
/// gradients, attaches the backward closure.
inline Tensor make_result(const char* op, Shape shape, std::vector<double> values,
                          std::initializer_list<Tensor> inputs,
                          std::function<void(TensorImpl&)> backward) {
  Tensor out(std::move(shape), std::move(values));
  if (validation_enabled()) check_finite(*out.impl(), op);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || (in.defined() && in.requires_grad());
  if (!any) return out;
  auto node = std::make_shared<GradNode>();
  for (const auto& in : inputs) {
    if (in.defined()) node->inputs.push_back(in.impl());
  }
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  out.impl()->requires_grad = true;
  return out;
}

inline bool wants_grad(const std::shared_ptr<TensorImpl>& t) { return t && t->requires_grad; }

}  // namespace detail

/// Reverse pass from a scalar loss. Populates grad on every leaf that requires
/// it and releases the graph; a second call on the same loss is an error.
inline void backward(const Tensor& loss) {
  if (!loss.defined()) throw GraphError("backward on undefined tensor");
  const auto& root = loss.impl();
  if (root->data.size() != 1) {
    throw ShapeError("backward requires a scalar loss, got shape " + to_string(root->shape));
  }
  if (root->graph_consumed) {
    throw GraphError("graph already consumed; re-run the forward pass before backward");
  }
  root->graph_consumed = true;
  if (!root->requires_grad) return;

  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack{{root.get(), 0}};
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [impl, next] = stack.back();
    if (impl->node && next < impl->node->inputs.size()) {
      detail::TensorImpl* child = impl->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(impl);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* impl = *it;
    if (impl->node && !impl->grad.empty()) impl->node->backward(*impl);
  }
  for (detail::TensorImpl* impl : order) {
    if (impl->node) {
      impl->node.reset();
      impl->grad.clear();
      impl->grad.shrink_to_fit();
    }
  }
}

}  // namespace smart
