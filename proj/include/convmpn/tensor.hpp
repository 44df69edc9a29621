#pragma once

// Dense row-major tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a cheap handle onto a heap node holding the value buffer, an
// optional gradient buffer, and the closure that pushes gradients to the
// node's parents. backward() on a scalar walks the recorded graph in reverse
// topological order. Values are immutable once an op has produced them; the
// gradient buffers are the only mutable state, owned by one training step at
// a time. Graph recording is single-threaded per step.
//
// T is float in production; double exists for gradient-check tests.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace convmpn {

using Shape = std::vector<std::int64_t>;

inline std::int64_t numel_of(const Shape& s) {
  std::int64_t n = 1;
  for (auto d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ')';
  return os.str();
}

[[noreturn]] inline void op_error(const std::string& op, const std::string& detail) {
  throw std::invalid_argument(op + ": " + detail);
}

// Autodiff recording is per-thread; eval/inference paths disable it.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  bool prev;
  NoGradGuard() : prev(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev; }
};

// Debug-mode finite check: when on, every op output is scanned for NaN/Inf.
struct DebugChecks {
  static bool& finite() {
    static bool on = false;
    return on;
  }
};

template <class T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  bool requires_grad = false;
  std::vector<T> grad;  // empty until first accumulation; same numel as data
  std::vector<std::shared_ptr<TensorNode>> parents;
  std::function<void(TensorNode&)> backprop;

  std::int64_t numel() const { return static_cast<std::int64_t>(data.size()); }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <class T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape) {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->data.assign(static_cast<size_t>(numel_of(shape)), T(0));
    t.node_->shape = std::move(shape);
    return t;
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    for (auto& x : t.node_->data) x = v;
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> data) {
    if (numel_of(shape) != static_cast<std::int64_t>(data.size()))
      op_error("Tensor::from", "data length " + std::to_string(data.size()) +
                                   " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = std::move(shape);
    t.node_->data = std::move(data);
    return t;
  }

  static Tensor scalar(T v) { return from({}, {v}); }

  explicit operator bool() const { return node_ != nullptr; }

  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(size_t i) const { return node_->shape[i]; }
  size_t rank() const { return node_->shape.size(); }
  std::int64_t numel() const { return node_->numel(); }

  T* data() { return node_->data.data(); }
  const T* data() const { return node_->data.data(); }
  std::vector<T>& vec() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T item() const {
    if (numel() != 1) op_error("item", "tensor has " + std::to_string(numel()) + " elements");
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    node_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  std::vector<T>& grad() { return node_->ensure_grad(); }
  const std::vector<T>& grad_view() const { return node_->grad; }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
  }

  // Drops graph history; shares nothing with the source.
  Tensor detach() const {
    Tensor t;
    t.node_ = std::make_shared<TensorNode<T>>();
    t.node_->shape = node_->shape;
    t.node_->data = node_->data;
    return t;
  }

  // Reverse-mode sweep from a scalar. Leaf grads accumulate across repeated
  // calls; interior-node grads are scratch and reset on every sweep.
  void backward() const {
    if (numel() != 1) op_error("backward", "loss must be a scalar, got " + shape_str(shape()));
    if (!node_->requires_grad)
      op_error("backward", "loss does not depend on any tensor requiring gradients");

    std::vector<TensorNode<T>*> order;
    topo_sort(node_.get(), order);
    for (auto* n : order)
      if (n->backprop && !n->grad.empty()) std::fill(n->grad.begin(), n->grad.end(), T(0));
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      TensorNode<T>* n = *it;
      if (n->backprop && !n->grad.empty()) n->backprop(*n);
    }
  }

  std::shared_ptr<TensorNode<T>> node() const { return node_; }

  // Internal: builds a recorded op result. parents/backprop are attached only
  // while grad mode is on and some parent needs gradients.
  static Tensor make_op(Shape shape, std::vector<T> data,
                        std::vector<std::shared_ptr<TensorNode<T>>> parents,
                        std::function<void(TensorNode<T>&)> backprop) {
    Tensor t = from(std::move(shape), std::move(data));
    bool need = false;
    if (GradMode::enabled())
      for (const auto& p : parents)
        if (p && p->requires_grad) need = true;
    if (need) {
      t.node_->requires_grad = true;
      t.node_->parents = std::move(parents);
      t.node_->backprop = std::move(backprop);
    }
    return t;
  }

 private:
  static void topo_sort(TensorNode<T>* root, std::vector<TensorNode<T>*>& order) {
    std::unordered_set<TensorNode<T>*> seen;
    struct Frame {
      TensorNode<T>* n;
      size_t next;
    };
    std::vector<Frame> stack{{root, 0}};
    seen.insert(root);
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        TensorNode<T>* p = f.n->parents[f.next++].get();
        if (p && p->requires_grad && seen.insert(p).second) stack.push_back({p, 0});
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }
  }

  std::shared_ptr<TensorNode<T>> node_;
};

template <class T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
  if (!DebugChecks::finite()) return;
  for (std::int64_t i = 0; i < t.numel(); ++i)
    if (!std::isfinite(t.data()[i]))
      throw std::runtime_error(std::string(op) + ": non-finite value at flat index " +
                               std::to_string(i));
}

}  // namespace convmpn
