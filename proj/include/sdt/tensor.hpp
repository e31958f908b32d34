#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "sdt/rng.hpp"

namespace sdt {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

/// Raised when a forward computation produces NaN/Inf, or when input data is
/// already non-finite. Training treats this as divergence.
struct NumericsError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Thread-local autodiff switch. While disabled, ops compute values only and
/// record no tape nodes (cheap inference).
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

struct NoGradGuard {
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Dense row-major tensor with reverse-mode autodiff.
///
/// A Tensor is a cheap shared handle onto a tape node. Every operation
/// allocates a fresh node holding the forward value and, when gradients are
/// required, the parent links plus a backward closure. Values are immutable
/// after creation except through mutable_values(), which exists so the
/// optimizer can update parameters outside any autodiff region.
template <typename T>
class Tensor {
 public:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // lazily sized to match value
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    void ensure_grad() {
      if (grad.size() != value.size()) grad.assign(value.size(), T(0));
    }
  };

  Tensor() = default;

  static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
    if (numel(shape) != data.size()) {
      throw std::invalid_argument("Tensor::from: shape " + shape_str(shape) +
                                  " does not match data size " + std::to_string(data.size()));
    }
    for (const T v : data) {
      if (!std::isfinite(static_cast<double>(v))) throw NumericsError("Tensor::from: non-finite input value");
    }
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, T fill, bool requires_grad = false) {
    std::vector<T> data(numel(shape), fill);
    return from(std::move(shape), std::move(data), requires_grad);
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(0), requires_grad);
  }

  static Tensor ones(Shape shape, bool requires_grad = false) {
    return full(std::move(shape), T(1), requires_grad);
  }

  static Tensor scalar(T v) { return from(Shape{}, {v}); }

  static Tensor randn(Shape shape, Rng& rng, T stddev, bool requires_grad = false) {
    std::vector<T> data(numel(shape));
    for (auto& v : data) v = static_cast<T>(rng.normal(0.0, static_cast<double>(stddev)));
    return from(std::move(shape), std::move(data), requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t size() const { return node().value.size(); }

  const std::vector<T>& values() const { return node().value; }

  /// Mutable access for optimizer updates; never call while a graph built on
  /// this tensor is still pending a backward().
  std::vector<T>& mutable_values() { return node().value; }

  T item() const {
    if (size() != 1) throw std::logic_error("Tensor::item: tensor is not a scalar");
    return node().value[0];
  }

  T at(std::initializer_list<std::size_t> idx) const {
    const Shape& s = shape();
    if (idx.size() != s.size()) throw std::invalid_argument("Tensor::at: wrong index rank");
    std::size_t flat = 0, i = 0;
    for (std::size_t v : idx) {
      if (v >= s[i]) throw std::out_of_range("Tensor::at: index out of range");
      flat = flat * s[i] + v;
      ++i;
    }
    return node().value[flat];
  }

  bool requires_grad() const { return node().requires_grad; }

  /// Marks a leaf as trainable. Only valid on leaves.
  Tensor& set_requires_grad(bool on) {
    if (!node().parents.empty()) throw std::logic_error("set_requires_grad: not a leaf");
    node().requires_grad = on;
    return *this;
  }

  const std::vector<T>& grad() {
    node().ensure_grad();
    return node().grad;
  }

  void zero_grad() { node().grad.assign(size(), T(0)); }

  /// Reverse-mode sweep from a scalar output. Visits each tape node exactly
  /// once in reverse topological order.
  void backward() {
    Node* root = &node();
    if (root->value.size() != 1) throw std::logic_error("backward: output must be scalar");
    if (!root->requires_grad) throw std::logic_error("backward: tensor has no gradient path");

    std::vector<Node*> order;
    std::unordered_set<Node*> seen{root};
    struct Frame {
      Node* n;
      std::size_t next;
    };
    std::vector<Frame> stack{{root, 0}};
    while (!stack.empty()) {
      Frame& f = stack.back();
      if (f.next < f.n->parents.size()) {
        Node* p = f.n->parents[f.next].get();
        ++f.next;
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.push_back({p, 0});
        }
      } else {
        order.push_back(f.n);
        stack.pop_back();
      }
    }

    root->ensure_grad();
    root->grad[0] = T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      Node* n = *it;
      if (n->backward) n->backward(*n);
    }
  }

  std::shared_ptr<Node> node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;

  Node& node() const {
    if (!node_) throw std::logic_error("operation on empty tensor");
    return *node_;
  }
};

namespace detail {

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
  for (const T v : values) {
    if (!std::isfinite(static_cast<double>(v))) {
      throw NumericsError(std::string(op) + ": produced non-finite value");
    }
  }
}

/// Shared constructor for all ops. Records parents and the backward closure
/// only when gradients are both globally enabled and reachable from an input.
template <typename T>
Tensor<T> make_op(const char* op, Shape shape, std::vector<T> value,
                  std::vector<Tensor<T>> inputs,
                  std::function<void(typename Tensor<T>::Node&)> backward) {
  check_finite(op, value);
  bool needs_grad = false;
  if (GradMode::enabled()) {
    for (const auto& in : inputs) needs_grad = needs_grad || in.requires_grad();
  }
  auto out = Tensor<T>::from(std::move(shape), std::move(value));
  auto node = out.node_ptr();
  node->op = op;
  node->requires_grad = needs_grad;
  if (needs_grad) {
    node->parents.reserve(inputs.size());
    for (const auto& in : inputs) node->parents.push_back(in.node_ptr());
    node->backward = std::move(backward);
  }
  return out;
}

}  // namespace detail

}  // namespace sdt
