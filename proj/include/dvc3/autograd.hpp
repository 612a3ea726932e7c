#pragma once

#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dvc3/tensor.hpp"

namespace dvc3 {

// Trainable tensor with its gradient and Adam moment accumulators.
template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;
  Tensor<T> m;
  Tensor<T> v;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> init)
      : name(std::move(n)),
        value(std::move(init)),
        grad(value.shape()),
        m(value.shape()),
        v(value.shape()) {}

  void zero_grad() { grad.fill(T(0)); }
};

// Gradient recording is a per-thread switch so inference sessions on other
// threads never build graphs.
struct GradMode {
  static bool& enabled() {
    thread_local bool on = true;
    return on;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::enabled() = false; }
  ~NoGradGuard() { GradMode::enabled() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

template <typename T>
struct Node {
  Tensor<T> own;
  const Tensor<T>* ext = nullptr;  // parameter leaves alias their storage
  Tensor<T> grad;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  Parameter<T>* param = nullptr;
  bool requires_grad = false;

  const Tensor<T>& value() const { return ext ? *ext : own; }

  Tensor<T>& ensure_grad() {
    if (grad.empty() && value().size() > 0) grad = Tensor<T>(value().shape());
    return grad;
  }

  Node* parent(std::size_t i) { return parents[i].get(); }
};

template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  const Tensor<T>& value() const { return n_->value(); }
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  bool requires_grad() const { return n_ && n_->requires_grad; }
  bool defined() const { return static_cast<bool>(n_); }
  const std::shared_ptr<Node<T>>& node() const { return n_; }
  T item() const { return value().item(); }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <typename T>
Var<T> constant(Tensor<T> t) {
  auto n = std::make_shared<Node<T>>();
  n->own = std::move(t);
  return Var<T>(std::move(n));
}

// Leaf aliasing a parameter's storage. Gradients are only written back while
// GradMode is on, so const models are safe to share across inference threads.
template <typename T>
Var<T> leaf(const Parameter<T>& p) {
  auto n = std::make_shared<Node<T>>();
  n->ext = &p.value;
  n->param = const_cast<Parameter<T>*>(&p);
  n->requires_grad = GradMode::enabled();
  return Var<T>(std::move(n));
}

// Builds a result node. Parents and the backward closure are only retained
// when gradients are being recorded and some input needs them.
template <typename T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> fn) {
  auto n = std::make_shared<Node<T>>();
  n->own = std::move(value);
  bool needs = false;
  if (GradMode::enabled()) {
    for (const auto& v : inputs) needs = needs || v.requires_grad();
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& v : inputs) n->parents.push_back(v.node());
    n->backward_fn = std::move(fn);
  }
  return Var<T>(std::move(n));
}

// Gradient contributions that reached parameter leaves, in graph order.
template <typename T>
struct GradSink {
  std::vector<std::pair<Parameter<T>*, Tensor<T>>> entries;

  void apply() {
    for (auto& [p, g] : entries) p->grad += g;
  }
};

namespace detail {

template <typename T>
std::vector<Node<T>*> topo_order(Node<T>* root) {
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack;
  stack.emplace_back(root, 0);
  seen.insert(root);
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node<T>* p = node->parents[idx++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  return order;
}

}  // namespace detail

// Reverse-mode sweep from a scalar. Parameter gradients go to `sink`.
template <typename T>
void backward(const Var<T>& loss, GradSink<T>& sink, T seed = T(1)) {
  if (!loss.requires_grad()) return;
  if (loss.value().size() != 1) throw std::invalid_argument("backward: loss must be a scalar");
  auto order = detail::topo_order(loss.node().get());
  loss.node()->ensure_grad()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->grad.empty()) continue;
    if (n->backward_fn) n->backward_fn(*n);
    if (n->param) sink.entries.emplace_back(n->param, std::move(n->grad));
  }
}

// Reverse-mode sweep that accumulates straight into Parameter::grad.
template <typename T>
void backward(const Var<T>& loss) {
  GradSink<T> sink;
  backward(loss, sink);
  sink.apply();
}

}  // namespace dvc3
