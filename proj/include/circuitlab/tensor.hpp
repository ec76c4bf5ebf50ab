// Copyright 2026 The circuitlab Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "circuitlab/error.hpp"

namespace circuitlab {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

class Tensor;

namespace detail {

struct TensorImpl;

// Receives the adjoint of the node output and one accumulation buffer per
// parent (nullptr when that parent does not need a gradient).
using BackwardFn =
    std::function<void(std::span<const double> grad_out, std::span<std::vector<double>*> parent_grads)>;

struct Node {
  std::string_view op;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool has_grad = false;
  bool requires_grad = false;
  std::string name;
  std::shared_ptr<Node> node;

  bool tracked() const { return requires_grad || node != nullptr; }
};

inline std::string next_leaf_name() {
  static std::atomic<unsigned long long> counter{0};
  return "leaf#" + std::to_string(counter.fetch_add(1));
}

}  // namespace detail

/// Dense row-major float-64 tensor with an optional provenance node.
///
/// Tensors are cheap handles onto shared storage; every operation
/// materializes a fresh output, so there is no view aliasing. Leaves created
/// with `Tensor::leaf` take part in `backward`; everything else is constant
/// unless produced by an operation on a tracked input.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data) {
    if (shape_numel(shape) != data.size()) {
      throw DimensionError("buffer of length " + std::to_string(data.size()) +
                           " does not fill shape " + shape_str(shape));
    }
    auto impl = std::make_shared<detail::TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    return Tensor(std::move(impl));
  }
  static Tensor full(Shape shape, double value) {
    const std::size_t n = shape_numel(shape);
    return from(std::move(shape), std::vector<double>(n, value));
  }
  static Tensor zeros(Shape shape) { return full(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return full(std::move(shape), 1.0); }
  static Tensor scalar(double v) { return from({1}, {v}); }

  /// A graph leaf that receives a gradient in `backward`. Names key the
  /// resulting GradMap; unnamed leaves get a unique generated name.
  static Tensor leaf(Shape shape, std::vector<double> data, std::string name = {}) {
    Tensor t = from(std::move(shape), std::move(data));
    t.impl_->requires_grad = true;
    t.impl_->name = name.empty() ? detail::next_leaf_name() : std::move(name);
    return t;
  }

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t ndim() const { return impl_->shape.size(); }
  std::size_t size(std::size_t dim) const { return impl_->shape.at(dim); }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const double> data() const { return impl_->data; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const {
    if (numel() != 1) throw DimensionError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const { return impl_->requires_grad; }
  bool tracked() const { return impl_->tracked(); }
  bool is_leaf() const { return impl_->node == nullptr; }
  bool has_grad() const { return impl_->has_grad; }
  std::span<const double> grad() const { return impl_->grad; }
  const std::string& name() const { return impl_->name; }
  std::string_view op() const { return impl_->node ? impl_->node->op : std::string_view{}; }
  std::size_t parent_count() const { return impl_->node ? impl_->node->parents.size() : 0; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Gradients of one backward pass keyed by leaf name.
using GradMap = std::map<std::string, Tensor>;

namespace detail {

/// Builds an op output. A provenance node is recorded only when at least one
/// parent is graph-tracked.
inline Tensor make_result(std::string_view op, Shape shape, std::vector<double> data,
                          std::initializer_list<Tensor> parents, BackwardFn backward) {
  Tensor out = Tensor::from(std::move(shape), std::move(data));
  bool any = false;
  for (const Tensor& p : parents) any = any || p.tracked();
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->op = op;
  for (const Tensor& p : parents) node->parents.push_back(p.impl());
  node->backward = std::move(backward);
  out.impl()->node = std::move(node);
  return out;
}

}  // namespace detail

/// Reverse-mode pass from a scalar loss. Leaf gradients are overwritten (not
/// accumulated across calls) and also returned keyed by leaf name.
inline GradMap backward(const Tensor& loss) {
  using detail::TensorImpl;
  if (!loss.defined() || loss.numel() != 1) {
    throw ContractError("backward() needs a scalar loss");
  }
  if (!loss.tracked()) throw ContractError("backward() on a loss that is not graph-tracked");

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, std::size_t>> stack{{loss.impl().get(), 0}};
  visited.insert(loss.impl().get());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    if (t->node && next < t->node->parents.size()) {
      TensorImpl* p = t->node->parents[next++].get();
      if (p->tracked() && visited.insert(p).second) stack.emplace_back(p, 0);
      continue;
    }
    order.push_back(t);
    stack.pop_back();
  }

  std::unordered_map<TensorImpl*, std::vector<double>> adjoint;
  adjoint[loss.impl().get()] = {1.0};
  std::vector<TensorImpl*> leaves;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* t = *it;
    auto found = adjoint.find(t);
    if (found == adjoint.end()) continue;
    if (!t->node) {
      if (t->requires_grad) leaves.push_back(t);
      continue;
    }
    std::vector<double> g = std::move(found->second);
    adjoint.erase(found);
    // unordered_map keeps element references stable across rehashing.
    std::vector<std::vector<double>*> slots;
    slots.reserve(t->node->parents.size());
    for (const auto& p : t->node->parents) {
      if (!p->tracked()) {
        slots.push_back(nullptr);
        continue;
      }
      auto& buf = adjoint[p.get()];
      if (buf.empty()) buf.assign(p->data.size(), 0.0);
      slots.push_back(&buf);
    }
    t->node->backward(g, slots);
  }

  GradMap grads;
  for (TensorImpl* leaf : leaves) {
    leaf->grad = std::move(adjoint[leaf]);
    leaf->has_grad = true;
    if (!grads.emplace(leaf->name, Tensor::from(leaf->shape, leaf->grad)).second) {
      throw ContractError("two graph leaves share the name '" + leaf->name + "'");
    }
  }
  return grads;
}

}  // namespace circuitlab
