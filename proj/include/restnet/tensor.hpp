#pragma once

// Dense row-major tensor with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto shared storage. Tensors produced by an
// operation remember the operation (a ComputationRecord) whenever any input
// requires a gradient; backward() walks those records in reverse
// topological order and accumulates gradients into the leaves.

#include <Eigen/Core>

#include <algorithm>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <sstream>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "restnet/errors.hpp"

namespace restnet {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline Index numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

template <typename Scalar>
using Buffer = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
class Tensor;

namespace detail {

template <typename Scalar>
struct TensorImpl;

// Backward rule: receives the gradient of the output and adds into one
// accumulator per input. Accumulators of inputs that do not require a
// gradient are null.
template <typename Scalar>
using BackwardFn = std::function<void(const Buffer<Scalar>& grad_out, const std::vector<Buffer<Scalar>*>& grad_in)>;

// ComputationRecord: the operation that produced a tensor.
template <typename Scalar>
struct Node {
  std::string op;
  std::vector<std::shared_ptr<TensorImpl<Scalar>>> inputs;
  BackwardFn<Scalar> backward;
};

template <typename Scalar>
struct TensorImpl {
  Shape shape;
  Buffer<Scalar> data;
  bool requires_grad = false;
  bool has_grad = false;
  Buffer<Scalar> grad;
  std::shared_ptr<Node<Scalar>> node;
};

}  // namespace detail

template <typename Scalar>
class Tensor {
  static_assert(std::is_floating_point_v<Scalar>, "Tensor is defined for float and double");

 public:
  using scalar_type = Scalar;
  using Array = Buffer<Scalar>;

  Tensor() = default;

  Tensor(Shape shape, Array data, bool requires_grad = false) : impl_(std::make_shared<detail::TensorImpl<Scalar>>()) {
    if (numel(shape) != data.size()) {
      throw ShapeError("tensor buffer of length " + std::to_string(data.size()) + " does not match shape " +
                       to_string(shape));
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape) { return constant(std::move(shape), Scalar(0)); }
  static Tensor ones(Shape shape) { return constant(std::move(shape), Scalar(1)); }

  static Tensor constant(Shape shape, Scalar value) {
    const Index n = numel(shape);
    return Tensor(std::move(shape), Array::Constant(n, value));
  }

  static Tensor scalar(Scalar value) { return Tensor(Shape{}, Array::Constant(1, value)); }

  static Tensor from(Shape shape, std::initializer_list<Scalar> values) {
    Array data(static_cast<Index>(values.size()));
    std::copy(values.begin(), values.end(), data.data());
    return Tensor(std::move(shape), std::move(data));
  }

  static Tensor from(Shape shape, const std::vector<Scalar>& values) {
    Array data = Eigen::Map<const Array>(values.data(), static_cast<Index>(values.size()));
    return Tensor(std::move(shape), std::move(data));
  }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  Index dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t rank() const { return impl_->shape.size(); }
  Index size() const { return impl_->data.size(); }

  const Array& data() const { return impl_->data; }
  // Direct write access for leaves (optimizer updates, finite differences).
  // Must not be used on a tensor whose graph is still going to be replayed.
  Array& mutable_data() { return impl_->data; }

  Scalar item() const {
    if (size() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
    return impl_->data[0];
  }

  template <typename... Ix>
  Scalar operator()(Ix... ix) const {
    return impl_->data[flat_index({static_cast<Index>(ix)...})];
  }

  Index flat_index(std::initializer_list<Index> ix) const {
    const Shape& s = impl_->shape;
    if (ix.size() != s.size()) throw ShapeError("index rank mismatch for shape " + to_string(s));
    Index flat = 0;
    std::size_t d = 0;
    for (Index i : ix) {
      flat = flat * s[d++] + i;
    }
    return flat;
  }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag) {
    if (impl_->node) throw std::logic_error("requires_grad can only be set on leaf tensors");
    impl_->requires_grad = flag;
    return *this;
  }
  bool is_leaf() const { return !impl_->node; }
  const std::string& op() const {
    static const std::string leaf = "leaf";
    return impl_->node ? impl_->node->op : leaf;
  }

  bool has_grad() const { return impl_->has_grad; }
  const Array& grad() const {
    if (!impl_->has_grad) throw std::logic_error("tensor has no gradient");
    return impl_->grad;
  }
  void zero_grad() {
    impl_->has_grad = false;
    impl_->grad = Array();
  }

  // Same values, no history.
  Tensor detach() const { return Tensor(impl_->shape, impl_->data); }
  // Independent storage, same requires_grad flag, no history.
  Tensor clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(impl_->shape, impl_->data.template cast<Other>());
  }

  // Reverse-mode sweep from a single-element tensor.
  void backward() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  // Creates the output of an operation, recording `fn` when any input
  // requires a gradient.
  static Tensor record(std::string op, Shape shape, Array data, std::initializer_list<Tensor> inputs,
                       detail::BackwardFn<Scalar> fn) {
    return record(std::move(op), std::move(shape), std::move(data), std::vector<Tensor>(inputs), std::move(fn));
  }

  static Tensor record(std::string op, Shape shape, Array data, const std::vector<Tensor>& inputs,
                       detail::BackwardFn<Scalar> fn) {
    Tensor out(std::move(shape), std::move(data));
    const bool track = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (track) {
      auto node = std::make_shared<detail::Node<Scalar>>();
      node->op = std::move(op);
      node->inputs.reserve(inputs.size());
      for (const Tensor& t : inputs) node->inputs.push_back(t.impl_);
      node->backward = std::move(fn);
      out.impl_->requires_grad = true;
      out.impl_->node = std::move(node);
    }
    return out;
  }

 private:
  std::shared_ptr<detail::TensorImpl<Scalar>> impl_;
};

template <typename Scalar>
void Tensor<Scalar>::backward() const {
  using Impl = detail::TensorImpl<Scalar>;
  if (size() != 1) throw ShapeError("backward() requires a single-element tensor, got shape " + to_string(shape()));
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (node->node && next < node->node->inputs.size()) {
      Impl* child = node->node->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  std::unordered_map<Impl*, Array> grads;
  grads.emplace(impl_.get(), Array::Ones(1));
  std::vector<Array*> grad_in;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Impl* t = *it;
    auto found = grads.find(t);
    if (found == grads.end()) continue;
    if (!t->node) {
      if (!t->has_grad) {
        t->grad = found->second;
        t->has_grad = true;
      } else {
        t->grad += found->second;
      }
      grads.erase(found);
      continue;
    }
    grad_in.clear();
    for (const auto& input : t->node->inputs) {
      if (!input->requires_grad) {
        grad_in.push_back(nullptr);
        continue;
      }
      auto [slot, inserted] = grads.try_emplace(input.get());
      if (inserted) slot->second = Array::Zero(input->data.size());
      grad_in.push_back(&slot->second);
    }
    t->node->backward(found->second, grad_in);
    grads.erase(t);
  }
}

}  // namespace restnet
