#pragma once

// Dense row-major tensors with reverse-mode differentiation over a recorded
// graph. A Graph object, while alive, is the active recording context for
// its scalar type on the current thread; operations whose inputs require
// gradients append a node to it. Outside any graph, operations only compute.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dinet/errors.hpp"

namespace dinet {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

template <typename T>
struct GraphCore;

namespace detail {

template <typename T>
struct TensorState {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::weak_ptr<GraphCore<T>> graph;
  std::size_t node = static_cast<std::size_t>(-1);

  bool has_node() const { return node != static_cast<std::size_t>(-1); }

  // Returns the gradient buffer to accumulate into, or nullptr if this state
  // does not participate in differentiation.
  T* grad_sink() {
    if (!requires_grad) return nullptr;
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad.data();
  }
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using value_type = T;
  using State = detail::TensorState<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> values);

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value) { return full({1}, value); }

  bool valid() const { return static_cast<bool>(state_); }
  const Shape& shape() const { return state_->shape; }
  std::size_t dim(std::size_t axis) const { return state_->shape.at(axis); }
  std::size_t rank() const { return state_->shape.size(); }
  std::size_t size() const { return state_->data.size(); }

  std::span<const T> data() const { return state_->data; }
  // Throws if the tensor is the output of a node in a live graph.
  std::span<T> mutable_data();
  T item() const;
  T at(std::size_t flat) const { return state_->data.at(flat); }

  bool requires_grad() const { return state_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return !state_->grad.empty(); }
  std::span<const T> grad() const { return state_->grad; }
  std::span<T> mutable_grad() { return state_->grad; }

  bool is_leaf() const { return !state_->has_node(); }

  // Fresh tensor with copied values, no graph link, requires_grad false.
  Tensor detach() const;
  Tensor reshape(Shape shape) const;

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(state_->data.begin(), state_->data.end());
    return Tensor<U>(state_->shape, std::move(out));
  }

  bool same_as(const Tensor& other) const { return state_ == other.state_; }

  State& state() const { return *state_; }
  const std::shared_ptr<State>& state_ptr() const { return state_; }

  static Tensor from_state(std::shared_ptr<State> state) {
    Tensor t;
    t.state_ = std::move(state);
    return t;
  }

 private:
  std::shared_ptr<State> state_;
};

template <typename T>
struct Node {
  std::shared_ptr<detail::TensorState<T>> output;
  // Receives the output gradient and the output values; accumulates into
  // the captured input states.
  std::function<void(std::span<const T>, std::span<const T>)> backward;
};

template <typename T>
struct GraphCore {
  std::vector<Node<T>> nodes;
};

// Recording context. Constructing a Graph makes it active for scalar type T
// on this thread; destruction restores the previously active graph.
template <typename T>
class Graph {
 public:
  Graph();
  ~Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  std::size_t size() const { return core_->nodes.size(); }

  static GraphCore<T>* active();
  static std::shared_ptr<GraphCore<T>> active_shared();

 private:
  std::shared_ptr<GraphCore<T>> core_;
  std::shared_ptr<GraphCore<T>> previous_;
};

// Builds the result of an operation. When a graph is active and any input
// requires gradients, the result is recorded with `backward`.
template <typename T>
Tensor<T> record(Shape shape, std::vector<T> values,
                 std::initializer_list<const Tensor<T>*> inputs,
                 std::function<void(std::span<const T>, std::span<const T>)> backward);

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs);

template <typename T>
void backward(const Tensor<T>& loss);

template <typename T>
void zero_grads(std::span<Tensor<T>> tensors);

template <typename T>
void zero_grads(std::vector<Tensor<T>>& tensors) {
  zero_grads(std::span<Tensor<T>>(tensors));
}

enum class ElementwiseOp { add, sub, mul };

// Shapes must match, or `b` must be a bias vector whose length equals the
// last extent of `a`.
template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseOp::add, a, b);
}
template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseOp::sub, a, b);
}
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return elementwise(ElementwiseOp::mul, a, b);
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor);

template <typename T>
Tensor<T> sum(const Tensor<T>& a);

template <typename T>
Tensor<T> mean(const Tensor<T>& a);

// Rows [begin, end) along the leading axis.
template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end);

// Concatenation along the leading axis.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b);

template <typename T>
Tensor<T> tensor_create(Shape shape, std::vector<T> values) {
  return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace dinet
