#include "dinet/tensor.hpp"

#include <cmath>
#include <sstream>

namespace dinet {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::invalid_argument: return "invalid_argument";
    case ErrorCode::shape_mismatch: return "shape_mismatch";
    case ErrorCode::io: return "io_error";
    case ErrorCode::corrupt_file: return "corrupt_file";
    case ErrorCode::version_mismatch: return "version_mismatch";
    case ErrorCode::detached: return "detached";
    case ErrorCode::non_finite: return "non_finite";
    case ErrorCode::diverged: return "diverged";
    case ErrorCode::already_exists: return "already_exists";
    case ErrorCode::grad_check_failed: return "grad_check_failed";
  }
  return "unknown";
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> values) {
  if (shape.empty()) fail(ErrorCode::shape_mismatch, "tensor shape must have at least one axis");
  for (auto d : shape) {
    if (d == 0) fail(ErrorCode::shape_mismatch, "tensor extents must be positive: " + shape_str(shape));
  }
  if (numel(shape) != values.size()) {
    fail(ErrorCode::shape_mismatch, "shape " + shape_str(shape) + " holds " +
                                        std::to_string(numel(shape)) + " values, got " +
                                        std::to_string(values.size()));
  }
  state_ = std::make_shared<State>();
  state_->shape = std::move(shape);
  state_->data = std::move(values);
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)));
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
std::span<T> Tensor<T>::mutable_data() {
  if (state_->has_node() && !state_->graph.expired()) {
    fail(ErrorCode::invalid_argument, "in-place mutation of a tensor recorded in a live graph");
  }
  return state_->data;
}

template <typename T>
T Tensor<T>::item() const {
  if (state_->data.size() != 1) {
    fail(ErrorCode::shape_mismatch, "item() on tensor of shape " + shape_str(state_->shape));
  }
  return state_->data[0];
}

template <typename T>
Tensor<T>& Tensor<T>::set_requires_grad(bool flag) {
  state_->requires_grad = flag;
  return *this;
}

template <typename T>
Tensor<T> Tensor<T>::detach() const {
  return Tensor(state_->shape, state_->data);
}

template <typename T>
Tensor<T> Tensor<T>::reshape(Shape shape) const {
  if (numel(shape) != size()) {
    fail(ErrorCode::shape_mismatch, "cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  }
  auto in = state_;
  return record<T>(std::move(shape), state_->data, {this}, [in](std::span<const T> g, std::span<const T>) {
    if (T* dx = in->grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
  });
}

// ---------------------------------------------------------------------------
// Graph

namespace {

template <typename T>
std::shared_ptr<GraphCore<T>>& active_slot() {
  thread_local std::shared_ptr<GraphCore<T>> slot;
  return slot;
}

}  // namespace

template <typename T>
Graph<T>::Graph() : core_(std::make_shared<GraphCore<T>>()), previous_(active_slot<T>()) {
  active_slot<T>() = core_;
}

template <typename T>
Graph<T>::~Graph() {
  active_slot<T>() = previous_;
}

template <typename T>
GraphCore<T>* Graph<T>::active() {
  return active_slot<T>().get();
}

template <typename T>
std::shared_ptr<GraphCore<T>> Graph<T>::active_shared() {
  return active_slot<T>();
}

template <typename T>
bool any_requires_grad(std::initializer_list<const Tensor<T>*> inputs) {
  for (const auto* t : inputs) {
    if (t && t->valid() && t->requires_grad()) return true;
  }
  return false;
}

template <typename T>
Tensor<T> record(Shape shape, std::vector<T> values, std::initializer_list<const Tensor<T>*> inputs,
                 std::function<void(std::span<const T>, std::span<const T>)> backward) {
  Tensor<T> out(std::move(shape), std::move(values));
  auto graph = Graph<T>::active_shared();
  if (graph && any_requires_grad(inputs)) {
    auto& st = out.state();
    st.requires_grad = true;
    st.graph = graph;
    st.node = graph->nodes.size();
    graph->nodes.push_back(Node<T>{out.state_ptr(), std::move(backward)});
  }
  return out;
}

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.valid() || loss.size() != 1) {
    fail(ErrorCode::shape_mismatch, "backward() requires a scalar loss");
  }
  auto& st = loss.state();
  auto graph = st.graph.lock();
  if (!graph || !st.has_node()) {
    fail(ErrorCode::detached, "backward() on a loss that is not recorded in a live graph");
  }
  // Interior gradients restart from zero on every pass; leaves accumulate.
  for (std::size_t i = 0; i <= st.node; ++i) graph->nodes[i].output->grad.clear();
  st.grad.assign(1, T(1));
  for (std::size_t i = st.node + 1; i-- > 0;) {
    auto& node = graph->nodes[i];
    if (node.output->grad.empty()) continue;
    node.backward(node.output->grad, node.output->data);
  }
}

template <typename T>
void zero_grads(std::span<Tensor<T>> tensors) {
  for (auto& t : tensors) {
    auto& st = t.state();
    if (st.requires_grad || !st.grad.empty()) st.grad.assign(st.data.size(), T(0));
  }
}

// ---------------------------------------------------------------------------
// Core operations

template <typename T>
Tensor<T> elementwise(ElementwiseOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const bool same = a.shape() == b.shape();
  const bool bias = !same && b.rank() == 1 && a.shape().back() == b.size();
  if (!same && !bias) {
    fail(ErrorCode::shape_mismatch,
         "elementwise shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) + " are incompatible");
  }
  const std::size_t n = a.size();
  const std::size_t period = b.size();
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const T x = ad[i];
    const T y = bd[bias ? i % period : i];
    switch (op) {
      case ElementwiseOp::add: out[i] = x + y; break;
      case ElementwiseOp::sub: out[i] = x - y; break;
      case ElementwiseOp::mul: out[i] = x * y; break;
    }
  }
  auto as = a.state_ptr();
  auto bs = b.state_ptr();
  return record<T>(a.shape(), std::move(out), {&a, &b}, [as, bs, op, bias, period](std::span<const T> g, std::span<const T>) {
    const std::size_t n = g.size();
    if (T* da = as->grad_sink()) {
      for (std::size_t i = 0; i < n; ++i) {
        da[i] += op == ElementwiseOp::mul ? g[i] * bs->data[bias ? i % period : i] : g[i];
      }
    }
    if (T* db = bs->grad_sink()) {
      for (std::size_t i = 0; i < n; ++i) {
        const std::size_t j = bias ? i % period : i;
        switch (op) {
          case ElementwiseOp::add: db[j] += g[i]; break;
          case ElementwiseOp::sub: db[j] -= g[i]; break;
          case ElementwiseOp::mul: db[j] += g[i] * as->data[i]; break;
        }
      }
    }
  });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0)) {
    fail(ErrorCode::shape_mismatch, "matmul of " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  std::vector<T> out(m * n, T(0));
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const T av = ad[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += av * bd[p * n + j];
    }
  }
  auto as = a.state_ptr();
  auto bs = b.state_ptr();
  return record<T>({m, n}, std::move(out), {&a, &b}, [as, bs, m, k, n](std::span<const T> g, std::span<const T>) {
    if (T* da = as->grad_sink()) {
      // dA = G * B^T
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          T acc = T(0);
          for (std::size_t j = 0; j < n; ++j) acc += g[i * n + j] * bs->data[p * n + j];
          da[i * k + p] += acc;
        }
      }
    }
    if (T* db = bs->grad_sink()) {
      // dB = A^T * G
      for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
          const T av = as->data[i * k + p];
          for (std::size_t j = 0; j < n; ++j) db[p * n + j] += av * g[i * n + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  auto as = a.state_ptr();
  return record<T>(a.shape(), std::move(out), {&a}, [as, factor](std::span<const T> g, std::span<const T>) {
    if (T* da = as->grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += factor * g[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
  T acc = T(0);
  for (T v : a.data()) acc += v;
  auto as = a.state_ptr();
  return record<T>({1}, {acc}, {&a}, [as](std::span<const T> g, std::span<const T>) {
    if (T* da = as->grad_sink()) {
      for (std::size_t i = 0; i < as->data.size(); ++i) da[i] += g[0];
    }
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.size()));
}

template <typename T>
Tensor<T> slice_rows(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  if (begin >= end || end > a.dim(0)) {
    fail(ErrorCode::shape_mismatch, "row slice [" + std::to_string(begin) + "," + std::to_string(end) +
                                        ") out of range for " + shape_str(a.shape()));
  }
  const std::size_t row = a.size() / a.dim(0);
  Shape shape = a.shape();
  shape[0] = end - begin;
  std::vector<T> out(a.data().begin() + begin * row, a.data().begin() + end * row);
  auto as = a.state_ptr();
  return record<T>(std::move(shape), std::move(out), {&a}, [as, begin, row](std::span<const T> g, std::span<const T>) {
    if (T* da = as->grad_sink()) {
      for (std::size_t i = 0; i < g.size(); ++i) da[begin * row + i] += g[i];
    }
  });
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != b.rank() || !std::equal(a.shape().begin() + 1, a.shape().end(), b.shape().begin() + 1)) {
    fail(ErrorCode::shape_mismatch, "cannot concatenate " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  }
  Shape shape = a.shape();
  shape[0] += b.dim(0);
  std::vector<T> out(a.data().begin(), a.data().end());
  out.insert(out.end(), b.data().begin(), b.data().end());
  auto as = a.state_ptr();
  auto bs = b.state_ptr();
  const std::size_t na = a.size();
  return record<T>(std::move(shape), std::move(out), {&a, &b}, [as, bs, na](std::span<const T> g, std::span<const T>) {
    if (T* da = as->grad_sink()) {
      for (std::size_t i = 0; i < na; ++i) da[i] += g[i];
    }
    if (T* db = bs->grad_sink()) {
      for (std::size_t i = na; i < g.size(); ++i) db[i - na] += g[i];
    }
  });
}

#define DINET_INSTANTIATE_TENSOR(T)                                                                  \
  template class Tensor<T>;                                                                          \
  template class Graph<T>;                                                                           \
  template bool any_requires_grad<T>(std::initializer_list<const Tensor<T>*>);                       \
  template Tensor<T> record<T>(Shape, std::vector<T>, std::initializer_list<const Tensor<T>*>,       \
                               std::function<void(std::span<const T>, std::span<const T>)>);                             \
  template void backward<T>(const Tensor<T>&);                                                       \
  template void zero_grads<T>(std::span<Tensor<T>>);                                                 \
  template Tensor<T> elementwise<T>(ElementwiseOp, const Tensor<T>&, const Tensor<T>&);              \
  template Tensor<T> matmul<T>(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale<T>(const Tensor<T>&, T);                                                  \
  template Tensor<T> sum<T>(const Tensor<T>&);                                                       \
  template Tensor<T> mean<T>(const Tensor<T>&);                                                      \
  template Tensor<T> slice_rows<T>(const Tensor<T>&, std::size_t, std::size_t);                     \
  template Tensor<T> concat_rows<T>(const Tensor<T>&, const Tensor<T>&);

DINET_INSTANTIATE_TENSOR(float)
DINET_INSTANTIATE_TENSOR(double)

}  // namespace dinet
