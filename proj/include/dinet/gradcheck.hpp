#pragma once

#include <cmath>
#include <algorithm>
#include <functional>

#include "dinet/tensor.hpp"

namespace dinet {

// Central-difference gradient of a scalar function. `f` must not record onto
// a graph that outlives the call; it is evaluated 2·size(x) times.
template <typename T>
Tensor<T> finite_diff_grad(const std::function<T(const Tensor<T>&)>& f, const Tensor<T>& x, T eps) {
  if (!(eps > T(0))) fail(ErrorCode::invalid_argument, "finite difference step must be positive");
  Tensor<T> probe = x.detach();
  std::vector<T> grad(x.size());
  auto values = probe.mutable_data();
  for (std::size_t i = 0; i < values.size(); ++i) {
    const T saved = values[i];
    values[i] = saved + eps;
    const T up = f(probe);
    values[i] = saved - eps;
    const T down = f(probe);
    values[i] = saved;
    if (!std::isfinite(up) || !std::isfinite(down)) {
      fail(ErrorCode::non_finite, "non-finite evaluation at element " + std::to_string(i));
    }
    grad[i] = (up - down) / (T(2) * eps);
  }
  return Tensor<T>(x.shape(), std::move(grad));
}

// Gradient comparison metric: |a-n| / max(|a|, |n|, floor/tolerance). With
// tolerance 1e-4 and floor 1e-7 an element passes when its relative error is
// at most 1e-4 or its absolute error at most 1e-7.
struct GradTolerance {
  double relative = 1e-4;
  double absolute_floor = 1e-7;
};

inline double gradient_error(double analytic, double numeric, GradTolerance tol = {}) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), tol.absolute_floor / tol.relative});
  return std::abs(analytic - numeric) / denom;
}

template <typename A, typename B>
double max_gradient_error(const A& analytic, const B& numeric, GradTolerance tol = {}) {
  double worst = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    worst = std::max(worst, gradient_error(static_cast<double>(analytic[i]), static_cast<double>(numeric[i]), tol));
  }
  return worst;
}

// Compares the recorded-graph gradient of `loss_fn` with central differences
// for every tensor in `wrt` (leaf tensors with requires_grad set). Returns the
// worst gradient_error. `loss_fn` is re-evaluated outside any graph for the
// numeric side. At most `max_elements` elements per tensor are probed, spread
// evenly over the buffer.
template <typename T>
double check_gradients(const std::function<Tensor<T>()>& loss_fn, std::vector<Tensor<T>> wrt, T eps = T(1e-6),
                       std::size_t max_elements = static_cast<std::size_t>(-1), GradTolerance tol = {}) {
  zero_grads(wrt);
  {
    Graph<T> graph;
    Tensor<T> loss = loss_fn();
    backward(loss);
  }
  double worst = 0.0;
  for (auto& p : wrt) {
    std::vector<T> analytic(p.grad().begin(), p.grad().end());
    auto values = p.mutable_data();
    const std::size_t n = values.size();
    const std::size_t stride = n > max_elements ? (n + max_elements - 1) / max_elements : 1;
    for (std::size_t i = 0; i < n; i += stride) {
      const T saved = values[i];
      values[i] = saved + eps;
      const T up = loss_fn().item();
      values[i] = saved - eps;
      const T down = loss_fn().item();
      values[i] = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) {
        fail(ErrorCode::non_finite, "non-finite loss during finite differences");
      }
      worst = std::max(worst, gradient_error(static_cast<double>(analytic[i]),
                                             static_cast<double>((up - down) / (T(2) * eps)), tol));
    }
  }
  zero_grads(wrt);
  return worst;
}

}  // namespace dinet
