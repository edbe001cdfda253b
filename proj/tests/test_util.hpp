#pragma once

#include <random>
#include <vector>

#include "dinet/tensor.hpp"

namespace dinet::test {

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(numel(shape));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
Tensor<T> random_param(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  auto t = random_tensor<T>(std::move(shape), rng, lo, hi);
  t.set_requires_grad(true);
  return t;
}

// Weighted sum with fixed random weights, so every output element carries a
// distinct upstream gradient.
template <typename T>
Tensor<T> weighted_sum(const Tensor<T>& x, const Tensor<T>& weights) {
  return sum(mul(x, weights));
}

template <typename T>
std::vector<T> to_vector(std::span<const T> s) {
  return {s.begin(), s.end()};
}

}  // namespace dinet::test
