#pragma once

// Differentiable network layers over 5-D video tensors [N, C, T, H, W].

#include <array>
#include <cstdint>
#include <random>

#include "dinet/tensor.hpp"

namespace dinet {

enum class Activation { identity, relu, tanh, sigmoid };
enum class BatchNormMode { train, eval };
enum class PoolKind { max, avg };

using Triple = std::array<std::size_t, 3>;  // (temporal, height, width)

template <typename T>
struct Conv3dLayer {
  Tensor<T> weights;  // [C_out, C_in/groups, L, H, W]
  Tensor<T> bias;     // [C_out]
  Triple stride{1, 1, 1};
  Triple padding{0, 0, 0};
  std::size_t groups = 1;

  static Conv3dLayer create(std::size_t in_channels, std::size_t out_channels, Triple kernel, Triple stride = {1, 1, 1},
                            Triple padding = {0, 0, 0}, std::size_t groups = 1);

  std::size_t in_channels() const { return weights.dim(1) * groups; }
  std::size_t out_channels() const { return weights.dim(0); }
  Triple kernel() const { return {weights.dim(2), weights.dim(3), weights.dim(4)}; }
  std::size_t fan_in() const { return weights.size() / weights.dim(0); }
};

template <typename T>
struct BatchNorm3dLayer {
  Tensor<T> gamma;
  Tensor<T> beta;
  Tensor<T> running_mean;
  Tensor<T> running_var;
  double epsilon = 1e-5;
  double momentum_stats = 0.1;
  BatchNormMode mode = BatchNormMode::train;

  static BatchNorm3dLayer create(std::size_t channels);
  std::size_t channels() const { return gamma.size(); }
};

template <typename T>
struct LinearLayer {
  Tensor<T> weights;  // [out, in]
  Tensor<T> bias;     // [out]

  static LinearLayer create(std::size_t in, std::size_t out);
  std::size_t in_features() const { return weights.dim(1); }
  std::size_t out_features() const { return weights.dim(0); }
};

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding);

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Conv3dLayer<T>& layer, Activation activation = Activation::identity);

// Train mode normalizes with batch statistics (biased variance) and updates
// the running statistics; eval mode normalizes with the running statistics.
template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& input, BatchNorm3dLayer<T>& layer);

template <typename T>
Tensor<T> pool3d(const Tensor<T>& input, PoolKind kind, Triple window, Triple stride);

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input);

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const LinearLayer<T>& layer, Activation activation = Activation::identity);

template <typename T>
Tensor<T> activate(const Tensor<T>& input, Activation activation);

template <typename T>
Tensor<T> relu(const Tensor<T>& input) {
  return activate(input, Activation::relu);
}

// Mean over the batch of -log softmax(logits)[label].
template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// Mean binary cross-entropy on raw logits, computed as
// max(z,0) - z*d + log(1 + exp(-|z|)).
template <typename T>
Tensor<T> binary_cross_entropy_with_logit(const Tensor<T>& logits, std::span<const int> domain_labels);

// Identity on the forward pass; the backward pass multiplies the incoming
// gradient by -lambda.
template <typename T>
Tensor<T> gradient_reversal(const Tensor<T>& input, T lambda);

// He-normal weights (std = sqrt(2 / fan_in)), zero biases.
template <typename T>
void init_parameters(Conv3dLayer<T>& layer, std::uint64_t seed);
template <typename T>
void init_parameters(LinearLayer<T>& layer, std::uint64_t seed);
template <typename T>
void init_parameters(BatchNorm3dLayer<T>& layer, std::uint64_t seed);

// Argmax per row, ties broken toward the lowest index.
template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits);

namespace testing {
// Flips the sign of the conv3d input gradient. Used only to prove that the
// gradient checker detects a broken backward pass.
void set_conv3d_backward_fault(bool enabled);
bool conv3d_backward_fault();
}  // namespace testing

}  // namespace dinet
