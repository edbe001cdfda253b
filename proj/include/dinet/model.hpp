#pragma once

// Domain-adversarial 3D network: a shared convolutional feature extractor,
// an action classifier head, and a domain classifier head that sits behind
// a gradient reversal node.

#include <array>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "dinet/ops.hpp"

namespace dinet {

enum class BlockKind { plain, residual, grouped_residual };

const char* block_kind_name(BlockKind kind);
BlockKind parse_block_kind(const std::string& name);

// Preprocessing applied to every clip before the first convolution.
// per_clip rescales each clip to zero mean and unit variance over all of its
// voxels, which removes global gain and offset differences.
enum class InputNorm { none, per_clip };

const char* input_norm_name(InputNorm norm);
InputNorm parse_input_norm(const std::string& name);

struct BlockSpec {
  BlockKind kind = BlockKind::plain;
  std::size_t out_channels = 8;
  std::size_t repeats = 1;
  bool downsample = false;     // stride 2 in time and space on the group's first block
  std::size_t cardinality = 1;  // grouped_residual only
};

struct ModelConfig {
  std::array<std::size_t, 4> input_shape{1, 16, 32, 32};  // C, T, H, W
  std::vector<BlockSpec> blocks;
  std::size_t feature_dim = 64;
  std::size_t num_actions = 6;
  std::array<std::size_t, 2> domain_hidden{64, 32};
  InputNorm input_norm = InputNorm::per_clip;

  // Four block groups (8, 16, 32, 64 channels), one block each, downsampling
  // in groups 2-4, grouped residual blocks with cardinality 4 after the stem.
  static ModelConfig desk_default();

  // Throws on invalid channel/cardinality combinations or when downsampling
  // would halve an extent below 1. Returns the (T, H, W) extents of the last
  // feature map.
  std::array<std::size_t, 3> validate() const;
};

enum class Partition { feature, action, domain };
const char* partition_name(Partition p);

template <typename T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
  Partition partition;
};

// Whether the domain head sees the features through the reversal node or
// directly. The identity route exists for instrumented gradient comparisons.
enum class DomainRoute { reversal, identity };

template <typename T>
class DiNetModel {
 public:
  static DiNetModel build(const ModelConfig& config, std::uint64_t seed);

  DiNetModel(DiNetModel&&) noexcept = default;
  DiNetModel& operator=(DiNetModel&&) noexcept = default;
  DiNetModel(const DiNetModel&) = delete;
  DiNetModel& operator=(const DiNetModel&) = delete;

  // Deep copy converted to scalar type U.
  template <typename U>
  DiNetModel<U> convert() const;
  DiNetModel clone() const { return convert<T>(); }

  // clips: [N, C, T, H, W] -> [N, feature_dim]
  Tensor<T> forward_features(const Tensor<T>& clips, BatchNormMode mode);
  // features: [N, feature_dim] -> action logits [N, K]
  Tensor<T> forward_action(const Tensor<T>& features) const;
  // features: [N, feature_dim] -> domain logit [N, 1]
  Tensor<T> forward_domain(const Tensor<T>& features, T lambda, DomainRoute route = DomainRoute::reversal) const;

  const ModelConfig& config() const { return config_; }

  // Trainable tensors, each tagged with exactly one partition.
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }
  std::vector<Tensor<T>> parameters(Partition partition) const;
  std::vector<Tensor<T>> all_parameters() const;
  // Batch-norm running statistics.
  const std::vector<NamedTensor<T>>& buffers() const { return buffers_; }

  std::size_t parameter_count() const;

 private:
  template <typename U>
  friend class DiNetModel;

  struct ConvUnit {
    Conv3dLayer<T> conv;
    BatchNorm3dLayer<T> bn;
  };
  struct Block {
    BlockKind kind;
    std::vector<ConvUnit> path;
    std::optional<ConvUnit> shortcut;
  };

  DiNetModel() = default;
  void register_tensors();
  Tensor<T> run_unit(ConvUnit& unit, const Tensor<T>& x, bool relu_after);
  Tensor<T> run_block(Block& block, const Tensor<T>& x);

  ModelConfig config_;
  std::vector<Block> blocks_;
  LinearLayer<T> projection_;
  LinearLayer<T> action_head_;
  std::array<LinearLayer<T>, 3> domain_head_;
  std::vector<NamedTensor<T>> params_;
  std::vector<NamedTensor<T>> buffers_;
};

// Per-clip standardization: (x - mean) / sqrt(var + 1e-5) over each row of a
// [N, ...] tensor. Not differentiable with respect to the clips.
template <typename T>
Tensor<T> standardize_clips(const Tensor<T>& clips);

// Closed-form trainable parameter count for a configuration.
std::size_t expected_parameter_count(const ModelConfig& config);

// Stacks clips stored as [C,T,H,W] value vectors into one [N,C,T,H,W] tensor.
template <typename T>
Tensor<T> stack_videos(const std::vector<const std::vector<float>*>& videos, const std::array<std::size_t, 4>& shape);

}  // namespace dinet
