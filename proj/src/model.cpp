#include "dinet/model.hpp"

#include <cmath>

namespace dinet {

namespace {

std::uint64_t layer_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed * 0x100000001b3ULL + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

std::size_t conv_params(std::size_t in, std::size_t out, std::size_t k, std::size_t groups) {
  return out * (in / groups) * k * k * k + out;
}

}  // namespace

const char* block_kind_name(BlockKind kind) {
  switch (kind) {
    case BlockKind::plain: return "plain";
    case BlockKind::residual: return "residual";
    case BlockKind::grouped_residual: return "grouped_residual";
  }
  return "plain";
}

BlockKind parse_block_kind(const std::string& name) {
  if (name == "plain") return BlockKind::plain;
  if (name == "residual") return BlockKind::residual;
  if (name == "grouped_residual") return BlockKind::grouped_residual;
  fail(ErrorCode::invalid_argument, "unknown block kind '" + name + "'");
}

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::feature: return "feature";
    case Partition::action: return "action";
    case Partition::domain: return "domain";
  }
  return "feature";
}

const char* input_norm_name(InputNorm norm) { return norm == InputNorm::per_clip ? "per_clip" : "none"; }

InputNorm parse_input_norm(const std::string& name) {
  if (name == "per_clip") return InputNorm::per_clip;
  if (name == "none") return InputNorm::none;
  fail(ErrorCode::invalid_argument, "unknown input normalization '" + name + "'");
}

ModelConfig ModelConfig::desk_default() {
  ModelConfig c;
  c.blocks = {
      {BlockKind::plain, 8, 1, false, 1},
      {BlockKind::grouped_residual, 16, 1, true, 4},
      {BlockKind::grouped_residual, 32, 1, true, 4},
      {BlockKind::grouped_residual, 64, 1, true, 4},
  };
  return c;
}

std::array<std::size_t, 3> ModelConfig::validate() const {
  for (auto v : input_shape) {
    if (v == 0) fail(ErrorCode::invalid_argument, "input shape extents must be positive");
  }
  if (blocks.empty()) fail(ErrorCode::invalid_argument, "model needs at least one block group");
  if (feature_dim == 0 || num_actions == 0 || domain_hidden[0] == 0 || domain_hidden[1] == 0) {
    fail(ErrorCode::invalid_argument, "layer widths must be positive");
  }
  std::array<std::size_t, 3> ext{input_shape[1], input_shape[2], input_shape[3]};
  for (std::size_t g = 0; g < blocks.size(); ++g) {
    const auto& b = blocks[g];
    if (b.out_channels == 0 || b.repeats == 0) {
      fail(ErrorCode::invalid_argument, "block group " + std::to_string(g) + " needs positive channels and repeats");
    }
    if (b.kind == BlockKind::grouped_residual && (b.cardinality == 0 || b.out_channels % b.cardinality != 0)) {
      fail(ErrorCode::invalid_argument, "cardinality " + std::to_string(b.cardinality) +
                                            " does not divide width " + std::to_string(b.out_channels) +
                                            " in block group " + std::to_string(g));
    }
    if (b.downsample) {
      for (auto& e : ext) {
        if (e / 2 < 1) {
          fail(ErrorCode::invalid_argument,
               "downsampling in block group " + std::to_string(g) + " collapses an extent below 1");
        }
        e = conv_output_extent(e, 3, 2, 1);
      }
    }
  }
  return ext;
}

std::size_t expected_parameter_count(const ModelConfig& config) {
  std::size_t total = 0;
  std::size_t in = config.input_shape[0];
  for (const auto& b : config.blocks) {
    for (std::size_t r = 0; r < b.repeats; ++r) {
      const std::size_t out = b.out_channels;
      const bool strided = b.downsample && r == 0;
      switch (b.kind) {
        case BlockKind::plain:
          total += conv_params(in, out, 3, 1) + 2 * out;
          break;
        case BlockKind::residual:
          total += conv_params(in, out, 3, 1) + 2 * out + conv_params(out, out, 3, 1) + 2 * out;
          if (strided || in != out) total += conv_params(in, out, 1, 1) + 2 * out;
          break;
        case BlockKind::grouped_residual:
          total += conv_params(in, out, 1, 1) + 2 * out;
          total += conv_params(out, out, 3, b.cardinality) + 2 * out;
          total += conv_params(out, out, 1, 1) + 2 * out;
          if (strided || in != out) total += conv_params(in, out, 1, 1) + 2 * out;
          break;
      }
      in = out;
    }
  }
  const std::size_t f = config.feature_dim;
  total += in * f + f;
  total += f * config.num_actions + config.num_actions;
  total += f * config.domain_hidden[0] + config.domain_hidden[0];
  total += config.domain_hidden[0] * config.domain_hidden[1] + config.domain_hidden[1];
  total += config.domain_hidden[1] + 1;
  return total;
}

template <typename T>
DiNetModel<T> DiNetModel<T>::build(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  DiNetModel model;
  model.config_ = config;
  std::uint64_t layer = 0;
  auto unit = [&](std::size_t in, std::size_t out, std::size_t k, std::size_t stride, std::size_t groups) {
    const std::size_t pad = k / 2;
    ConvUnit u{Conv3dLayer<T>::create(in, out, {k, k, k}, {stride, stride, stride}, {pad, pad, pad}, groups),
               BatchNorm3dLayer<T>::create(out)};
    init_parameters(u.conv, layer_seed(seed, layer++));
    return u;
  };

  std::size_t in = config.input_shape[0];
  for (const auto& spec : config.blocks) {
    for (std::size_t r = 0; r < spec.repeats; ++r) {
      const std::size_t out = spec.out_channels;
      const std::size_t stride = spec.downsample && r == 0 ? 2 : 1;
      Block block{spec.kind, {}, std::nullopt};
      switch (spec.kind) {
        case BlockKind::plain:
          block.path.push_back(unit(in, out, 3, stride, 1));
          break;
        case BlockKind::residual:
          block.path.push_back(unit(in, out, 3, stride, 1));
          block.path.push_back(unit(out, out, 3, 1, 1));
          break;
        case BlockKind::grouped_residual:
          block.path.push_back(unit(in, out, 1, 1, 1));
          block.path.push_back(unit(out, out, 3, stride, spec.cardinality));
          block.path.push_back(unit(out, out, 1, 1, 1));
          break;
      }
      if (spec.kind != BlockKind::plain && (stride != 1 || in != out)) block.shortcut = unit(in, out, 1, stride, 1);
      model.blocks_.push_back(std::move(block));
      in = out;
    }
  }
  auto dense = [&](std::size_t a, std::size_t b) {
    auto l = LinearLayer<T>::create(a, b);
    init_parameters(l, layer_seed(seed, layer++));
    return l;
  };
  model.projection_ = dense(in, config.feature_dim);
  model.action_head_ = dense(config.feature_dim, config.num_actions);
  model.domain_head_ = {dense(config.feature_dim, config.domain_hidden[0]),
                        dense(config.domain_hidden[0], config.domain_hidden[1]), dense(config.domain_hidden[1], 1)};
  model.register_tensors();
  return model;
}

template <typename T>
void DiNetModel<T>::register_tensors() {
  params_.clear();
  buffers_.clear();
  auto add_unit = [&](const std::string& prefix, const ConvUnit& u) {
    params_.push_back({prefix + ".conv.weight", u.conv.weights, Partition::feature});
    params_.push_back({prefix + ".conv.bias", u.conv.bias, Partition::feature});
    params_.push_back({prefix + ".bn.gamma", u.bn.gamma, Partition::feature});
    params_.push_back({prefix + ".bn.beta", u.bn.beta, Partition::feature});
    buffers_.push_back({prefix + ".bn.running_mean", u.bn.running_mean, Partition::feature});
    buffers_.push_back({prefix + ".bn.running_var", u.bn.running_var, Partition::feature});
  };
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const std::string prefix = "features.block" + std::to_string(b);
    for (std::size_t u = 0; u < blocks_[b].path.size(); ++u) add_unit(prefix + ".unit" + std::to_string(u), blocks_[b].path[u]);
    if (blocks_[b].shortcut) add_unit(prefix + ".shortcut", *blocks_[b].shortcut);
  }
  auto add_linear = [&](const std::string& prefix, const LinearLayer<T>& l, Partition p) {
    params_.push_back({prefix + ".weight", l.weights, p});
    params_.push_back({prefix + ".bias", l.bias, p});
  };
  add_linear("features.projection", projection_, Partition::feature);
  add_linear("action.fc", action_head_, Partition::action);
  for (std::size_t i = 0; i < domain_head_.size(); ++i) {
    add_linear("domain.fc" + std::to_string(i), domain_head_[i], Partition::domain);
  }
}

template <typename T>
template <typename U>
DiNetModel<U> DiNetModel<T>::convert() const {
  DiNetModel<U> out;
  out.config_ = config_;
  auto copy = [](const Tensor<T>& t) {
    auto c = t.template cast<U>();
    c.set_requires_grad(t.requires_grad());
    return c;
  };
  auto copy_unit = [&](const ConvUnit& u) {
    typename DiNetModel<U>::ConvUnit v;
    v.conv.weights = copy(u.conv.weights);
    v.conv.bias = copy(u.conv.bias);
    v.conv.stride = u.conv.stride;
    v.conv.padding = u.conv.padding;
    v.conv.groups = u.conv.groups;
    v.bn.gamma = copy(u.bn.gamma);
    v.bn.beta = copy(u.bn.beta);
    v.bn.running_mean = copy(u.bn.running_mean);
    v.bn.running_var = copy(u.bn.running_var);
    v.bn.epsilon = u.bn.epsilon;
    v.bn.momentum_stats = u.bn.momentum_stats;
    v.bn.mode = u.bn.mode;
    return v;
  };
  auto copy_linear = [&](const LinearLayer<T>& l) {
    LinearLayer<U> m;
    m.weights = copy(l.weights);
    m.bias = copy(l.bias);
    return m;
  };
  for (const auto& b : blocks_) {
    typename DiNetModel<U>::Block nb{b.kind, {}, std::nullopt};
    for (const auto& u : b.path) nb.path.push_back(copy_unit(u));
    if (b.shortcut) nb.shortcut = copy_unit(*b.shortcut);
    out.blocks_.push_back(std::move(nb));
  }
  out.projection_ = copy_linear(projection_);
  out.action_head_ = copy_linear(action_head_);
  for (std::size_t i = 0; i < domain_head_.size(); ++i) out.domain_head_[i] = copy_linear(domain_head_[i]);
  out.register_tensors();
  return out;
}

template <typename T>
Tensor<T> DiNetModel<T>::run_unit(ConvUnit& unit, const Tensor<T>& x, bool relu_after) {
  auto h = batchnorm3d(conv3d(x, unit.conv), unit.bn);
  return relu_after ? relu(h) : h;
}

template <typename T>
Tensor<T> DiNetModel<T>::run_block(Block& block, const Tensor<T>& x) {
  if (block.kind == BlockKind::plain) return run_unit(block.path[0], x, true);
  Tensor<T> h = x;
  for (std::size_t i = 0; i < block.path.size(); ++i) h = run_unit(block.path[i], h, i + 1 < block.path.size());
  Tensor<T> skip = block.shortcut ? run_unit(*block.shortcut, x, false) : x;
  return relu(add(h, skip));
}

template <typename T>
Tensor<T> DiNetModel<T>::forward_features(const Tensor<T>& clips, BatchNormMode mode) {
  const auto& s = config_.input_shape;
  if (clips.rank() != 5 || clips.dim(1) != s[0] || clips.dim(2) != s[1] || clips.dim(3) != s[2] ||
      clips.dim(4) != s[3]) {
    fail(ErrorCode::shape_mismatch, "clips " + shape_str(clips.shape()) + " do not match model input [N," +
                                        std::to_string(s[0]) + "," + std::to_string(s[1]) + "," +
                                        std::to_string(s[2]) + "," + std::to_string(s[3]) + "]");
  }
  for (auto& b : blocks_) {
    for (auto& u : b.path) u.bn.mode = mode;
    if (b.shortcut) b.shortcut->bn.mode = mode;
  }
  Tensor<T> h = config_.input_norm == InputNorm::per_clip ? standardize_clips(clips) : clips;
  for (auto& b : blocks_) h = run_block(b, h);
  return linear(global_avg_pool(h), projection_, Activation::relu);
}

template <typename T>
Tensor<T> DiNetModel<T>::forward_action(const Tensor<T>& features) const {
  return linear(features, action_head_);
}

template <typename T>
Tensor<T> DiNetModel<T>::forward_domain(const Tensor<T>& features, T lambda, DomainRoute route) const {
  if (!(lambda >= T(0))) fail(ErrorCode::invalid_argument, "lambda must be nonnegative");
  Tensor<T> h = route == DomainRoute::reversal ? gradient_reversal(features, lambda) : features;
  h = linear(h, domain_head_[0], Activation::relu);
  h = linear(h, domain_head_[1], Activation::relu);
  return linear(h, domain_head_[2]);
}

template <typename T>
std::vector<Tensor<T>> DiNetModel<T>::parameters(Partition partition) const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_) {
    if (p.partition == partition) out.push_back(p.tensor);
  }
  return out;
}

template <typename T>
std::vector<Tensor<T>> DiNetModel<T>::all_parameters() const {
  std::vector<Tensor<T>> out;
  for (const auto& p : params_) out.push_back(p.tensor);
  return out;
}

template <typename T>
std::size_t DiNetModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.size();
  return n;
}

template <typename T>
Tensor<T> standardize_clips(const Tensor<T>& clips) {
  if (clips.requires_grad()) fail(ErrorCode::invalid_argument, "clip standardization does not propagate gradients");
  const std::size_t n = clips.dim(0);
  const std::size_t per = clips.size() / n;
  std::vector<T> out(clips.size());
  const auto x = clips.data();
  for (std::size_t r = 0; r < n; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t i = 0; i < per; ++i) mean += x[r * per + i];
    mean /= static_cast<double>(per);
    for (std::size_t i = 0; i < per; ++i) var += (x[r * per + i] - mean) * (x[r * per + i] - mean);
    const double inv = 1.0 / std::sqrt(var / static_cast<double>(per) + 1e-5);
    for (std::size_t i = 0; i < per; ++i) out[r * per + i] = static_cast<T>((x[r * per + i] - mean) * inv);
  }
  return Tensor<T>(clips.shape(), std::move(out));
}

template <typename T>
Tensor<T> stack_videos(const std::vector<const std::vector<float>*>& videos, const std::array<std::size_t, 4>& shape) {
  if (videos.empty()) fail(ErrorCode::invalid_argument, "cannot stack an empty clip list");
  const std::size_t per = shape[0] * shape[1] * shape[2] * shape[3];
  std::vector<T> data;
  data.reserve(per * videos.size());
  for (const auto* v : videos) {
    if (v->size() != per) fail(ErrorCode::shape_mismatch, "clip size does not match the declared clip shape");
    data.insert(data.end(), v->begin(), v->end());
  }
  return Tensor<T>({videos.size(), shape[0], shape[1], shape[2], shape[3]}, std::move(data));
}

template class DiNetModel<float>;
template class DiNetModel<double>;
template DiNetModel<double> DiNetModel<float>::convert<double>() const;
template DiNetModel<float> DiNetModel<double>::convert<float>() const;
template DiNetModel<float> DiNetModel<float>::convert<float>() const;
template DiNetModel<double> DiNetModel<double>::convert<double>() const;
template Tensor<float> standardize_clips<float>(const Tensor<float>&);
template Tensor<double> standardize_clips<double>(const Tensor<double>&);
template Tensor<float> stack_videos<float>(const std::vector<const std::vector<float>*>&,
                                           const std::array<std::size_t, 4>&);
template Tensor<double> stack_videos<double>(const std::vector<const std::vector<float>*>&,
                                             const std::array<std::size_t, 4>&);

}  // namespace dinet
