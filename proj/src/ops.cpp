#include "dinet/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>

namespace dinet {

namespace testing {
namespace {
std::atomic<bool> g_conv_fault{false};
}
void set_conv3d_backward_fault(bool enabled) { g_conv_fault = enabled; }
bool conv3d_backward_fault() { return g_conv_fault; }
}  // namespace testing

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatMap = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;

template <typename T>
T apply_activation(T x, Activation a) {
  switch (a) {
    case Activation::identity: return x;
    case Activation::relu: return x > T(0) ? x : T(0);
    case Activation::tanh: return std::tanh(x);
    case Activation::sigmoid: return T(1) / (T(1) + std::exp(-x));
  }
  return x;
}

// Derivative expressed through the activation output y.
template <typename T>
T activation_slope(T y, Activation a) {
  switch (a) {
    case Activation::identity: return T(1);
    case Activation::relu: return y > T(0) ? T(1) : T(0);
    case Activation::tanh: return T(1) - y * y;
    case Activation::sigmoid: return y * (T(1) - y);
  }
  return T(1);
}

template <typename T>
std::vector<T> pre_activation_grad(std::span<const T> g, std::span<const T> y, Activation a) {
  std::vector<T> d(g.begin(), g.end());
  if (a != Activation::identity) {
    for (std::size_t i = 0; i < d.size(); ++i) d[i] *= activation_slope(y[i], a);
  }
  return d;
}

void require_rank5(const Shape& shape, const char* op) {
  if (shape.size() != 5) {
    fail(ErrorCode::shape_mismatch, std::string(op) + " expects [N,C,T,H,W], got " + shape_str(shape));
  }
}

struct ConvGeometry {
  std::size_t batch, in_c, in_t, in_h, in_w;
  std::size_t out_c, kt, kh, kw;
  Triple stride, pad;
  std::size_t groups, in_cg, out_cg;
  std::size_t out_t, out_h, out_w;
  std::size_t in_plane, out_plane, patch;  // T*H*W of input, of output; in_cg*kt*kh*kw
  bool pointwise;                          // 1x1x1 kernel, unit stride, no padding
};

// Column matrix [patch, out_plane] for one sample and one group.
template <typename T>
void im2col(const T* x, const ConvGeometry& g, T* col) {
  for (std::size_t c = 0; c < g.in_cg; ++c) {
    const T* xc = x + c * g.in_plane;
    for (std::size_t l = 0; l < g.kt; ++l) {
      for (std::size_t h = 0; h < g.kh; ++h) {
        for (std::size_t w = 0; w < g.kw; ++w) {
          T* row = col + (((c * g.kt + l) * g.kh + h) * g.kw + w) * g.out_plane;
          for (std::size_t ot = 0; ot < g.out_t; ++ot) {
            const auto it = static_cast<std::ptrdiff_t>(ot * g.stride[0] + l) - static_cast<std::ptrdiff_t>(g.pad[0]);
            T* row_t = row + ot * g.out_h * g.out_w;
            if (it < 0 || it >= static_cast<std::ptrdiff_t>(g.in_t)) {
              std::fill(row_t, row_t + g.out_h * g.out_w, T(0));
              continue;
            }
            for (std::size_t oh = 0; oh < g.out_h; ++oh) {
              const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + h) - static_cast<std::ptrdiff_t>(g.pad[1]);
              T* row_h = row_t + oh * g.out_w;
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) {
                std::fill(row_h, row_h + g.out_w, T(0));
                continue;
              }
              const T* src = xc + (static_cast<std::size_t>(it) * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
              for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride[2] + w) - static_cast<std::ptrdiff_t>(g.pad[2]);
                row_h[ow] = (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.in_w)) ? T(0) : src[iw];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* col, const ConvGeometry& g, T* dx) {
  for (std::size_t c = 0; c < g.in_cg; ++c) {
    T* xc = dx + c * g.in_plane;
    for (std::size_t l = 0; l < g.kt; ++l) {
      for (std::size_t h = 0; h < g.kh; ++h) {
        for (std::size_t w = 0; w < g.kw; ++w) {
          const T* row = col + (((c * g.kt + l) * g.kh + h) * g.kw + w) * g.out_plane;
          for (std::size_t ot = 0; ot < g.out_t; ++ot) {
            const auto it = static_cast<std::ptrdiff_t>(ot * g.stride[0] + l) - static_cast<std::ptrdiff_t>(g.pad[0]);
            if (it < 0 || it >= static_cast<std::ptrdiff_t>(g.in_t)) continue;
            for (std::size_t oh = 0; oh < g.out_h; ++oh) {
              const auto ih = static_cast<std::ptrdiff_t>(oh * g.stride[1] + h) - static_cast<std::ptrdiff_t>(g.pad[1]);
              if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.in_h)) continue;
              const T* src = row + (ot * g.out_h + oh) * g.out_w;
              T* dst = xc + (static_cast<std::size_t>(it) * g.in_h + static_cast<std::size_t>(ih)) * g.in_w;
              for (std::size_t ow = 0; ow < g.out_w; ++ow) {
                const auto iw = static_cast<std::ptrdiff_t>(ow * g.stride[2] + w) - static_cast<std::ptrdiff_t>(g.pad[2]);
                if (iw >= 0 && iw < static_cast<std::ptrdiff_t>(g.in_w)) dst[iw] += src[ow];
              }
            }
          }
        }
      }
    }
  }
}

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Conv3dLayer<T>& layer) {
  require_rank5(input.shape(), "conv3d");
  const auto& ws = layer.weights.shape();
  if (ws.size() != 5 || layer.bias.size() != ws[0]) {
    fail(ErrorCode::shape_mismatch, "conv3d weights " + shape_str(ws) + " / bias " + shape_str(layer.bias.shape()));
  }
  ConvGeometry g{};
  g.batch = input.dim(0);
  g.in_c = input.dim(1);
  g.in_t = input.dim(2);
  g.in_h = input.dim(3);
  g.in_w = input.dim(4);
  g.out_c = ws[0];
  g.kt = ws[2];
  g.kh = ws[3];
  g.kw = ws[4];
  g.stride = layer.stride;
  g.pad = layer.padding;
  g.groups = layer.groups;
  if (g.groups == 0 || g.in_c % g.groups != 0 || g.out_c % g.groups != 0) {
    fail(ErrorCode::invalid_argument, "conv3d groups " + std::to_string(g.groups) + " must divide channels " +
                                          std::to_string(g.in_c) + " and " + std::to_string(g.out_c));
  }
  g.in_cg = g.in_c / g.groups;
  g.out_cg = g.out_c / g.groups;
  if (ws[1] != g.in_cg) {
    fail(ErrorCode::shape_mismatch, "conv3d weights expect " + std::to_string(ws[1] * g.groups) +
                                        " input channels, input has " + std::to_string(g.in_c));
  }
  g.out_t = conv_output_extent(g.in_t, g.kt, g.stride[0], g.pad[0]);
  g.out_h = conv_output_extent(g.in_h, g.kh, g.stride[1], g.pad[1]);
  g.out_w = conv_output_extent(g.in_w, g.kw, g.stride[2], g.pad[2]);
  g.in_plane = g.in_t * g.in_h * g.in_w;
  g.out_plane = g.out_t * g.out_h * g.out_w;
  g.patch = g.in_cg * g.kt * g.kh * g.kw;
  g.pointwise = g.kt == 1 && g.kh == 1 && g.kw == 1 && g.stride == Triple{1, 1, 1} && g.pad == Triple{0, 0, 0};
  return g;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
  // splitmix64 finalizer
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

template <typename T>
void fill_he_normal(Tensor<T>& weights, std::size_t fan_in, std::uint64_t seed) {
  std::mt19937_64 rng(mix_seed(seed, 0));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  for (auto& v : weights.mutable_data()) v = static_cast<T>(dist(rng));
}

}  // namespace

std::size_t conv_output_extent(std::size_t input, std::size_t kernel, std::size_t stride, std::size_t padding) {
  if (stride == 0) fail(ErrorCode::invalid_argument, "stride must be positive");
  if (kernel == 0) fail(ErrorCode::invalid_argument, "kernel extent must be positive");
  if (input + 2 * padding < kernel) {
    fail(ErrorCode::shape_mismatch, "kernel extent " + std::to_string(kernel) + " exceeds padded input " +
                                        std::to_string(input + 2 * padding));
  }
  return (input + 2 * padding - kernel) / stride + 1;
}

// ---------------------------------------------------------------------------
// Layer construction

template <typename T>
Conv3dLayer<T> Conv3dLayer<T>::create(std::size_t in_channels, std::size_t out_channels, Triple kernel, Triple stride,
                                      Triple padding, std::size_t groups) {
  if (groups == 0 || in_channels % groups != 0 || out_channels % groups != 0) {
    fail(ErrorCode::invalid_argument, "groups must divide both channel counts");
  }
  for (auto s : stride) {
    if (s == 0) fail(ErrorCode::invalid_argument, "stride must be positive");
  }
  Conv3dLayer layer;
  layer.weights = Tensor<T>::zeros({out_channels, in_channels / groups, kernel[0], kernel[1], kernel[2]});
  layer.bias = Tensor<T>::zeros({out_channels});
  layer.weights.set_requires_grad(true);
  layer.bias.set_requires_grad(true);
  layer.stride = stride;
  layer.padding = padding;
  layer.groups = groups;
  return layer;
}

template <typename T>
BatchNorm3dLayer<T> BatchNorm3dLayer<T>::create(std::size_t channels) {
  BatchNorm3dLayer layer;
  layer.gamma = Tensor<T>::full({channels}, T(1));
  layer.beta = Tensor<T>::zeros({channels});
  layer.gamma.set_requires_grad(true);
  layer.beta.set_requires_grad(true);
  layer.running_mean = Tensor<T>::zeros({channels});
  layer.running_var = Tensor<T>::full({channels}, T(1));
  return layer;
}

template <typename T>
LinearLayer<T> LinearLayer<T>::create(std::size_t in, std::size_t out) {
  LinearLayer layer;
  layer.weights = Tensor<T>::zeros({out, in});
  layer.bias = Tensor<T>::zeros({out});
  layer.weights.set_requires_grad(true);
  layer.bias.set_requires_grad(true);
  return layer;
}

template <typename T>
void init_parameters(Conv3dLayer<T>& layer, std::uint64_t seed) {
  fill_he_normal(layer.weights, layer.fan_in(), seed);
  std::ranges::fill(layer.bias.mutable_data(), T(0));
}

template <typename T>
void init_parameters(LinearLayer<T>& layer, std::uint64_t seed) {
  fill_he_normal(layer.weights, layer.in_features(), seed);
  std::ranges::fill(layer.bias.mutable_data(), T(0));
}

template <typename T>
void init_parameters(BatchNorm3dLayer<T>& layer, std::uint64_t) {
  std::ranges::fill(layer.gamma.mutable_data(), T(1));
  std::ranges::fill(layer.beta.mutable_data(), T(0));
  std::ranges::fill(layer.running_mean.mutable_data(), T(0));
  std::ranges::fill(layer.running_var.mutable_data(), T(1));
}

// ---------------------------------------------------------------------------
// conv3d

template <typename T>
Tensor<T> conv3d(const Tensor<T>& input, const Conv3dLayer<T>& layer, Activation activation) {
  const ConvGeometry g = conv_geometry(input, layer);
  std::vector<T> out(g.batch * g.out_c * g.out_plane);
  std::vector<T> col(g.pointwise ? 0 : g.patch * g.out_plane);
  const T* x = input.data().data();
  const T* w = layer.weights.data().data();
  const T* b = layer.bias.data().data();

  for (std::size_t n = 0; n < g.batch; ++n) {
    for (std::size_t grp = 0; grp < g.groups; ++grp) {
      const T* xg = x + (n * g.in_c + grp * g.in_cg) * g.in_plane;
      const T* cols = xg;
      if (!g.pointwise) {
        im2col(xg, g, col.data());
        cols = col.data();
      }
      MatMap<T> y(out.data() + (n * g.out_c + grp * g.out_cg) * g.out_plane, g.out_cg, g.out_plane);
      y.noalias() = ConstMatMap<T>(w + grp * g.out_cg * g.patch, g.out_cg, g.patch) *
                    ConstMatMap<T>(cols, g.patch, g.out_plane);
    }
    for (std::size_t c = 0; c < g.out_c; ++c) {
      T* yc = out.data() + (n * g.out_c + c) * g.out_plane;
      for (std::size_t p = 0; p < g.out_plane; ++p) yc[p] = apply_activation(yc[p] + b[c], activation);
    }
  }

  auto xs = input.state_ptr();
  auto ws = layer.weights.state_ptr();
  auto bs = layer.bias.state_ptr();
  return record<T>(
      {g.batch, g.out_c, g.out_t, g.out_h, g.out_w}, std::move(out), {&input, &layer.weights, &layer.bias},
      [xs, ws, bs, g, activation](std::span<const T> grad, std::span<const T> y) {
        const std::vector<T> dy = pre_activation_grad(grad, y, activation);
        if (T* db = bs->grad_sink()) {
          for (std::size_t n = 0; n < g.batch; ++n) {
            for (std::size_t c = 0; c < g.out_c; ++c) {
              const T* d = dy.data() + (n * g.out_c + c) * g.out_plane;
              T acc = T(0);
              for (std::size_t p = 0; p < g.out_plane; ++p) acc += d[p];
              db[c] += acc;
            }
          }
        }
        T* dw = ws->grad_sink();
        T* dx = xs->grad_sink();
        if (!dw && !dx) return;
        std::vector<T> col(g.pointwise ? 0 : g.patch * g.out_plane);
        std::vector<T> dcol(dx && !g.pointwise ? g.patch * g.out_plane : 0);
        const T sign = testing::conv3d_backward_fault() ? T(-1) : T(1);
        for (std::size_t n = 0; n < g.batch; ++n) {
          for (std::size_t grp = 0; grp < g.groups; ++grp) {
            const T* xg = xs->data.data() + (n * g.in_c + grp * g.in_cg) * g.in_plane;
            ConstMatMap<T> dyg(dy.data() + (n * g.out_c + grp * g.out_cg) * g.out_plane, g.out_cg, g.out_plane);
            if (dw) {
              const T* cols = xg;
              if (!g.pointwise) {
                im2col(xg, g, col.data());
                cols = col.data();
              }
              MatMap<T>(dw + grp * g.out_cg * g.patch, g.out_cg, g.patch).noalias() +=
                  dyg * ConstMatMap<T>(cols, g.patch, g.out_plane).transpose();
            }
            if (dx) {
              ConstMatMap<T> wg(ws->data.data() + grp * g.out_cg * g.patch, g.out_cg, g.patch);
              T* dxg = dx + (n * g.in_c + grp * g.in_cg) * g.in_plane;
              if (g.pointwise) {
                MatMap<T>(dxg, g.patch, g.out_plane).noalias() += sign * (wg.transpose() * dyg);
              } else {
                MatMap<T>(dcol.data(), g.patch, g.out_plane).noalias() = wg.transpose() * dyg;
                if (sign < T(0)) {
                  for (auto& v : dcol) v = -v;
                }
                col2im(dcol.data(), g, dxg);
              }
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// batchnorm3d

template <typename T>
Tensor<T> batchnorm3d(const Tensor<T>& input, BatchNorm3dLayer<T>& layer) {
  require_rank5(input.shape(), "batchnorm3d");
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3) * input.dim(4);
  if (channels != layer.channels()) {
    fail(ErrorCode::shape_mismatch, "batchnorm3d has " + std::to_string(layer.channels()) + " channels, input " +
                                        shape_str(input.shape()));
  }
  const std::size_t count = batch * plane;
  const bool train = layer.mode == BatchNormMode::train;
  if (train && count < 2) {
    fail(ErrorCode::invalid_argument, "batchnorm3d in train mode needs at least 2 values per channel");
  }
  const T* x = input.data().data();
  const T* gamma = layer.gamma.data().data();
  const T* beta = layer.beta.data().data();
  std::vector<T> inv_std(channels);
  std::vector<T> xhat(input.size());
  std::vector<T> out(input.size());

  auto rmean = layer.running_mean.mutable_data();
  auto rvar = layer.running_var.mutable_data();
  for (std::size_t c = 0; c < channels; ++c) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* xc = x + (n * channels + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) s += xc[p];
      }
      mu = s / static_cast<double>(count);
      double ss = 0.0;
      for (std::size_t n = 0; n < batch; ++n) {
        const T* xc = x + (n * channels + c) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
          const double d = xc[p] - mu;
          ss += d * d;
        }
      }
      var = ss / static_cast<double>(count);
      const double m = layer.momentum_stats;
      const double unbiased = ss / static_cast<double>(count - 1);
      rmean[c] = static_cast<T>((1.0 - m) * rmean[c] + m * mu);
      rvar[c] = static_cast<T>((1.0 - m) * rvar[c] + m * unbiased);
    } else {
      mu = rmean[c];
      var = rvar[c];
    }
    const T is = static_cast<T>(1.0 / std::sqrt(var + layer.epsilon));
    const T mu_t = static_cast<T>(mu);
    inv_std[c] = is;
    for (std::size_t n = 0; n < batch; ++n) {
      const std::size_t off = (n * channels + c) * plane;
      for (std::size_t p = 0; p < plane; ++p) {
        const T h = (x[off + p] - mu_t) * is;
        xhat[off + p] = h;
        out[off + p] = gamma[c] * h + beta[c];
      }
    }
  }

  auto xs = input.state_ptr();
  auto gs = layer.gamma.state_ptr();
  auto bs = layer.beta.state_ptr();
  return record<T>(
      input.shape(), std::move(out), {&input, &layer.gamma, &layer.beta},
      [xs, gs, bs, train, batch, channels, plane, count, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          std::span<const T> g, std::span<const T>) {
        T* dgamma = gs->grad_sink();
        T* dbeta = bs->grad_sink();
        T* dx = xs->grad_sink();
        for (std::size_t c = 0; c < channels; ++c) {
          T sum_g = T(0), sum_gx = T(0);
          for (std::size_t n = 0; n < batch; ++n) {
            const std::size_t off = (n * channels + c) * plane;
            for (std::size_t p = 0; p < plane; ++p) {
              sum_g += g[off + p];
              sum_gx += g[off + p] * xhat[off + p];
            }
          }
          if (dgamma) dgamma[c] += sum_gx;
          if (dbeta) dbeta[c] += sum_g;
          if (!dx) continue;
          const T gam = gs->data[c];
          if (train) {
            const T m = static_cast<T>(count);
            const T k = gam * inv_std[c] / m;
            for (std::size_t n = 0; n < batch; ++n) {
              const std::size_t off = (n * channels + c) * plane;
              for (std::size_t p = 0; p < plane; ++p) {
                dx[off + p] += k * (m * g[off + p] - sum_g - xhat[off + p] * sum_gx);
              }
            }
          } else {
            const T k = gam * inv_std[c];
            for (std::size_t n = 0; n < batch; ++n) {
              const std::size_t off = (n * channels + c) * plane;
              for (std::size_t p = 0; p < plane; ++p) dx[off + p] += k * g[off + p];
            }
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Pooling

template <typename T>
Tensor<T> pool3d(const Tensor<T>& input, PoolKind kind, Triple window, Triple stride) {
  require_rank5(input.shape(), "pool3d");
  const std::size_t batch = input.dim(0), channels = input.dim(1);
  const std::size_t it = input.dim(2), ih = input.dim(3), iw = input.dim(4);
  for (int a = 0; a < 3; ++a) {
    if (window[a] > input.dim(2 + a)) {
      fail(ErrorCode::shape_mismatch, "pool window exceeds input " + shape_str(input.shape()));
    }
  }
  const std::size_t ot = conv_output_extent(it, window[0], stride[0], 0);
  const std::size_t oh = conv_output_extent(ih, window[1], stride[1], 0);
  const std::size_t ow = conv_output_extent(iw, window[2], stride[2], 0);
  const std::size_t in_plane = it * ih * iw, out_plane = ot * oh * ow;
  const T* x = input.data().data();
  std::vector<T> out(batch * channels * out_plane);
  std::vector<std::size_t> argmax(kind == PoolKind::max ? out.size() : 0);
  const T inv_window = T(1) / static_cast<T>(window[0] * window[1] * window[2]);

  for (std::size_t nc = 0; nc < batch * channels; ++nc) {
    const T* xc = x + nc * in_plane;
    for (std::size_t t = 0; t < ot; ++t) {
      for (std::size_t h = 0; h < oh; ++h) {
        for (std::size_t w = 0; w < ow; ++w) {
          const std::size_t o = nc * out_plane + (t * oh + h) * ow + w;
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_at = 0;
          T acc = T(0);
          for (std::size_t l = 0; l < window[0]; ++l) {
            for (std::size_t a = 0; a < window[1]; ++a) {
              for (std::size_t b = 0; b < window[2]; ++b) {
                const std::size_t at = ((t * stride[0] + l) * ih + h * stride[1] + a) * iw + w * stride[2] + b;
                const T v = xc[at];
                if (kind == PoolKind::max) {
                  if (v > best) {
                    best = v;
                    best_at = at;
                  }
                } else {
                  acc += v;
                }
              }
            }
          }
          if (kind == PoolKind::max) {
            out[o] = best;
            argmax[o] = nc * in_plane + best_at;
          } else {
            out[o] = acc * inv_window;
          }
        }
      }
    }
  }

  auto xs = input.state_ptr();
  return record<T>(
      {batch, channels, ot, oh, ow}, std::move(out), {&input},
      [xs, kind, window, stride, argmax = std::move(argmax), in_plane, out_plane, ih, iw, ot, oh, ow, inv_window](
          std::span<const T> g, std::span<const T>) {
        T* dx = xs->grad_sink();
        if (!dx) return;
        if (kind == PoolKind::max) {
          for (std::size_t o = 0; o < g.size(); ++o) dx[argmax[o]] += g[o];
          return;
        }
        const std::size_t planes = g.size() / out_plane;
        for (std::size_t nc = 0; nc < planes; ++nc) {
          T* dxc = dx + nc * in_plane;
          for (std::size_t t = 0; t < ot; ++t) {
            for (std::size_t h = 0; h < oh; ++h) {
              for (std::size_t w = 0; w < ow; ++w) {
                const T share = g[nc * out_plane + (t * oh + h) * ow + w] * inv_window;
                for (std::size_t l = 0; l < window[0]; ++l) {
                  for (std::size_t a = 0; a < window[1]; ++a) {
                    for (std::size_t b = 0; b < window[2]; ++b) {
                      dxc[((t * stride[0] + l) * ih + h * stride[1] + a) * iw + w * stride[2] + b] += share;
                    }
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& input) {
  require_rank5(input.shape(), "global_avg_pool");
  const std::size_t rows = input.dim(0) * input.dim(1);
  const std::size_t plane = input.dim(2) * input.dim(3) * input.dim(4);
  const T* x = input.data().data();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    T acc = T(0);
    for (std::size_t p = 0; p < plane; ++p) acc += x[r * plane + p];
    out[r] = acc / static_cast<T>(plane);
  }
  auto xs = input.state_ptr();
  return record<T>({input.dim(0), input.dim(1)}, std::move(out), {&input},
                   [xs, plane](std::span<const T> g, std::span<const T>) {
                     T* dx = xs->grad_sink();
                     if (!dx) return;
                     const T inv = T(1) / static_cast<T>(plane);
                     for (std::size_t r = 0; r < g.size(); ++r) {
                       const T share = g[r] * inv;
                       for (std::size_t p = 0; p < plane; ++p) dx[r * plane + p] += share;
                     }
                   });
}

// ---------------------------------------------------------------------------
// Dense layers and activations

template <typename T>
Tensor<T> linear(const Tensor<T>& input, const LinearLayer<T>& layer, Activation activation) {
  if (input.rank() != 2 || input.dim(1) != layer.in_features() || layer.bias.size() != layer.out_features()) {
    fail(ErrorCode::shape_mismatch, "linear layer " + shape_str(layer.weights.shape()) + " applied to " +
                                        shape_str(input.shape()));
  }
  const std::size_t rows = input.dim(0), in = layer.in_features(), outf = layer.out_features();
  const T* x = input.data().data();
  const T* w = layer.weights.data().data();
  const T* b = layer.bias.data().data();
  std::vector<T> out(rows * outf);
  for (std::size_t n = 0; n < rows; ++n) {
    for (std::size_t o = 0; o < outf; ++o) {
      T acc = b[o];
      for (std::size_t i = 0; i < in; ++i) acc += x[n * in + i] * w[o * in + i];
      out[n * outf + o] = apply_activation(acc, activation);
    }
  }
  auto xs = input.state_ptr();
  auto ws = layer.weights.state_ptr();
  auto bs = layer.bias.state_ptr();
  return record<T>({rows, outf}, std::move(out), {&input, &layer.weights, &layer.bias},
                   [xs, ws, bs, rows, in, outf, activation](std::span<const T> g, std::span<const T> y) {
                     const std::vector<T> d = pre_activation_grad(g, y, activation);
                     if (T* db = bs->grad_sink()) {
                       for (std::size_t n = 0; n < rows; ++n) {
                         for (std::size_t o = 0; o < outf; ++o) db[o] += d[n * outf + o];
                       }
                     }
                     if (T* dw = ws->grad_sink()) {
                       for (std::size_t n = 0; n < rows; ++n) {
                         for (std::size_t o = 0; o < outf; ++o) {
                           const T dv = d[n * outf + o];
                           for (std::size_t i = 0; i < in; ++i) dw[o * in + i] += dv * xs->data[n * in + i];
                         }
                       }
                     }
                     if (T* dx = xs->grad_sink()) {
                       for (std::size_t n = 0; n < rows; ++n) {
                         for (std::size_t o = 0; o < outf; ++o) {
                           const T dv = d[n * outf + o];
                           for (std::size_t i = 0; i < in; ++i) dx[n * in + i] += dv * ws->data[o * in + i];
                         }
                       }
                     }
                   });
}

template <typename T>
Tensor<T> activate(const Tensor<T>& input, Activation activation) {
  std::vector<T> out(input.data().begin(), input.data().end());
  for (auto& v : out) v = apply_activation(v, activation);
  auto xs = input.state_ptr();
  return record<T>(input.shape(), std::move(out), {&input},
                   [xs, activation](std::span<const T> g, std::span<const T> y) {
                     T* dx = xs->grad_sink();
                     if (!dx) return;
                     for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * activation_slope(y[i], activation);
                   });
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
Tensor<T> softmax_cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
    fail(ErrorCode::shape_mismatch, "softmax_cross_entropy logits " + shape_str(logits.shape()) + " with " +
                                        std::to_string(labels.size()) + " labels");
  }
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  const T* z = logits.data().data();
  std::vector<T> probs(rows * k);
  std::vector<int> lab(labels.begin(), labels.end());
  T total = T(0);
  for (std::size_t n = 0; n < rows; ++n) {
    if (lab[n] < 0 || static_cast<std::size_t>(lab[n]) >= k) {
      fail(ErrorCode::invalid_argument, "label " + std::to_string(lab[n]) + " outside [0," + std::to_string(k) + ")");
    }
    const T* zr = z + n * k;
    const T mx = *std::max_element(zr, zr + k);
    T s = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      probs[n * k + j] = std::exp(zr[j] - mx);
      s += probs[n * k + j];
    }
    for (std::size_t j = 0; j < k; ++j) probs[n * k + j] /= s;
    total += mx + std::log(s) - zr[lab[n]];
  }
  auto zs = logits.state_ptr();
  return record<T>({1}, {total / static_cast<T>(rows)}, {&logits},
                   [zs, probs = std::move(probs), lab = std::move(lab), rows, k](std::span<const T> g,
                                                                                 std::span<const T>) {
                     T* dz = zs->grad_sink();
                     if (!dz) return;
                     const T scale = g[0] / static_cast<T>(rows);
                     for (std::size_t n = 0; n < rows; ++n) {
                       for (std::size_t j = 0; j < k; ++j) {
                         const T onehot = static_cast<int>(j) == lab[n] ? T(1) : T(0);
                         dz[n * k + j] += scale * (probs[n * k + j] - onehot);
                       }
                     }
                   });
}

template <typename T>
Tensor<T> binary_cross_entropy_with_logit(const Tensor<T>& logits, std::span<const int> domain_labels) {
  if (logits.size() != domain_labels.size()) {
    fail(ErrorCode::shape_mismatch, "binary_cross_entropy logits " + shape_str(logits.shape()) + " with " +
                                        std::to_string(domain_labels.size()) + " labels");
  }
  const std::size_t rows = logits.size();
  const T* z = logits.data().data();
  std::vector<int> lab(domain_labels.begin(), domain_labels.end());
  T total = T(0);
  for (std::size_t n = 0; n < rows; ++n) {
    if (lab[n] != 0 && lab[n] != 1) fail(ErrorCode::invalid_argument, "domain labels must be 0 or 1");
    const T v = z[n];
    total += std::max(v, T(0)) - v * static_cast<T>(lab[n]) + std::log1p(std::exp(-std::abs(v)));
  }
  auto zs = logits.state_ptr();
  return record<T>({1}, {total / static_cast<T>(rows)}, {&logits},
                   [zs, lab = std::move(lab), rows](std::span<const T> g, std::span<const T>) {
                     T* dz = zs->grad_sink();
                     if (!dz) return;
                     const T scale = g[0] / static_cast<T>(rows);
                     for (std::size_t n = 0; n < rows; ++n) {
                       const T v = zs->data[n];
                       const T e = std::exp(-std::abs(v));
                       const T sig = v >= T(0) ? T(1) / (T(1) + e) : e / (T(1) + e);
                       dz[n] += scale * (sig - static_cast<T>(lab[n]));
                     }
                   });
}

template <typename T>
Tensor<T> gradient_reversal(const Tensor<T>& input, T lambda) {
  if (!(lambda >= T(0))) fail(ErrorCode::invalid_argument, "gradient reversal lambda must be nonnegative");
  std::vector<T> out(input.data().begin(), input.data().end());
  auto xs = input.state_ptr();
  const T factor = -lambda;
  return record<T>(input.shape(), std::move(out), {&input}, [xs, factor](std::span<const T> g, std::span<const T>) {
    T* dx = xs->grad_sink();
    if (!dx) return;
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += factor * g[i];
  });
}

template <typename T>
std::vector<int> argmax_rows(const Tensor<T>& logits) {
  if (logits.rank() != 2) fail(ErrorCode::shape_mismatch, "argmax_rows expects [N,K]");
  const std::size_t rows = logits.dim(0), k = logits.dim(1);
  std::vector<int> out(rows);
  auto z = logits.data();
  for (std::size_t n = 0; n < rows; ++n) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (z[n * k + j] > z[n * k + best]) best = j;
    }
    out[n] = static_cast<int>(best);
  }
  return out;
}

#define DINET_INSTANTIATE_OPS(T)                                                                          \
  template struct Conv3dLayer<T>;                                                                         \
  template struct BatchNorm3dLayer<T>;                                                                    \
  template struct LinearLayer<T>;                                                                         \
  template Tensor<T> conv3d<T>(const Tensor<T>&, const Conv3dLayer<T>&, Activation);                      \
  template Tensor<T> batchnorm3d<T>(const Tensor<T>&, BatchNorm3dLayer<T>&);                              \
  template Tensor<T> pool3d<T>(const Tensor<T>&, PoolKind, Triple, Triple);                               \
  template Tensor<T> global_avg_pool<T>(const Tensor<T>&);                                                \
  template Tensor<T> linear<T>(const Tensor<T>&, const LinearLayer<T>&, Activation);                      \
  template Tensor<T> activate<T>(const Tensor<T>&, Activation);                                           \
  template Tensor<T> softmax_cross_entropy<T>(const Tensor<T>&, std::span<const int>);                    \
  template Tensor<T> binary_cross_entropy_with_logit<T>(const Tensor<T>&, std::span<const int>);          \
  template Tensor<T> gradient_reversal<T>(const Tensor<T>&, T);                                           \
  template void init_parameters<T>(Conv3dLayer<T>&, std::uint64_t);                                       \
  template void init_parameters<T>(LinearLayer<T>&, std::uint64_t);                                       \
  template void init_parameters<T>(BatchNorm3dLayer<T>&, std::uint64_t);                                  \
  template std::vector<int> argmax_rows<T>(const Tensor<T>&);

DINET_INSTANTIATE_OPS(float)
DINET_INSTANTIATE_OPS(double)

}  // namespace dinet
