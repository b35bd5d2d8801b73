// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "lorasr/tape.hpp"
#include "lorasr/tensor.hpp"

namespace lorasr {

/// Odd, bounded activation used for the parameter-free attention map.
enum class SymmetricActivation {
  ShiftedSigmoid,  ///< sigmoid(x) - 0.5, range (-0.5, 0.5)
  Tanh,            ///< tanh(x), range (-1, 1)
};

namespace detail {

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
Scalar sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

struct ConvGeometry {
  Index batch, in_channels, height, width;
  Index out_channels, kernel_h, kernel_w, padding;
  Index out_h, out_w;

  Index patch_size() const { return in_channels * kernel_h * kernel_w; }
  Index out_pixels() const { return out_h * out_w; }
};

inline ConvGeometry conv_geometry(const Shape& input, const Shape& kernel, Index padding) {
  require_rank(input, 4, "conv2d input");
  require_rank(kernel, 4, "conv2d kernel");
  if (input[1] != kernel[1])
    throw ShapeError("conv2d: input " + shape_string(input) + " has " + std::to_string(input[1]) +
                     " channels but kernel " + shape_string(kernel) + " expects " +
                     std::to_string(kernel[1]));
  if (kernel[2] % 2 == 0 || kernel[3] % 2 == 0)
    throw ShapeError("conv2d: kernel spatial size must be odd, got " + shape_string(kernel));
  if (padding < 0) throw ShapeError("conv2d: negative padding");
  ConvGeometry g{input[0], input[1], input[2], input[3], kernel[0], kernel[2], kernel[3], padding, 0, 0};
  g.out_h = g.height + 2 * padding - g.kernel_h + 1;
  g.out_w = g.width + 2 * padding - g.kernel_w + 1;
  if (g.out_h < 1 || g.out_w < 1)
    throw ShapeError("conv2d: input " + shape_string(input) + " too small for kernel " +
                     shape_string(kernel));
  return g;
}

/// Unfolds one sample into a [Cin*kh*kw, out_h*out_w] patch matrix.
template <typename Scalar>
void im2col(const Scalar* sample, const ConvGeometry& g, RowMatrix<Scalar>& col) {
  col.resize(g.patch_size(), g.out_pixels());
  for (Index c = 0; c < g.in_channels; ++c)
    for (Index ky = 0; ky < g.kernel_h; ++ky)
      for (Index kx = 0; kx < g.kernel_w; ++kx) {
        Scalar* row = col.row((c * g.kernel_h + ky) * g.kernel_w + kx).data();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy + ky - g.padding;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox + kx - g.padding;
            const bool inside = iy >= 0 && iy < g.height && ix >= 0 && ix < g.width;
            row[oy * g.out_w + ox] = inside ? sample[(c * g.height + iy) * g.width + ix] : Scalar(0);
          }
        }
      }
}

/// Adjoint of im2col: scatters patch gradients back onto one sample.
template <typename Scalar>
void col2im_add(const RowMatrix<Scalar>& col, const ConvGeometry& g, Scalar* sample_grad) {
  for (Index c = 0; c < g.in_channels; ++c)
    for (Index ky = 0; ky < g.kernel_h; ++ky)
      for (Index kx = 0; kx < g.kernel_w; ++kx) {
        const Scalar* row = col.row((c * g.kernel_h + ky) * g.kernel_w + kx).data();
        for (Index oy = 0; oy < g.out_h; ++oy) {
          const Index iy = oy + ky - g.padding;
          if (iy < 0 || iy >= g.height) continue;
          for (Index ox = 0; ox < g.out_w; ++ox) {
            const Index ix = ox + kx - g.padding;
            if (ix < 0 || ix >= g.width) continue;
            sample_grad[(c * g.height + iy) * g.width + ix] += row[oy * g.out_w + ox];
          }
        }
      }
}

template <typename Scalar>
Tensor<Scalar> conv2d_forward(const Tensor<Scalar>& input, const Tensor<Scalar>& kernel,
                              const Tensor<Scalar>* bias, Index padding) {
  const ConvGeometry g = conv_geometry(input.shape(), kernel.shape(), padding);
  if (bias && bias->shape() != Shape{g.out_channels})
    throw ShapeError("conv2d: bias " + shape_string(bias->shape()) + " does not match kernel " +
                     shape_string(kernel.shape()));
  Tensor<Scalar> out({g.batch, g.out_channels, g.out_h, g.out_w});
  Eigen::Map<const RowMatrix<Scalar>> weights(kernel.data(), g.out_channels, g.patch_size());
  RowMatrix<Scalar> col;
  const Index in_stride = g.in_channels * g.height * g.width;
  const Index out_stride = g.out_channels * g.out_pixels();
  for (Index n = 0; n < g.batch; ++n) {
    im2col(input.data() + n * in_stride, g, col);
    Eigen::Map<RowMatrix<Scalar>> y(out.data() + n * out_stride, g.out_channels, g.out_pixels());
    y.noalias() = weights * col;
    if (bias) y.colwise() += Eigen::Map<const Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(bias->data(), g.out_channels);
  }
  return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Differentiable operations

/// Cross-correlation with zero padding. `bias` may be an invalid (default) Var.
template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, const Var<Scalar>& bias,
                   Index padding) {
  auto& tape = tape_of(input);
  tape.check_owned(kernel);
  const bool has_bias = bias.valid();
  if (has_bias) tape.check_owned(bias);
  Tensor<Scalar> out = detail::conv2d_forward(input.value(), kernel.value(),
                                              has_bias ? &bias.value() : nullptr, padding);
  std::vector<Var<Scalar>> inputs{input, kernel};
  if (has_bias) inputs.push_back(bias);
  return tape.record(std::move(out), inputs, [padding, has_bias](BackwardContext<Scalar>& ctx) {
    using Mat = detail::RowMatrix<Scalar>;
    const Tensor<Scalar>& x = *ctx.inputs[0];
    const Tensor<Scalar>& k = *ctx.inputs[1];
    const detail::ConvGeometry g = detail::conv_geometry(x.shape(), k.shape(), padding);
    const Index in_stride = g.in_channels * g.height * g.width;
    const Index out_stride = g.out_channels * g.out_pixels();
    Eigen::Map<const Mat> weights(k.data(), g.out_channels, g.patch_size());
    Mat col, dcol;
    for (Index n = 0; n < g.batch; ++n) {
      Eigen::Map<const Mat> dy(ctx.grad_out.data() + n * out_stride, g.out_channels, g.out_pixels());
      if (ctx.grads[1]) {
        detail::im2col(x.data() + n * in_stride, g, col);
        Eigen::Map<Mat>(ctx.grads[1]->data(), g.out_channels, g.patch_size()).noalias() +=
            dy * col.transpose();
      }
      if (ctx.grads[0]) {
        dcol.noalias() = weights.transpose() * dy;
        detail::col2im_add(dcol, g, ctx.grads[0]->data() + n * in_stride);
      }
      if (has_bias && ctx.grads[2])
        Eigen::Map<Eigen::Matrix<Scalar, Eigen::Dynamic, 1>>(ctx.grads[2]->data(), g.out_channels) +=
            dy.rowwise().sum();
    }
  });
}

template <typename Scalar>
Var<Scalar> conv2d(const Var<Scalar>& input, const Var<Scalar>& kernel, Index padding) {
  return conv2d(input, kernel, Var<Scalar>{}, padding);
}

template <typename Scalar>
Var<Scalar> silu(const Var<Scalar>& x) {
  Tensor<Scalar> out = x.value();
  out.array() = x.value().array().unaryExpr([](Scalar v) { return v * detail::sigmoid(v); });
  return tape_of(x).record(std::move(out), {x}, [](BackwardContext<Scalar>& ctx) {
    const auto& in = ctx.inputs[0]->array();
    ctx.grads[0]->array() += ctx.grad_out.array() * in.unaryExpr([](Scalar v) {
      const Scalar s = detail::sigmoid(v);
      return s * (Scalar(1) + v * (Scalar(1) - s));
    });
  });
}

template <typename Scalar>
Var<Scalar> symmetric_activation(const Var<Scalar>& x,
                                 SymmetricActivation kind = SymmetricActivation::ShiftedSigmoid) {
  Tensor<Scalar> out = x.value();
  if (kind == SymmetricActivation::ShiftedSigmoid)
    out.array() = x.value().array().unaryExpr([](Scalar v) { return detail::sigmoid(v) - Scalar(0.5); });
  else
    out.array() = x.value().array().tanh();
  return tape_of(x).record(std::move(out), {x}, [kind](BackwardContext<Scalar>& ctx) {
    const auto& in = ctx.inputs[0]->array();
    if (kind == SymmetricActivation::ShiftedSigmoid) {
      ctx.grads[0]->array() += ctx.grad_out.array() * in.unaryExpr([](Scalar v) {
        const Scalar s = detail::sigmoid(v);
        return s * (Scalar(1) - s);
      });
    } else {
      const auto& y = ctx.out.array();
      ctx.grads[0]->array() += ctx.grad_out.array() * (Scalar(1) - y * y);
    }
  });
}

namespace detail {

// Depth-to-space: out[n, c, h*s+i, w*s+j] = in[n, c*s*s + i*s + j, h, w].
template <typename Scalar, bool kToSpace>
void shuffle_copy(const Tensor<Scalar>& src, Tensor<Scalar>& dst, Index s) {
  const Tensor<Scalar>& deep = kToSpace ? src : dst;
  const Index n_batch = deep.dim(0), channels = deep.dim(1) / (s * s), h = deep.dim(2), w = deep.dim(3);
  for (Index n = 0; n < n_batch; ++n)
    for (Index c = 0; c < channels; ++c)
      for (Index i = 0; i < s; ++i)
        for (Index j = 0; j < s; ++j)
          for (Index y = 0; y < h; ++y)
            for (Index x = 0; x < w; ++x) {
              const Index d = ((n * channels * s * s + c * s * s + i * s + j) * h + y) * w + x;
              const Index p = ((n * channels + c) * h * s + y * s + i) * w * s + x * s + j;
              if constexpr (kToSpace)
                dst[p] = src[d];
              else
                dst[d] = src[p];
            }
}

template <typename Scalar>
Tensor<Scalar> pixel_shuffle_values(const Tensor<Scalar>& x, Index s) {
  require_rank(x.shape(), 4, "pixel_shuffle");
  if (s < 1 || x.dim(1) % (s * s) != 0)
    throw ShapeError("pixel_shuffle: channels " + std::to_string(x.dim(1)) + " not divisible by " +
                     std::to_string(s) + "^2");
  Tensor<Scalar> out({x.dim(0), x.dim(1) / (s * s), x.dim(2) * s, x.dim(3) * s});
  shuffle_copy<Scalar, true>(x, out, s);
  return out;
}

template <typename Scalar>
Tensor<Scalar> pixel_unshuffle_values(const Tensor<Scalar>& x, Index s) {
  require_rank(x.shape(), 4, "pixel_unshuffle");
  if (s < 1 || x.dim(2) % s != 0 || x.dim(3) % s != 0)
    throw ShapeError("pixel_unshuffle: spatial dims " + shape_string(x.shape()) +
                     " not divisible by " + std::to_string(s));
  Tensor<Scalar> out({x.dim(0), x.dim(1) * s * s, x.dim(2) / s, x.dim(3) / s});
  shuffle_copy<Scalar, false>(x, out, s);
  return out;
}

}  // namespace detail

template <typename Scalar>
Var<Scalar> pixel_shuffle(const Var<Scalar>& x, Index s) {
  return tape_of(x).record(detail::pixel_shuffle_values(x.value(), s), {x},
                          [s](BackwardContext<Scalar>& ctx) {
                            ctx.grads[0]->array() += detail::pixel_unshuffle_values(ctx.grad_out, s).array();
                          });
}

template <typename Scalar>
Var<Scalar> pixel_unshuffle(const Var<Scalar>& x, Index s) {
  return tape_of(x).record(detail::pixel_unshuffle_values(x.value(), s), {x},
                          [s](BackwardContext<Scalar>& ctx) {
                            ctx.grads[0]->array() += detail::pixel_shuffle_values(ctx.grad_out, s).array();
                          });
}

template <typename Scalar>
Var<Scalar> add(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(a.shape(), a.value().array() + b.value().array());
  return tape_of(a).record(std::move(out), {a, b}, [](BackwardContext<Scalar>& ctx) {
    for (auto* g : ctx.grads)
      if (g) g->array() += ctx.grad_out.array();
  });
}

template <typename Scalar>
Var<Scalar> sub(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out(a.shape(), a.value().array() - b.value().array());
  return tape_of(a).record(std::move(out), {a, b}, [](BackwardContext<Scalar>& ctx) {
    if (ctx.grads[0]) ctx.grads[0]->array() += ctx.grad_out.array();
    if (ctx.grads[1]) ctx.grads[1]->array() -= ctx.grad_out.array();
  });
}

template <typename Scalar>
Var<Scalar> mul(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out(a.shape(), a.value().array() * b.value().array());
  return tape_of(a).record(std::move(out), {a, b}, [](BackwardContext<Scalar>& ctx) {
    if (ctx.grads[0]) ctx.grads[0]->array() += ctx.grad_out.array() * ctx.inputs[1]->array();
    if (ctx.grads[1]) ctx.grads[1]->array() += ctx.grad_out.array() * ctx.inputs[0]->array();
  });
}

template <typename Scalar>
Var<Scalar> scale(const Var<Scalar>& a, Scalar factor) {
  Tensor<Scalar> out(a.shape(), a.value().array() * factor);
  return tape_of(a).record(std::move(out), {a}, [factor](BackwardContext<Scalar>& ctx) {
    ctx.grads[0]->array() += ctx.grad_out.array() * factor;
  });
}

template <typename Scalar>
Var<Scalar> reshape(const Var<Scalar>& a, Shape shape) {
  return tape_of(a).record(a.value().reshaped(std::move(shape)), {a}, [](BackwardContext<Scalar>& ctx) {
    ctx.grads[0]->array() += ctx.grad_out.array();
  });
}

template <typename Scalar>
Var<Scalar> matmul(const Var<Scalar>& a, const Var<Scalar>& b) {
  using Mat = detail::RowMatrix<Scalar>;
  require_rank(a.shape(), 2, "matmul lhs");
  require_rank(b.shape(), 2, "matmul rhs");
  if (a.shape()[1] != b.shape()[0])
    throw ShapeError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                     shape_string(b.shape()));
  const Index m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Tensor<Scalar> out({m, n});
  Eigen::Map<Mat>(out.data(), m, n).noalias() =
      Eigen::Map<const Mat>(a.value().data(), m, k) * Eigen::Map<const Mat>(b.value().data(), k, n);
  return tape_of(a).record(std::move(out), {a, b}, [m, k, n](BackwardContext<Scalar>& ctx) {
    Eigen::Map<const Mat> dy(ctx.grad_out.data(), m, n);
    if (ctx.grads[0])
      Eigen::Map<Mat>(ctx.grads[0]->data(), m, k).noalias() +=
          dy * Eigen::Map<const Mat>(ctx.inputs[1]->data(), k, n).transpose();
    if (ctx.grads[1])
      Eigen::Map<Mat>(ctx.grads[1]->data(), k, n).noalias() +=
          Eigen::Map<const Mat>(ctx.inputs[0]->data(), m, k).transpose() * dy;
  });
}

/// Concatenates NCHW tensors along the channel axis.
template <typename Scalar>
Var<Scalar> concat_channels(const std::vector<Var<Scalar>>& parts) {
  if (parts.empty()) throw ShapeError("concat_channels: no inputs");
  const Shape& first = parts.front().shape();
  require_rank(first, 4, "concat_channels");
  Index channels = 0;
  for (const auto& p : parts) {
    require_rank(p.shape(), 4, "concat_channels");
    if (p.shape()[0] != first[0] || p.shape()[2] != first[2] || p.shape()[3] != first[3])
      throw ShapeError("concat_channels: " + shape_string(p.shape()) + " incompatible with " +
                       shape_string(first));
    channels += p.shape()[1];
  }
  const Index batch = first[0], plane = first[2] * first[3];
  Tensor<Scalar> out({batch, channels, first[2], first[3]});
  std::vector<Index> widths;
  for (Index n = 0, offset = 0; n < batch; ++n)
    for (const auto& p : parts) {
      const Index len = p.shape()[1] * plane;
      out.array().segment(offset, len) = p.value().array().segment(n * len, len);
      offset += len;
    }
  for (const auto& p : parts) widths.push_back(p.shape()[1] * plane);
  return tape_of(parts.front()).record(std::move(out), parts, [widths, batch](BackwardContext<Scalar>& ctx) {
    Index offset = 0;
    for (Index n = 0; n < batch; ++n)
      for (std::size_t i = 0; i < widths.size(); ++i) {
        if (ctx.grads[i])
          ctx.grads[i]->array().segment(n * widths[i], widths[i]) +=
              ctx.grad_out.array().segment(offset, widths[i]);
        offset += widths[i];
      }
  });
}

template <typename Scalar>
Var<Scalar> sum(const Var<Scalar>& a) {
  return tape_of(a).record(Tensor<Scalar>::scalar(a.value().array().sum()), {a},
                          [](BackwardContext<Scalar>& ctx) { ctx.grads[0]->array() += ctx.grad_out[0]; });
}

template <typename Scalar>
Var<Scalar> mean(const Var<Scalar>& a) {
  return scale(sum(a), Scalar(1) / static_cast<Scalar>(a.value().numel()));
}

/// mean(|a - b|). The subgradient at zero difference is taken as zero.
template <typename Scalar>
Var<Scalar> mean_abs_diff(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_abs_diff");
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(a.value().numel());
  Tensor<Scalar> out = Tensor<Scalar>::scalar((a.value().array() - b.value().array()).abs().sum() * inv_n);
  return tape_of(a).record(std::move(out), {a, b}, [inv_n](BackwardContext<Scalar>& ctx) {
    const auto sign = (ctx.inputs[0]->array() - ctx.inputs[1]->array()).sign();
    const Scalar g = ctx.grad_out[0] * inv_n;
    if (ctx.grads[0]) ctx.grads[0]->array() += g * sign;
    if (ctx.grads[1]) ctx.grads[1]->array() -= g * sign;
  });
}

/// mean((a - b)^2).
template <typename Scalar>
Var<Scalar> mean_squared_error(const Var<Scalar>& a, const Var<Scalar>& b) {
  require_same_shape(a.shape(), b.shape(), "mean_squared_error");
  const Scalar inv_n = Scalar(1) / static_cast<Scalar>(a.value().numel());
  Tensor<Scalar> out =
      Tensor<Scalar>::scalar((a.value().array() - b.value().array()).square().sum() * inv_n);
  return tape_of(a).record(std::move(out), {a, b}, [inv_n](BackwardContext<Scalar>& ctx) {
    const Scalar g = Scalar(2) * ctx.grad_out[0] * inv_n;
    const auto diff = ctx.inputs[0]->array() - ctx.inputs[1]->array();
    if (ctx.grads[0]) ctx.grads[0]->array() += g * diff;
    if (ctx.grads[1]) ctx.grads[1]->array() -= g * diff;
  });
}

inline constexpr double kAffinityEpsilon = 1e-8;

/// Cosine-similarity affinity between spatial positions: [N,C,H,W] -> [N,HW,HW].
///
/// Each position's C-vector f is normalised as f / (|f| + eps) and the result
/// is the Gram matrix of the normalised columns.
template <typename Scalar>
Var<Scalar> spatial_affinity(const Var<Scalar>& features) {
  using Mat = detail::RowMatrix<Scalar>;
  require_rank(features.shape(), 4, "spatial_affinity");
  const Index batch = features.shape()[0], channels = features.shape()[1];
  const Index positions = features.shape()[2] * features.shape()[3];
  const Scalar eps = static_cast<Scalar>(kAffinityEpsilon);
  Tensor<Scalar> out({batch, positions, positions});
  for (Index n = 0; n < batch; ++n) {
    Eigen::Map<const Mat> f(features.value().data() + n * channels * positions, channels, positions);
    const Eigen::Array<Scalar, 1, Eigen::Dynamic> inv = Scalar(1) / (f.colwise().norm().array() + eps);
    const Mat unit = f.array().rowwise() * inv;
    Eigen::Map<Mat>(out.data() + n * positions * positions, positions, positions).noalias() =
        unit.transpose() * unit;
  }
  return tape_of(features).record(std::move(out), {features}, [=](BackwardContext<Scalar>& ctx) {
    for (Index n = 0; n < batch; ++n) {
      Eigen::Map<const Mat> f(ctx.inputs[0]->data() + n * channels * positions, channels, positions);
      Eigen::Map<const Mat> g(ctx.grad_out.data() + n * positions * positions, positions, positions);
      const Eigen::Array<Scalar, 1, Eigen::Dynamic> norms = f.colwise().norm().array();
      const Eigen::Array<Scalar, 1, Eigen::Dynamic> inv = Scalar(1) / (norms + eps);
      const Mat unit = f.array().rowwise() * inv;
      const Mat d_unit = unit * (g + g.transpose());
      // d/df of f/(|f|+eps): inv * (d_unit - f (f.d_unit) / (|f| (|f|+eps)))
      const Eigen::Array<Scalar, 1, Eigen::Dynamic> proj = (f.array() * d_unit.array()).colwise().sum();
      Eigen::Array<Scalar, 1, Eigen::Dynamic> coef(positions);
      for (Index p = 0; p < positions; ++p)
        coef[p] = norms[p] > Scalar(0) ? proj[p] * inv[p] * inv[p] / norms[p] : Scalar(0);
      Eigen::Map<Mat> dx(ctx.grads[0]->data() + n * channels * positions, channels, positions);
      dx.array() += (d_unit.array().rowwise() * inv) - (f.array().rowwise() * coef);
    }
  });
}

}  // namespace lorasr
