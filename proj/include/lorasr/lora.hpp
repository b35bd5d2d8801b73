// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>

#include "lorasr/ops.hpp"
#include "lorasr/tensor.hpp"

namespace lorasr {

/// A plain convolution: kernel [Cout,Cin,kh,kw] and optional bias [Cout].
/// Padding is always "same" (k / 2).
template <typename Scalar>
struct ConvParams {
  Tensor<Scalar> kernel;
  std::optional<Tensor<Scalar>> bias;

  Index out_channels() const { return kernel.dim(0); }
  Index in_channels() const { return kernel.dim(1); }
  Index fan_in() const { return kernel.dim(1) * kernel.dim(2) * kernel.dim(3); }
  Index padding() const { return kernel.dim(2) / 2; }
  Index parameter_count() const { return kernel.numel() + (bias ? bias->numel() : 0); }

  template <typename Other>
  ConvParams<Other> cast() const {
    ConvParams<Other> out{kernel.template cast<Other>(), std::nullopt};
    if (bias) out.bias = bias->template cast<Other>();
    return out;
  }

  bool operator==(const ConvParams& other) const {
    return kernel == other.kernel && bias.has_value() == other.bias.has_value() &&
           (!bias || *bias == *other.bias);
  }
};

/// Frozen convolution plus trainable low-rank factors.
///
/// The effective kernel, viewed as a [Cout, Cin*kh*kw] matrix, is
/// base + (alpha / rank) * lora_x * lora_y.
template <typename Scalar>
struct ConvLoRAAdapter {
  ConvParams<Scalar> base;
  Tensor<Scalar> lora_x;  // [Cout, rank]
  Tensor<Scalar> lora_y;  // [rank, Cin*kh*kw]
  int rank = 1;
  double alpha = 1.0;

  Scalar scale() const { return static_cast<Scalar>(alpha / rank); }
  Index trainable_count() const { return lora_x.numel() + lora_y.numel(); }

  template <typename Other>
  ConvLoRAAdapter<Other> cast() const {
    return {base.template cast<Other>(), lora_x.template cast<Other>(), lora_y.template cast<Other>(), rank,
            alpha};
  }
};

struct LoraSpec {
  int rank = 1;
  double alpha = 1.0;
  bool operator==(const LoraSpec&) const = default;
};

/// Layer name -> (rank, alpha). Names are either a convolution name
/// ("Conv_2", "SConvLB_3.w2") or a block name ("SConvLB_3"), which adapts all
/// three convolutions of the block.
using LoraPlan = std::map<std::string, LoraSpec>;

/// Per-layer ranks used for the 26- and 48-channel students.
inline LoraPlan default_plan() {
  return {
      {"SConvLB_6", {4, 8}},   {"SConvLB_1", {8, 16}},  {"SConvLB_2", {12, 24}}, {"SConvLB_3", {12, 24}},
      {"SConvLB_4", {12, 24}}, {"SConvLB_5", {12, 24}}, {"Upsampler", {16, 32}}, {"Conv_2", {24, 48}},
  };
}

/// Number of trainable scalars a rank-r adapter adds to a conv.
inline Index lora_parameter_count(Index out_channels, Index fan_in, int rank) {
  return static_cast<Index>(rank) * (out_channels + fan_in);
}

template <typename Scalar>
ConvLoRAAdapter<Scalar> init_adapter(ConvParams<Scalar> base, int rank, double alpha, std::uint64_t seed) {
  const Index bound = std::min(base.out_channels(), base.fan_in());
  if (rank < 1 || rank > bound)
    throw ConfigError("LoRA rank " + std::to_string(rank) + " out of range [1, " + std::to_string(bound) +
                      "] = [1, min(Cout, Cin*kh*kw)] for kernel " + shape_string(base.kernel.shape()));
  if (!(alpha > 0.0)) throw ConfigError("LoRA alpha must be positive, got " + std::to_string(alpha));
  std::mt19937_64 rng(seed);
  ConvLoRAAdapter<Scalar> adapter;
  adapter.lora_x = Tensor<Scalar>::normal({base.out_channels(), rank}, rng, Scalar(0),
                                          static_cast<Scalar>(1.0 / std::sqrt(static_cast<double>(rank))));
  adapter.lora_y = Tensor<Scalar>::zeros({rank, base.fan_in()});
  adapter.base = std::move(base);
  adapter.rank = rank;
  adapter.alpha = alpha;
  return adapter;
}

template <typename Scalar>
Tensor<Scalar> effective_weight(const ConvLoRAAdapter<Scalar>& a) {
  using Mat = detail::RowMatrix<Scalar>;
  const Index cout = a.base.out_channels(), fan_in = a.base.fan_in();
  Mat delta(cout, fan_in);
  delta.noalias() = Eigen::Map<const Mat>(a.lora_x.data(), cout, a.rank) *
                    Eigen::Map<const Mat>(a.lora_y.data(), a.rank, fan_in);
  Tensor<Scalar> out = a.base.kernel;
  out.array() += Eigen::Map<const typename Tensor<Scalar>::Storage>(delta.data(), delta.size()) * a.scale();
  return out;
}

/// Tape version of effective_weight().
template <typename Scalar>
Var<Scalar> effective_weight(const Var<Scalar>& base_kernel, const Var<Scalar>& lora_x, const Var<Scalar>& lora_y,
                             Scalar factor) {
  return add(base_kernel, reshape(scale(matmul(lora_x, lora_y), factor), base_kernel.shape()));
}

/// Folds the low-rank delta into the kernel. The bias passes through.
template <typename Scalar>
ConvParams<Scalar> merge(const ConvLoRAAdapter<Scalar>& a) {
  return {effective_weight(a), a.base.bias};
}

template <typename Scalar>
ConvParams<Scalar> blend_with_pretrained(const ConvParams<Scalar>& merged, const ConvParams<Scalar>& pretrained,
                                         double beta, const std::string& name = "conv") {
  if (beta < 0.0 || beta > 1.0) throw ConfigError("blend beta must lie in [0, 1], got " + std::to_string(beta));
  auto mix = [beta](const Tensor<Scalar>& m, const Tensor<Scalar>& p, const std::string& what) {
    if (m.shape() != p.shape())
      throw ShapeError("blend: tensor '" + what + "' shape " + shape_string(m.shape()) + " vs pretrained " +
                       shape_string(p.shape()));
    if (beta == 1.0) return m;
    const Scalar b = static_cast<Scalar>(beta);
    return Tensor<Scalar>(m.shape(), p.array() + b * (m.array() - p.array()));
  };
  ConvParams<Scalar> out{mix(merged.kernel, pretrained.kernel, name + ".kernel"), std::nullopt};
  if (merged.bias.has_value() != pretrained.bias.has_value())
    throw ShapeError("blend: tensor '" + name + ".bias' present in only one of the inputs");
  if (merged.bias) out.bias = mix(*merged.bias, *pretrained.bias, name + ".bias");
  return out;
}

}  // namespace lorasr
