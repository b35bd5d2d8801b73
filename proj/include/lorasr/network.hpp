// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "lorasr/lora.hpp"
#include "lorasr/ops.hpp"
#include "lorasr/tape.hpp"
#include "lorasr/tensor.hpp"

namespace lorasr {

struct ModelConfig {
  Index channels = 26;
  Index scale = 4;
  int num_blocks = 6;
  std::optional<LoraPlan> lora_plan;
  SymmetricActivation sigma_a = SymmetricActivation::ShiftedSigmoid;
  bool block_bias = false;  // bias on the three convs inside each block

  void validate() const {
    if (channels < 1) throw ConfigError("model.channels must be >= 1");
    if (scale < 1) throw ConfigError("model.scale must be >= 1");
    if (num_blocks < 1) throw ConfigError("model.blocks must be >= 1");
  }
};

inline std::string block_name(int index) { return "SConvLB_" + std::to_string(index + 1); }

/// One convolution slot of the network, optionally wrapped by an adapter.
/// When `adapter` is set the frozen weights live in `adapter->base`.
template <typename Scalar>
struct ConvLayer {
  std::string name;
  ConvParams<Scalar> plain;
  std::optional<ConvLoRAAdapter<Scalar>> adapter;

  const ConvParams<Scalar>& base() const { return adapter ? adapter->base : plain; }
  ConvParams<Scalar>& base() { return adapter ? adapter->base : plain; }
  ConvParams<Scalar> merged() const { return adapter ? merge(*adapter) : plain; }

  template <typename Other>
  ConvLayer<Other> cast() const {
    ConvLayer<Other> out{name, plain.template cast<Other>(), std::nullopt};
    if (adapter) out.adapter = adapter->template cast<Other>();
    return out;
  }
};

/// Head conv, a chain of attention blocks, tail conv over
/// concat(O_0, O_n, H_n), and a conv + pixel-shuffle upsampler.
template <typename Scalar>
struct SpanModel {
  ModelConfig config;
  ConvLayer<Scalar> head;
  std::vector<std::array<ConvLayer<Scalar>, 3>> blocks;
  ConvLayer<Scalar> tail;
  ConvLayer<Scalar> upsampler;

  /// Every conv slot in a fixed order: head, blocks, tail, upsampler.
  std::vector<const ConvLayer<Scalar>*> layers() const {
    std::vector<const ConvLayer<Scalar>*> out{&head};
    for (const auto& b : blocks)
      for (const auto& c : b) out.push_back(&c);
    out.push_back(&tail);
    out.push_back(&upsampler);
    return out;
  }
  std::vector<ConvLayer<Scalar>*> layers() {
    std::vector<ConvLayer<Scalar>*> out{&head};
    for (auto& b : blocks)
      for (auto& c : b) out.push_back(&c);
    out.push_back(&tail);
    out.push_back(&upsampler);
    return out;
  }

  ConvLayer<Scalar>* find(const std::string& name) {
    for (auto* l : layers())
      if (l->name == name) return l;
    return nullptr;
  }
  const ConvLayer<Scalar>* find(const std::string& name) const {
    for (const auto* l : layers())
      if (l->name == name) return l;
    return nullptr;
  }

  Index trainable_count() const {
    Index n = 0;
    for (const auto* l : layers())
      if (l->adapter) n += l->adapter->trainable_count();
    return n;
  }

  Index base_parameter_count() const {
    Index n = 0;
    for (const auto* l : layers()) n += l->base().parameter_count();
    return n;
  }

  bool has_adapters() const {
    for (const auto* l : layers())
      if (l->adapter) return true;
    return false;
  }

  /// Adapter-free copy with every delta folded into its kernel.
  SpanModel merged() const {
    SpanModel out = *this;
    for (auto* l : out.layers()) {
      l->plain = l->merged();
      l->adapter.reset();
    }
    out.config.lora_plan.reset();
    return out;
  }

  template <typename Other>
  SpanModel<Other> cast() const {
    SpanModel<Other> out{config, head.template cast<Other>(), {}, tail.template cast<Other>(),
                         upsampler.template cast<Other>()};
    for (const auto& b : blocks)
      out.blocks.push_back({b[0].template cast<Other>(), b[1].template cast<Other>(), b[2].template cast<Other>()});
    return out;
  }
};

/// Every name a LoraPlan may reference for this config.
inline std::vector<std::string> adaptable_layer_names(const ModelConfig& cfg) {
  std::vector<std::string> names{"conv_head"};
  for (int i = 0; i < cfg.num_blocks; ++i) {
    names.push_back(block_name(i));
    for (const char* w : {".w1", ".w2", ".w3"}) names.push_back(block_name(i) + w);
  }
  names.push_back("Conv_2");
  names.push_back("Upsampler");
  return names;
}

/// Resolves a plan to per-conv specs. Block names expand to their three convs;
/// an explicit conv entry wins over its block's entry.
inline std::map<std::string, LoraSpec> resolve_plan(const ModelConfig& cfg, const LoraPlan& plan) {
  const auto valid = adaptable_layer_names(cfg);
  const std::set<std::string> valid_set(valid.begin(), valid.end());
  std::map<std::string, LoraSpec> out;
  for (const auto& [name, spec] : plan) {
    if (!valid_set.count(name)) {
      std::string list;
      for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
      throw ConfigError("LoRA plan references unknown layer '" + name + "'; valid names: " + list);
    }
  }
  for (const auto& [name, spec] : plan) {
    if (name.rfind("SConvLB_", 0) == 0 && name.find('.') == std::string::npos) {
      for (const char* w : {".w1", ".w2", ".w3"}) out.emplace(name + w, spec);
    }
  }
  for (const auto& [name, spec] : plan)
    if (!(name.rfind("SConvLB_", 0) == 0 && name.find('.') == std::string::npos)) out[name] = spec;
  return out;
}

namespace detail {

template <typename Scalar, typename Rng>
ConvLayer<Scalar> he_conv(std::string name, Index cout, Index cin, Index k, bool bias, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(cin * k * k));
  ConvLayer<Scalar> layer{std::move(name), {Tensor<Scalar>::normal({cout, cin, k, k}, rng, Scalar(0),
                                                                     static_cast<Scalar>(stddev)),
                                            std::nullopt},
                          std::nullopt};
  if (bias) layer.plain.bias = Tensor<Scalar>::zeros({cout});
  return layer;
}

}  // namespace detail

/// Installs adapters on `model` per `plan`, replacing existing ones.
template <typename Scalar>
void install_adapters(SpanModel<Scalar>& model, const LoraPlan& plan, std::uint64_t seed) {
  const auto resolved = resolve_plan(model.config, plan);
  std::uint64_t slot = 0;
  for (auto* layer : model.layers()) {
    ++slot;
    auto it = resolved.find(layer->name);
    if (it == resolved.end()) continue;
    ConvParams<Scalar> base = layer->base();
    layer->adapter = init_adapter(std::move(base), it->second.rank, it->second.alpha,
                                  seed * 0x9E3779B97F4A7C15ULL + slot);
    layer->plain = {};
  }
  model.config.lora_plan = plan;
}

/// Deterministic fan-in Gaussian initialisation; biases start at zero.
template <typename Scalar>
SpanModel<Scalar> build_model(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  if (cfg.lora_plan) resolve_plan(cfg, *cfg.lora_plan);
  std::mt19937_64 rng(seed);
  const Index c = cfg.channels;
  SpanModel<Scalar> model;
  model.config = cfg;
  model.config.lora_plan.reset();
  model.head = detail::he_conv<Scalar>("conv_head", c, 3, 3, true, rng);
  for (int i = 0; i < cfg.num_blocks; ++i) {
    const std::string b = block_name(i);
    model.blocks.push_back({detail::he_conv<Scalar>(b + ".w1", c, c, 3, cfg.block_bias, rng),
                            detail::he_conv<Scalar>(b + ".w2", c, c, 3, cfg.block_bias, rng),
                            detail::he_conv<Scalar>(b + ".w3", c, c, 3, cfg.block_bias, rng)});
  }
  model.tail = detail::he_conv<Scalar>("Conv_2", c, 3 * c, 3, true, rng);
  model.upsampler = detail::he_conv<Scalar>("Upsampler", 3 * cfg.scale * cfg.scale, c, 3, true, rng);
  if (cfg.lora_plan) install_adapters(model, *cfg.lora_plan, seed);
  return model;
}

/// Which tensors the tape should differentiate.
struct BindOptions {
  bool train_base = false;
  bool train_lora = true;
};

template <typename Scalar>
struct BoundConv {
  Var<Scalar> weight;
  Var<Scalar> bias;
  Index padding = 1;
};

template <typename Scalar>
BoundConv<Scalar> bind(Tape<Scalar>& tape, const ConvLayer<Scalar>& layer, const BindOptions& opts) {
  const ConvParams<Scalar>& base = layer.base();
  BoundConv<Scalar> out;
  out.padding = base.padding();
  out.weight = tape.parameter(layer.name + ".kernel", base.kernel, opts.train_base);
  if (base.bias) out.bias = tape.parameter(layer.name + ".bias", *base.bias, opts.train_base);
  if (layer.adapter) {
    const auto& a = *layer.adapter;
    out.weight = effective_weight(out.weight, tape.parameter(layer.name + ".lora_x", a.lora_x, opts.train_lora),
                                  tape.parameter(layer.name + ".lora_y", a.lora_y, opts.train_lora), a.scale());
  }
  return out;
}

template <typename Scalar>
Var<Scalar> apply_conv(Tape<Scalar>& tape, const ConvLayer<Scalar>& layer, const Var<Scalar>& input,
                       const BindOptions& opts) {
  const BoundConv<Scalar> c = bind(tape, layer, opts);
  return conv2d(input, c.weight, c.bias, c.padding);
}

template <typename Scalar>
struct BlockOutput {
  Var<Scalar> output;    // O_i
  Var<Scalar> features;  // H_i
};

/// H = W3 * silu(W2 * silu(W1 * O_prev)); O = (O_prev + H) . sigma_a(H).
template <typename Scalar>
BlockOutput<Scalar> sconvlb_forward(Tape<Scalar>& tape, const std::array<ConvLayer<Scalar>, 3>& block,
                                    const Var<Scalar>& prev, SymmetricActivation sigma_a,
                                    const BindOptions& opts = {}) {
  require_rank(prev.shape(), 4, "sconvlb_forward");
  const Index channels = block[0].base().in_channels();
  if (prev.shape()[1] != channels)
    throw ShapeError(block[0].name + ": input has " + std::to_string(prev.shape()[1]) +
                     " channels, block expects " + std::to_string(channels));
  Var<Scalar> h = silu(apply_conv(tape, block[0], prev, opts));
  h = silu(apply_conv(tape, block[1], h, opts));
  h = apply_conv(tape, block[2], h, opts);
  const Var<Scalar> pre_attention = add(prev, h);
  const Var<Scalar> attention = symmetric_activation(h, sigma_a);
  return {mul(pre_attention, attention), h};
}

template <typename Scalar>
struct ForwardResult {
  Var<Scalar> output;
  std::vector<Var<Scalar>> taps;  // O_1..O_n
};

template <typename Scalar>
ForwardResult<Scalar> span_forward(Tape<Scalar>& tape, const SpanModel<Scalar>& model, const Var<Scalar>& input,
                                   const BindOptions& opts = {}) {
  const Shape& s = input.shape();
  if (s.size() != 4 || s[1] != 3)
    throw ShapeError("span_forward: expected input [N,3,H,W], got " + shape_string(s));
  if (s[2] < 3 || s[3] < 3) throw ShapeError("span_forward: spatial dims must be >= 3, got " + shape_string(s));
  const Var<Scalar> head = apply_conv(tape, model.head, input, opts);
  ForwardResult<Scalar> result;
  Var<Scalar> out = head, features = head;
  for (const auto& block : model.blocks) {
    BlockOutput<Scalar> b = sconvlb_forward(tape, block, out, model.config.sigma_a, opts);
    out = b.output;
    features = b.features;
    result.taps.push_back(out);
  }
  const Var<Scalar> tail = apply_conv(tape, model.tail, concat_channels<Scalar>({head, out, features}), opts);
  result.output = pixel_shuffle(apply_conv(tape, model.upsampler, tail, opts), model.config.scale);
  return result;
}

template <typename Scalar>
struct Inference {
  Tensor<Scalar> output;
  std::vector<Tensor<Scalar>> taps;
};

/// Forward pass without gradient recording.
template <typename Scalar>
Inference<Scalar> infer(const SpanModel<Scalar>& model, const Tensor<Scalar>& input) {
  Tape<Scalar> tape(false);
  tape.set_check_finite(false);
  const ForwardResult<Scalar> r = span_forward(tape, model, tape.constant(input), BindOptions{false, false});
  Inference<Scalar> out{r.output.value(), {}};
  for (const auto& t : r.taps) out.taps.push_back(t.value());
  return out;
}

/// Visits every stored tensor with its checkpoint name: "<layer>.kernel",
/// "<layer>.bias", "<layer>.lora_x", "<layer>.lora_y".
template <typename Scalar, typename Fn>
void for_each_named_tensor(const SpanModel<Scalar>& model, Fn&& fn) {
  for (const auto* l : model.layers()) {
    fn(l->name + ".kernel", l->base().kernel, false);
    if (l->base().bias) fn(l->name + ".bias", *l->base().bias, false);
    if (l->adapter) {
      fn(l->name + ".lora_x", l->adapter->lora_x, true);
      fn(l->name + ".lora_y", l->adapter->lora_y, true);
    }
  }
}

/// Current LoRA factors keyed by checkpoint name.
template <typename Scalar>
NamedTensors<Scalar> trainable_tensors(const SpanModel<Scalar>& model) {
  NamedTensors<Scalar> out;
  for (const auto* l : model.layers())
    if (l->adapter) {
      out.emplace(l->name + ".lora_x", l->adapter->lora_x);
      out.emplace(l->name + ".lora_y", l->adapter->lora_y);
    }
  return out;
}

template <typename Scalar>
void assign_trainable(SpanModel<Scalar>& model, const NamedTensors<Scalar>& values) {
  for (auto* l : model.layers()) {
    if (!l->adapter) continue;
    for (auto [suffix, target] : {std::pair{".lora_x", &l->adapter->lora_x}, std::pair{".lora_y", &l->adapter->lora_y}}) {
      auto it = values.find(l->name + suffix);
      if (it == values.end()) throw ConfigError("missing LoRA tensor '" + l->name + suffix + "'");
      require_same_shape(target->shape(), it->second.shape(), l->name + suffix);
      *target = it->second;
    }
  }
}

}  // namespace lorasr
