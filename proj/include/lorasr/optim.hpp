// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <map>
#include <string>

#include "lorasr/tape.hpp"
#include "lorasr/tensor.hpp"

namespace lorasr {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename Scalar>
struct AdamState {
  NamedTensors<Scalar> first_moment;
  NamedTensors<Scalar> second_moment;
  long step = 0;
};

/// One bias-corrected Adam update. `grads` must name exactly the tensors in
/// `params`; anything else means a frozen tensor received a gradient.
template <typename Scalar>
void adam_step(NamedTensors<Scalar>& params, const GradientMap<Scalar>& grads, AdamState<Scalar>& state,
               const AdamConfig& cfg) {
  for (const auto& [name, g] : grads)
    if (!params.count(name)) throw GradError("gradient for non-trainable tensor '" + name + "'");
  for (const auto& [name, p] : params)
    if (!grads.count(name)) throw GradError("no gradient for trainable tensor '" + name + "'");

  ++state.step;
  const double t = static_cast<double>(state.step);
  const double correction1 = 1.0 - std::pow(cfg.beta1, t);
  const double correction2 = 1.0 - std::pow(cfg.beta2, t);
  const Scalar b1 = static_cast<Scalar>(cfg.beta1), b2 = static_cast<Scalar>(cfg.beta2);
  const Scalar step_size = static_cast<Scalar>(cfg.lr / correction1);
  const Scalar inv_sqrt_c2 = static_cast<Scalar>(1.0 / std::sqrt(correction2));
  const Scalar eps = static_cast<Scalar>(cfg.eps);

  for (auto& [name, p] : params) {
    const Tensor<Scalar>& g = grads.at(name);
    require_same_shape(p.shape(), g.shape(), "adam_step '" + name + "'");
    auto [m_it, m_new] = state.first_moment.try_emplace(name, Tensor<Scalar>::zeros(p.shape()));
    auto [v_it, v_new] = state.second_moment.try_emplace(name, Tensor<Scalar>::zeros(p.shape()));
    auto& m = m_it->second.array();
    auto& v = v_it->second.array();
    m = b1 * m + (Scalar(1) - b1) * g.array();
    v = b2 * v + (Scalar(1) - b2) * g.array().square();
    p.array() -= step_size * m / (v.sqrt() * inv_sqrt_c2 + eps);
  }
}

/// shadow <- decay * shadow + (1 - decay) * params, over the shadow's keys.
template <typename Scalar>
void ema_update(NamedTensors<Scalar>& shadow, const NamedTensors<Scalar>& params, double decay) {
  const Scalar d = static_cast<Scalar>(decay);
  for (auto& [name, s] : shadow) {
    auto it = params.find(name);
    if (it == params.end()) throw GradError("EMA shadow tensor '" + name + "' has no live parameter");
    s.array() = d * s.array() + (Scalar(1) - d) * it->second.array();
  }
}

}  // namespace lorasr
