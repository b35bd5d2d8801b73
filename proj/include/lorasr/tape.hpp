// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "lorasr/error.hpp"
#include "lorasr/tensor.hpp"

namespace lorasr {

#if defined(LORASR_CHECK_FINITE) || !defined(NDEBUG)
inline constexpr bool kCheckFiniteDefault = true;
#else
inline constexpr bool kCheckFiniteDefault = false;
#endif

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
template <typename Scalar>
class Var {
 public:
  Var() = default;
  Var(Tape<Scalar>* tape, std::size_t id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  Tape<Scalar>* tape() const { return tape_; }
  std::size_t id() const { return id_; }
  const Tensor<Scalar>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  Tape<Scalar>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// What a backward closure sees: the upstream gradient, the forward values,
/// and accumulators for the inputs that need a gradient (nullptr otherwise).
template <typename Scalar>
struct BackwardContext {
  const Tensor<Scalar>& grad_out;
  const Tensor<Scalar>& out;
  std::vector<const Tensor<Scalar>*> inputs;
  std::vector<Tensor<Scalar>*> grads;
};

template <typename Scalar>
using GradientMap = std::map<std::string, Tensor<Scalar>>;

/// Linear record of operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node index is already a
/// topological order. A tape constructed with `recording = false` only keeps
/// values; it is used for inference and for frozen teacher passes.
template <typename Scalar>
class Tape {
 public:
  using BackwardFn = std::function<void(BackwardContext<Scalar>&)>;

  explicit Tape(bool recording = true) : recording_(recording) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }
  void set_check_finite(bool on) { check_finite_ = on; }

  Var<Scalar> constant(Tensor<Scalar> value) { return push(Node{std::move(value)}); }

  /// Leaf tensor with a stable name. Only trainable parameters get entries in
  /// the gradient map returned by backward().
  Var<Scalar> parameter(std::string name, Tensor<Scalar> value, bool trainable) {
    if (trainable && !param_ids_.emplace(name, nodes_.size()).second)
      throw GradError("parameter '" + name + "' registered twice on one tape");
    Node node{std::move(value)};
    node.name = std::move(name);
    node.trainable = trainable && recording_;
    node.requires_grad = node.trainable;
    return push(std::move(node));
  }

  Var<Scalar> record(Tensor<Scalar> value, const std::vector<Var<Scalar>>& inputs, BackwardFn fn) {
    Node node{std::move(value)};
    for (const auto& in : inputs) {
      check_owned(in);
      if (recording_) {
        node.inputs.push_back(in.id());
        node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
      }
    }
    if (node.requires_grad) node.backward = std::move(fn);
    if (check_finite_ && !node.value.all_finite())
      throw GradError("non-finite value produced by tape node " + std::to_string(nodes_.size()));
    return push(std::move(node));
  }

  const Tensor<Scalar>& value(std::size_t id) const { return nodes_.at(id).value; }

  void check_owned(const Var<Scalar>& v) const {
    if (!v.valid()) throw GradError("detached tensor used in a recorded computation");
    if (v.tape() != this) throw GradError("tensor recorded on a different tape used in this computation");
  }

  /// Reverse sweep from a scalar loss. Every trainable parameter gets an entry,
  /// zero-filled when the loss does not depend on it.
  GradientMap<Scalar> backward(const Var<Scalar>& loss) {
    check_owned(loss);
    if (!recording_) throw GradError("backward() on a non-recording tape");
    if (loss.value().numel() != 1)
      throw GradError("backward() requires a scalar loss, got shape " + shape_string(loss.shape()));

    std::vector<Tensor<Scalar>> grads(loss.id() + 1);
    std::vector<bool> has_grad(loss.id() + 1, false);
    grads[loss.id()] = Tensor<Scalar>::ones(loss.shape());
    has_grad[loss.id()] = true;

    for (std::size_t i = loss.id() + 1; i-- > 0;) {
      Node& node = nodes_[i];
      if (!has_grad[i] || !node.requires_grad || !node.backward) continue;
      BackwardContext<Scalar> ctx{grads[i], node.value, {}, {}};
      for (std::size_t in : node.inputs) {
        ctx.inputs.push_back(&nodes_[in].value);
        if (nodes_[in].requires_grad) {
          if (!has_grad[in]) {
            grads[in] = Tensor<Scalar>::zeros(nodes_[in].value.shape());
            has_grad[in] = true;
          }
          ctx.grads.push_back(&grads[in]);
        } else {
          ctx.grads.push_back(nullptr);
        }
      }
      node.backward(ctx);
    }

    GradientMap<Scalar> out;
    for (const auto& [name, id] : param_ids_) {
      if (id <= loss.id() && has_grad[id])
        out.emplace(name, std::move(grads[id]));
      else
        out.emplace(name, Tensor<Scalar>::zeros(nodes_[id].value.shape()));
    }
    return out;
  }

 private:
  struct Node {
    Tensor<Scalar> value;
    std::vector<std::size_t> inputs{};
    BackwardFn backward{};
    std::string name{};
    bool trainable = false;
    bool requires_grad = false;
  };

  Var<Scalar> push(Node node) {
    nodes_.push_back(std::move(node));
    return Var<Scalar>(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> param_ids_;
  bool recording_;
  bool check_finite_ = kCheckFiniteDefault;
};

template <typename Scalar>
const Tensor<Scalar>& Var<Scalar>::value() const {
  if (!tape_) throw GradError("value() of a detached tensor handle");
  return tape_->value(id_);
}

/// Owning tape of a handle; throws for detached handles.
template <typename Scalar>
Tape<Scalar>& tape_of(const Var<Scalar>& v) {
  if (!v.valid()) throw GradError("detached tensor used in a recorded computation");
  return *v.tape();
}

}  // namespace lorasr
