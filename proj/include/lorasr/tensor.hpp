// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <map>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "lorasr/error.hpp"

namespace lorasr {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline void check_shape_valid(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (Index d : shape)
    if (d < 1) throw ShapeError("tensor dimensions must be >= 1, got " + shape_string(shape));
}

/// Dense row-major n-dimensional array. Features use NCHW layout.
///
/// Storage is an Eigen column array so whole-tensor arithmetic can be written
/// as Eigen expressions over `array()`.
template <typename Scalar>
class Tensor {
 public:
  using Storage = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : shape_{1}, data_(Storage::Zero(1)) {}

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_shape_valid(shape_);
    data_ = Storage::Zero(shape_numel(shape_));
  }

  Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape_valid(shape_);
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                       " does not match shape " + shape_string(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Storage(Eigen::Map<const Storage>(
                                     values.begin(), static_cast<Index>(values.size())))) {}

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, Scalar value) {
    Tensor t(std::move(shape));
    t.data_.setConstant(value);
    return t;
  }
  static Tensor ones(Shape shape) { return full(std::move(shape), Scalar(1)); }
  static Tensor scalar(Scalar value) { return full({1}, value); }

  template <typename Rng>
  static Tensor normal(Shape shape, Rng& rng, Scalar mean = 0, Scalar stddev = 1) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(static_cast<double>(mean), static_cast<double>(stddev));
    for (Index i = 0; i < t.numel(); ++i) t.data_[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  template <typename Rng>
  static Tensor uniform(Shape shape, Rng& rng, Scalar lo = 0, Scalar hi = 1) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(static_cast<double>(lo), static_cast<double>(hi));
    for (Index i = 0; i < t.numel(); ++i) t.data_[i] = static_cast<Scalar>(dist(rng));
    return t;
  }

  const Shape& shape() const { return shape_; }
  Index dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const { return shape_.size(); }
  Index numel() const { return data_.size(); }

  Storage& array() { return data_; }
  const Storage& array() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// NCHW element access.
  Scalar& at(Index n, Index c, Index h, Index w) { return data_[offset4(n, c, h, w)]; }
  Scalar at(Index n, Index c, Index h, Index w) const { return data_[offset4(n, c, h, w)]; }

  Scalar item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  Tensor reshaped(Shape shape) const {
    if (shape_numel(shape) != numel())
      throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
  }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.isFinite().all(); }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }
  bool operator!=(const Tensor& other) const { return !(*this == other); }

 private:
  Index offset4(Index n, Index c, Index h, Index w) const {
    return ((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
  }

  Shape shape_;
  Storage data_;
};

using TensorF = Tensor<float>;
using TensorD = Tensor<double>;

template <typename Scalar>
using NamedTensors = std::map<std::string, Tensor<Scalar>>;

template <typename Scalar>
double max_abs_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape())
    throw ShapeError("max_abs_diff: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  if (a.numel() == 0) return 0.0;
  return static_cast<double>((a.array() - b.array()).abs().maxCoeff());
}

inline void require_same_shape(const Shape& a, const Shape& b, const std::string& what) {
  if (a != b) throw ShapeError(what + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

inline void require_rank(const Shape& s, std::size_t rank, const std::string& what) {
  if (s.size() != rank)
    throw ShapeError(what + ": expected rank " + std::to_string(rank) + ", got " + shape_string(s));
}

}  // namespace lorasr
