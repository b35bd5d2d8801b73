// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace lorasr {

/// Base of every error the library throws.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Incompatible tensor shapes, channel counts or layer dimensions.
class ShapeError : public Error {
 public:
  using Error::Error;
};

/// Invalid configuration, unknown keys, bad flags, bad layer names.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// File system, image or checkpoint format failures.
class IoError : public Error {
 public:
  using Error::Error;
};

/// Misuse of the gradient tape (non-scalar loss, foreign or detached tensors).
class GradError : public Error {
 public:
  using Error::Error;
};

/// Training-loop failure such as a non-finite loss.
class TrainingError : public Error {
 public:
  TrainingError(const std::string& what, long step) : Error(what), step_(step) {}
  long step() const { return step_; }

 private:
  long step_;
};

}  // namespace lorasr
