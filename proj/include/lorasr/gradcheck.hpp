// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "lorasr/tape.hpp"
#include "lorasr/tensor.hpp"

namespace lorasr {

/// Scalar-valued function of several tensors, expressed on a tape.
using TapeFunction = std::function<Var<double>(Tape<double>&, const std::vector<Var<double>>&)>;

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
};

/// Compares reverse-mode gradients of `f` against central differences
/// (f(x+h e) - f(x-h e)) / 2h, coordinate by coordinate.
///
/// Relative error per coordinate uses max(|analytic|, |numeric|, 1e-8) as the
/// denominator; the worst one is reported.
inline GradCheckResult finite_difference_check(const TapeFunction& f, const std::vector<TensorD>& at,
                                               double h = 1e-4) {
  std::vector<GradientMap<double>::mapped_type> analytic;
  {
    Tape<double> tape;
    std::vector<Var<double>> inputs;
    for (std::size_t i = 0; i < at.size(); ++i)
      inputs.push_back(tape.parameter("input" + std::to_string(i), at[i], true));
    const GradientMap<double> grads = tape.backward(f(tape, inputs));
    for (std::size_t i = 0; i < at.size(); ++i) analytic.push_back(grads.at("input" + std::to_string(i)));
  }

  auto evaluate = [&](const std::vector<TensorD>& point) {
    Tape<double> tape(false);
    std::vector<Var<double>> inputs;
    for (const auto& t : point) inputs.push_back(tape.constant(t));
    return f(tape, inputs).value().item();
  };

  GradCheckResult result;
  std::vector<TensorD> point = at;
  for (std::size_t i = 0; i < point.size(); ++i) {
    for (Index j = 0; j < point[i].numel(); ++j) {
      const double original = point[i][j];
      point[i][j] = original + h;
      const double up = evaluate(point);
      point[i][j] = original - h;
      const double down = evaluate(point);
      point[i][j] = original;
      const double numeric = (up - down) / (2.0 * h);
      const double exact = analytic[i][j];
      const double denom = std::max({std::abs(exact), std::abs(numeric), 1e-8});
      const double rel = std::abs(exact - numeric) / denom;
      if (rel > result.max_relative_error || (i == 0 && j == 0))
        result = {rel, i, j, exact, numeric};
    }
  }
  return result;
}

/// Single-input convenience overload.
inline double finite_difference_check(const std::function<Var<double>(Tape<double>&, const Var<double>&)>& f,
                                      const TensorD& at, double h = 1e-4) {
  return finite_difference_check(
             [&](Tape<double>& tape, const std::vector<Var<double>>& in) { return f(tape, in[0]); },
             std::vector<TensorD>{at}, h)
      .max_relative_error;
}

}  // namespace lorasr
