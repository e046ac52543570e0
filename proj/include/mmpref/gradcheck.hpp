// Copyright 2026 The mmpref Authors
// SPDX-License-Identifier: Apache-2.0
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     https://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Central finite-difference checks against the tape's analytic gradients.

#include "mmpref/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

namespace mmpref::ad {

struct GradcheckResult {
  double max_rel_error = 0.0;
  std::size_t worst_input = 0;
  Index worst_element = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  bool passed = true;
};

/// Relative error with a floor on the denominator so that two gradients that
/// are both ~0 compare as equal.
inline double relative_error(double analytic, double numeric, double floor = 1e-8) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
  return std::abs(analytic - numeric) / denom;
}

template <typename Scalar>
using LossBuilder = std::function<Tensor<Scalar>(Tape<Scalar>&, const std::vector<Tensor<Scalar>>&)>;

/// Evaluates `build` on leaves holding `inputs`, backpropagates, and compares
/// every input element against (f(x+h) - f(x-h)) / 2h. `analytic_offset` is a
/// test hook added to every analytic entry; `floor` bounds the relative-error
/// denominator from below.
template <typename Scalar>
GradcheckResult gradcheck(const LossBuilder<Scalar>& build, std::vector<Matrix<Scalar>> inputs,
                          Scalar step = Scalar(1e-4), Scalar rtol = Scalar(1e-5),
                          Scalar analytic_offset = Scalar(0), double floor = 1e-8) {
  std::vector<Matrix<Scalar>> analytic;
  {
    Tape<Scalar> tape;
    std::vector<Tensor<Scalar>> leaves;
    for (const auto& m : inputs) leaves.push_back(tape.leaf(m, true));
    Tensor<Scalar> loss = build(tape, leaves);
    tape.backward(loss);
    for (const auto& l : leaves) analytic.push_back(l.grad());
  }
  auto evaluate = [&](const std::vector<Matrix<Scalar>>& xs) {
    Tape<Scalar> tape;
    std::vector<Tensor<Scalar>> leaves;
    for (const auto& m : xs) leaves.push_back(tape.leaf(m, false));
    return build(tape, leaves).item();
  };

  GradcheckResult result;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (Index e = 0; e < inputs[i].size(); ++e) {
      const Scalar orig = inputs[i].data()[e];
      inputs[i].data()[e] = orig + step;
      const Scalar up = evaluate(inputs);
      inputs[i].data()[e] = orig - step;
      const Scalar down = evaluate(inputs);
      inputs[i].data()[e] = orig;
      const double numeric = static_cast<double>((up - down) / (Scalar(2) * step));
      const double an = static_cast<double>(analytic[i].data()[e] + analytic_offset);
      const double err = relative_error(an, numeric, floor);
      if (err > result.max_rel_error) {
        result.max_rel_error = err;
        result.worst_input = i;
        result.worst_element = e;
        result.analytic = an;
        result.numeric = numeric;
      }
    }
  }
  result.passed = result.max_rel_error <= static_cast<double>(rtol);
  return result;
}

}  // namespace mmpref::ad
