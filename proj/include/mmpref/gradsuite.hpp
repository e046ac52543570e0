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

// Finite-difference sweep over every differentiable preference objective.

#include <cstdint>
#include <string>
#include <vector>

namespace mmpref {

struct GradSuiteOptions {
  int batches = 100;
  int batch_size = 8;
  std::uint64_t seed = 0;
  double rtol = 1e-5;
  double step = 1e-3;
  /// Central differences carry roundoff near 1e-11 here, so gradients
  /// smaller than the floor are compared on an absolute scale.
  double floor = 1e-6;
  /// Objective whose analytic gradient is offset, to show failures are caught.
  std::string perturb;
};

struct ObjectiveCheck {
  std::string objective;
  int batches = 0;
  int passed = 0;
  double max_rel_error = 0.0;
  bool ok() const { return batches > 0 && passed == batches; }
};

/// rm dpo ipo slic mixed avg.
const std::vector<std::string>& grad_suite_objectives();

/// Throws std::invalid_argument for names outside grad_suite_objectives().
std::vector<ObjectiveCheck> run_grad_suite(const std::vector<std::string>& objectives,
                                           const GradSuiteOptions& options = {});

}  // namespace mmpref
