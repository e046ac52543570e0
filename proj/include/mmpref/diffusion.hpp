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

// Forward noising schedule over cell-feature images.

#include "mmpref/rng.hpp"
#include "mmpref/world.hpp"

#include <vector>

namespace mmpref {

class DiffusionSchedule {
 public:
  static constexpr int kMaxSteps = 1000;

  /// β_k = σ(−6 + 12k/1000)·(0.5e-2 − 1e-5) + 1e-5 for k = 1..1000.
  static const DiffusionSchedule& standard();

  /// Throws std::out_of_range outside 1..kMaxSteps.
  double beta(int k) const;
  /// ᾱ_n = Π_{k≤n}(1 − β_k); ᾱ_0 = 1.
  double alpha_bar(int n) const;

 private:
  DiffusionSchedule();
  std::vector<double> betas_;       // index k−1
  std::vector<double> alpha_bars_;  // index n
};

/// √ᾱ_N·x + √(1 − ᾱ_N)·ε with ε ~ N(0, 1) elementwise. N = 0 returns x.
ToyImage add_noise(const ToyImage& image, int steps, Rng& rng);

}  // namespace mmpref
