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

#include "mmpref/diffusion.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace mmpref {

DiffusionSchedule::DiffusionSchedule() {
  betas_.reserve(kMaxSteps);
  alpha_bars_.reserve(kMaxSteps + 1);
  alpha_bars_.push_back(1.0);
  for (int k = 1; k <= kMaxSteps; ++k) {
    const double z = -6.0 + 12.0 * k / 1000.0;
    const double b = 1.0 / (1.0 + std::exp(-z)) * (0.5e-2 - 1e-5) + 1e-5;
    betas_.push_back(b);
    alpha_bars_.push_back(alpha_bars_.back() * (1.0 - b));
  }
}

const DiffusionSchedule& DiffusionSchedule::standard() {
  static const DiffusionSchedule s;
  return s;
}

double DiffusionSchedule::beta(int k) const {
  if (k < 1 || k > kMaxSteps) throw std::out_of_range("diffusion step " + std::to_string(k) + " out of range");
  return betas_[static_cast<std::size_t>(k - 1)];
}

double DiffusionSchedule::alpha_bar(int n) const {
  if (n < 0 || n > kMaxSteps) throw std::out_of_range("diffusion step count " + std::to_string(n) + " out of range");
  return alpha_bars_[static_cast<std::size_t>(n)];
}

ToyImage add_noise(const ToyImage& image, int steps, Rng& rng) {
  const double ab = DiffusionSchedule::standard().alpha_bar(steps);
  if (steps == 0) return image;
  std::normal_distribution<double> n(0.0, 1.0);
  ToyImage out(image.rows(), image.cols());
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  for (Eigen::Index i = 0; i < out.size(); ++i) out.data()[i] = a * image.data()[i] + s * n(rng);
  return out;
}

}  // namespace mmpref
