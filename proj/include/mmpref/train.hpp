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

#include "mmpref/grammar.hpp"
#include "mmpref/policy.hpp"

#include <functional>
#include <vector>

namespace mmpref {

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct AdamConfig {
  double lr = 1e-2;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm cap; <= 0 disables clipping.
  double clip_norm = 0.0;
};

class Adam {
 public:
  Adam(const Policy& policy, AdamConfig config);
  /// Applies one update. Returns the pre-clip global gradient norm.
  double step(Policy& policy, std::vector<Mat> grads);
  const AdamConfig& config() const { return config_; }

 private:
  AdamConfig config_;
  std::vector<Mat> m_, v_;
  long t_ = 0;
};

/// Leaf gradients of every parameter after tape.backward().
std::vector<Mat> collect_grads(const Policy::Bound& bound);
double global_norm(const std::vector<Mat>& grads);

struct SftConfig {
  int epochs = 8;
  double lr = 3e-3;
  int batch_size = 16;
  std::uint64_t seed = 0;
  /// Fraction of records trained with every image token hidden, so the
  /// policy also learns a text-only prior.
  double image_dropout = 0.0;
};

struct SftResult {
  Policy policy;
  Policy reference;  // frozen copy of `policy`
  std::vector<double> epoch_loss;  // mean nats per response token
};

using EpochLog = std::function<void(int epoch, double loss)>;

/// Token-level cross-entropy on (image, prompt, response) records.
SftResult sft_train(Policy policy, const std::vector<SftRecord>& records, const WorldStore& worlds,
                    const SftConfig& config, const EpochLog& log = {});

/// Mean per-token NLL of `records` under `policy`.
double sft_loss(const Policy& policy, const std::vector<SftRecord>& records, const WorldStore& worlds);

}  // namespace mmpref
