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

// Training loops for the preference objectives, the reward model and the
// leave-one-out policy gradient.

#include "mmpref/losses.hpp"
#include "mmpref/prefdata.hpp"
#include "mmpref/train.hpp"

#include <nlohmann/json.hpp>

#include <functional>
#include <vector>

namespace mmpref {

struct AlignConfig {
  loss::LossConfig loss;
  double lr = 1e-3;
  int epochs = 2;
  int batch_size = 16;
  std::uint64_t seed = 0;
  /// Interleave provenance groups within each epoch.
  bool stratified = false;
  /// Gradient-norm cap; RLOO always clips at 1.0.
  double clip_norm = 0.0;
  /// Diffusion steps of the per-epoch policy channel (Avg-DPO).
  int povid_steps = 500;
  /// Online pairs (Mixed-DPO with α = 0).
  double annotator_error = 0.0;
  double online_temperature = 1.0;
  /// Parameter-name prefixes held fixed during alignment.
  std::vector<std::string> frozen;

  void validate() const;
  nlohmann::json to_json() const;
  static AlignConfig from_json(const nlohmann::json& j);
};

/// One JSON object per optimizer step: step, epoch, objective, loss,
/// margin (mean h), kl (mean log-ratio of the sequences scored).
using StepLog = std::function<void(const nlohmann::json& record)>;

struct AlignResult {
  Policy policy;
  std::vector<nlohmann::json> log;
  int skipped = 0;      // online draws that tied out
  int online_used = 0;  // examples trained on an online pair
};

/// DPO, IPO, SLiC, Mixed-DPO and Avg-DPO over a preference set. Online-DPO
/// is Mixed-DPO with p_mix = 0.
AlignResult align_pairs(Policy policy, const Policy& reference, const PreferenceSet& data, const WorldStore& worlds,
                        const AlignConfig& config, const StepLog& log = {});

/// Bradley–Terry reward model sharing the policy architecture; its reward
/// head is the readout.
AlignResult train_reward_model(Policy init, const PreferenceSet& data, const WorldStore& worlds,
                               const AlignConfig& config, const StepLog& log = {});

/// Fraction of pairs the reward model orders correctly.
double reward_accuracy(const Policy& rm, const PreferenceSet& data, const WorldStore& worlds);

struct RlooPrompt {
  std::string world;
  TokenSeq prompt;
};

using RewardFn = std::function<double(const ToyWorld&, std::span<const Token> prompt, std::span<const Token> response)>;

/// True minus false claims under the world facts.
RewardFn oracle_reward();
/// Scalar output of a trained reward model.
RewardFn model_reward(const Policy& rm);

struct RlooDiagnostics {
  double loss = 0.0;
  double grad_norm = 0.0;  // before clipping
  double mean_reward = 0.0;
  double kl = 0.0;
  std::vector<double> advantages;
};

/// k samples per prompt at temperature 1, rewards normalized and penalized by
/// β_kl·(log π_θ − log π_ref), one clipped Adam step on the leave-one-out
/// REINFORCE loss.
RlooDiagnostics rloo_step(Policy& policy, const Policy& reference, Adam& opt, const std::vector<RlooPrompt>& batch,
                          const WorldStore& worlds, const RewardFn& reward, const loss::RewardNormalizer& norm,
                          const loss::LossConfig& config, Rng& rng);

/// Normalizer from one sample per prompt of the initial policy.
loss::RewardNormalizer fit_reward_normalizer(const Policy& policy, const std::vector<RlooPrompt>& prompts,
                                             const WorldStore& worlds, const RewardFn& reward, Rng& rng);

AlignResult align_rloo(Policy policy, const Policy& reference, const std::vector<RlooPrompt>& prompts,
                       const WorldStore& worlds, const RewardFn& reward, const AlignConfig& config,
                       const StepLog& log = {});

}  // namespace mmpref
