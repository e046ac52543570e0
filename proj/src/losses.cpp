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

#include "mmpref/losses.hpp"

#include <cmath>
#include <numeric>

namespace mmpref::loss {

namespace {
constexpr std::array<std::pair<Objective, std::string_view>, 7> kNames = {{
    {Objective::rm, "rm"},
    {Objective::dpo, "dpo"},
    {Objective::ipo, "ipo"},
    {Objective::slic, "slic"},
    {Objective::mixed, "mixed"},
    {Objective::avg, "avg"},
    {Objective::rloo, "rloo"},
}};
}  // namespace

std::string_view name(Objective o) {
  for (const auto& [k, v] : kNames)
    if (k == o) return v;
  return "?";
}

Objective objective_from(std::string_view s) {
  for (const auto& [k, v] : kNames)
    if (v == s) return k;
  throw std::invalid_argument("unknown objective '" + std::string(s) + "'");
}

void LossConfig::validate() const {
  if (!(beta > 0)) throw LossError("beta must be positive");
  if (!(p_mix >= 0 && p_mix <= 1)) throw LossError("p_mix must lie in [0, 1]");
  if (!(gamma >= 0 && gamma <= 1)) throw LossError("gamma must lie in [0, 1]");
  if (!(tau > 0)) throw LossError("tau must be positive");
  if (!(delta >= 0)) throw LossError("delta must be non-negative");
  if (k_rloo < 2) throw LossError("k_rloo must be at least 2");
  if (!(beta_kl >= 0)) throw LossError("beta_kl must be non-negative");
}

nlohmann::json LossConfig::to_json() const {
  return {{"objective", name(objective)}, {"beta", beta},       {"p_mix", p_mix},
          {"gamma", gamma},               {"tau", tau},         {"delta", delta},
          {"k_rloo", k_rloo},             {"beta_kl", beta_kl}, {"length_normalize", length_normalize}};
}

LossConfig LossConfig::from_json(const nlohmann::json& j) {
  LossConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "objective") c.objective = objective_from(v.get<std::string>());
    else if (key == "beta") c.beta = v.get<double>();
    else if (key == "p_mix") c.p_mix = v.get<double>();
    else if (key == "gamma") c.gamma = v.get<double>();
    else if (key == "tau") c.tau = v.get<double>();
    else if (key == "delta") c.delta = v.get<double>();
    else if (key == "k_rloo") c.k_rloo = v.get<int>();
    else if (key == "beta_kl") c.beta_kl = v.get<double>();
    else if (key == "length_normalize") c.length_normalize = v.get<bool>();
    else throw std::invalid_argument("unknown loss config field '" + key + "'");
  }
  c.validate();
  return c;
}

std::vector<double> rloo_advantages(const std::vector<double>& rewards) {
  const std::size_t k = rewards.size();
  if (k < 2) throw LossError("rloo_advantages: need at least two samples");
  std::vector<double> a(k, 0.0);
  const double inv = 1.0 / static_cast<double>(k - 1);
  double partial = 0.0;
  for (std::size_t i = 0; i + 1 < k; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (j != i) s += rewards[i] - rewards[j];
    a[i] = s * inv;
    partial += a[i];
  }
  a[k - 1] = -partial;
  return a;
}

RewardNormalizer RewardNormalizer::fit(const std::vector<double>& rewards, double eps) {
  RewardNormalizer n;
  if (rewards.empty()) return n;
  const double m = std::accumulate(rewards.begin(), rewards.end(), 0.0) / static_cast<double>(rewards.size());
  double var = 0.0;
  for (double r : rewards) var += (r - m) * (r - m);
  var /= static_cast<double>(rewards.size());
  n.mean = m;
  n.std = std::sqrt(var) < eps ? 1.0 : std::sqrt(var);
  return n;
}

}  // namespace mmpref::loss
