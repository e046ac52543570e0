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

// Preference objectives as differentiable functions of sequence
// log-probabilities. Every loss takes n×1 column tensors (one row per
// example) and returns a 1×1 tensor.

#include "mmpref/autodiff.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mmpref::loss {

enum class Objective { rm, dpo, ipo, slic, mixed, avg, rloo };

std::string_view name(Objective o);
/// Throws std::invalid_argument for unknown names.
Objective objective_from(std::string_view s);

struct LossConfig {
  Objective objective = Objective::dpo;
  double beta = 0.1;
  double p_mix = 0.5;
  double gamma = 0.5;
  double tau = 0.9;
  double delta = 1.0;
  int k_rloo = 4;
  double beta_kl = 0.05;
  bool length_normalize = false;

  /// Throws std::invalid_argument on out-of-range values.
  void validate() const;
  nlohmann::json to_json() const;
  static LossConfig from_json(const nlohmann::json& j);
};

class LossError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

template <typename Scalar>
struct LossBatch {
  using T = ad::Tensor<Scalar>;
  T theta_pos, theta_neg, ref_pos, ref_neg;
  /// Second rejected channel (Avg-DPO only).
  std::optional<T> theta_neg2, ref_neg2;

  ad::Index size() const { return theta_pos.rows(); }

  /// Shapes agree, channels are column vectors, and values are log-probabilities.
  void check(bool needs_second) const {
    auto col = [&](const T& t, const char* what) {
      if (!t.valid()) throw LossError(std::string("LossBatch: missing channel ") + what);
      if (t.cols() != 1 || t.rows() != theta_pos.rows() || t.rows() == 0)
        throw LossError(std::string("LossBatch: channel ") + what + " has the wrong shape");
      if ((t.value().array() > Scalar(0)).any())
        throw LossError(std::string("LossBatch: positive log-probability in ") + what);
    };
    col(theta_pos, "theta_pos");
    col(theta_neg, "theta_neg");
    col(ref_pos, "ref_pos");
    col(ref_neg, "ref_neg");
    if (needs_second) {
      if (!theta_neg2 || !ref_neg2) throw LossError("LossBatch: Avg-DPO needs the second rejected channel");
      col(*theta_neg2, "theta_neg2");
      col(*ref_neg2, "ref_neg2");
    }
  }
};

/// h = (θ⁺ − ref⁺) − (θ⁻ − ref⁻), per example.
template <typename Scalar>
ad::Tensor<Scalar> margin(const ad::Tensor<Scalar>& theta_pos, const ad::Tensor<Scalar>& ref_pos,
                          const ad::Tensor<Scalar>& theta_neg, const ad::Tensor<Scalar>& ref_neg) {
  return (theta_pos - ref_pos) - (theta_neg - ref_neg);
}

template <typename Scalar>
ad::Tensor<Scalar> margin(const LossBatch<Scalar>& b) {
  return margin(b.theta_pos, b.ref_pos, b.theta_neg, b.ref_neg);
}

/// Per-example −log σ(β h).
template <typename Scalar>
ad::Tensor<Scalar> dpo_terms(const ad::Tensor<Scalar>& h, Scalar beta) {
  return -ad::log_sigmoid(ad::scale(h, beta));
}

/// Bradley–Terry reward-model loss, mean of −log σ(r⁺ − r⁻).
template <typename Scalar>
ad::Tensor<Scalar> rm_loss(const ad::Tensor<Scalar>& r_pos, const ad::Tensor<Scalar>& r_neg) {
  if (r_pos.shape() != r_neg.shape()) throw LossError("rm_loss: reward shapes differ");
  return ad::mean(-ad::log_sigmoid(r_pos - r_neg));
}

template <typename Scalar>
ad::Tensor<Scalar> dpo_loss(const LossBatch<Scalar>& b, Scalar beta) {
  b.check(false);
  return ad::mean(dpo_terms(margin(b), beta));
}

/// Mean of (h − 1/(2τ))².
template <typename Scalar>
ad::Tensor<Scalar> ipo_loss(const LossBatch<Scalar>& b, Scalar tau) {
  if (!(tau > 0)) throw LossError("ipo_loss: tau must be positive");
  b.check(false);
  return ad::mean(ad::square(ad::shift(margin(b), -Scalar(1) / (Scalar(2) * tau))));
}

/// Mean of max(0, δ − β h).
template <typename Scalar>
ad::Tensor<Scalar> slic_loss(const LossBatch<Scalar>& b, Scalar beta, Scalar delta) {
  if (!(beta > 0) || delta < 0) throw LossError("slic_loss: need beta > 0 and delta >= 0");
  b.check(false);
  return ad::mean(ad::relu(ad::shift(ad::scale(margin(b), -beta), delta)));
}

/// One α ~ Bernoulli(p) per example; 1 selects the offline pair.
inline std::vector<int> draw_alphas(std::size_t n, double p, std::mt19937_64& rng) {
  if (!(p >= 0.0 && p <= 1.0)) throw LossError("draw_alphas: p_mix outside [0, 1]");
  std::vector<int> out(n);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (auto& a : out) a = u(rng) < p ? 1 : 0;
  return out;
}

/// Per-example α·L_off + (1 − α)·L_on. With α ≡ 1 (or 0) each term equals the
/// selected DPO term exactly, so the mean is bit-identical to dpo_loss.
template <typename Scalar>
ad::Tensor<Scalar> mixed_dpo_loss(const LossBatch<Scalar>& offline, const LossBatch<Scalar>& online,
                                  const std::vector<int>& alphas, Scalar beta) {
  offline.check(false);
  online.check(false);
  if (offline.size() != online.size() || static_cast<ad::Index>(alphas.size()) != offline.size())
    throw LossError("mixed_dpo_loss: offline, online and alpha sizes differ");
  auto& tape = *offline.theta_pos.tape();
  ad::Matrix<Scalar> a(offline.size(), 1), na(offline.size(), 1);
  for (std::size_t i = 0; i < alphas.size(); ++i) {
    a(static_cast<ad::Index>(i), 0) = alphas[i] ? Scalar(1) : Scalar(0);
    na(static_cast<ad::Index>(i), 0) = alphas[i] ? Scalar(0) : Scalar(1);
  }
  auto off = dpo_terms(margin(offline), beta);
  auto on = dpo_terms(margin(online), beta);
  return ad::mean(ad::mul(off, tape.constant(a)) + ad::mul(on, tape.constant(na)));
}

/// γ·L(y⁺, y⁻) + (1 − γ)·L(y⁺, ỹ⁻), evaluated per example as L₂ + γ(L₁ − L₂)
/// so identical rejected channels reproduce DPO exactly.
template <typename Scalar>
ad::Tensor<Scalar> avg_dpo_loss(const LossBatch<Scalar>& b, Scalar beta, Scalar gamma) {
  if (!(gamma >= 0 && gamma <= 1)) throw LossError("avg_dpo_loss: gamma outside [0, 1]");
  b.check(true);
  auto l1 = dpo_terms(margin(b), beta);
  auto l2 = dpo_terms(margin(b.theta_pos, b.ref_pos, *b.theta_neg2, *b.ref_neg2), beta);
  return ad::mean(l2 + ad::scale(l1 - l2, gamma));
}

/// Dispatch for the pairwise objectives (mixed reduces to DPO on the already
/// selected pairs).
template <typename Scalar>
ad::Tensor<Scalar> pairwise_loss(const LossBatch<Scalar>& b, const LossConfig& c) {
  switch (c.objective) {
    case Objective::dpo:
    case Objective::mixed: return dpo_loss(b, Scalar(c.beta));
    case Objective::ipo: return ipo_loss(b, Scalar(c.tau));
    case Objective::slic: return slic_loss(b, Scalar(c.beta), Scalar(c.delta));
    case Objective::avg: return avg_dpo_loss(b, Scalar(c.beta), Scalar(c.gamma));
    default: throw LossError("pairwise_loss: objective " + std::string(name(c.objective)) + " is not pairwise");
  }
}

/// a_i = r_i − mean of the other rewards. Formed from pairwise differences so
/// equal rewards give exact zeros; the last entry absorbs rounding so that a
/// left-to-right sum is exactly 0.
std::vector<double> rloo_advantages(const std::vector<double>& rewards);

/// Identity when std < eps.
struct RewardNormalizer {
  double mean = 0.0;
  double std = 1.0;

  static RewardNormalizer fit(const std::vector<double>& rewards, double eps = 1e-8);
  double operator()(double r) const { return (r - mean) / std; }
};

}  // namespace mmpref::loss
