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

#include "mmpref/gradsuite.hpp"
#include "mmpref/losses.hpp"
#include "mmpref/rng.hpp"

#include <doctest.h>

#include <cmath>
#include <numeric>

using namespace mmpref;
using namespace mmpref::loss;
using ad::Matrix;
using ad::Tape;
using ad::Tensor;

namespace {

Matrix<double> col(std::vector<double> v) {
  Matrix<double> m(static_cast<ad::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<ad::Index>(i), 0) = v[i];
  return m;
}

/// Batch with the given margins: θ⁺ = h − 1, θ⁻ = ref⁺ = ref⁻ = −1.
LossBatch<double> with_margins(Tape<double>& t, const std::vector<double>& h, bool grad = true) {
  std::vector<double> pos(h.size()), base(h.size(), -1.0);
  for (std::size_t i = 0; i < h.size(); ++i) pos[i] = h[i] - 1.0;
  // Keep θ⁺ a log-probability even for large margins by shifting every channel.
  double shift = 0.0;
  for (double p : pos) shift = std::max(shift, p + 0.5);
  for (auto& p : pos) p -= shift;
  for (auto& b : base) b -= shift;
  LossBatch<double> b;
  b.theta_pos = t.leaf(col(pos), grad);
  b.theta_neg = t.leaf(col(base), grad);
  b.ref_pos = t.leaf(col(base), grad);
  b.ref_neg = t.leaf(col(base), grad);
  return b;
}

/// Independent scalar oracle of −log σ(x).
double neg_log_sigmoid(double x) { return std::log1p(std::exp(-x)); }

}  // namespace

TEST_CASE("reward-model loss") {
  Tape<double> t;
  CHECK(rm_loss(t.leaf(col({0.3})), t.leaf(col({0.3}))).item() == doctest::Approx(std::log(2.0)).epsilon(1e-15));
  CHECK(rm_loss(t.leaf(col({10.0})), t.leaf(col({0.0}))).item() ==
        doctest::Approx(neg_log_sigmoid(10.0)).epsilon(1e-12));
  CHECK(neg_log_sigmoid(10.0) == doctest::Approx(4.54e-5).epsilon(1e-3));
  double prev = INFINITY;
  for (double d = -5.0; d <= 5.0; d += 0.25) {
    const double v = rm_loss(t.leaf(col({d})), t.leaf(col({0.0}))).item();
    CHECK(v < prev);
    prev = v;
  }
  CHECK_THROWS_AS(rm_loss(t.leaf(col({1.0, 2.0})), t.leaf(col({1.0}))), LossError);
}

TEST_CASE("DPO values, zero point and gradient signs") {
  Tape<double> t;
  CHECK(dpo_loss(with_margins(t, {0.0, 0.0, 0.0}), 0.1).item() == std::log(2.0));
  CHECK(dpo_loss(with_margins(t, {2.0}), 0.1).item() == doctest::Approx(neg_log_sigmoid(0.2)).epsilon(1e-12));
  CHECK(neg_log_sigmoid(0.2) == doctest::Approx(0.5981).epsilon(1e-4));

  Tape<double> g;
  auto b = with_margins(g, {-3.0, 0.0, 1.5, 40.0});
  g.backward(dpo_loss(b, 0.5));
  CHECK((b.theta_pos.grad().array() < 0).all());
  CHECK((b.theta_neg.grad().array() > 0).all());

  // L(h) + L(−h) ≥ 2 log 2, equality only at h = 0.
  for (double h : {-4.0, -0.5, 0.0, 0.7, 3.0}) {
    Tape<double> s;
    const double sum = dpo_loss(with_margins(s, {h}), 1.0).item() + dpo_loss(with_margins(s, {-h}), 1.0).item();
    if (h == 0.0) CHECK(sum == doctest::Approx(2 * std::log(2.0)).epsilon(1e-15));
    else CHECK(sum > 2 * std::log(2.0));
  }
}

TEST_CASE("DPO rejects malformed batches") {
  Tape<double> t;
  auto b = with_margins(t, {1.0, 2.0});
  b.ref_neg = t.leaf(col({-1.0}));
  CHECK_THROWS_AS(dpo_loss(b, 0.1), LossError);
  auto c = with_margins(t, {1.0});
  c.theta_pos = t.leaf(col({0.5}));
  CHECK_THROWS_AS(dpo_loss(c, 0.1), LossError);
}

TEST_CASE("IPO minimum, a scalar value and convexity") {
  Tape<double> t;
  const double tau = 0.9;
  CHECK(ipo_loss(with_margins(t, {1.0 / (2 * tau)}), tau).item() == doctest::Approx(0.0).epsilon(1e-12));
  CHECK(ipo_loss(with_margins(t, {0.0}), tau).item() == doctest::Approx(std::pow(1 / 1.8, 2)).epsilon(1e-12));
  CHECK(std::pow(1 / 1.8, 2) == doctest::Approx(0.3086).epsilon(1e-4));
  Rng rng = substream(1, "ipo-convex");
  for (int i = 0; i < 100; ++i) {
    const double a = 10 * uniform01(rng) - 5, b = 10 * uniform01(rng) - 5;
    auto f = [&](double h) {
      Tape<double> s;
      return ipo_loss(with_margins(s, {h}), tau).item();
    };
    CHECK(f(0.5 * (a + b)) <= 0.5 * (f(a) + f(b)) + 1e-12);
  }
}

TEST_CASE("SLiC hinge saturation and subgradient") {
  Tape<double> t;
  CHECK(slic_loss(with_margins(t, {20.0}), 0.1, 1.0).item() == 0.0);
  CHECK(slic_loss(with_margins(t, {0.0}), 0.1, 1.0).item() == doctest::Approx(1.0).epsilon(1e-12));
  Tape<double> g;
  auto b = with_margins(g, {0.0, 20.0});
  g.backward(slic_loss(b, 0.1, 1.0));
  // Mean over two examples: the active one gets −β/2, the saturated one 0.
  CHECK(b.theta_pos.grad()(0, 0) == doctest::Approx(-0.1 / 2).epsilon(1e-12));
  CHECK(b.theta_pos.grad()(1, 0) == 0.0);
}

TEST_CASE("Mixed-DPO reductions and alpha draws") {
  Rng rng = substream(2, "mixed");
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> hoff, hon;
    for (int i = 0; i < 8; ++i) {
      hoff.push_back(8 * uniform01(rng) - 4);
      hon.push_back(8 * uniform01(rng) - 4);
    }
    Tape<double> t;
    auto off = with_margins(t, hoff), on = with_margins(t, hon);
    std::mt19937_64 a1 = substream(trial, "alpha"), a0 = substream(trial, "alpha");
    const auto ones = draw_alphas(8, 1.0, a1), zeros = draw_alphas(8, 0.0, a0);
    CHECK(mixed_dpo_loss(off, on, ones, 0.3).item() == dpo_loss(off, 0.3).item());
    CHECK(mixed_dpo_loss(off, on, zeros, 0.3).item() == dpo_loss(on, 0.3).item());
  }
  std::mt19937_64 r = substream(3, "alpha-freq");
  const auto half = draw_alphas(10000, 0.5, r);
  const double frac = std::accumulate(half.begin(), half.end(), 0.0) / 10000.0;
  CHECK(std::abs(frac - 0.5) < 3 * std::sqrt(0.25 / 10000.0));
  CHECK_THROWS_AS(draw_alphas(3, 1.5, r), LossError);
}

TEST_CASE("Avg-DPO weighting") {
  Tape<double> t;
  auto b = with_margins(t, {1.0, -2.0});
  auto other = with_margins(t, {3.0, 0.5});
  b.theta_neg2 = other.theta_neg;
  b.ref_neg2 = other.ref_neg;
  // The second channel has its own margin h2 = θ⁺ − ref⁺ − (θ⁻₂ − ref⁻₂).
  LossBatch<double> second = b;
  second.theta_neg = *b.theta_neg2;
  second.ref_neg = *b.ref_neg2;
  const double l1 = dpo_loss(b, 0.2).item(), l2 = dpo_loss(second, 0.2).item();
  CHECK(avg_dpo_loss(b, 0.2, 0.5).item() == doctest::Approx(0.5 * (l1 + l2)).epsilon(1e-14));
  CHECK(avg_dpo_loss(b, 0.2, 1.0).item() == l1);

  LossBatch<double> same = b;
  same.theta_neg2 = b.theta_neg;
  same.ref_neg2 = b.ref_neg;
  for (double gamma : {0.0, 0.25, 0.5, 0.9, 1.0}) CHECK(avg_dpo_loss(same, 0.2, gamma).item() == l1);
  LossBatch<double> missing = with_margins(t, {1.0});
  CHECK_THROWS_AS(avg_dpo_loss(missing, 0.2, 0.5), LossError);
}

TEST_CASE("leave-one-out advantages") {
  CHECK(rloo_advantages({1, 1, 1, 1}) == std::vector<double>{0, 0, 0, 0});
  CHECK(rloo_advantages({2, 0}) == std::vector<double>{2, -2});
  Rng rng = substream(4, "rloo-sum");
  for (int i = 0; i < 200; ++i) {
    std::vector<double> r(6);
    for (double& x : r) x = 20 * uniform01(rng) - 10;
    const auto a = rloo_advantages(r);
    double s = 0.0;
    for (double x : a) s += x;
    CHECK(s == 0.0);
    // a_i = r_i − mean of the others, checked for the first entry.
    const double others = (std::accumulate(r.begin(), r.end(), 0.0) - r[0]) / 5.0;
    CHECK(a[0] == doctest::Approx(r[0] - others).epsilon(1e-12));
  }
  CHECK_THROWS_AS(rloo_advantages({1.0}), LossError);
  const auto n = RewardNormalizer::fit({3, 3, 3});
  CHECK(n(3.0) == 0.0);
  CHECK(n.std == 1.0);
}

TEST_CASE("loss config validation and JSON") {
  LossConfig c;
  c.objective = Objective::avg;
  c.gamma = 0.3;
  CHECK(LossConfig::from_json(c.to_json()).to_json() == c.to_json());
  CHECK_THROWS(LossConfig::from_json({{"beta", -1.0}}));
  CHECK_THROWS(LossConfig::from_json({{"betta", 1.0}}));
  CHECK_THROWS(objective_from("ppo"));
}

TEST_CASE("gradient suite: pass, perturbation hook and input checks") {
  GradSuiteOptions opt;
  opt.batches = 10;
  for (const auto& c : run_grad_suite(grad_suite_objectives(), opt)) CHECK_MESSAGE(c.ok(), c.objective);
  for (const auto& target : grad_suite_objectives()) {
    opt.perturb = target;
    for (const auto& c : run_grad_suite(grad_suite_objectives(), opt)) CHECK(c.ok() == (c.objective != target));
  }
  CHECK(run_grad_suite({}, opt).empty());
  CHECK_THROWS_AS(run_grad_suite({"ppo"}, opt), std::invalid_argument);
}
