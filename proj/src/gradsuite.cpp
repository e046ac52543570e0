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

#include "mmpref/gradcheck.hpp"
#include "mmpref/losses.hpp"
#include "mmpref/rng.hpp"

#include <algorithm>
#include <stdexcept>

namespace mmpref {

namespace {

using ad::Matrix;
using ad::Tensor;
using ad::Tape;
using Batch = loss::LossBatch<double>;

Matrix<double> log_probs(int n, Rng& rng) {
  Matrix<double> m(n, 1);
  for (int i = 0; i < n; ++i) m(i, 0) = -0.5 - 19.5 * uniform01(rng);
  return m;
}

Matrix<double> rewards(int n, Rng& rng) {
  Matrix<double> m(n, 1);
  for (int i = 0; i < n; ++i) m(i, 0) = 6.0 * uniform01(rng) - 3.0;
  return m;
}

Batch batch_of(const std::vector<Tensor<double>>& x, std::size_t at) {
  Batch b;
  b.theta_pos = x[at];
  b.theta_neg = x[at + 1];
  b.ref_pos = x[at + 2];
  b.ref_neg = x[at + 3];
  return b;
}

struct Case {
  ad::LossBuilder<double> build;
  std::vector<Matrix<double>> inputs;
};

Case make_case(const std::string& objective, int n, Rng& rng) {
  const double beta = 0.05 + 0.95 * uniform01(rng);
  if (objective == "rm") {
    return {[](Tape<double>&, const std::vector<Tensor<double>>& x) { return loss::rm_loss(x[0], x[1]); },
            {rewards(n, rng), rewards(n, rng)}};
  }
  std::vector<Matrix<double>> in;
  const int channels = objective == "mixed" ? 8 : objective == "avg" ? 6 : 4;
  for (int c = 0; c < channels; ++c) in.push_back(log_probs(n, rng));
  if (objective == "dpo")
    return {[beta](Tape<double>&, const std::vector<Tensor<double>>& x) { return loss::dpo_loss(batch_of(x, 0), beta); },
            in};
  if (objective == "ipo") {
    const double tau = 0.1 + 0.9 * uniform01(rng);
    return {[tau](Tape<double>&, const std::vector<Tensor<double>>& x) { return loss::ipo_loss(batch_of(x, 0), tau); },
            in};
  }
  if (objective == "slic") {
    const double delta = 1.0;
    // The hinge is not differentiable at its kink; keep every margin clear of it.
    for (int i = 0; i < n; ++i) {
      for (;;) {
        const double h = (in[0](i, 0) - in[2](i, 0)) - (in[1](i, 0) - in[3](i, 0));
        if (std::abs(delta - beta * h) > 1e-2) break;
        in[1](i, 0) = log_probs(1, rng)(0, 0);
      }
    }
    return {[beta, delta](Tape<double>&, const std::vector<Tensor<double>>& x) {
              return loss::slic_loss(batch_of(x, 0), beta, delta);
            },
            in};
  }
  if (objective == "mixed") {
    std::mt19937_64 arng = substream(rng(), "alphas");
    const auto alphas = loss::draw_alphas(static_cast<std::size_t>(n), uniform01(rng), arng);
    return {[beta, alphas](Tape<double>&, const std::vector<Tensor<double>>& x) {
              return loss::mixed_dpo_loss(batch_of(x, 0), batch_of(x, 4), alphas, beta);
            },
            in};
  }
  if (objective == "avg") {
    const double gamma = uniform01(rng);
    return {[beta, gamma](Tape<double>&, const std::vector<Tensor<double>>& x) {
              Batch b = batch_of(x, 0);
              b.theta_neg2 = x[4];
              b.ref_neg2 = x[5];
              return loss::avg_dpo_loss(b, beta, gamma);
            },
            in};
  }
  throw std::invalid_argument("gradcheck: unknown objective '" + objective + "'");
}

}  // namespace

const std::vector<std::string>& grad_suite_objectives() {
  static const std::vector<std::string> all = {"rm", "dpo", "ipo", "slic", "mixed", "avg"};
  return all;
}

std::vector<ObjectiveCheck> run_grad_suite(const std::vector<std::string>& objectives,
                                           const GradSuiteOptions& options) {
  const auto& known = grad_suite_objectives();
  for (const auto& o : objectives)
    if (std::find(known.begin(), known.end(), o) == known.end())
      throw std::invalid_argument("gradcheck: unknown objective '" + o + "'");
  if (options.batches < 1 || options.batch_size < 1)
    throw std::invalid_argument("gradcheck: batches and batch_size must be positive");

  std::vector<ObjectiveCheck> out;
  for (const auto& o : objectives) {
    ObjectiveCheck check{o, options.batches, 0, 0.0};
    const double offset = o == options.perturb ? 1e-3 : 0.0;
    for (int b = 0; b < options.batches; ++b) {
      Rng rng = substream(options.seed, "gradcheck-" + o, static_cast<std::uint64_t>(b));
      Case c = make_case(o, options.batch_size, rng);
      const auto r = ad::gradcheck<double>(c.build, c.inputs, options.step, options.rtol, offset, options.floor);
      check.max_rel_error = std::max(check.max_rel_error, r.max_rel_error);
      if (r.passed) ++check.passed;
    }
    out.push_back(check);
  }
  return out;
}

}  // namespace mmpref
