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

#include "mmpref/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmpref {

Adam::Adam(const Policy& policy, AdamConfig config) : config_(config) {
  for (const auto& p : policy.parameters()) {
    m_.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
    v_.push_back(Mat::Zero(p.value.rows(), p.value.cols()));
  }
}

double Adam::step(Policy& policy, std::vector<Mat> grads) {
  auto& params = policy.parameters();
  if (grads.size() != params.size()) throw TrainingError("Adam: gradient count mismatch");
  const double norm = global_norm(grads);
  if (!std::isfinite(norm)) throw TrainingError("Adam: non-finite gradient norm");
  if (config_.clip_norm > 0.0 && norm > config_.clip_norm)
    for (auto& g : grads) g *= config_.clip_norm / norm;
  ++t_;
  const double bc1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    m_[i] = config_.beta1 * m_[i] + (1.0 - config_.beta1) * grads[i];
    v_[i] = config_.beta2 * v_[i] + (1.0 - config_.beta2) * grads[i].cwiseProduct(grads[i]);
    params[i].value.array() -=
        config_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + config_.eps);
  }
  return norm;
}

std::vector<Mat> collect_grads(const Policy::Bound& bound) {
  std::vector<Mat> out;
  out.reserve(bound.size());
  for (const auto& t : bound) out.push_back(t.grad());
  return out;
}

double global_norm(const std::vector<Mat>& grads) {
  double s = 0.0;
  for (const auto& g : grads) s += g.squaredNorm();
  return std::sqrt(s);
}

SftResult sft_train(Policy policy, const std::vector<SftRecord>& records, const WorldStore& worlds,
                    const SftConfig& config, const EpochLog& log) {
  if (records.empty()) throw TrainingError("sft_train: empty dataset");
  if (!(config.image_dropout >= 0 && config.image_dropout < 1))
    throw std::invalid_argument("sft_train: image_dropout outside [0, 1)");
  std::vector<double> losses;
  if (config.epochs > 0) {
    Adam opt(policy, {config.lr});
    Rng rng = substream(config.seed, "sft");
    Rng drop_rng = substream(config.seed, "sft-dropout");
    const AttentionMask hidden = AttentionMask::none(policy.image_tokens());
    std::vector<std::size_t> order(records.size());
    std::iota(order.begin(), order.end(), 0);
    const std::size_t bs = static_cast<std::size_t>(std::max(1, config.batch_size));
    for (int epoch = 0; epoch < config.epochs; ++epoch) {
      std::shuffle(order.begin(), order.end(), rng);
      double epoch_nll = 0.0;
      double epoch_tokens = 0.0;
      for (std::size_t start = 0; start < order.size(); start += bs) {
        const std::size_t end = std::min(order.size(), start + bs);
        Tape tape;
        const auto bound = policy.bind(tape, true);
        Tensor total;
        double tokens = 0.0;
        for (std::size_t i = start; i < end; ++i) {
          const SftRecord& r = records[order[i]];
          const ToyImage img = worlds.get(r.world_id).image();
          const bool drop = config.image_dropout > 0 && bernoulli(drop_rng, config.image_dropout);
          Tensor lp = policy.logprob(tape, bound, img, drop ? &hidden : nullptr, r.prompt, r.response);
          total = i == start ? lp : total + lp;
          tokens += static_cast<double>(r.response.size());
        }
        Tensor loss = ad::scale(total, -1.0 / tokens);
        const double value = loss.item();
        if (!std::isfinite(value))
          throw TrainingError("sft_train: non-finite loss at epoch " + std::to_string(epoch) +
                              ", batch starting " + std::to_string(start));
        tape.backward(loss);
        opt.step(policy, collect_grads(bound));
        epoch_nll += value * tokens;
        epoch_tokens += tokens;
      }
      losses.push_back(epoch_nll / epoch_tokens);
      if (log) log(epoch, losses.back());
    }
  }
  Policy reference = policy;
  return {std::move(policy), std::move(reference), std::move(losses)};
}

double sft_loss(const Policy& policy, const std::vector<SftRecord>& records, const WorldStore& worlds) {
  double nll = 0.0, tokens = 0.0;
  for (const auto& r : records) {
    nll -= policy.logprob_value(worlds.get(r.world_id).image(), nullptr, r.prompt, r.response);
    tokens += static_cast<double>(r.response.size());
  }
  return tokens > 0 ? nll / tokens : 0.0;
}

}  // namespace mmpref
