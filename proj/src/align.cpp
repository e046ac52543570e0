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

#include "mmpref/align.hpp"

#include "mmpref/bdhs.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mmpref {

void AlignConfig::validate() const {
  loss.validate();
  if (!(lr > 0)) throw std::invalid_argument("align: lr must be positive");
  if (epochs < 0) throw std::invalid_argument("align: epochs must be non-negative");
  if (batch_size < 1) throw std::invalid_argument("align: batch_size must be positive");
  if (povid_steps < 1 || povid_steps > DiffusionSchedule::kMaxSteps)
    throw std::invalid_argument("align: povid_steps outside [1, 1000]");
  if (!(annotator_error >= 0 && annotator_error <= 1)) throw std::invalid_argument("align: annotator_error outside [0, 1]");
  if (!(online_temperature > 0)) throw std::invalid_argument("align: online_temperature must be positive");
}

nlohmann::json AlignConfig::to_json() const {
  return {{"loss", loss.to_json()},
          {"lr", lr},
          {"epochs", epochs},
          {"batch_size", batch_size},
          {"seed", seed},
          {"stratified", stratified},
          {"clip_norm", clip_norm},
          {"povid_steps", povid_steps},
          {"annotator_error", annotator_error},
          {"online_temperature", online_temperature},
          {"frozen", frozen}};
}

AlignConfig AlignConfig::from_json(const nlohmann::json& j) {
  AlignConfig c;
  for (const auto& [key, v] : j.items()) {
    if (key == "loss") c.loss = loss::LossConfig::from_json(v);
    else if (key == "lr") c.lr = v.get<double>();
    else if (key == "epochs") c.epochs = v.get<int>();
    else if (key == "batch_size") c.batch_size = v.get<int>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else if (key == "stratified") c.stratified = v.get<bool>();
    else if (key == "clip_norm") c.clip_norm = v.get<double>();
    else if (key == "povid_steps") c.povid_steps = v.get<int>();
    else if (key == "annotator_error") c.annotator_error = v.get<double>();
    else if (key == "online_temperature") c.online_temperature = v.get<double>();
    else if (key == "frozen") c.frozen = v.get<std::vector<std::string>>();
    else throw std::invalid_argument("unknown align config field '" + key + "'");
  }
  c.validate();
  return c;
}

namespace {

Tensor stack(const std::vector<Tensor>& xs) {
  Tensor out = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) out = ad::concat_rows(out, xs[i]);
  return out;
}

Tensor column(Tape& tape, const std::vector<double>& v) {
  Mat m(static_cast<Eigen::Index>(v.size()), 1);
  for (std::size_t i = 0; i < v.size(); ++i) m(static_cast<Eigen::Index>(i), 0) = v[i];
  return tape.constant(std::move(m));
}

// A pair as trained on, with cached reference log-probabilities.
struct Pair {
  const PreferenceExample* source;
  TokenSeq chosen, rejected, rejected2;
  double ref_pos = 0, ref_neg = 0, ref_neg2 = 0;
};

// Zeroes the gradients of frozen parameters, so Adam leaves them untouched.
std::vector<Mat> masked_grads(const Policy& policy, const Policy::Bound& bound, const std::vector<std::string>& frozen) {
  std::vector<Mat> g = collect_grads(bound);
  const auto& params = policy.parameters();
  for (std::size_t i = 0; i < g.size(); ++i)
    for (const auto& f : frozen)
      if (params[i].name.rfind(f, 0) == 0) g[i].setZero();
  return g;
}

void check_step(double value, const char* what, int step) {
  if (!std::isfinite(value)) throw TrainingError(std::string(what) + ": non-finite loss at step " + std::to_string(step));
}

}  // namespace

AlignResult align_pairs(Policy policy, const Policy& reference, const PreferenceSet& data, const WorldStore& worlds,
                        const AlignConfig& config, const StepLog& log) {
  config.validate();
  using loss::Objective;
  const Objective obj = config.loss.objective;
  if (obj == Objective::rm || obj == Objective::rloo)
    throw std::invalid_argument("align_pairs: objective " + std::string(loss::name(obj)) + " is not a pair loss");
  if (data.empty()) throw TrainingError("align_pairs: empty preference set");
  const bool ln = config.loss.length_normalize;

  std::vector<Pair> offline;
  offline.reserve(data.size());
  for (const auto& e : data) {
    const ToyImage img = worlds.get(e.image).image();
    offline.push_back({&e, e.chosen, e.rejected, {}, reference.logprob_value(img, nullptr, e.prompt, e.chosen, ln),
                       reference.logprob_value(img, nullptr, e.prompt, e.rejected, ln), 0.0});
  }

  AlignResult result{policy, {}, 0, 0};
  if (config.epochs == 0) {
    result.policy = std::move(policy);
    return result;
  }
  Adam opt(policy, {config.lr, 0.9, 0.999, 1e-8, config.clip_norm});
  Rng order_rng = substream(config.seed, "align-order");
  Rng alpha_rng = substream(config.seed, "align-alpha");
  Rng online_rng = substream(config.seed, "align-online");
  Rng povid_rng = substream(config.seed, "align-povid");
  const Annotator annotator(config.annotator_error);
  OnlinePairOptions online_opt;
  online_opt.temperature = config.online_temperature;
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  int step = 0;

  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    if (obj == Objective::avg) {
      // Policy channel from the current weights, refreshed every epoch.
      for (auto& p : offline) {
        const ToyImage img = worlds.get(p.source->image).image();
        p.rejected2 = povid_distort(policy, img, p.source->prompt, p.chosen, config.povid_steps, povid_rng);
        p.ref_neg2 = reference.logprob_value(img, nullptr, p.source->prompt, p.rejected2, ln);
      }
    }
    const std::vector<std::size_t> order = epoch_order(data, config.stratified, order_rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      std::vector<Pair> batch;
      std::vector<int> alphas;
      if (obj == Objective::mixed) alphas = loss::draw_alphas(end - start, config.loss.p_mix, alpha_rng);
      for (std::size_t i = start; i < end; ++i) {
        const Pair& off = offline[order[i]];
        if (obj != Objective::mixed || alphas[i - start] == 1) {
          batch.push_back(off);
          continue;
        }
        // α = 0: rank two fresh samples on the same image and prompt.
        const PreferenceExample& e = *off.source;
        const ToyWorld& w = worlds.get(e.image);
        auto online = online_pair(policy, annotator, w, e.prompt, online_opt, online_rng, e.id + "/online");
        if (!online) {
          ++result.skipped;
          continue;
        }
        const ToyImage img = w.image();
        Pair p{off.source, online->chosen, online->rejected, {},
               reference.logprob_value(img, nullptr, e.prompt, online->chosen, ln),
               reference.logprob_value(img, nullptr, e.prompt, online->rejected, ln), 0.0};
        batch.push_back(std::move(p));
        ++result.online_used;
      }
      if (batch.empty()) continue;

      Tape tape;
      const auto bound = policy.bind(tape, true);
      std::vector<Tensor> tp, tn, tn2;
      std::vector<double> rp, rn, rn2;
      for (const Pair& p : batch) {
        const ToyImage img = worlds.get(p.source->image).image();
        const auto& prompt = p.source->prompt;
        tp.push_back(policy.logprob(tape, bound, img, nullptr, prompt, p.chosen, ln));
        tn.push_back(policy.logprob(tape, bound, img, nullptr, prompt, p.rejected, ln));
        rp.push_back(p.ref_pos);
        rn.push_back(p.ref_neg);
        if (obj == Objective::avg) {
          tn2.push_back(policy.logprob(tape, bound, img, nullptr, prompt, p.rejected2, ln));
          rn2.push_back(p.ref_neg2);
        }
      }
      loss::LossBatch<double> lb{stack(tp), stack(tn), column(tape, rp), column(tape, rn), {}, {}};
      if (obj == Objective::avg) {
        lb.theta_neg2 = stack(tn2);
        lb.ref_neg2 = column(tape, rn2);
      }
      Tensor l = loss::pairwise_loss(lb, config.loss);
      const double value = l.item();
      check_step(value, "align_pairs", step);
      const Mat h = loss::margin(lb).value();
      const double kl = ((lb.theta_pos.value() - lb.ref_pos.value()).sum() +
                         (lb.theta_neg.value() - lb.ref_neg.value()).sum()) /
                        (2.0 * static_cast<double>(batch.size()));
      tape.backward(l);
      opt.step(policy, masked_grads(policy, bound, config.frozen));
      nlohmann::json rec = {{"step", step},         {"epoch", epoch}, {"objective", loss::name(obj)},
                            {"loss", value},        {"margin", h.mean()}, {"kl", kl},
                            {"batch", batch.size()}};
      if (log) log(rec);
      result.log.push_back(std::move(rec));
      ++step;
    }
  }
  result.policy = std::move(policy);
  return result;
}

AlignResult train_reward_model(Policy init, const PreferenceSet& data, const WorldStore& worlds,
                               const AlignConfig& config, const StepLog& log) {
  config.validate();
  if (data.empty()) throw TrainingError("train_reward_model: empty preference set");
  Policy rm = std::move(init);
  AlignResult result{rm, {}, 0, 0};
  Adam opt(rm, {config.lr, 0.9, 0.999, 1e-8, config.clip_norm});
  Rng order_rng = substream(config.seed, "rm-order");
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = epoch_order(data, config.stratified, order_rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::size_t end = std::min(order.size(), start + bs);
      Tape tape;
      const auto bound = rm.bind(tape, true);
      std::vector<Tensor> pos, neg;
      for (std::size_t i = start; i < end; ++i) {
        const auto& e = data[order[i]];
        const ToyImage img = worlds.get(e.image).image();
        pos.push_back(rm.reward(tape, bound, img, nullptr, e.prompt, e.chosen));
        neg.push_back(rm.reward(tape, bound, img, nullptr, e.prompt, e.rejected));
      }
      const Tensor rp = stack(pos), rn = stack(neg);
      Tensor l = loss::rm_loss(rp, rn);
      const double value = l.item();
      check_step(value, "train_reward_model", step);
      const double gap = (rp.value() - rn.value()).mean();
      tape.backward(l);
      opt.step(rm, collect_grads(bound));
      nlohmann::json rec = {{"step", step}, {"epoch", epoch}, {"objective", "rm"},
                            {"loss", value}, {"margin", gap},  {"kl", 0.0}};
      if (log) log(rec);
      result.log.push_back(std::move(rec));
      ++step;
    }
  }
  result.policy = std::move(rm);
  return result;
}

double reward_accuracy(const Policy& rm, const PreferenceSet& data, const WorldStore& worlds) {
  if (data.empty()) return 0.0;
  int ok = 0;
  for (const auto& e : data) {
    const ToyImage img = worlds.get(e.image).image();
    ok += rm.reward_value(img, nullptr, e.prompt, e.chosen) > rm.reward_value(img, nullptr, e.prompt, e.rejected);
  }
  return static_cast<double>(ok) / static_cast<double>(data.size());
}

RewardFn oracle_reward() {
  return [](const ToyWorld& w, std::span<const Token> prompt, std::span<const Token> response) {
    const ResponseAudit a = audit(w, parse_prompt(prompt), response);
    return static_cast<double>(a.true_claims - a.false_claims);
  };
}

RewardFn model_reward(const Policy& rm) {
  return [&rm](const ToyWorld& w, std::span<const Token> prompt, std::span<const Token> response) {
    return rm.reward_value(w.image(), nullptr, prompt, response);
  };
}

namespace {
GenerateOptions rloo_sampling() {
  GenerateOptions g;
  g.stop = StopRule::eos_only;
  g.temperature = 1.0;
  return g;
}
}  // namespace

loss::RewardNormalizer fit_reward_normalizer(const Policy& policy, const std::vector<RlooPrompt>& prompts,
                                             const WorldStore& worlds, const RewardFn& reward, Rng& rng) {
  std::vector<double> r;
  r.reserve(prompts.size());
  for (const auto& p : prompts) {
    const ToyWorld& w = worlds.get(p.world);
    const TokenSeq y = generate(policy, w.image(), nullptr, p.prompt, rloo_sampling(), rng).tokens;
    r.push_back(reward(w, p.prompt, y));
  }
  return loss::RewardNormalizer::fit(r);
}

RlooDiagnostics rloo_step(Policy& policy, const Policy& reference, Adam& opt, const std::vector<RlooPrompt>& batch,
                          const WorldStore& worlds, const RewardFn& reward, const loss::RewardNormalizer& norm,
                          const loss::LossConfig& config, Rng& rng) {
  const int k = config.k_rloo;
  if (k < 2) throw loss::LossError("rloo_step: k must be at least 2");
  if (batch.empty()) throw TrainingError("rloo_step: empty prompt batch");
  RlooDiagnostics diag;
  Tape tape;
  const auto bound = policy.bind(tape, true);
  Tensor total;
  bool first = true;
  const double scale = 1.0 / (static_cast<double>(k) * static_cast<double>(batch.size()));
  double kl_sum = 0.0, reward_sum = 0.0;
  for (const auto& p : batch) {
    const ToyWorld& w = worlds.get(p.world);
    const ToyImage img = w.image();
    std::vector<TokenSeq> ys;
    std::vector<double> r;
    std::vector<Tensor> lps;
    for (int i = 0; i < k; ++i) {
      ys.push_back(generate(policy, img, nullptr, p.prompt, rloo_sampling(), rng).tokens);
      lps.push_back(policy.logprob(tape, bound, img, nullptr, p.prompt, ys.back(), config.length_normalize));
      const double lr_ratio =
          lps.back().item() - reference.logprob_value(img, nullptr, p.prompt, ys.back(), config.length_normalize);
      kl_sum += lr_ratio;
      const double raw = reward(w, p.prompt, ys.back());
      reward_sum += raw;
      r.push_back(norm(raw) - config.beta_kl * lr_ratio);
    }
    const std::vector<double> adv = loss::rloo_advantages(r);
    for (int i = 0; i < k; ++i) {
      Tensor term = ad::scale(lps[static_cast<std::size_t>(i)], -adv[static_cast<std::size_t>(i)] * scale);
      total = first ? term : total + term;
      first = false;
      diag.advantages.push_back(adv[static_cast<std::size_t>(i)]);
    }
  }
  diag.loss = total.item();
  if (!std::isfinite(diag.loss)) throw TrainingError("rloo_step: non-finite surrogate loss");
  tape.backward(total);
  auto grads = collect_grads(bound);
  diag.grad_norm = global_norm(grads);
  try {
    opt.step(policy, std::move(grads));
  } catch (const TrainingError& e) {
    throw TrainingError(std::string(e.what()) + " (rloo: mean reward " +
                        std::to_string(reward_sum / (k * static_cast<double>(batch.size()))) + ")");
  }
  const double n = static_cast<double>(k) * static_cast<double>(batch.size());
  diag.mean_reward = reward_sum / n;
  diag.kl = kl_sum / n;
  return diag;
}

AlignResult align_rloo(Policy policy, const Policy& reference, const std::vector<RlooPrompt>& prompts,
                       const WorldStore& worlds, const RewardFn& reward, const AlignConfig& config,
                       const StepLog& log) {
  config.validate();
  if (prompts.empty()) throw TrainingError("align_rloo: empty prompt set");
  Rng rng = substream(config.seed, "align-rloo");
  const loss::RewardNormalizer norm = fit_reward_normalizer(policy, prompts, worlds, reward, rng);
  Adam opt(policy, {config.lr, 0.9, 0.999, 1e-8, 1.0});
  AlignResult result{policy, {}, 0, 0};
  std::vector<std::size_t> order(prompts.size());
  std::iota(order.begin(), order.end(), 0);
  const std::size_t bs = static_cast<std::size_t>(config.batch_size);
  int step = 0;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += bs) {
      std::vector<RlooPrompt> batch;
      for (std::size_t i = start; i < std::min(order.size(), start + bs); ++i) batch.push_back(prompts[order[i]]);
      const RlooDiagnostics d = rloo_step(policy, reference, opt, batch, worlds, reward, norm, config.loss, rng);
      nlohmann::json rec = {{"step", step},          {"epoch", epoch}, {"objective", "rloo"},
                            {"loss", d.loss},        {"margin", 0.0},  {"kl", d.kl},
                            {"reward", d.mean_reward}, {"grad_norm", d.grad_norm}};
      if (log) log(rec);
      result.log.push_back(std::move(rec));
      ++step;
    }
  }
  result.policy = std::move(policy);
  return result;
}

}  // namespace mmpref
