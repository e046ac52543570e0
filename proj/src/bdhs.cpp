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

#include "mmpref/bdhs.hpp"

#include <cmath>
#include <stdexcept>

namespace mmpref {

std::string_view name(RestrictMode m) { return m == RestrictMode::attn ? "attn" : "noise"; }

BDHSConfig BDHSConfig::attn(double rho_th) {
  BDHSConfig c;
  c.rho_th = rho_th;
  return c;
}

BDHSConfig BDHSConfig::noise(int steps) {
  BDHSConfig c;
  c.mode = RestrictMode::noise;
  c.rho_th = 0.0;
  c.diffusion_steps = steps;
  return c;
}

void BDHSConfig::validate() const {
  if (!(rho_th >= 0.0 && rho_th <= 1.0)) throw std::invalid_argument("bdhs: rho_th outside [0, 1]");
  if (diffusion_steps < 0 || diffusion_steps > DiffusionSchedule::kMaxSteps)
    throw std::invalid_argument("bdhs: diffusion_steps outside [0, 1000]");
  if (mode == RestrictMode::attn && diffusion_steps != 0)
    throw std::invalid_argument("bdhs: attn mode requires diffusion_steps = 0");
  if (mode == RestrictMode::noise && rho_th != 0.0) throw std::invalid_argument("bdhs: noise mode requires rho_th = 0");
  if (n_bdhs < 1) throw std::invalid_argument("bdhs: n_bdhs must be at least 1");
  if (!(yesno_swap_prob >= 0.0 && yesno_swap_prob <= 1.0))
    throw std::invalid_argument("bdhs: yesno_swap_prob outside [0, 1]");
  if (!greedy && !(temperature > 0.0)) throw std::invalid_argument("bdhs: temperature must be positive");
}

nlohmann::json BDHSConfig::to_json() const {
  return {{"mode", name(mode)},       {"rho_th", rho_th},   {"diffusion_steps", diffusion_steps},
          {"n_bdhs", n_bdhs},         {"eps_s", eps_s},     {"yesno_swap_prob", yesno_swap_prob},
          {"temperature", temperature}, {"greedy", greedy}, {"seed", seed}};
}

BDHSConfig BDHSConfig::from_json(const nlohmann::json& j) {
  BDHSConfig c;
  bool rho_set = false, steps_set = false;
  for (const auto& [key, v] : j.items()) {
    if (key == "mode") {
      const auto s = v.get<std::string>();
      if (s == "attn") c.mode = RestrictMode::attn;
      else if (s == "noise") c.mode = RestrictMode::noise;
      else throw std::invalid_argument("bdhs: unknown mode '" + s + "'");
    } else if (key == "rho_th") {
      c.rho_th = v.get<double>();
      rho_set = true;
    } else if (key == "diffusion_steps") {
      c.diffusion_steps = v.get<int>();
      steps_set = true;
    } else if (key == "n_bdhs") c.n_bdhs = v.get<int>();
    else if (key == "eps_s") c.eps_s = v.get<double>();
    else if (key == "yesno_swap_prob") c.yesno_swap_prob = v.get<double>();
    else if (key == "temperature") c.temperature = v.get<double>();
    else if (key == "greedy") c.greedy = v.get<bool>();
    else if (key == "seed") c.seed = v.get<std::uint64_t>();
    else throw std::invalid_argument("unknown bdhs config field '" + key + "'");
  }
  // Unset knobs of the inactive mode take their neutral value.
  if (c.mode == RestrictMode::noise) {
    if (!rho_set) c.rho_th = 0.0;
    if (!steps_set) c.diffusion_steps = 500;
  }
  c.validate();
  return c;
}

RestrictedInput restrict_input(const Policy& policy, const ToyImage& image, const BDHSConfig& config, Rng& rng) {
  RestrictedInput x;
  if (config.mode == RestrictMode::attn) {
    x.image = image;
    x.mask = sample_mask(policy.image_tokens(), config.rho_th, rng);
  } else {
    x.image = add_noise(image, config.diffusion_steps, rng);
    x.mask = AttentionMask::all(policy.image_tokens());
  }
  return x;
}

GuidedSplit GuidedSplit::of(std::span<const Token> y_plus) {
  const Token sep = Vocab::get().sep();
  GuidedSplit s;
  std::size_t start = 0;
  for (std::size_t i = 0; i < y_plus.size(); ++i)
    if (y_plus[i] == sep) {
      s.sentences.push_back({start, i + 1, i + 1 - start});
      start = i + 1;
    }
  s.tail_begin = start;
  return s;
}

namespace {
bool is_yes_no(Token t) { return t == Vocab::get().yes() || t == Vocab::get().no(); }
Token swap_yes_no(Token t) { return t == Vocab::get().yes() ? Vocab::get().no() : Vocab::get().yes(); }
}  // namespace

void resample_split(GuidedSplit& split, std::span<const Token> y_plus, double swap_prob, Rng& rng) {
  for (auto& p : split.sentences) {
    const std::size_t len = p.end - p.begin;
    p.swapped = is_yes_no(y_plus[p.begin]) && bernoulli(rng, swap_prob);
    const std::size_t lo = p.swapped ? 1 : 0;
    p.pivot = std::uniform_int_distribution<std::size_t>(lo, len)(rng);
  }
}

GuidedOutput guided_generate(const Policy& policy, const RestrictedInput& x, std::span<const Token> prompt,
                             std::span<const Token> y_plus, const GuidedSplit& split, const GenerateOptions& options,
                             Rng& rng) {
  if (y_plus.empty()) throw std::invalid_argument("guided_generate: empty chosen response");
  const Token eos = Vocab::get().eos();
  GenerateOptions opt = options;
  opt.stop = StopRule::sep_or_eos;
  // Completions stay inside their sentence; the response tail supplies <eos>.
  opt.eos_bias = ad::kMaskedScore;
  GuidedOutput out;
  for (const auto& p : split.sentences) {
    if (p.pivot > p.end - p.begin) throw std::invalid_argument("guided_generate: pivot beyond sentence end");
    TokenSeq prefix(y_plus.begin() + static_cast<long>(p.begin), y_plus.begin() + static_cast<long>(p.begin + p.pivot));
    if (p.swapped) {
      if (prefix.empty()) throw std::invalid_argument("guided_generate: swapped sentence with empty prefix");
      prefix[0] = swap_yes_no(prefix[0]);
    }
    out.sentence_begin.push_back(out.tokens.size());
    out.tokens.insert(out.tokens.end(), prefix.begin(), prefix.end());
    if (p.pivot < p.end - p.begin) {
      TokenSeq ctx(prompt.begin(), prompt.end());
      ctx.insert(ctx.end(), y_plus.begin(), y_plus.begin() + static_cast<long>(p.begin));
      ctx.insert(ctx.end(), prefix.begin(), prefix.end());
      Generation g = generate(policy, x.image, x.mask_ptr(), ctx, opt, rng);
      out.truncated = out.truncated || g.hit_cap;
      out.tokens.insert(out.tokens.end(), g.tokens.begin(), g.tokens.end());
    }
    out.prefixes.push_back(std::move(prefix));
  }
  if (out.tokens.empty() || out.tokens.back() != eos)
    out.tokens.insert(out.tokens.end(), y_plus.begin() + static_cast<long>(split.tail_begin), y_plus.end());
  return out;
}

double SentenceEmbedder::similarity(std::span<const Token> a, std::span<const Token> b) const {
  if (a.empty() || b.empty()) throw std::invalid_argument("similarity: empty token sequence");
  const Eigen::VectorXd ea = embed(a), eb = embed(b);
  const double na = ea.norm(), nb = eb.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return ea.dot(eb) / (na * nb);
}

std::size_t HashedBigramEmbedder::bucket(Token a, Token b) const {
  // Words, not ids, so the hash is stable if the vocabulary is reordered.
  const Vocab& v = Vocab::get();
  std::string key = (a < 0 ? std::string("<s>") : v.word(a)) + '\x1f' + (b < 0 ? std::string("</s>") : v.word(b));
  return static_cast<std::size_t>(fnv1a(key) % static_cast<std::uint64_t>(dim_));
}

Eigen::VectorXd HashedBigramEmbedder::embed(std::span<const Token> tokens) const {
  Eigen::VectorXd e = Eigen::VectorXd::Zero(dim_);
  Token prev = -1;
  for (Token t : tokens) {
    e(static_cast<Eigen::Index>(bucket(prev, t))) += 1.0;
    prev = t;
  }
  e(static_cast<Eigen::Index>(bucket(prev, -1))) += 1.0;
  return e;
}

BdhsResult bdhs(const Policy& policy, const ToyImage& image, std::span<const Token> prompt,
                std::span<const Token> y_plus, const BDHSConfig& config, const SentenceEmbedder& embedder,
                std::string_view example_id) {
  config.validate();
  if (y_plus.empty()) throw std::invalid_argument("bdhs: empty chosen response");
  Rng rng = substream(config.seed, "bdhs", fnv1a(example_id));
  GenerateOptions opt;
  opt.temperature = config.temperature;
  opt.greedy = config.greedy;

  BdhsResult res;
  GuidedSplit split = GuidedSplit::of(y_plus);
  for (int it = 1; it <= config.n_bdhs; ++it) {
    RestrictedInput x = restrict_input(policy, image, config, rng);
    const bool fallback = it == config.n_bdhs && config.n_bdhs > 1;
    BdhsIteration rec{it, 0.0, false, fallback, x.mask ? x.mask->count() : 0, {}};
    GuidedOutput guided;
    if (fallback) {
      GenerateOptions free = opt;
      free.stop = StopRule::eos_only;
      Generation g = generate(policy, x.image, x.mask_ptr(), prompt, free, rng);
      rec.tokens = std::move(g.tokens);
      guided.truncated = g.hit_cap;
    } else {
      resample_split(split, y_plus, config.yesno_swap_prob, rng);
      guided = guided_generate(policy, x, prompt, y_plus, split, opt, rng);
      rec.tokens = guided.tokens;
    }
    rec.similarity = rec.tokens.empty() ? 1.0 : embedder.similarity(rec.tokens, y_plus);
    rec.accepted = rec.similarity < config.eps_s;
    res.trace.push_back(rec);
    const bool last = it == config.n_bdhs;
    if (rec.accepted || last) {
      res.rejected = rec.tokens;
      res.iterations = it;
      res.similarity = rec.similarity;
      res.accepted = rec.accepted;
      res.fallback = fallback;
      res.truncated = guided.truncated;
      if (!fallback) res.guided = std::move(guided);
      break;
    }
  }
  return res;
}

TokenSeq povid_distort(const Policy& policy, const ToyImage& image, std::span<const Token> prompt,
                       std::span<const Token> y_plus, int steps, Rng& rng, bool greedy) {
  if (steps <= 0) throw std::invalid_argument("povid_distort: needs at least one diffusion step");
  if (y_plus.empty()) return {};
  const ToyImage noisy = add_noise(image, steps, rng);
  TokenSeq text(prompt.begin(), prompt.end());
  text.insert(text.end(), y_plus.begin(), y_plus.end() - 1);
  // Row prompt.size() − 1 + t predicts y⁺_t given the ground-truth prefix.
  const Mat dists = policy.all_token_dists(noisy, nullptr, text);
  TokenSeq out;
  out.reserve(y_plus.size());
  for (std::size_t t = 0; t < y_plus.size(); ++t) {
    Eigen::VectorXd d = dists.row(static_cast<Eigen::Index>(prompt.size() - 1 + t)).transpose();
    if (greedy) {
      Eigen::Index best;
      d.maxCoeff(&best);
      out.push_back(static_cast<Token>(best));
    } else {
      out.push_back(sample_token(d, rng));
    }
  }
  return out;
}

}  // namespace mmpref
