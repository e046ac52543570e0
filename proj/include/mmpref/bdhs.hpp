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

// Bias-driven hallucination sampling: the policy writes its own rejected
// responses while its view of the image is restricted, either by masking
// image tokens or by noising the image features.

#include "mmpref/diffusion.hpp"
#include "mmpref/policy.hpp"

#include <nlohmann/json.hpp>

#include <memory>
#include <string>
#include <string_view>
#include <vector>

namespace mmpref {

enum class RestrictMode { attn, noise };

std::string_view name(RestrictMode m);

struct BDHSConfig {
  RestrictMode mode = RestrictMode::attn;
  double rho_th = 0.99;
  int diffusion_steps = 0;
  int n_bdhs = 5;
  double eps_s = 0.97;
  double yesno_swap_prob = 0.5;
  double temperature = 1.0;
  bool greedy = false;
  std::uint64_t seed = 0;

  static BDHSConfig attn(double rho_th = 0.99);
  static BDHSConfig noise(int steps = 500);

  /// Throws std::invalid_argument; the two restriction modes are exclusive.
  void validate() const;
  nlohmann::json to_json() const;
  static BDHSConfig from_json(const nlohmann::json& j);
};

/// A restricted view x̃ of an image: either a mask over the original
/// features or noised features under the full mask.
struct RestrictedInput {
  ToyImage image;
  std::optional<AttentionMask> mask;

  const AttentionMask* mask_ptr() const { return mask ? &*mask : nullptr; }
};

RestrictedInput restrict_input(const Policy& policy, const ToyImage& image, const BDHSConfig& config, Rng& rng);

/// y⁺ cut into sentences at SEP; trailing tokens after the last SEP (the
/// <eos>) form `tail`.
struct GuidedSplit {
  struct Part {
    std::size_t begin, end;  // [begin, end) in y⁺, including the SEP
    std::size_t pivot;       // prefix length kept, 0..end−begin
    bool swapped = false;    // the leading yes/no was replaced
  };
  std::vector<Part> sentences;
  std::size_t tail_begin = 0;

  /// Sentences with pivots at their ends (no completion).
  static GuidedSplit of(std::span<const Token> y_plus);
};

/// Draws pivots and yes/no swaps. A swapped sentence keeps at least its
/// first token so the swap survives into the prefix.
void resample_split(GuidedSplit& split, std::span<const Token> y_plus, double swap_prob, Rng& rng);

struct GuidedOutput {
  TokenSeq tokens;
  /// Output offset where each sentence starts and its forced prefix.
  std::vector<std::size_t> sentence_begin;
  std::vector<TokenSeq> prefixes;
  bool truncated = false;
};

/// Each sentence k is (prefix of y⁺_k, completion), the completion sampled
/// from the restricted policy given the ground-truth sentences before k.
GuidedOutput guided_generate(const Policy& policy, const RestrictedInput& x, std::span<const Token> prompt,
                             std::span<const Token> y_plus, const GuidedSplit& split, const GenerateOptions& options,
                             Rng& rng);

class SentenceEmbedder {
 public:
  virtual ~SentenceEmbedder() = default;
  virtual Eigen::VectorXd embed(std::span<const Token> tokens) const = 0;
  /// Cosine of the two embeddings; throws std::invalid_argument on empty input.
  double similarity(std::span<const Token> a, std::span<const Token> b) const;
};

/// Token-bigram counts hashed into `dim` buckets, with start and end markers.
class HashedBigramEmbedder : public SentenceEmbedder {
 public:
  explicit HashedBigramEmbedder(int dim = 1024) : dim_(dim) {}
  Eigen::VectorXd embed(std::span<const Token> tokens) const override;
  int dim() const { return dim_; }
  /// Bucket of the bigram (a, b); −1 marks the sequence boundary.
  std::size_t bucket(Token a, Token b) const;

 private:
  int dim_;
};

struct BdhsIteration {
  int iteration;  // 1-based
  double similarity;
  bool accepted;
  bool fallback;
  int visible_tokens;  // attn mode
  TokenSeq tokens;
};

struct BdhsResult {
  TokenSeq rejected;
  int iterations = 0;
  double similarity = 1.0;
  bool accepted = false;  // similarity < eps_s
  bool fallback = false;  // produced by the guidance-free final iteration
  bool truncated = false;
  std::vector<BdhsIteration> trace;
  /// Prefix bookkeeping of the returned output (empty for fallback).
  GuidedOutput guided;
};

/// Similarity-gated regeneration loop. Randomness comes from
/// substream(config.seed, "bdhs", hash(example_id)).
BdhsResult bdhs(const Policy& policy, const ToyImage& image, std::span<const Token> prompt,
                std::span<const Token> y_plus, const BDHSConfig& config, const SentenceEmbedder& embedder,
                std::string_view example_id);

/// Teacher-forced distortion: token t is drawn from π(· | noised image,
/// prompt, y⁺_{<t}). Output length equals |y⁺|.
TokenSeq povid_distort(const Policy& policy, const ToyImage& image, std::span<const Token> prompt,
                       std::span<const Token> y_plus, int steps, Rng& rng, bool greedy = false);

}  // namespace mmpref
