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

// Tiny autoregressive multimodal policy.
//
// Image cells become k = copies * H * W memory tokens (each cell embedding is
// repeated `image_copies` times). Text positions attend causally to the text
// prefix and to every visible memory token; memory tokens are not updated by
// the decoder, so masking a memory token removes it from every layer.

#include "mmpref/autodiff.hpp"
#include "mmpref/rng.hpp"
#include "mmpref/vocab.hpp"
#include "mmpref/world.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mmpref {

using Mat = ad::Matrix<double>;
using Tape = ad::Tape<double>;
using Tensor = ad::Tensor<double>;

struct PolicyConfig {
  int height = 4;
  int width = 4;
  int d_model = 32;
  int n_heads = 2;
  int n_layers = 2;
  int d_ff = 64;
  int image_copies = 2;
  int max_text_len = 96;
  std::uint64_t init_seed = 0;

  int image_tokens() const { return image_copies * height * width; }
  nlohmann::json to_json() const;
  static PolicyConfig from_json(const nlohmann::json& j);
  friend bool operator==(const PolicyConfig&, const PolicyConfig&) = default;
};

/// m_i = 1 means image token i is visible.
struct AttentionMask {
  std::vector<bool> visible;

  static AttentionMask all(int k) { return {std::vector<bool>(static_cast<std::size_t>(k), true)}; }
  static AttentionMask none(int k) { return {std::vector<bool>(static_cast<std::size_t>(k), false)}; }
  int size() const { return static_cast<int>(visible.size()); }
  int count() const;
  bool all_visible() const;
};

/// Each token visible iff rho_i >= rho_th with rho_i ~ U(0,1).
AttentionMask sample_mask(int k, double rho_th, Rng& rng);

struct Parameter {
  std::string name;
  Mat value;
};

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class Policy {
 public:
  explicit Policy(PolicyConfig config);

  const PolicyConfig& config() const { return config_; }
  int image_tokens() const { return config_.image_tokens(); }
  int vocab_size() const { return Vocab::get().size(); }

  std::vector<Parameter>& parameters() { return params_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  /// Parameters placed on a tape, in parameters() order.
  using Bound = std::vector<Tensor>;
  Bound bind(Tape& tape, bool requires_grad) const;

  /// Final normalized hidden states, one row per text token. A null mask is
  /// the unmasked path.
  Tensor hidden(Tape& tape, const Bound& p, const ToyImage& image, const AttentionMask* mask,
                std::span<const Token> text) const;
  Tensor logits(Tape& tape, const Bound& p, const ToyImage& image, const AttentionMask* mask,
                std::span<const Token> text) const;

  /// Σ_t log P(response_t | image, mask, prompt, response_<t), as a 1×1 tensor.
  Tensor logprob(Tape& tape, const Bound& p, const ToyImage& image, const AttentionMask* mask,
                 std::span<const Token> prompt, std::span<const Token> response,
                 bool length_normalize = false) const;

  /// Scalar reward read out of the last response position.
  Tensor reward(Tape& tape, const Bound& p, const ToyImage& image, const AttentionMask* mask,
                std::span<const Token> prompt, std::span<const Token> response) const;

  // Gradient-free conveniences.
  Eigen::VectorXd next_token_logits(const ToyImage& image, const AttentionMask* mask,
                                    std::span<const Token> prefix) const;
  Eigen::VectorXd next_token_dist(const ToyImage& image, const AttentionMask* mask,
                                  std::span<const Token> prefix) const;
  /// Next-token distributions for every text position.
  Mat all_token_dists(const ToyImage& image, const AttentionMask* mask, std::span<const Token> text) const;
  double logprob_value(const ToyImage& image, const AttentionMask* mask, std::span<const Token> prompt,
                       std::span<const Token> response, bool length_normalize = false) const;
  double reward_value(const ToyImage& image, const AttentionMask* mask, std::span<const Token> prompt,
                      std::span<const Token> response) const;

  /// Flat key→array checkpoint with a JSON shape manifest header.
  void save(const std::filesystem::path& path) const;
  static Policy load(const std::filesystem::path& path);
  std::string serialize() const;
  static Policy deserialize(const std::string& bytes);

  friend bool operator==(const Policy& a, const Policy& b);

 private:
  struct LayerIndex {
    int norm1, wo, norm2, w1, w2;
    std::vector<int> wq, wk, wv;
  };

  int add_param(std::string name, Mat value);
  void check_inputs(const ToyImage& image, const AttentionMask* mask, std::span<const Token> text) const;

  PolicyConfig config_;
  std::vector<Parameter> params_;
  int tok_emb_, pos_emb_, feat_proj_, cell_emb_, img_norm_, final_norm_, out_proj_, reward_head_;
  std::vector<LayerIndex> layers_;
};

enum class StopRule { sep_or_eos, eos_only };

struct GenerateOptions {
  StopRule stop = StopRule::sep_or_eos;
  double temperature = 1.0;
  bool greedy = false;
  int max_len = 64;
  /// Added to the <eos> logit; > 0 yields shorter outputs.
  double eos_bias = 0.0;
};

struct Generation {
  TokenSeq tokens;  // new tokens, including the stop token when reached
  bool hit_cap = false;
};

/// Samples a continuation of `context` (prompt plus any forced response prefix).
Generation generate(const Policy& policy, const ToyImage& image, const AttentionMask* mask,
                    std::span<const Token> context, const GenerateOptions& options, Rng& rng);

/// Index sampled from a distribution by inverse CDF.
Token sample_token(const Eigen::VectorXd& dist, Rng& rng);

}  // namespace mmpref
