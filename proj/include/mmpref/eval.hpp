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

// Presence probes, description recall and hallucination rate.

#include "mmpref/grammar.hpp"
#include "mmpref/policy.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <string>
#include <vector>

namespace mmpref {

class EvalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Probe {
  std::string world;
  TokenSeq question;
  bool gold_yes;
  friend bool operator==(const Probe&, const Probe&) = default;
};

struct ProbeSet {
  std::vector<Probe> probes;

  double balance() const;
  /// Hex SHA-256 of the serialized probes; two runs are comparable only if
  /// their digests agree.
  std::string digest() const;
  void save(const std::filesystem::path& path) const;
  static ProbeSet load(const std::filesystem::path& path);
};

/// n probes (⌈n/2⌉ gold yes about present objects, the rest about plausible
/// absent ones) drawn without replacement from `worlds`.
ProbeSet build_probes(const WorldStore& worlds, std::size_t n, std::uint64_t seed);

/// Answers probes and writes descriptions.
class Responder {
 public:
  virtual ~Responder() = default;
  virtual bool answers_yes(const ToyWorld& world, std::span<const Token> question) const = 0;
  virtual TokenSeq describe(const ToyWorld& world, std::span<const Token> prompt) const = 0;
};

/// P(yes) vs P(no) after the question; greedy descriptions. `eos_bias` > 0
/// gives the length-penalized variant.
class PolicyResponder : public Responder {
 public:
  explicit PolicyResponder(const Policy& policy, double eos_bias = 0.0) : policy_(policy), eos_bias_(eos_bias) {}
  bool answers_yes(const ToyWorld& world, std::span<const Token> question) const override;
  TokenSeq describe(const ToyWorld& world, std::span<const Token> prompt) const override;

 private:
  const Policy& policy_;
  double eos_bias_;
};

/// Reads the world directly.
class OracleResponder : public Responder {
 public:
  bool answers_yes(const ToyWorld& world, std::span<const Token> question) const override;
  TokenSeq describe(const ToyWorld& world, std::span<const Token> prompt) const override;
};

/// Always "yes"; empty descriptions.
class ConstantYesResponder : public Responder {
 public:
  bool answers_yes(const ToyWorld&, std::span<const Token>) const override { return true; }
  TokenSeq describe(const ToyWorld&, std::span<const Token>) const override { return {Vocab::get().eos()}; }
};

struct DescriptionScore {
  double recall = 0.0;
  double hallucination = 0.0;
  int mentions = 0;
  int length = 0;  // tokens before <eos>
  bool flagged = false;
};

/// Object mentions of a description scored against the world. No mentions
/// means recall 0 and hallucination 0.
DescriptionScore score_description(const ToyWorld& world, std::span<const Token> description);

struct EvalReport {
  double probe_accuracy = 0.0;
  double recall = 0.0;
  double hallucination_rate = 0.0;
  double response_length_mean = 0.0;
  int flagged_descriptions = 0;
  std::string probe_digest;
  std::vector<std::string> describe_worlds;
  std::vector<int> probe_correct;
  std::vector<DescriptionScore> descriptions;

  nlohmann::json to_json(bool per_item = true) const;
  static EvalReport from_json(const nlohmann::json& j);
};

EvalReport evaluate(const Responder& responder, const ProbeSet& probes, const WorldStore& worlds,
                    const std::vector<std::string>& describe_worlds);

struct MetricDelta {
  std::string metric;
  double a = 0.0, b = 0.0;
  double delta = 0.0;  // b − a
  double lo = 0.0, hi = 0.0;
};

/// Paired bootstrap over probe and description items. Throws EvalError
/// unless both reports use the same probes and description worlds.
std::vector<MetricDelta> compare_runs(const EvalReport& a, const EvalReport& b, int resamples = 1000,
                                      std::uint64_t seed = 0);

std::string deltas_csv(const std::vector<MetricDelta>& deltas);
nlohmann::json deltas_json(const std::vector<MetricDelta>& deltas);

/// Hex SHA-256 of a byte string.
std::string sha256_hex(std::string_view bytes);

}  // namespace mmpref
