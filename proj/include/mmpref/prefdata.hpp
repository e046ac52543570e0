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

// Preference examples, the ground-truth annotator, corruption of chosen
// responses, and JSONL storage.

#include "mmpref/grammar.hpp"
#include "mmpref/policy.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmpref {

enum class Provenance { sft_groundtruth, bdhs, povid_distort, rule_corrupt, online_ranked };

std::string_view name(Provenance p);
Provenance provenance_from(std::string_view s);

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PreferenceExample {
  std::string id;
  TokenSeq prompt;
  std::string image;  // world id
  TokenSeq chosen;
  TokenSeq rejected;
  Provenance provenance = Provenance::bdhs;
  nlohmann::json meta = nlohmann::json::object();

  /// Throws DataError naming the id.
  void validate(const WorldStore* worlds = nullptr) const;
  nlohmann::ordered_json to_json() const;
  static PreferenceExample from_json(const nlohmann::json& j);
  friend bool operator==(const PreferenceExample&, const PreferenceExample&) = default;
};

using PreferenceSet = std::vector<PreferenceExample>;

/// One JSON object per line, fields in a fixed order.
void save_dataset(const std::filesystem::path& path, const PreferenceSet& data);
/// Validates every record; any bad line aborts the load with its line number.
PreferenceSet load_dataset(const std::filesystem::path& path, const WorldStore* worlds = nullptr);

// ---------------------------------------------------------------------------
// Annotation

enum class Winner { first, second, tie };

struct ResponseAudit {
  int true_claims = 0;
  int false_claims = 0;
  int unparsed = 0;
  bool flagged = false;  // off-grammar sentences or missing <eos>
  std::vector<std::string> violated;
  std::vector<std::string> satisfied;

  nlohmann::json to_json() const;
  friend bool operator==(const ResponseAudit&, const ResponseAudit&) = default;
};

struct AnnotatorVerdict {
  Winner winner = Winner::tie;
  ResponseAudit first, second;
  bool flipped = false;  // verdict inverted by the simulated error rate
};

/// Fact audit of one response against the world.
ResponseAudit audit(const ToyWorld& world, const Prompt& prompt, std::span<const Token> response);

/// Fewer false claims wins; then more true claims; otherwise a tie.
AnnotatorVerdict oracle_annotate(const ToyWorld& world, std::span<const Token> prompt, std::span<const Token> a,
                                 std::span<const Token> b);

/// Oracle whose non-tie verdicts are inverted with probability `error_rate`.
class Annotator {
 public:
  explicit Annotator(double error_rate = 0.0);
  AnnotatorVerdict operator()(const ToyWorld& world, std::span<const Token> prompt, std::span<const Token> a,
                              std::span<const Token> b, Rng& rng) const;
  double error_rate() const { return error_rate_; }

 private:
  double error_rate_;
};

struct OnlinePairOptions {
  double temperature = 1.0;
  bool greedy = false;
  int max_ties = 3;  // resamples after the first tie
};

using SkipLog = std::function<void(const std::string& message)>;

/// Two samples from the policy ranked by the annotator; nullopt when every
/// attempt ties.
std::optional<PreferenceExample> online_pair(const Policy& policy, const Annotator& annotator, const ToyWorld& world,
                                             std::span<const Token> prompt, const OnlinePairOptions& options,
                                             Rng& rng, const std::string& id, const SkipLog& log = {});

/// Replaces exactly one factual slot of y⁺ with a false alternative; nullopt
/// when no slot can be made false.
std::optional<TokenSeq> rule_corrupt(const ToyWorld& world, std::span<const Token> prompt,
                                     std::span<const Token> y_plus, Rng& rng);

// ---------------------------------------------------------------------------
// Statistics and sampling

struct DatasetStats {
  std::size_t size = 0;
  std::map<std::string, std::size_t> by_provenance;
  double chosen_length = 0.0;
  double rejected_length = 0.0;
  double similarity = 0.0;  // mean cosine of chosen vs rejected
  nlohmann::json to_json() const;
};

DatasetStats dataset_stats(const PreferenceSet& data);

/// n examples without replacement, in original order.
PreferenceSet subsample(const PreferenceSet& data, std::size_t n, std::uint64_t seed);

/// Shuffled epoch order. `stratified` interleaves provenance groups so every
/// batch sees each source in proportion.
std::vector<std::size_t> epoch_order(const PreferenceSet& data, bool stratified, Rng& rng);

}  // namespace mmpref
