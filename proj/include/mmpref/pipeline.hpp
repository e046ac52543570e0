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

// Run configuration and the stages behind the command-line tool: worlds,
// supervised fine-tuning, preference data, alignment and evaluation, with
// every artifact written under one run directory and hashed in a manifest.

#include "mmpref/align.hpp"
#include "mmpref/bdhs.hpp"
#include "mmpref/eval.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

namespace mmpref {

/// Invalid configuration; the tool exits with code 2.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Failure inside a stage; the tool exits with code 1.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error(stage + ": " + what), stage_(std::move(stage)) {}
  const std::string& stage() const { return stage_; }

 private:
  std::string stage_;
};

enum class DataMethod { bdhs, povid, corrupt, online };
std::string_view name(DataMethod m);
DataMethod data_method_from(std::string_view s);

std::string_view name(PromptKind k);
PromptKind prompt_kind_from(std::string_view s);

struct WorldSection {
  WorldGenParams gen;
  int corpus = 1000;       // SFT worlds
  int pref_worlds = 700;   // prompts for preference data
  int test_worlds = 500;   // probes and descriptions
};

struct DataSection {
  DataMethod method = DataMethod::bdhs;
  int pairs = 2000;
  std::vector<PromptKind> kinds = {PromptKind::presence, PromptKind::describe};
  int povid_steps = 500;
};

struct EvalSection {
  int probes = 1000;
  int describe = 500;
  int bootstrap = 1000;
};

/// One comparison arm of the pipeline: an objective trained on a data
/// method. "online" is Mixed-DPO with p_mix = 0.
struct Arm {
  std::string objective;  // dpo ipo slic mixed avg online rloo
  DataMethod method = DataMethod::bdhs;

  std::string label() const;
  static Arm parse(std::string_view s);  // "objective:method"
};

struct RunConfig {
  std::string command = "pipeline";
  std::uint64_t seed = 1;
  WorldSection world;
  PolicyConfig policy;
  SftConfig sft;
  DataSection data;
  BDHSConfig bdhs;
  AlignConfig align;
  EvalSection eval;
  std::vector<Arm> arms;
  /// RLOO reward: "oracle", or "rm" for a reward model trained on the arm's data.
  std::string rloo_reward = "oracle";
  int rloo_prompts = 256;
  int jobs = 1;
  std::filesystem::path out;  // run directory; not part of the serialized record

  RunConfig();
  void validate() const;
  nlohmann::ordered_json to_json() const;
  /// Missing fields keep their defaults; unknown fields throw ConfigError.
  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig load(const std::filesystem::path& path);
};

/// Runs f(i) for i in [0, n) on up to `jobs` threads; rethrows the first error.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& f);

/// Seed of a named stage stream.
std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage);

struct Splits {
  std::vector<std::string> train, pref, test;
  nlohmann::ordered_json to_json() const;
  static Splits from_json(const nlohmann::json& j);
};

struct WorldArtifacts {
  WorldStore worlds;
  Splits splits;
  std::vector<SftRecord> corpus;
};

/// Run directory layout and manifest.
class RunDir {
 public:
  explicit RunDir(std::filesystem::path root) : root_(std::move(root)) {}
  const std::filesystem::path& root() const { return root_; }
  std::filesystem::path path(const std::string& rel) const { return root_ / rel; }

  /// Refuses a non-empty directory unless `force`, in which case it is cleared.
  void prepare(bool force) const;
  /// Same for a subdirectory a single stage owns.
  void prepare_sub(const std::string& rel, bool force) const;

  /// Relative path → SHA-256 of every file except the manifest itself.
  std::map<std::string, std::string> hashes() const;
  void write_manifest(const RunConfig& config) const;

 private:
  std::filesystem::path root_;
};

// Artifact I/O.
void save_corpus(const std::filesystem::path& path, const std::vector<SftRecord>& records);
std::vector<SftRecord> load_corpus(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// Stages. Each is deterministic given the config.
WorldArtifacts make_worlds(const RunConfig& config);
WorldArtifacts load_worlds(const RunDir& run);
void save_worlds(const RunDir& run, const WorldArtifacts& w);

SftResult run_sft(const RunConfig& config, const WorldArtifacts& w, const EpochLog& log = {});

struct DataResult {
  PreferenceSet data;
  int attempted = 0;
  int skipped = 0;
  std::vector<BdhsResult> bdhs;  // per kept example, BDHS only
};

/// Preference pairs on the pref split: the first `pairs` prompts of the
/// selected kinds drawn with sft_records. Parallel over `jobs` workers;
/// the output does not depend on the worker count.
DataResult make_data(const RunConfig& config, DataMethod method, const Policy& policy, const WorldArtifacts& w);

struct ArmResult {
  Policy policy;
  std::vector<nlohmann::json> log;
  int skipped = 0;
};

ArmResult run_arm(const RunConfig& config, const Arm& arm, const Policy& base, const PreferenceSet& data,
                  const WorldArtifacts& w, const StepLog& log = {});

ProbeSet make_probes(const RunConfig& config, const WorldArtifacts& w);
std::vector<std::string> describe_ids(const RunConfig& config, const WorldArtifacts& w);
EvalReport run_eval(const RunConfig& config, const Policy& policy, const ProbeSet& probes, const WorldArtifacts& w);

/// Full pipeline into `config.out`; returns the manifest hashes.
std::map<std::string, std::string> run_pipeline(const RunConfig& config, bool force,
                                                const std::function<void(const std::string&)>& progress = {});

}  // namespace mmpref
