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

#include "mmpref/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

namespace mmpref {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

std::string_view name(DataMethod m) {
  switch (m) {
    case DataMethod::bdhs: return "bdhs";
    case DataMethod::povid: return "povid";
    case DataMethod::corrupt: return "corrupt";
    case DataMethod::online: return "online";
  }
  return "?";
}

DataMethod data_method_from(std::string_view s) {
  for (DataMethod m : {DataMethod::bdhs, DataMethod::povid, DataMethod::corrupt, DataMethod::online})
    if (name(m) == s) return m;
  throw ConfigError("unknown data method '" + std::string(s) + "' (bdhs, povid, corrupt, online)");
}

std::string_view name(PromptKind k) {
  switch (k) {
    case PromptKind::presence: return "presence";
    case PromptKind::color: return "color";
    case PromptKind::where: return "where";
    case PromptKind::count: return "count";
    case PromptKind::describe: return "describe";
  }
  return "?";
}

PromptKind prompt_kind_from(std::string_view s) {
  for (PromptKind k :
       {PromptKind::presence, PromptKind::color, PromptKind::where, PromptKind::count, PromptKind::describe})
    if (name(k) == s) return k;
  throw ConfigError("unknown prompt kind '" + std::string(s) + "'");
}

namespace {

const std::set<std::string> kArmObjectives = {"dpo", "ipo", "slic", "mixed", "avg", "online", "rloo"};

}  // namespace

std::string Arm::label() const { return objective + "-" + std::string(name(method)); }

Arm Arm::parse(std::string_view s) {
  const auto colon = s.find(':');
  if (colon == std::string_view::npos) throw ConfigError("arm '" + std::string(s) + "' is not objective:method");
  Arm a;
  a.objective = std::string(s.substr(0, colon));
  if (!kArmObjectives.count(a.objective))
    throw ConfigError("arm '" + std::string(s) + "': unknown objective '" + a.objective + "'");
  a.method = data_method_from(s.substr(colon + 1));
  return a;
}

RunConfig::RunConfig() {
  policy.n_heads = 2;
  policy.n_layers = 2;
  sft.epochs = 2;
  sft.image_dropout = 0.15;
  bdhs = BDHSConfig::attn(0.7);
  align.lr = 5e-4;
  align.epochs = 3;
  align.loss.beta = 0.5;
  arms = {Arm::parse("dpo:bdhs"), Arm::parse("dpo:corrupt"), Arm::parse("online:bdhs"), Arm::parse("mixed:bdhs")};
}

void RunConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  const auto& g = world.gen;
  if (g.height < 1 || g.width < 1 || g.height > ToyWorld::kMaxSide || g.width > ToyWorld::kMaxSide)
    fail("world: height and width must lie in [1, 8]");
  if (g.min_objects < 1 || g.max_objects < g.min_objects || g.max_objects > 3)
    fail("world: need 1 <= min_objects <= max_objects <= 3");
  if (g.max_objects > g.height * g.width) fail("world: more objects than cells");
  if (!(g.red_square_bias >= 0 && g.red_square_bias <= 1)) fail("world: red_square_bias outside [0, 1]");
  if (world.corpus < 0 || world.pref_worlds < 0 || world.test_worlds < 0) fail("world: split sizes must be >= 0");
  if (policy.height != g.height || policy.width != g.width) fail("policy: grid must match the world grid");
  if (policy.d_model <= 0 || policy.n_heads <= 0 || policy.d_model % policy.n_heads != 0)
    fail("policy: d_model must be a positive multiple of n_heads");
  if (policy.n_layers <= 0 || policy.d_ff <= 0 || policy.image_copies <= 0 || policy.max_text_len < 32)
    fail("policy: layers, d_ff and image_copies must be positive and max_text_len >= 32");
  if (sft.epochs < 0 || !(sft.lr > 0) || sft.batch_size < 1) fail("sft: need epochs >= 0, lr > 0, batch_size >= 1");
  if (!(sft.image_dropout >= 0 && sft.image_dropout < 1)) fail("sft: image_dropout outside [0, 1)");
  if (data.pairs < 0) fail("data: pairs must be >= 0");
  if (data.kinds.empty()) fail("data: kinds must not be empty");
  if (data.povid_steps < 1 || data.povid_steps > DiffusionSchedule::kMaxSteps)
    fail("data: povid_steps outside [1, 1000]");
  if (eval.probes < 0 || eval.describe < 0 || eval.bootstrap < 1)
    fail("eval: need probes >= 0, describe >= 0, bootstrap >= 1");
  if (rloo_reward != "oracle" && rloo_reward != "rm") fail("rloo_reward must be 'oracle' or 'rm'");
  if (rloo_prompts < 1) fail("rloo_prompts must be positive");
  if (jobs < 1) fail("jobs must be positive");
  try {
    bdhs.validate();
    align.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
}

ordered_json RunConfig::to_json() const {
  ordered_json j;
  j["command"] = command;
  j["seed"] = seed;
  j["world"] = {{"height", world.gen.height},
                {"width", world.gen.width},
                {"min_objects", world.gen.min_objects},
                {"max_objects", world.gen.max_objects},
                {"red_square_bias", world.gen.red_square_bias},
                {"corpus", world.corpus},
                {"pref_worlds", world.pref_worlds},
                {"test_worlds", world.test_worlds}};
  j["policy"] = {{"d_model", policy.d_model},         {"n_heads", policy.n_heads},
                 {"n_layers", policy.n_layers},       {"d_ff", policy.d_ff},
                 {"image_copies", policy.image_copies}, {"max_text_len", policy.max_text_len}};
  j["sft"] = {{"epochs", sft.epochs},
              {"lr", sft.lr},
              {"batch_size", sft.batch_size},
              {"image_dropout", sft.image_dropout}};
  ordered_json kinds = ordered_json::array();
  for (PromptKind k : data.kinds) kinds.push_back(name(k));
  j["data"] = {{"method", name(data.method)}, {"pairs", data.pairs}, {"kinds", kinds}, {"povid_steps", data.povid_steps}};
  json b = bdhs.to_json();
  b.erase("seed");
  j["bdhs"] = b;
  json a = align.to_json();
  a.erase("seed");
  j["align"] = a;
  j["eval"] = {{"probes", eval.probes}, {"describe", eval.describe}, {"bootstrap", eval.bootstrap}};
  ordered_json arm_list = ordered_json::array();
  for (const auto& arm : arms) arm_list.push_back(arm.objective + ":" + std::string(name(arm.method)));
  j["arms"] = arm_list;
  j["rloo_reward"] = rloo_reward;
  j["rloo_prompts"] = rloo_prompts;
  return j;
}

namespace {

void only_keys(const json& j, std::initializer_list<const char*> keys, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [k, v] : j.items()) {
    (void)v;
    bool known = false;
    for (const char* key : keys) known = known || k == key;
    if (!known) throw ConfigError("unknown field '" + (where.empty() ? k : where + "." + k) + "'");
  }
}

template <typename T>
void read(const json& j, const char* key, T& out, const std::string& where) {
  if (!j.contains(key)) return;
  try {
    out = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError("field '" + (where.empty() ? std::string(key) : where + "." + key) + "': " + e.what());
  }
}

json without_seed(const json& j, const std::string& where) {
  if (j.contains("seed")) throw ConfigError(where + ".seed: stage seeds derive from the top-level seed");
  return j;
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  RunConfig c;
  only_keys(j,
            {"command", "seed", "world", "policy", "sft", "data", "bdhs", "align", "eval", "arms", "rloo_reward",
             "rloo_prompts"},
            "");
  read(j, "command", c.command, "");
  read(j, "seed", c.seed, "");
  if (j.contains("world")) {
    const json& w = j["world"];
    only_keys(w, {"height", "width", "min_objects", "max_objects", "red_square_bias", "corpus", "pref_worlds",
                  "test_worlds"},
              "world");
    read(w, "height", c.world.gen.height, "world");
    read(w, "width", c.world.gen.width, "world");
    read(w, "min_objects", c.world.gen.min_objects, "world");
    read(w, "max_objects", c.world.gen.max_objects, "world");
    read(w, "red_square_bias", c.world.gen.red_square_bias, "world");
    read(w, "corpus", c.world.corpus, "world");
    read(w, "pref_worlds", c.world.pref_worlds, "world");
    read(w, "test_worlds", c.world.test_worlds, "world");
  }
  c.policy.height = c.world.gen.height;
  c.policy.width = c.world.gen.width;
  if (j.contains("policy")) {
    const json& p = j["policy"];
    only_keys(p, {"d_model", "n_heads", "n_layers", "d_ff", "image_copies", "max_text_len"}, "policy");
    read(p, "d_model", c.policy.d_model, "policy");
    read(p, "n_heads", c.policy.n_heads, "policy");
    read(p, "n_layers", c.policy.n_layers, "policy");
    read(p, "d_ff", c.policy.d_ff, "policy");
    read(p, "image_copies", c.policy.image_copies, "policy");
    read(p, "max_text_len", c.policy.max_text_len, "policy");
  }
  if (j.contains("sft")) {
    const json& s = j["sft"];
    only_keys(s, {"epochs", "lr", "batch_size", "image_dropout"}, "sft");
    read(s, "epochs", c.sft.epochs, "sft");
    read(s, "lr", c.sft.lr, "sft");
    read(s, "batch_size", c.sft.batch_size, "sft");
    read(s, "image_dropout", c.sft.image_dropout, "sft");
  }
  if (j.contains("data")) {
    const json& d = j["data"];
    only_keys(d, {"method", "pairs", "kinds", "povid_steps"}, "data");
    std::string method(name(c.data.method));
    read(d, "method", method, "data");
    c.data.method = data_method_from(method);
    read(d, "pairs", c.data.pairs, "data");
    if (d.contains("kinds")) {
      std::vector<std::string> kinds;
      read(d, "kinds", kinds, "data");
      c.data.kinds.clear();
      for (const auto& k : kinds) c.data.kinds.push_back(prompt_kind_from(k));
    }
    read(d, "povid_steps", c.data.povid_steps, "data");
  }
  try {
    if (j.contains("bdhs")) c.bdhs = BDHSConfig::from_json(without_seed(j["bdhs"], "bdhs"));
    if (j.contains("align")) c.align = AlignConfig::from_json(without_seed(j["align"], "align"));
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw ConfigError(e.what());
  }
  if (j.contains("eval")) {
    const json& e = j["eval"];
    only_keys(e, {"probes", "describe", "bootstrap"}, "eval");
    read(e, "probes", c.eval.probes, "eval");
    read(e, "describe", c.eval.describe, "eval");
    read(e, "bootstrap", c.eval.bootstrap, "eval");
  }
  if (j.contains("arms")) {
    std::vector<std::string> arms;
    read(j, "arms", arms, "");
    c.arms.clear();
    for (const auto& a : arms) c.arms.push_back(Arm::parse(a));
  }
  read(j, "rloo_reward", c.rloo_reward, "");
  read(j, "rloo_prompts", c.rloo_prompts, "");
  c.validate();
  return c;
}

RunConfig RunConfig::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config " + path.string() + ": " + e.what());
  }
  return from_json(j);
}

std::uint64_t stage_seed(std::uint64_t seed, std::string_view stage) { return substream(seed, stage)(); }

ordered_json Splits::to_json() const { return {{"train", train}, {"pref", pref}, {"test", test}}; }

Splits Splits::from_json(const json& j) {
  only_keys(j, {"train", "pref", "test"}, "splits");
  Splits s;
  s.train = j.at("train").get<std::vector<std::string>>();
  s.pref = j.at("pref").get<std::vector<std::string>>();
  s.test = j.at("test").get<std::vector<std::string>>();
  return s;
}

// ---------------------------------------------------------------------------
// Run directory

void RunDir::prepare(bool force) const {
  if (fs::exists(root_)) {
    if (!fs::is_directory(root_)) throw ConfigError(root_.string() + " exists and is not a directory");
    if (!fs::is_empty(root_)) {
      if (!force) throw ConfigError("output directory " + root_.string() + " is not empty (use --force)");
      for (const auto& e : fs::directory_iterator(root_)) fs::remove_all(e.path());
    }
  }
  fs::create_directories(root_);
}

void RunDir::prepare_sub(const std::string& rel, bool force) const {
  const fs::path p = root_ / rel;
  if (fs::exists(p) && !fs::is_empty(p)) {
    if (!force) throw ConfigError(p.string() + " already holds results (use --force)");
    fs::remove_all(p);
  }
  fs::create_directories(p);
}

std::map<std::string, std::string> RunDir::hashes() const {
  std::map<std::string, std::string> out;
  if (!fs::exists(root_)) return out;
  for (const auto& e : fs::recursive_directory_iterator(root_)) {
    if (!e.is_regular_file()) continue;
    const std::string rel = fs::relative(e.path(), root_).generic_string();
    if (rel == "manifest.json") continue;
    out[rel] = sha256_hex(read_text(e.path()));
  }
  return out;
}

void RunDir::write_manifest(const RunConfig& config) const {
  ordered_json files = ordered_json::object();
  for (const auto& [k, v] : hashes()) files[k] = v;
  ordered_json m = {{"config", config.to_json()}, {"files", files}};
  write_text(root_ / "manifest.json", m.dump(2) + "\n");
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_corpus(const fs::path& path, const std::vector<SftRecord>& records) {
  const Vocab& v = Vocab::get();
  std::string text;
  for (const auto& r : records) {
    ordered_json j = {{"world", r.world_id}, {"prompt", v.decode(r.prompt)}, {"response", v.decode(r.response)}};
    text += j.dump() + "\n";
  }
  write_text(path, text);
}

std::vector<SftRecord> load_corpus(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  const Vocab& v = Vocab::get();
  std::vector<SftRecord> out;
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      only_keys(j, {"world", "prompt", "response"}, "corpus");
      out.push_back({j.at("world").get<std::string>(), v.encode(j.at("prompt").get<std::string>()),
                     v.encode(j.at("response").get<std::string>())});
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(n) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Stages

WorldArtifacts make_worlds(const RunConfig& config) {
  const std::uint64_t s = stage_seed(config.seed, "world");
  WorldArtifacts a;
  auto split = [&](const char* prefix, int n, std::vector<std::string>& ids) {
    Rng rng = substream(s, prefix);
    for (int i = 0; i < n; ++i) {
      ToyWorld w = generate_world(prefix + std::to_string(i), config.world.gen, rng);
      ids.push_back(w.id());
      a.worlds.add(std::move(w));
    }
  };
  split("w", config.world.corpus, a.splits.train);
  split("p", config.world.pref_worlds, a.splits.pref);
  split("t", config.world.test_worlds, a.splits.test);
  Rng rec_rng = substream(s, "corpus");
  for (const auto& id : a.splits.train) {
    auto r = sft_records(a.worlds.get(id), rec_rng);
    a.corpus.insert(a.corpus.end(), r.begin(), r.end());
  }
  return a;
}

void save_worlds(const RunDir& run, const WorldArtifacts& w) {
  w.worlds.save(run.path("worlds"));
  write_text(run.path("splits.json"), w.splits.to_json().dump(1) + "\n");
  save_corpus(run.path("sft_corpus.jsonl"), w.corpus);
}

WorldArtifacts load_worlds(const RunDir& run) {
  WorldArtifacts a;
  if (!fs::exists(run.path("splits.json")))
    throw StageError("load", "no world store in " + run.root().string() + " (run gen-world first)");
  a.worlds = WorldStore::load(run.path("worlds"));
  a.splits = Splits::from_json(json::parse(read_text(run.path("splits.json"))));
  a.corpus = load_corpus(run.path("sft_corpus.jsonl"));
  return a;
}

SftResult run_sft(const RunConfig& config, const WorldArtifacts& w, const EpochLog& log) {
  PolicyConfig pc = config.policy;
  const std::uint64_t s = stage_seed(config.seed, "sft");
  pc.init_seed = s;
  SftConfig sc = config.sft;
  sc.seed = s;
  if (w.corpus.empty()) throw StageError("sft", "empty SFT corpus");
  return sft_train(Policy(pc), w.corpus, w.worlds, sc, log);
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& f) {
  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(jobs, 1)), std::max<std::size_t>(n, 1));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) f(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex mu;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t)
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          f(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(mu);
          if (!error) error = std::current_exception();
          next = n;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
}

namespace {

struct Candidate {
  std::string id, world;
  TokenSeq prompt, chosen;
};

}  // namespace

DataResult make_data(const RunConfig& config, DataMethod method, const Policy& policy, const WorldArtifacts& w) {
  const std::uint64_t s = stage_seed(config.seed, "bdhs");
  Rng prompt_rng = substream(s, "prompts");
  std::vector<Candidate> cands;
  for (const auto& id : w.splits.pref) {
    const auto recs = sft_records(w.worlds.get(id), prompt_rng);
    for (std::size_t i = 0; i < recs.size(); ++i) {
      const PromptKind k = parse_prompt(recs[i].prompt).kind;
      if (std::find(config.data.kinds.begin(), config.data.kinds.end(), k) == config.data.kinds.end()) continue;
      cands.push_back({id + "/" + std::to_string(i), id, recs[i].prompt, recs[i].response});
    }
  }

  BDHSConfig bc = config.bdhs;
  bc.seed = s;
  const HashedBigramEmbedder embedder;
  const Annotator annotator(config.align.annotator_error);
  OnlinePairOptions online_opt;
  online_opt.temperature = config.align.online_temperature;

  std::vector<std::optional<PreferenceExample>> out(cands.size());
  std::vector<std::optional<BdhsResult>> traces(cands.size());
  parallel_for(cands.size(), config.jobs, [&](std::size_t i) {
    const Candidate& c = cands[i];
    const ToyWorld& world = w.worlds.get(c.world);
    PreferenceExample e{c.id, c.prompt, c.world, c.chosen, {}, Provenance::bdhs, json::object()};
    Rng rng = substream(s, name(method), i);
    switch (method) {
      case DataMethod::bdhs: {
        BdhsResult r = bdhs(policy, world.image(), c.prompt, c.chosen, bc, embedder, c.id);
        e.rejected = r.rejected;
        e.meta = {{"iterations", r.iterations}, {"similarity", r.similarity},
                  {"accepted", r.accepted},     {"fallback", r.fallback}};
        traces[i] = std::move(r);
        break;
      }
      case DataMethod::povid:
        e.provenance = Provenance::povid_distort;
        e.rejected = povid_distort(policy, world.image(), c.prompt, c.chosen, config.data.povid_steps, rng);
        e.meta = {{"steps", config.data.povid_steps}};
        break;
      case DataMethod::corrupt: {
        e.provenance = Provenance::rule_corrupt;
        auto r = rule_corrupt(world, c.prompt, c.chosen, rng);
        if (!r) return;
        e.rejected = std::move(*r);
        break;
      }
      case DataMethod::online: {
        auto p = online_pair(policy, annotator, world, c.prompt, online_opt, rng, c.id);
        if (!p) return;
        e = std::move(*p);
        break;
      }
    }
    if (e.rejected.empty() || e.rejected == e.chosen) return;
    out[i] = std::move(e);
  });

  DataResult res;
  for (std::size_t i = 0; i < cands.size() && res.data.size() < static_cast<std::size_t>(config.data.pairs); ++i) {
    ++res.attempted;
    if (!out[i]) {
      ++res.skipped;
      continue;
    }
    res.data.push_back(std::move(*out[i]));
    if (traces[i]) res.bdhs.push_back(std::move(*traces[i]));
  }
  if (res.data.size() < static_cast<std::size_t>(config.data.pairs))
    throw StageError("gen-data", std::to_string(res.data.size()) + " " + std::string(name(method)) +
                                     " pairs from " + std::to_string(cands.size()) + " prompts, " +
                                     std::to_string(config.data.pairs) + " requested (raise world.pref_worlds)");
  for (const auto& e : res.data) e.validate(&w.worlds);
  return res;
}

ArmResult run_arm(const RunConfig& config, const Arm& arm, const Policy& base, const PreferenceSet& data,
                  const WorldArtifacts& w, const StepLog& log) {
  AlignConfig ac = config.align;
  ac.seed = stage_seed(config.seed, "align");
  if (arm.objective == "rloo") {
    ac.loss.objective = loss::Objective::rloo;
    std::vector<RlooPrompt> prompts;
    for (const auto& e : data) {
      if (prompts.size() >= static_cast<std::size_t>(config.rloo_prompts)) break;
      prompts.push_back({e.image, e.prompt});
    }
    std::optional<Policy> rm;
    RewardFn reward = oracle_reward();
    if (config.rloo_reward == "rm") {
      rm = train_reward_model(base, data, w.worlds, ac).policy;
      reward = model_reward(*rm);
    }
    AlignResult r = align_rloo(base, base, prompts, w.worlds, reward, ac, log);
    return {std::move(r.policy), std::move(r.log), 0};
  }
  if (arm.objective == "online") {
    ac.loss.objective = loss::Objective::mixed;
    ac.loss.p_mix = 0.0;
  } else {
    ac.loss.objective = loss::objective_from(arm.objective);
  }
  AlignResult r = align_pairs(base, base, data, w.worlds, ac, log);
  return {std::move(r.policy), std::move(r.log), r.skipped};
}

ProbeSet make_probes(const RunConfig& config, const WorldArtifacts& w) {
  WorldStore test;
  for (const auto& id : w.splits.test) test.add(w.worlds.get(id));
  return build_probes(test, static_cast<std::size_t>(config.eval.probes), stage_seed(config.seed, "eval"));
}

std::vector<std::string> describe_ids(const RunConfig& config, const WorldArtifacts& w) {
  const std::size_t n = std::min<std::size_t>(static_cast<std::size_t>(config.eval.describe), w.splits.test.size());
  return {w.splits.test.begin(), w.splits.test.begin() + static_cast<long>(n)};
}

EvalReport run_eval(const RunConfig& config, const Policy& policy, const ProbeSet& probes, const WorldArtifacts& w) {
  return evaluate(PolicyResponder(policy), probes, w.worlds, describe_ids(config, w));
}

namespace {

std::string jsonl(const std::vector<json>& records) {
  std::string s;
  for (const auto& r : records) s += r.dump() + "\n";
  return s;
}

template <typename F>
auto stage(const std::string& name, F f) -> decltype(f()) {
  try {
    return f();
  } catch (const StageError&) {
    throw;
  } catch (const ConfigError&) {
    throw;
  } catch (const std::exception& e) {
    throw StageError(name, e.what());
  }
}

}  // namespace

std::map<std::string, std::string> run_pipeline(const RunConfig& config, bool force,
                                                const std::function<void(const std::string&)>& progress) {
  config.validate();
  auto say = [&](const std::string& m) {
    if (progress) progress(m);
  };
  const RunDir run(config.out);
  run.prepare(force);
  write_text(run.path("config.json"), config.to_json().dump(2) + "\n");
  try {
    const WorldArtifacts w = stage("gen-world", [&] {
      WorldArtifacts a = make_worlds(config);
      save_worlds(run, a);
      return a;
    });
    say("gen-world: " + std::to_string(w.worlds.size()) + " worlds, " + std::to_string(w.corpus.size()) +
        " SFT records");

    const Policy base = stage("sft", [&] {
      std::vector<json> log;
      SftResult r = run_sft(config, w, [&](int epoch, double loss) {
        log.push_back({{"epoch", epoch}, {"loss", loss}});
      });
      r.policy.save(run.path("sft/policy.ckpt"));
      write_text(run.path("sft/log.jsonl"), jsonl(log));
      return r.policy;
    });
    say("sft: done");

    const ProbeSet probes = stage("eval", [&] {
      ProbeSet p = make_probes(config, w);
      p.save(run.path("eval/probes.jsonl"));
      return p;
    });
    const EvalReport base_report = stage("eval", [&] {
      EvalReport r = run_eval(config, base, probes, w);
      write_text(run.path("eval/base.json"), r.to_json().dump(1) + "\n");
      return r;
    });
    say("eval base: probe_accuracy " + std::to_string(base_report.probe_accuracy) + ", hallucination " +
        std::to_string(base_report.hallucination_rate));

    std::map<DataMethod, PreferenceSet> datasets;
    for (const auto& arm : config.arms) {
      if (datasets.count(arm.method)) continue;
      datasets[arm.method] = stage("gen-data", [&] {
        DataResult d = make_data(config, arm.method, base, w);
        const std::string stem = "data/" + std::string(name(arm.method));
        save_dataset(run.path(stem + ".jsonl"), d.data);
        json stats = dataset_stats(d.data).to_json();
        stats["attempted"] = d.attempted;
        stats["skipped"] = d.skipped;
        write_text(run.path(stem + "_stats.json"), stats.dump(1) + "\n");
        return d.data;
      });
      say("gen-data " + std::string(name(arm.method)) + ": " + std::to_string(datasets[arm.method].size()) +
          " pairs");
    }

    ordered_json summary = ordered_json::object();
    summary["base"] = base_report.to_json(false);
    for (const auto& arm : config.arms) {
      const std::string label = arm.label();
      const Policy aligned = stage("align", [&] {
        ArmResult r = run_arm(config, arm, base, datasets.at(arm.method), w);
        r.policy.save(run.path("arms/" + label + "/policy.ckpt"));
        write_text(run.path("arms/" + label + "/log.jsonl"), jsonl(r.log));
        return r.policy;
      });
      stage("eval", [&] {
        const EvalReport r = run_eval(config, aligned, probes, w);
        write_text(run.path("eval/" + label + ".json"), r.to_json().dump(1) + "\n");
        const auto deltas = compare_runs(base_report, r, config.eval.bootstrap, stage_seed(config.seed, "eval"));
        write_text(run.path("eval/" + label + "_vs_base.csv"), deltas_csv(deltas));
        ordered_json entry = r.to_json(false);
        entry["deltas_vs_base"] = deltas_json(deltas);
        summary[label] = entry;
        say("arm " + label + ": probe_accuracy " + std::to_string(r.probe_accuracy) + ", hallucination " +
            std::to_string(r.hallucination_rate) + ", recall " + std::to_string(r.recall));
        return 0;
      });
    }
    write_text(run.path("summary.json"), summary.dump(2) + "\n");
  } catch (...) {
    // Partial artifacts stay on disk and are listed in the manifest.
    run.write_manifest(config);
    throw;
  }
  run.write_manifest(config);
  return run.hashes();
}

}  // namespace mmpref
