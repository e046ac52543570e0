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

// Command-line entry points: world generation, fine-tuning, preference data,
// alignment, evaluation, the full pipeline and the gradient suite.

#include "mmpref/gradsuite.hpp"
#include "mmpref/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <optional>

using namespace mmpref;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kStageFailure = 1;
constexpr int kConfigError = 2;

/// Flags that override the configuration file or the run's saved config.
struct Overrides {
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  // world
  std::optional<int> height, width, corpus, pref_worlds, test_worlds;
  std::optional<double> bias;
  // sft
  std::optional<int> sft_epochs;
  std::optional<double> sft_lr, image_dropout;
  // data
  std::optional<int> pairs;
  std::optional<double> rho_th;
  std::optional<int> n_bdhs;
  // align
  std::optional<double> beta, p_mix, gamma, lr, annotator_error;
  std::optional<int> epochs, batch_size;
  // eval
  std::optional<int> probes, describe;
  std::vector<std::string> arms;

  void apply(RunConfig& c) const {
    if (seed) c.seed = *seed;
    if (jobs) c.jobs = *jobs;
    if (height) c.world.gen.height = c.policy.height = *height;
    if (width) c.world.gen.width = c.policy.width = *width;
    if (corpus) c.world.corpus = *corpus;
    if (pref_worlds) c.world.pref_worlds = *pref_worlds;
    if (test_worlds) c.world.test_worlds = *test_worlds;
    if (bias) c.world.gen.red_square_bias = *bias;
    if (sft_epochs) c.sft.epochs = *sft_epochs;
    if (sft_lr) c.sft.lr = *sft_lr;
    if (image_dropout) c.sft.image_dropout = *image_dropout;
    if (pairs) c.data.pairs = *pairs;
    if (rho_th) c.bdhs.rho_th = *rho_th;
    if (n_bdhs) c.bdhs.n_bdhs = *n_bdhs;
    if (beta) c.align.loss.beta = *beta;
    if (p_mix) c.align.loss.p_mix = *p_mix;
    if (gamma) c.align.loss.gamma = *gamma;
    if (lr) c.align.lr = *lr;
    if (annotator_error) c.align.annotator_error = *annotator_error;
    if (epochs) c.align.epochs = *epochs;
    if (batch_size) c.align.batch_size = *batch_size;
    if (probes) c.eval.probes = *probes;
    if (describe) c.eval.describe = *describe;
    if (!arms.empty()) {
      c.arms.clear();
      for (const auto& a : arms) c.arms.push_back(Arm::parse(a));
    }
  }
};

void add_common(CLI::App* app, Overrides& o) {
  app->add_option("--seed", o.seed, "Top-level seed");
  app->add_option("--jobs", o.jobs, "Worker cap for parallel stages");
}

void add_world(CLI::App* app, Overrides& o) {
  app->add_option("--height", o.height, "Grid height");
  app->add_option("--width", o.width, "Grid width");
  app->add_option("--corpus,-n", o.corpus, "SFT worlds");
  app->add_option("--pref-worlds", o.pref_worlds, "Worlds for preference prompts");
  app->add_option("--test-worlds", o.test_worlds, "Held-out evaluation worlds");
  app->add_option("--bias", o.bias, "Probability that a square is red");
}

void add_sft(CLI::App* app, Overrides& o) {
  app->add_option("--sft-epochs", o.sft_epochs, "SFT epochs");
  app->add_option("--sft-lr", o.sft_lr, "SFT learning rate");
  app->add_option("--image-dropout", o.image_dropout, "Share of SFT records trained without the image");
}

void add_data(CLI::App* app, Overrides& o) {
  app->add_option("--pairs", o.pairs, "Preference pairs to generate");
  app->add_option("--rho-th", o.rho_th, "Attention-mask threshold");
  app->add_option("--n-bdhs", o.n_bdhs, "Maximum similarity-loop iterations");
}

void add_align(CLI::App* app, Overrides& o) {
  app->add_option("--beta", o.beta, "Preference temperature");
  app->add_option("--p-mix", o.p_mix, "Mixed-DPO offline probability");
  app->add_option("--gamma", o.gamma, "Avg-DPO weight of the offline rejected response");
  app->add_option("--lr", o.lr, "Alignment learning rate");
  app->add_option("--epochs", o.epochs, "Alignment epochs");
  app->add_option("--batch-size", o.batch_size, "Alignment batch size");
  app->add_option("--annotator-error", o.annotator_error, "Online annotator error rate");
}

void add_eval(CLI::App* app, Overrides& o) {
  app->add_option("--probes", o.probes, "Presence probes");
  app->add_option("--describe", o.describe, "Description prompts");
}

fs::path default_out(const std::string& command, std::uint64_t seed) {
  const char* root = std::getenv("MMPREF_OUT");
  return fs::path(root && *root ? root : "runs") / (command + "-seed" + std::to_string(seed));
}

void progress(const std::string& m) { std::cerr << "[mmpref] " << m << '\n'; }

/// Saved config of an existing run with flag overrides applied.
RunConfig run_config(const RunDir& run, const Overrides& o) {
  const fs::path p = run.path("config.json");
  if (!fs::exists(p)) throw ConfigError("no config.json in " + run.root().string() + " (run gen-world first)");
  RunConfig c = RunConfig::load(p);
  o.apply(c);
  c.validate();
  c.out = run.root();
  return c;
}

void save_config(const RunDir& run, const RunConfig& c) {
  write_text(run.path("config.json"), c.to_json().dump(2) + "\n");
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

std::string jsonl(const std::vector<json>& records) {
  std::string s;
  for (const auto& r : records) s += r.dump() + "\n";
  return s;
}

Policy load_policy(const RunDir& run, const std::string& rel) {
  const fs::path p = run.path(rel);
  if (!fs::exists(p)) throw StageError("load", "missing " + p.string());
  return Policy::load(p);
}

// ---------------------------------------------------------------------------

int cmd_gen_world(const std::optional<fs::path>& config_path, const std::optional<fs::path>& out, bool force,
                  const Overrides& o) {
  RunConfig c = config_path ? RunConfig::load(*config_path) : RunConfig();
  o.apply(c);
  c.command = "gen-world";
  c.validate();
  const RunDir run(out ? *out : default_out("gen-world", c.seed));
  run.prepare(force);
  save_config(run, c);
  const WorldArtifacts w = stage("gen-world", [&] {
    WorldArtifacts a = make_worlds(c);
    save_worlds(run, a);
    return a;
  });
  run.write_manifest(c);
  progress("gen-world: " + std::to_string(w.worlds.size()) + " worlds, " + std::to_string(w.corpus.size()) +
           " SFT records in " + run.root().string());
  return 0;
}

int cmd_sft(const fs::path& dir, bool force, const Overrides& o) {
  const RunDir run(dir);
  const RunConfig c = run_config(run, o);
  run.prepare_sub("sft", force);
  save_config(run, c);
  stage("sft", [&] {
    const WorldArtifacts w = load_worlds(run);
    std::vector<json> log;
    SftResult r = run_sft(c, w, [&](int epoch, double loss) {
      log.push_back({{"epoch", epoch}, {"loss", loss}});
      progress("sft epoch " + std::to_string(epoch) + ": loss " + std::to_string(loss));
    });
    r.policy.save(run.path("sft/policy.ckpt"));
    write_text(run.path("sft/log.jsonl"), jsonl(log));
    return 0;
  });
  run.write_manifest(c);
  return 0;
}

int cmd_gen_data(const fs::path& dir, const std::string& method_name, bool force, const Overrides& o) {
  const RunDir run(dir);
  const RunConfig c = run_config(run, o);
  const DataMethod method = data_method_from(method_name);
  const std::string stem = "data/" + method_name;
  if (fs::exists(run.path(stem + ".jsonl")) && !force)
    throw ConfigError(run.path(stem + ".jsonl").string() + " exists (use --force)");
  save_config(run, c);
  stage("gen-data", [&] {
    const WorldArtifacts w = load_worlds(run);
    const Policy base = load_policy(run, "sft/policy.ckpt");
    DataResult d = make_data(c, method, base, w);
    save_dataset(run.path(stem + ".jsonl"), d.data);
    json stats = dataset_stats(d.data).to_json();
    stats["attempted"] = d.attempted;
    stats["skipped"] = d.skipped;
    write_text(run.path(stem + "_stats.json"), stats.dump(1) + "\n");
    progress("gen-data " + method_name + ": " + std::to_string(d.data.size()) + " pairs");
    return 0;
  });
  run.write_manifest(c);
  return 0;
}

int cmd_align(const fs::path& dir, const std::string& objective, const std::string& method_name, bool force,
              const Overrides& o) {
  const RunDir run(dir);
  const RunConfig c = run_config(run, o);
  const bool rm = objective == "rm";
  const Arm arm = rm ? Arm{"rm", data_method_from(method_name)} : Arm::parse(objective + ":" + method_name);
  const std::string sub = "arms/" + arm.label();
  run.prepare_sub(sub, force);
  save_config(run, c);
  stage("align", [&] {
    const WorldArtifacts w = load_worlds(run);
    const Policy base = load_policy(run, "sft/policy.ckpt");
    const fs::path data_path = run.path("data/" + method_name + ".jsonl");
    if (!fs::exists(data_path)) throw StageError("align", "missing " + data_path.string() + " (run gen-data first)");
    const PreferenceSet data = load_dataset(data_path, &w.worlds);
    auto on_step = [&](const json& r) {
      if (r.value("step", 0) % 50 == 0) progress("align step " + r.dump());
    };
    if (rm) {
      AlignConfig ac = c.align;
      ac.seed = stage_seed(c.seed, "align");
      AlignResult r = train_reward_model(base, data, w.worlds, ac, on_step);
      r.policy.save(run.path(sub + "/rm.ckpt"));
      write_text(run.path(sub + "/log.jsonl"), jsonl(r.log));
      const json acc = {{"pairs", data.size()}, {"accuracy", reward_accuracy(r.policy, data, w.worlds)}};
      write_text(run.path(sub + "/accuracy.json"), acc.dump(1) + "\n");
      progress("reward model pair accuracy " + std::to_string(acc["accuracy"].get<double>()));
      return 0;
    }
    ArmResult r = run_arm(c, arm, base, data, w, on_step);
    r.policy.save(run.path(sub + "/policy.ckpt"));
    write_text(run.path(sub + "/log.jsonl"), jsonl(r.log));
    return 0;
  });
  run.write_manifest(c);
  return 0;
}

int cmd_eval(const fs::path& dir, const std::string& arm_label, const Overrides& o) {
  const RunDir run(dir);
  const RunConfig c = run_config(run, o);
  save_config(run, c);
  stage("eval", [&] {
    const WorldArtifacts w = load_worlds(run);
    ProbeSet probes;
    if (fs::exists(run.path("eval/probes.jsonl"))) {
      probes = ProbeSet::load(run.path("eval/probes.jsonl"));
    } else {
      probes = make_probes(c, w);
      probes.save(run.path("eval/probes.jsonl"));
    }
    const std::string name = arm_label.empty() ? "base" : arm_label;
    const Policy policy =
        load_policy(run, arm_label.empty() ? "sft/policy.ckpt" : "arms/" + arm_label + "/policy.ckpt");
    const EvalReport r = run_eval(c, policy, probes, w);
    write_text(run.path("eval/" + name + ".json"), r.to_json().dump(1) + "\n");
    std::cout << r.to_json(false).dump(2) << '\n';
    if (!arm_label.empty() && fs::exists(run.path("eval/base.json"))) {
      const EvalReport base = EvalReport::from_json(json::parse(read_text(run.path("eval/base.json"))));
      const auto deltas = compare_runs(base, r, c.eval.bootstrap, stage_seed(c.seed, "eval"));
      write_text(run.path("eval/" + name + "_vs_base.csv"), deltas_csv(deltas));
      std::cout << deltas_csv(deltas);
    }
    return 0;
  });
  run.write_manifest(c);
  return 0;
}

int cmd_compare(const fs::path& a, const fs::path& b, int resamples, std::uint64_t seed) {
  return stage("compare", [&] {
    const EvalReport ra = EvalReport::from_json(json::parse(read_text(a)));
    const EvalReport rb = EvalReport::from_json(json::parse(read_text(b)));
    std::cout << deltas_csv(compare_runs(ra, rb, resamples, seed));
    return 0;
  });
}

int cmd_pipeline(const std::optional<fs::path>& config_path, const std::optional<fs::path>& out, bool force,
                 const Overrides& o) {
  RunConfig c = config_path ? RunConfig::load(*config_path) : RunConfig();
  o.apply(c);
  c.command = "pipeline";
  c.validate();
  c.out = out ? *out : default_out("pipeline", c.seed);
  run_pipeline(c, force, progress);
  std::cout << read_text(c.out / "summary.json");
  return 0;
}

int cmd_gradcheck(std::vector<std::string> objectives, bool none, const GradSuiteOptions& opt) {
  if (objectives.empty() && !none) objectives = grad_suite_objectives();
  if (objectives.empty()) {
    std::cerr << "warning: empty objective list; nothing was checked\n";
    std::cout << "gradcheck: vacuous pass (0 objectives)\n";
    return 0;
  }
  std::vector<ObjectiveCheck> checks;
  try {
    checks = run_grad_suite(objectives, opt);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  bool ok = true;
  std::printf("%-9s %8s %8s %14s  %s\n", "objective", "batches", "passed", "max_rel_err", "result");
  for (const auto& ch : checks) {
    std::printf("%-9s %8d %8d %14.3e  %s\n", ch.objective.c_str(), ch.batches, ch.passed, ch.max_rel_error,
                ch.ok() ? "PASS" : "FAIL");
    ok = ok && ch.ok();
  }
  for (const auto& ch : checks)
    if (!ch.ok()) std::cerr << "gradcheck failed for objective " << ch.objective << '\n';
  return ok ? 0 : kStageFailure;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Preference alignment for a toy multimodal model"};
  app.require_subcommand(1);

  Overrides o;
  std::optional<fs::path> config_path, out;
  fs::path run_dir;
  bool force = false;

  auto need_run = [&](CLI::App* sub) {
    sub->add_option("--run,--out", run_dir, "Run directory")->required();
    sub->add_flag("--force", force, "Overwrite existing results of this stage");
    add_common(sub, o);
  };

  auto* gen_world = app.add_subcommand("gen-world", "Generate worlds and the SFT corpus");
  gen_world->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  gen_world->add_option("--out", out, "Output directory (default $MMPREF_OUT/gen-world-seed<seed>)");
  gen_world->add_flag("--force", force, "Clear a non-empty output directory");
  add_common(gen_world, o);
  add_world(gen_world, o);

  auto* sft = app.add_subcommand("sft", "Supervised fine-tuning on the run's corpus");
  need_run(sft);
  add_sft(sft, o);

  std::string method = "bdhs";
  auto* gen_data = app.add_subcommand("gen-data", "Generate preference pairs with the SFT policy");
  need_run(gen_data);
  gen_data->add_option("--method", method, "Rejected-response source")
      ->check(CLI::IsMember({"bdhs", "povid", "corrupt", "online"}));
  add_data(gen_data, o);
  add_align(gen_data, o);

  std::string objective = "dpo";
  auto* align = app.add_subcommand("align", "Align the SFT policy on a generated dataset");
  need_run(align);
  align->add_option("--objective", objective, "Training objective")
      ->check(CLI::IsMember({"dpo", "ipo", "slic", "mixed", "avg", "online", "rloo", "rm"}));
  align->add_option("--method", method, "Dataset to train on")
      ->check(CLI::IsMember({"bdhs", "povid", "corrupt", "online"}));
  add_align(align, o);

  std::string arm_label;
  std::vector<fs::path> compare;
  int resamples = 1000;
  auto* eval = app.add_subcommand("eval", "Evaluate a policy, or compare two reports");
  eval->add_option("--run,--out", run_dir, "Run directory");
  eval->add_option("--arm", arm_label, "Arm label such as dpo-bdhs (default: the SFT base)");
  eval->add_option("--compare", compare, "Two report files: paired bootstrap of the second minus the first")
      ->expected(2)
      ->check(CLI::ExistingFile);
  eval->add_option("--resamples", resamples, "Bootstrap resamples for --compare");
  add_common(eval, o);
  add_eval(eval, o);

  auto* pipeline = app.add_subcommand("pipeline", "Run every stage and the arm comparison");
  pipeline->add_option("--config", config_path, "JSON run config")->check(CLI::ExistingFile);
  pipeline->add_option("--out", out, "Output directory (default $MMPREF_OUT/pipeline-seed<seed>)");
  pipeline->add_flag("--force", force, "Clear a non-empty output directory");
  pipeline->add_option("--arm", o.arms, "Arms as objective:method (repeatable)");
  add_common(pipeline, o);
  add_world(pipeline, o);
  add_sft(pipeline, o);
  add_data(pipeline, o);
  add_align(pipeline, o);
  add_eval(pipeline, o);

  std::vector<std::string> objectives;
  bool no_objectives = false;
  GradSuiteOptions gopt;
  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every objective");
  gradcheck->add_option("--objectives", objectives, "Subset to check")->delimiter(',');
  gradcheck->add_flag("--none", no_objectives, "Check an empty objective list");
  gradcheck->add_option("--batches", gopt.batches, "Randomized batches per objective");
  gradcheck->add_option("--batch-size", gopt.batch_size, "Examples per batch");
  gradcheck->add_option("--seed", gopt.seed, "Seed of the random batches");
  gradcheck->add_option("--rtol", gopt.rtol, "Relative tolerance");
  gradcheck->add_option("--perturb", gopt.perturb, "Offset the analytic gradient of one objective");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kConfigError;
  }

  try {
    if (*gen_world) return cmd_gen_world(config_path, out, force, o);
    if (*sft) return cmd_sft(run_dir, force, o);
    if (*gen_data) return cmd_gen_data(run_dir, method, force, o);
    if (*align) return cmd_align(run_dir, objective, method, force, o);
    if (*eval) {
      if (!compare.empty()) return cmd_compare(compare[0], compare[1], resamples, o.seed.value_or(0));
      if (run_dir.empty()) throw ConfigError("eval needs --run or --compare");
      return cmd_eval(run_dir, arm_label, o);
    }
    if (*pipeline) return cmd_pipeline(config_path, out, force, o);
    if (*gradcheck) return cmd_gradcheck(objectives, no_objectives, gopt);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const StageError& e) {
    std::cerr << "stage " << e.stage() << " failed: " << e.what() << '\n';
    return kStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kStageFailure;
  }
  return 0;
}
