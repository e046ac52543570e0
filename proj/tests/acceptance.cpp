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

// Acceptance suite: one PASS/FAIL line per criterion, exit status 1 when any
// criterion fails. Each check recomputes its expectation independently of the
// code under test.

#include "mmpref/gradsuite.hpp"
#include "mmpref/pipeline.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

using namespace mmpref;
using loss::LossBatch;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

ad::Matrix<double> random_logprobs(Rng& rng, int n) {
  ad::Matrix<double> m(n, 1);
  for (int i = 0; i < n; ++i) m(i, 0) = -0.5 - 19.5 * uniform01(rng);
  return m;
}

const Vocab& V() { return Vocab::get(); }

// Shared per-seed state for the end-to-end criteria.
struct SeedRun {
  RunConfig config;
  WorldArtifacts w;
  std::optional<Policy> base;
  ProbeSet probes;
  EvalReport base_report;
  DataResult bdhs;
  double setup_seconds = 0.0;
};

class Suite {
 public:
  explicit Suite(int jobs) : jobs_(jobs) {}

  SeedRun& seed_run(std::uint64_t seed) {
    auto it = runs_.find(seed);
    if (it != runs_.end()) return it->second;
    const auto t0 = Clock::now();
    SeedRun r;
    r.config.seed = seed;
    r.config.jobs = jobs_;
    r.w = make_worlds(r.config);
    r.base = run_sft(r.config, r.w).policy;
    r.probes = make_probes(r.config, r.w);
    r.base_report = run_eval(r.config, *r.base, r.probes, r.w);
    r.bdhs = make_data(r.config, DataMethod::bdhs, *r.base, r.w);
    r.setup_seconds = seconds_since(t0);
    std::cerr << "[acceptance] seed " << seed << " base ready in " << r.setup_seconds << " s\n";
    return runs_.emplace(seed, std::move(r)).first->second;
  }

  // 1. Finite-difference agreement of every objective.
  Outcome gradients() {
    const auto t0 = Clock::now();
    const auto checks = run_grad_suite(grad_suite_objectives(), GradSuiteOptions{});
    const double secs = seconds_since(t0);
    bool ok = secs < 60.0;
    std::ostringstream os;
    for (const auto& c : checks) {
      ok = ok && c.ok() && c.batches == 100;
      os << c.objective << " " << c.passed << "/" << c.batches << " (max rel " << fmt("%.1e", c.max_rel_error)
         << ") ";
    }
    os << fmt("in %.1f s", secs);
    return {ok && checks.size() == 6, os.str()};
  }

  // 2. DPO at the reference equals log 2.
  Outcome dpo_zero_point() {
    Rng rng = substream(2, "acceptance-zero");
    double worst = 0.0;
    for (int b = 0; b < 1000; ++b) {
      const int n = 1 + static_cast<int>(uniform01(rng) * 32);
      const double beta = 0.01 + 2.0 * uniform01(rng);
      ad::Tape<double> t;
      const auto pos = random_logprobs(rng, n), neg = random_logprobs(rng, n);
      LossBatch<double> batch;
      batch.theta_pos = t.leaf(pos);
      batch.ref_pos = t.constant(pos);
      batch.theta_neg = t.leaf(neg);
      batch.ref_neg = t.constant(neg);
      worst = std::max(worst, std::abs(loss::dpo_loss(batch, beta).item() - std::log(2.0)));
    }
    return {worst <= 1e-12, fmt("max |L - log 2| = %.2e over 1000 batches", worst)};
  }

  // 3. Mixed-DPO and Avg-DPO reduce to DPO exactly.
  Outcome reductions() {
    Rng rng = substream(3, "acceptance-reductions");
    int mismatches = 0, compared = 0;
    for (int b = 0; b < 200; ++b) {
      const int n = 8;
      const double beta = 0.05 + uniform01(rng);
      ad::Tape<double> t;
      auto make = [&] {
        LossBatch<double> x;
        x.theta_pos = t.leaf(random_logprobs(rng, n));
        x.theta_neg = t.leaf(random_logprobs(rng, n));
        x.ref_pos = t.constant(random_logprobs(rng, n));
        x.ref_neg = t.constant(random_logprobs(rng, n));
        return x;
      };
      const LossBatch<double> off = make(), on = make();
      const std::uint64_t shared = 1000 + static_cast<std::uint64_t>(b);
      std::mt19937_64 r1 = substream(shared, "alphas"), r0 = substream(shared, "alphas");
      const auto ones = loss::draw_alphas(n, 1.0, r1), zeros = loss::draw_alphas(n, 0.0, r0);
      // Per-example terms: the same loss on single-row slices.
      for (int i = 0; i < n; ++i) {
        auto row = [&](const LossBatch<double>& x) {
          LossBatch<double> s;
          s.theta_pos = ad::slice_rows(x.theta_pos, i, 1);
          s.theta_neg = ad::slice_rows(x.theta_neg, i, 1);
          s.ref_pos = ad::slice_rows(x.ref_pos, i, 1);
          s.ref_neg = ad::slice_rows(x.ref_neg, i, 1);
          return s;
        };
        const auto o = row(off), q = row(on);
        const std::vector<int> a1{ones[i]}, a0{zeros[i]};
        mismatches += loss::mixed_dpo_loss(o, q, a1, beta).item() != loss::dpo_loss(o, beta).item();
        mismatches += loss::mixed_dpo_loss(o, q, a0, beta).item() != loss::dpo_loss(q, beta).item();
        compared += 2;
      }
      mismatches += loss::mixed_dpo_loss(off, on, ones, beta).item() != loss::dpo_loss(off, beta).item();
      mismatches += loss::mixed_dpo_loss(off, on, zeros, beta).item() != loss::dpo_loss(on, beta).item();
      LossBatch<double> same = off;
      same.theta_neg2 = off.theta_neg;
      same.ref_neg2 = off.ref_neg;
      for (double gamma : {0.0, 0.1, 0.25, 0.5, 0.75, 0.9, 1.0, uniform01(rng)})
        mismatches += loss::avg_dpo_loss(same, beta, gamma).item() != loss::dpo_loss(off, beta).item();
      compared += 10;
    }
    return {mismatches == 0, fmt("%d of %d comparisons differ", mismatches, compared)};
  }

  // 4. Leave-one-out algebra.
  Outcome rloo() {
    Rng rng = substream(4, "acceptance-rloo");
    int nonzero = 0;
    double worst_formula = 0.0;
    for (int k : {2, 4, 8}) {
      for (int v = 0; v < 1000; ++v) {
        std::vector<double> r(static_cast<std::size_t>(k));
        for (double& x : r) x = std::ldexp(2 * uniform01(rng) - 1, static_cast<int>(uniform01(rng) * 20) - 10);
        const auto a = loss::rloo_advantages(r);
        double s = 0.0;
        for (double x : a) s += x;
        nonzero += s != 0.0;
        const double total = std::accumulate(r.begin(), r.end(), 0.0);
        for (int i = 0; i < k; ++i) {
          const double expect = r[i] - (total - r[i]) / (k - 1);
          worst_formula = std::max(worst_formula, std::abs(a[i] - expect) / std::max(1.0, std::abs(expect)));
        }
      }
    }
    SeedRun& run = seed_run(1);
    std::vector<RlooPrompt> prompts;
    for (const auto& e : run.bdhs.data) {
      if (prompts.size() >= 16) break;
      prompts.push_back({e.image, e.prompt});
    }
    Policy p = *run.base;
    Adam opt(p, {1e-3, 0.9, 0.999, 1e-8, 1.0});
    loss::LossConfig lc;
    lc.objective = loss::Objective::rloo;
    lc.beta_kl = 0.0;
    Rng step_rng = substream(4, "acceptance-rloo-step");
    const RewardFn constant = [](const ToyWorld&, std::span<const Token>, std::span<const Token>) { return 1.25; };
    const auto d = rloo_step(p, *run.base, opt, prompts, run.w.worlds, constant, {}, lc, step_rng);
    const bool zero_grad = d.grad_norm == 0.0 && p == *run.base;
    return {nonzero == 0 && worst_formula < 1e-12 && zero_grad,
            fmt("%d nonzero sums of 3000, max formula error %.1e, constant-reward grad norm %g", nonzero,
                worst_formula, d.grad_norm)};
  }

  // 5. Visible-token counts follow binomial(k, 1 - rho).
  Outcome masks() {
    const int draws = 10000;
    bool ok = true;
    std::ostringstream os;
    // The policy's own image length and a larger grid.
    for (int k : {PolicyConfig{}.image_tokens(), 576}) {
      os << " k=" << k << ":";
      for (double rho : {0.0, 0.5, 0.99, 1.0}) {
        Rng rng = substream(5, "acceptance-mask", static_cast<std::uint64_t>(k * 1000 + rho * 100));
        std::vector<double> counts;
        for (int i = 0; i < draws; ++i) {
          const auto m = sample_mask(k, rho, rng);
          counts.push_back(static_cast<double>(std::count(m.visible.begin(), m.visible.end(), true)));
        }
        const double mean = std::accumulate(counts.begin(), counts.end(), 0.0) / draws;
        double var = 0.0;
        for (double c : counts) var += (c - mean) * (c - mean);
        var /= draws - 1;
        const double p = 1.0 - rho, q = rho;
        const double mu = k * p, sigma2 = k * p * q;
        if (rho == 0.0 || rho == 1.0) {
          const bool exact = std::all_of(counts.begin(), counts.end(), [&](double c) { return c == mu; });
          ok = ok && exact;
          os << fmt(" rho=%g all %s", rho, exact ? "exact" : "NOT exact");
          continue;
        }
        const double mu4 = sigma2 * (1.0 + 3.0 * p * q * (k - 2));
        const double se_mean = std::sqrt(sigma2 / draws), se_var = std::sqrt((mu4 - sigma2 * sigma2) / draws);
        const double zm = (mean - mu) / se_mean, zv = (var - sigma2) / se_var;
        ok = ok && std::abs(zm) < 3.0 && std::abs(zv) < 3.0;
        os << fmt(" rho=%g mean z=%.2f var z=%.2f", rho, zm, zv);
      }
    }
    return {ok, os.str()};
  }

  // 6. Noise schedule algebra.
  Outcome diffusion() {
    const auto& s = DiffusionSchedule::standard();
    auto beta = [](int k) { return (0.5e-2 - 1e-5) / (1.0 + std::exp(6.0 - 12.0 * k / 1000.0)) + 1e-5; };
    double coef = 1.0, var = 0.0, worst = 0.0, worst_beta = 0.0;
    bool increasing = true;
    for (int n = 1; n <= DiffusionSchedule::kMaxSteps; ++n) {
      const double b = beta(n);
      worst_beta = std::max(worst_beta, std::abs(s.beta(n) - b));
      if (n > 1) increasing = increasing && s.beta(n) > s.beta(n - 1);
      // x_n = sqrt(1 - b) x_{n-1} + sqrt(b) e: track the x_0 coefficient and noise variance.
      coef *= std::sqrt(1.0 - b);
      var = (1.0 - b) * var + b;
      worst = std::max({worst, std::abs(std::sqrt(s.alpha_bar(n)) - coef), std::abs((1.0 - s.alpha_bar(n)) - var)});
    }
    const double b1 = s.beta(1), bn = s.beta(DiffusionSchedule::kMaxSteps);
    const bool ends = std::abs(b1 - 2.23e-5) / 2.23e-5 < 0.01 && std::abs(bn - 4.99e-3) / 4.99e-3 < 0.01;
    return {worst <= 1e-12 && worst_beta <= 1e-18 && increasing && ends,
            fmt("max closed-form gap %.1e, beta_1 = %.4e, beta_1000 = %.4e, increasing %s", worst, b1, bn,
                increasing ? "yes" : "no")};
  }

  // 7. Masking the image exposes the red-square prior.
  Outcome bias() {
    const auto t0 = Clock::now();
    SeedRun& run = seed_run(1);
    const Policy& policy = *run.base;
    const int k = policy.image_tokens();
    const AttentionMask zeros = AttentionMask::none(k), ones = AttentionMask::all(k);
    Rng rng = substream(7, "acceptance-blue-squares");
    const Object blue_square{Shape::square, Color::blue};
    TokenSeq text = V().encode("what color is the square ? the square is");
    const Token red = V().id("red");
    double hidden = 0.0, shown = 0.0;
    int n = 0;
    for (int i = 0; n < 500; ++i) {
      const ToyWorld w = generate_world("blue" + std::to_string(i), run.config.world.gen, rng, blue_square);
      int squares = 0;
      for (int row = 0; row < w.height(); ++row)
        for (int col = 0; col < w.width(); ++col) squares += w.at(row, col) && w.at(row, col)->shape == Shape::square;
      if (squares != 1) continue;
      hidden += policy.next_token_dist(w.image(), &zeros, text)(red);
      shown += policy.next_token_dist(w.image(), &ones, text)(red);
      ++n;
    }
    hidden /= n;
    shown /= n;
    // Setup time counts even when an earlier criterion built the base.
    const double secs = seconds_since(t0) + run.setup_seconds;
    return {hidden - shown > 0.2 && secs < 600.0,
            fmt("P(red | hidden) = %.3f, P(red | shown) = %.3f, gap %.3f on %d probes (%.0f s incl. SFT)", hidden,
                shown, hidden - shown, n, secs)};
  }

  // 8. More regeneration rounds never lower the non-similar share.
  Outcome similarity_loop() {
    SeedRun& run = seed_run(1);
    std::vector<SftRecord> prompts;
    Rng rng = substream(8, "acceptance-bdhs-prompts");
    for (const auto& id : run.w.splits.pref) {
      for (auto& r : sft_records(run.w.worlds.get(id), rng)) {
        const auto kind = parse_prompt(r.prompt).kind;
        if (kind == PromptKind::presence || kind == PromptKind::describe) prompts.push_back(std::move(r));
      }
      if (prompts.size() >= 1000) break;
    }
    prompts.resize(std::min<std::size_t>(prompts.size(), 1000));
    const HashedBigramEmbedder embedder;
    std::vector<double> frac;
    for (int n_iter = 1; n_iter <= 5; ++n_iter) {
      BDHSConfig c = BDHSConfig::attn(0.99);
      c.n_bdhs = n_iter;
      c.seed = 8;
      std::vector<int> non_similar(prompts.size(), 0);
      parallel_for(prompts.size(), jobs_, [&](std::size_t i) {
        const auto& r = prompts[i];
        const auto res = bdhs(*run.base, run.w.worlds.get(r.world_id).image(), r.prompt, r.response, c, embedder,
                              r.world_id + "/" + std::to_string(i));
        non_similar[i] = embedder.similarity(res.rejected, r.response) < c.eps_s;
      });
      frac.push_back(std::accumulate(non_similar.begin(), non_similar.end(), 0.0) / prompts.size());
    }
    bool monotone = true;
    for (std::size_t i = 1; i < frac.size(); ++i) monotone = monotone && frac[i] >= frac[i - 1];
    std::ostringstream os;
    os << prompts.size() << " examples, non-similar fraction by N:";
    for (double f : frac) os << fmt(" %.3f", f);
    return {prompts.size() == 1000 && monotone && frac[0] > 0.5, os.str()};
  }

  // 9. DPO on BDHS pairs against the SFT base, three seeds.
  Outcome end_to_end() {
    bool ok = true;
    double total = 0.0;
    std::ostringstream os;
    for (std::uint64_t seed : {1, 2, 3}) {
      SeedRun& run = seed_run(seed);
      const auto t0 = Clock::now();
      const ArmResult arm = run_arm(run.config, Arm::parse("dpo:bdhs"), *run.base, run.bdhs.data, run.w);
      const EvalReport r = run_eval(run.config, arm.policy, run.probes, run.w);
      total += run.setup_seconds + seconds_since(t0);
      const EvalReport& b = run.base_report;
      const double acc_gain = r.probe_accuracy - b.probe_accuracy;
      const double halluc_change = b.hallucination_rate > 0
                                       ? (r.hallucination_rate - b.hallucination_rate) / b.hallucination_rate
                                       : (r.hallucination_rate > 0 ? 1.0 : 0.0);
      const double recall_change = (r.recall - b.recall) / b.recall;
      const bool seed_ok = run.bdhs.data.size() == 2000 && acc_gain >= 0.03 && halluc_change <= -0.2 &&
                           recall_change >= -0.05;
      ok = ok && seed_ok;
      os << fmt("[seed %d %s: acc %.3f->%.3f, halluc %.5f->%.5f (%+.0f%%), recall %.3f->%.3f] ",
                static_cast<int>(seed), seed_ok ? "ok" : "FAIL", b.probe_accuracy, r.probe_accuracy,
                b.hallucination_rate, r.hallucination_rate, 100 * halluc_change, b.recall, r.recall);
    }
    os << fmt("%.0f s", total);
    return {ok && total < 1800.0, os.str()};
  }

  // 10. A noisier annotator gives a smaller Online-DPO gain.
  Outcome annotator() {
    bool ok = true;
    std::ostringstream os;
    for (std::uint64_t seed : {1, 2, 3}) {
      SeedRun& run = seed_run(seed);
      double gain[2];
      for (int i = 0; i < 2; ++i) {
        RunConfig c = run.config;
        c.align.annotator_error = i == 0 ? 0.0 : 0.2;
        const ArmResult arm = run_arm(c, Arm::parse("online:bdhs"), *run.base, run.bdhs.data, run.w);
        gain[i] = run_eval(c, arm.policy, run.probes, run.w).probe_accuracy - run.base_report.probe_accuracy;
      }
      const bool seed_ok = gain[1] < gain[0];
      ok = ok && seed_ok;
      os << fmt("[seed %d %s: gain exact %+.3f, 80%% %+.3f] ", static_cast<int>(seed), seed_ok ? "ok" : "FAIL",
                gain[0], gain[1]);
    }
    return {ok, os.str()};
  }

  // 11. Guided completions start with their kept (possibly swapped) prefix.
  Outcome prefixes() {
    SeedRun& run = seed_run(1);
    const Policy& policy = *run.base;
    const Token yes = V().yes(), no = V().no(), sep = V().sep();
    Rng rng = substream(11, "acceptance-guided");
    const BDHSConfig c = BDHSConfig::attn(0.99);
    GenerateOptions opt;
    int sentences = 0, bad = 0, unfinished = 0;
    for (std::size_t wi = 0; sentences < 10000; ++wi) {
      const auto& id = run.w.splits.pref[wi % run.w.splits.pref.size()];
      const ToyWorld& w = run.w.worlds.get(id);
      for (const SftRecord& r : sft_records(w, rng)) {
        const TokenSeq& y = r.response;
        // Sentence spans recomputed here: each ends at a SEP.
        std::vector<std::pair<std::size_t, std::size_t>> spans;
        std::size_t start = 0;
        for (std::size_t t = 0; t < y.size(); ++t)
          if (y[t] == sep) {
            spans.emplace_back(start, t + 1);
            start = t + 1;
          }
        GuidedSplit split = GuidedSplit::of(y);
        resample_split(split, y, c.yesno_swap_prob, rng);
        if (split.sentences.size() != spans.size()) {
          bad += static_cast<int>(spans.size());
          sentences += static_cast<int>(spans.size());
          continue;
        }
        const RestrictedInput x = restrict_input(policy, w.image(), c, rng);
        const GuidedOutput out = guided_generate(policy, x, r.prompt, y, split, opt, rng);
        for (std::size_t k = 0; k < spans.size(); ++k) {
          ++sentences;
          const auto& part = split.sentences[k];
          if (part.begin != spans[k].first || part.end != spans[k].second || part.pivot > part.end - part.begin) {
            ++bad;
            continue;
          }
          TokenSeq expect(y.begin() + static_cast<long>(part.begin),
                          y.begin() + static_cast<long>(part.begin + part.pivot));
          if (part.swapped) {
            if (expect.empty() || (expect[0] != yes && expect[0] != no)) {
              ++bad;
              continue;
            }
            expect[0] = expect[0] == yes ? no : yes;
          }
          if (k >= out.sentence_begin.size()) {
            ++unfinished;  // generation stopped before this sentence
            ++bad;
            continue;
          }
          const std::size_t at = out.sentence_begin[k];
          // Sentence k starts right after the k-th SEP of the output.
          std::size_t seps = 0;
          for (std::size_t t = 0; t < at && t < out.tokens.size(); ++t) seps += out.tokens[t] == sep;
          const bool boundary = seps == k && (k == 0 ? at == 0 : out.tokens[at - 1] == sep);
          const bool match = at + expect.size() <= out.tokens.size() &&
                             std::equal(expect.begin(), expect.end(), out.tokens.begin() + static_cast<long>(at));
          bad += !(boundary && match && out.prefixes[k] == expect);
        }
      }
    }
    const int good = sentences - bad;
    return {bad == 0, fmt("%d of %d sentences carry their prefix (%d cut short)", good, sentences, unfinished)};
  }

 private:
  int jobs_;
  std::map<std::uint64_t, SeedRun> runs_;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks, one line per criterion"};
  int jobs = 4;
  std::vector<int> only;
  app.add_option("--jobs", jobs, "Worker threads")->check(CLI::PositiveNumber);
  app.add_option("--only", only, "Criteria to run (default all)")->check(CLI::Range(1, 11));
  CLI11_PARSE(app, argc, argv);

  Suite suite(jobs);
  using Check = Outcome (Suite::*)();
  const std::vector<std::pair<std::string, Check>> criteria = {
      {"gradient suite", &Suite::gradients},
      {"DPO zero point", &Suite::dpo_zero_point},
      {"reduction identities", &Suite::reductions},
      {"RLOO algebra", &Suite::rloo},
      {"mask sampling statistics", &Suite::masks},
      {"diffusion algebra", &Suite::diffusion},
      {"bias elicitation", &Suite::bias},
      {"similarity-loop monotonicity", &Suite::similarity_loop},
      {"end-to-end hallucination reduction", &Suite::end_to_end},
      {"annotator-strength effect", &Suite::annotator},
      {"guided-generation prefix fidelity", &Suite::prefixes},
  };
  const std::set<int> selected(only.begin(), only.end());
  int failed = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!selected.empty() && !selected.count(id)) continue;
    Outcome o;
    try {
      o = (suite.*criteria[i].second)();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    failed += !o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << id << " (" << criteria[i].first << "): " << o.detail
              << std::endl;
  }
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failed ? 1 : 0;
}
