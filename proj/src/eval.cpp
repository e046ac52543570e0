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

#include "mmpref/eval.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

namespace mmpref {

std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  std::ostringstream os;
  for (unsigned int i = 0; i < len; ++i) os << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return os.str();
}

namespace {

nlohmann::ordered_json probe_json(const Probe& p) {
  nlohmann::ordered_json j;
  j["world"] = p.world;
  j["question"] = Vocab::get().decode(p.question);
  j["gold"] = p.gold_yes ? "yes" : "no";
  return j;
}

std::string probes_text(const ProbeSet& s) {
  std::string out;
  for (const auto& p : s.probes) out += probe_json(p).dump() + "\n";
  return out;
}

}  // namespace

double ProbeSet::balance() const {
  if (probes.empty()) return 0.0;
  const auto yes = std::count_if(probes.begin(), probes.end(), [](const Probe& p) { return p.gold_yes; });
  return static_cast<double>(yes) / static_cast<double>(probes.size());
}

std::string ProbeSet::digest() const { return sha256_hex(probes_text(*this)); }

void ProbeSet::save(const std::filesystem::path& path) const {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  os << probes_text(*this);
}

ProbeSet ProbeSet::load(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw EvalError("cannot read probe set " + path.string());
  ProbeSet s;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto gold = j.at("gold").get<std::string>();
      if (gold != "yes" && gold != "no") throw EvalError("gold must be yes or no");
      Probe p{j.at("world").get<std::string>(), Vocab::get().encode(j.at("question").get<std::string>()),
              gold == "yes"};
      if (parse_prompt(p.question).kind != PromptKind::presence) throw EvalError("not a presence question");
      s.probes.push_back(std::move(p));
    } catch (const std::exception& e) {
      throw EvalError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return s;
}

ProbeSet build_probes(const WorldStore& worlds, std::size_t n, std::uint64_t seed) {
  std::vector<Probe> yes, no;
  for (const ToyWorld* w : worlds.all()) {
    for (const Fact& f : w->facts())
      yes.push_back({w->id(), encode_prompt({PromptKind::presence, f.object, f.object.shape}), true});
    for (const Object& o : plausible_absent(*w))
      no.push_back({w->id(), encode_prompt({PromptKind::presence, o, o.shape}), false});
  }
  const std::size_t n_yes = (n + 1) / 2, n_no = n - n_yes;
  if (n_yes > yes.size() || n_no > no.size())
    throw EvalError("build_probes: " + std::to_string(n) + " probes exceed balanced capacity (" +
                    std::to_string(yes.size()) + " present, " + std::to_string(no.size()) + " absent)");
  Rng rng = substream(seed, "probes");
  std::shuffle(yes.begin(), yes.end(), rng);
  std::shuffle(no.begin(), no.end(), rng);
  ProbeSet s;
  s.probes.assign(yes.begin(), yes.begin() + static_cast<long>(n_yes));
  s.probes.insert(s.probes.end(), no.begin(), no.begin() + static_cast<long>(n_no));
  std::shuffle(s.probes.begin(), s.probes.end(), rng);
  return s;
}

bool PolicyResponder::answers_yes(const ToyWorld& world, std::span<const Token> question) const {
  const Eigen::VectorXd d = policy_.next_token_dist(world.image(), nullptr, question);
  return d(Vocab::get().yes()) > d(Vocab::get().no());
}

TokenSeq PolicyResponder::describe(const ToyWorld& world, std::span<const Token> prompt) const {
  GenerateOptions opt;
  opt.greedy = true;
  opt.stop = StopRule::eos_only;
  opt.eos_bias = eos_bias_;
  Rng unused(0);
  return generate(policy_, world.image(), nullptr, prompt, opt, unused).tokens;
}

bool OracleResponder::answers_yes(const ToyWorld& world, std::span<const Token> question) const {
  return world.contains(*parse_prompt(question).object);
}

TokenSeq OracleResponder::describe(const ToyWorld& world, std::span<const Token> prompt) const {
  return ground_truth(world, parse_prompt(prompt));
}

DescriptionScore score_description(const ToyWorld& world, std::span<const Token> description) {
  DescriptionScore s;
  const Prompt p{PromptKind::describe, std::nullopt, std::nullopt};
  const ParsedResponse parsed = parse_response(p, description);
  s.flagged = !parsed.well_formed();
  std::set<Object> found;
  int absent = 0;
  for (const Claim& c : parsed.claims()) {
    if (c.kind != ClaimKind::has_object) continue;
    ++s.mentions;
    if (world.contains(c.object)) found.insert(c.object);
    else ++absent;
  }
  s.length = static_cast<int>(std::find(description.begin(), description.end(), Vocab::get().eos()) -
                              description.begin());
  if (s.mentions > 0) {
    s.recall = static_cast<double>(found.size()) / world.object_count();
    s.hallucination = static_cast<double>(absent) / s.mentions;
  }
  return s;
}

EvalReport evaluate(const Responder& responder, const ProbeSet& probes, const WorldStore& worlds,
                    const std::vector<std::string>& describe_worlds) {
  EvalReport r;
  r.probe_digest = probes.digest();
  r.describe_worlds = describe_worlds;
  for (const Probe& p : probes.probes) {
    const bool yes = responder.answers_yes(worlds.get(p.world), p.question);
    r.probe_correct.push_back(yes == p.gold_yes ? 1 : 0);
  }
  const TokenSeq prompt = encode_prompt({PromptKind::describe, std::nullopt, std::nullopt});
  for (const auto& id : describe_worlds) {
    const ToyWorld& w = worlds.get(id);
    r.descriptions.push_back(score_description(w, responder.describe(w, prompt)));
  }
  auto mean = [](auto begin, auto end, auto f) {
    double s = 0.0;
    std::size_t n = 0;
    for (auto it = begin; it != end; ++it, ++n) s += f(*it);
    return n ? s / static_cast<double>(n) : 0.0;
  };
  r.probe_accuracy = mean(r.probe_correct.begin(), r.probe_correct.end(), [](int c) { return double(c); });
  const auto& d = r.descriptions;
  r.recall = mean(d.begin(), d.end(), [](const DescriptionScore& s) { return s.recall; });
  r.hallucination_rate = mean(d.begin(), d.end(), [](const DescriptionScore& s) { return s.hallucination; });
  r.response_length_mean = mean(d.begin(), d.end(), [](const DescriptionScore& s) { return double(s.length); });
  r.flagged_descriptions =
      static_cast<int>(std::count_if(d.begin(), d.end(), [](const DescriptionScore& s) { return s.flagged; }));
  return r;
}

nlohmann::json EvalReport::to_json(bool per_item) const {
  nlohmann::json j = {{"probe_accuracy", probe_accuracy},
                      {"recall", recall},
                      {"hallucination_rate", hallucination_rate},
                      {"response_length_mean", response_length_mean},
                      {"flagged_descriptions", flagged_descriptions},
                      {"n_probes", probe_correct.size()},
                      {"n_descriptions", descriptions.size()},
                      {"probe_digest", probe_digest}};
  if (per_item) {
    j["describe_worlds"] = describe_worlds;
    j["probe_correct"] = probe_correct;
    nlohmann::json ds = nlohmann::json::array();
    for (const auto& s : descriptions)
      ds.push_back({{"recall", s.recall},
                    {"hallucination", s.hallucination},
                    {"mentions", s.mentions},
                    {"length", s.length},
                    {"flagged", s.flagged}});
    j["descriptions"] = std::move(ds);
  }
  return j;
}

EvalReport EvalReport::from_json(const nlohmann::json& j) {
  EvalReport r;
  r.probe_accuracy = j.at("probe_accuracy").get<double>();
  r.recall = j.at("recall").get<double>();
  r.hallucination_rate = j.at("hallucination_rate").get<double>();
  r.response_length_mean = j.at("response_length_mean").get<double>();
  r.flagged_descriptions = j.at("flagged_descriptions").get<int>();
  r.probe_digest = j.at("probe_digest").get<std::string>();
  r.describe_worlds = j.at("describe_worlds").get<std::vector<std::string>>();
  r.probe_correct = j.at("probe_correct").get<std::vector<int>>();
  for (const auto& d : j.at("descriptions"))
    r.descriptions.push_back({d.at("recall").get<double>(), d.at("hallucination").get<double>(),
                              d.at("mentions").get<int>(), d.at("length").get<int>(), d.at("flagged").get<bool>()});
  return r;
}

std::vector<MetricDelta> compare_runs(const EvalReport& a, const EvalReport& b, int resamples, std::uint64_t seed) {
  if (a.probe_digest != b.probe_digest || a.probe_correct.size() != b.probe_correct.size())
    throw EvalError("compare_runs: reports were evaluated on different probe sets");
  if (a.describe_worlds != b.describe_worlds || a.descriptions.size() != b.descriptions.size())
    throw EvalError("compare_runs: reports were evaluated on different description worlds");
  if (resamples < 1) throw EvalError("compare_runs: need at least one resample");

  using Field = double (*)(const DescriptionScore&);
  struct Metric {
    const char* name;
    Field f;  // null: probe accuracy
  };
  const Metric metrics[] = {{"probe_accuracy", nullptr},
                            {"recall", [](const DescriptionScore& s) { return s.recall; }},
                            {"hallucination_rate", [](const DescriptionScore& s) { return s.hallucination; }},
                            {"response_length_mean", [](const DescriptionScore& s) { return double(s.length); }}};

  std::vector<MetricDelta> out;
  for (std::size_t m = 0; m < std::size(metrics); ++m) {
    const Metric& metric = metrics[m];
    // Paired per-item differences b − a.
    std::vector<double> diff, va, vb;
    if (!metric.f) {
      for (std::size_t i = 0; i < a.probe_correct.size(); ++i) {
        va.push_back(a.probe_correct[i]);
        vb.push_back(b.probe_correct[i]);
      }
    } else {
      for (std::size_t i = 0; i < a.descriptions.size(); ++i) {
        va.push_back(metric.f(a.descriptions[i]));
        vb.push_back(metric.f(b.descriptions[i]));
      }
    }
    const std::size_t n = va.size();
    MetricDelta d;
    d.metric = metric.name;
    if (n == 0) {
      out.push_back(d);
      continue;
    }
    auto mean_of = [](const std::vector<double>& v, const std::vector<std::size_t>& idx) {
      double s = 0.0;
      for (std::size_t i : idx) s += v[i];
      return s / static_cast<double>(idx.size());
    };
    std::vector<std::size_t> all(n);
    std::iota(all.begin(), all.end(), 0);
    d.a = mean_of(va, all);
    d.b = mean_of(vb, all);
    d.delta = d.b - d.a;
    Rng rng = substream(seed, "bootstrap", m);
    std::uniform_int_distribution<std::size_t> pick(0, n - 1);
    std::vector<double> stats;
    std::vector<std::size_t> idx(n);
    for (int r = 0; r < resamples; ++r) {
      for (auto& i : idx) i = pick(rng);
      stats.push_back(mean_of(vb, idx) - mean_of(va, idx));
    }
    std::sort(stats.begin(), stats.end());
    const std::size_t k = static_cast<std::size_t>(std::floor(0.025 * static_cast<double>(resamples)));
    // Mirrored order statistics keep the interval antisymmetric under swap;
    // the hull with the point estimate keeps it inside.
    d.lo = std::min(stats[k], d.delta);
    d.hi = std::max(stats[stats.size() - 1 - k], d.delta);
    out.push_back(d);
  }
  return out;
}

std::string deltas_csv(const std::vector<MetricDelta>& deltas) {
  std::ostringstream os;
  os << "metric,a,b,delta,ci_lo,ci_hi\n";
  os << std::setprecision(10);
  for (const auto& d : deltas) os << d.metric << ',' << d.a << ',' << d.b << ',' << d.delta << ',' << d.lo << ',' << d.hi << '\n';
  return os.str();
}

nlohmann::json deltas_json(const std::vector<MetricDelta>& deltas) {
  nlohmann::json j = nlohmann::json::array();
  for (const auto& d : deltas)
    j.push_back({{"metric", d.metric}, {"a", d.a}, {"b", d.b}, {"delta", d.delta}, {"ci_lo", d.lo}, {"ci_hi", d.hi}});
  return j;
}

}  // namespace mmpref
