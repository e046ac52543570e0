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

#include "support.hpp"

#include <doctest.h>

using namespace mmpref;

namespace {

const Vocab& V() { return Vocab::get(); }

WorldStore random_store(int n, std::uint64_t seed) {
  WorldStore s;
  Rng rng = substream(seed, "eval-worlds");
  for (int i = 0; i < n; ++i) s.add(generate_world("e" + std::to_string(i), {}, rng));
  return s;
}

std::vector<std::string> ids(const WorldStore& s, std::size_t n) {
  std::vector<std::string> out;
  for (const ToyWorld* w : s.all()) {
    if (out.size() >= n) break;
    out.push_back(w->id());
  }
  return out;
}

/// Answers "no" to a fixed share of probes and writes the truth otherwise.
class Flaky : public Responder {
 public:
  explicit Flaky(int every) : every_(every) {}
  bool answers_yes(const ToyWorld& w, std::span<const Token> q) const override {
    return (++calls_ % every_ == 0) ? false : oracle_.answers_yes(w, q);
  }
  TokenSeq describe(const ToyWorld& w, std::span<const Token> p) const override { return oracle_.describe(w, p); }

 private:
  int every_;
  mutable int calls_ = 0;
  OracleResponder oracle_;
};

}  // namespace

TEST_CASE("probes are balanced and carry the right gold labels") {
  ToyWorld w("one", 4, 4);
  w.place(0, 0, {Shape::square, Color::red});
  WorldStore single;
  single.add(w);
  const OracleResponder oracle;
  CHECK(oracle.answers_yes(w, V().encode("is there a red square ?")));
  CHECK_FALSE(oracle.answers_yes(w, V().encode("is there a blue circle ?")));

  const WorldStore store = random_store(600, 1);
  for (std::uint64_t seed : {1u, 2u, 3u}) {
    const ProbeSet p = build_probes(store, 1000, seed);
    REQUIRE(p.probes.size() == 1000);
    CHECK(p.balance() >= 0.45);
    CHECK(p.balance() <= 0.55);
    for (const auto& probe : p.probes) {
      const ToyWorld& world = store.get(probe.world);
      const Prompt q = parse_prompt(probe.question);
      CHECK(world.contains(*q.object) == probe.gold_yes);
    }
  }
  CHECK(build_probes(store, 100, 4).digest() == build_probes(store, 100, 4).digest());
  CHECK(build_probes(store, 100, 4).digest() != build_probes(store, 100, 5).digest());
  CHECK_THROWS_AS(build_probes(single, 50, 1), EvalError);
}

TEST_CASE("probe sets round-trip through JSONL") {
  const WorldStore store = random_store(50, 2);
  const ProbeSet p = build_probes(store, 40, 1);
  const auto path = test::scratch_dir("probes") / "probes.jsonl";
  p.save(path);
  const ProbeSet back = ProbeSet::load(path);
  CHECK(back.probes == p.probes);
  CHECK(back.digest() == p.digest());
  std::filesystem::remove_all(path.parent_path());
}

TEST_CASE("reference responders bound the metrics") {
  const WorldStore store = random_store(300, 3);
  const ProbeSet probes = build_probes(store, 400, 1);
  const auto describe = ids(store, 100);
  const EvalReport oracle = evaluate(OracleResponder(), probes, store, describe);
  CHECK(oracle.probe_accuracy == 1.0);
  CHECK(oracle.hallucination_rate == 0.0);
  CHECK(oracle.recall == 1.0);
  const EvalReport yes = evaluate(ConstantYesResponder(), probes, store, describe);
  CHECK(yes.probe_accuracy == doctest::Approx(probes.balance()));
  CHECK(yes.probe_accuracy == doctest::Approx(0.5).epsilon(0.1));
  CHECK(yes.recall == 0.0);
  CHECK(yes.hallucination_rate == 0.0);
}

TEST_CASE("description scoring partitions mentions") {
  ToyWorld w("two", 4, 4);
  w.place(0, 1, {Shape::square, Color::red});
  w.place(2, 2, {Shape::circle, Color::blue});
  const auto empty = score_description(w, TokenSeq{V().eos()});
  CHECK(empty.recall == 0.0);
  CHECK(empty.hallucination == 0.0);
  CHECK(empty.mentions == 0);
  const auto half = score_description(w, V().encode("the square is red . the triangle is blue . <eos>"));
  CHECK(half.mentions == 2);
  CHECK(half.recall == 0.5);
  CHECK(half.hallucination == 0.5);
  const auto wrong_color = score_description(w, V().encode("the square is green . <eos>"));
  CHECK(wrong_color.hallucination == 1.0);
  CHECK(wrong_color.recall == 0.0);
  const auto junk = score_description(w, V().encode("square square . <eos>"));
  CHECK(junk.flagged);
  CHECK(junk.mentions == 0);
}

TEST_CASE("paired bootstrap comparison") {
  const WorldStore store = random_store(200, 4);
  const ProbeSet probes = build_probes(store, 300, 2);
  const auto describe = ids(store, 60);
  const EvalReport a = evaluate(OracleResponder(), probes, store, describe);
  const EvalReport b = evaluate(Flaky(4), probes, store, describe);
  for (const auto& d : compare_runs(a, a, 500, 1)) {
    CHECK(d.delta == 0.0);
    CHECK(d.lo == 0.0);
    CHECK(d.hi == 0.0);
  }
  const auto ab = compare_runs(a, b, 1000, 1);
  const auto ba = compare_runs(b, a, 1000, 1);
  REQUIRE(ab.size() == ba.size());
  for (std::size_t i = 0; i < ab.size(); ++i) {
    CHECK(ab[i].metric == ba[i].metric);
    CHECK(ab[i].delta == -ba[i].delta);
    CHECK(ab[i].lo <= ab[i].delta);
    CHECK(ab[i].delta <= ab[i].hi);
  }
  CHECK(ab[0].metric == "probe_accuracy");
  CHECK(ab[0].delta < 0.0);
  CHECK(ab[0].hi < 0.0);

  const ProbeSet other = build_probes(store, 300, 3);
  const EvalReport c = evaluate(OracleResponder(), other, store, describe);
  CHECK_THROWS_AS(compare_runs(a, c), EvalError);
  CHECK(EvalReport::from_json(a.to_json()).to_json() == a.to_json());
  CHECK(deltas_csv(ab).rfind("metric,a,b,delta,ci_lo,ci_hi\n", 0) == 0);
}

TEST_CASE("policy evaluation is deterministic") {
  const auto& fx = test::trained();
  WorldStore held;
  for (const auto& id : fx.held_out_ids) held.add(fx.worlds.get(id));
  const ProbeSet probes = build_probes(held, 100, 1);
  const std::vector<std::string> describe(fx.held_out_ids.begin(), fx.held_out_ids.begin() + 30);
  const EvalReport a = evaluate(PolicyResponder(fx.policy), probes, fx.worlds, describe);
  const EvalReport b = evaluate(PolicyResponder(fx.policy), probes, fx.worlds, describe);
  CHECK(a.to_json() == b.to_json());
  CHECK(a.probe_accuracy > 0.5);
  CHECK(a.recall > 0.5);
  CHECK(sha256_hex("abc") == "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}
