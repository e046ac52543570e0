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

#include "mmpref/bdhs.hpp"
#include "mmpref/prefdata.hpp"

#include "support.hpp"

#include <doctest.h>

#include <fstream>

using namespace mmpref;

namespace {

const Vocab& V() { return Vocab::get(); }

ToyWorld two_objects() {
  ToyWorld w("two", 4, 4);
  w.place(0, 1, {Shape::square, Color::red});
  w.place(2, 2, {Shape::circle, Color::blue});
  return w;
}

PreferenceExample example(const std::string& id, const std::string& world) {
  return {id,
          V().encode("is there a red square ?"),
          world,
          V().encode("yes . <eos>"),
          V().encode("no . <eos>"),
          Provenance::rule_corrupt,
          nlohmann::json{{"note", "x"}}};
}

int false_claims(const ToyWorld& w, const TokenSeq& prompt, const TokenSeq& r) {
  return audit(w, parse_prompt(prompt), r).false_claims;
}

}  // namespace

TEST_CASE("oracle verdicts") {
  const ToyWorld w = two_objects();
  const TokenSeq p = V().encode("describe the image .");
  const TokenSeq good = V().encode("the square is red . the circle is blue . <eos>");
  const TokenSeq bad = V().encode("the square is red . the circle is green . <eos>");
  const TokenSeq partial = V().encode("the square is red . <eos>");
  CHECK(oracle_annotate(w, p, good, bad).winner == Winner::first);
  CHECK(oracle_annotate(w, p, bad, good).winner == Winner::second);
  CHECK(oracle_annotate(w, p, good, good).winner == Winner::tie);
  CHECK(oracle_annotate(w, p, good, partial).winner == Winner::first);
  const auto v = oracle_annotate(w, p, bad, good);
  CHECK(v.first == oracle_annotate(w, p, good, bad).second);
  CHECK(v.first.false_claims == 1);
  const auto junk = oracle_annotate(w, p, V().encode("the the the <eos>"), good);
  CHECK(junk.first.flagged);
  CHECK(junk.first.true_claims + junk.first.false_claims == 0);
}

TEST_CASE("annotator error rate flips verdicts at the configured rate") {
  const ToyWorld w = two_objects();
  const TokenSeq p = V().encode("is there a red square ?");
  const Annotator noisy(0.2);
  Rng rng = substream(1, "annotator");
  int flipped = 0;
  const int n = 5000;
  for (int i = 0; i < n; ++i)
    flipped += noisy(w, p, V().encode("yes . <eos>"), V().encode("no . <eos>"), rng).winner == Winner::second;
  CHECK(std::abs(flipped / static_cast<double>(n) - 0.2) < 3 * std::sqrt(0.16 / n));
  CHECK(noisy(w, p, V().encode("yes . <eos>"), V().encode("yes . <eos>"), rng).winner == Winner::tie);
  CHECK_THROWS(Annotator(1.5));
}

TEST_CASE("rule corruption changes exactly one fact to a false one") {
  const ToyWorld w = two_objects();
  Rng rng = substream(2, "corrupt");
  const TokenSeq yes = V().encode("yes . <eos>");
  CHECK(rule_corrupt(w, V().encode("is there a red square ?"), yes, rng) == V().encode("no . <eos>"));
  const TokenSeq color_p = V().encode("what color is the square ?");
  for (int i = 0; i < 50; ++i) {
    const auto c = rule_corrupt(w, color_p, V().encode("the square is red . <eos>"), rng);
    REQUIRE(c);
    // Either the shape or the color slot moved, never both.
    const TokenSeq orig = V().encode("the square is red . <eos>");
    REQUIRE(c->size() == orig.size());
    const bool shape_moved = (*c)[1] != orig[1], color_moved = (*c)[3] != orig[3];
    CHECK(shape_moved != color_moved);
    if (color_moved) CHECK(((*c)[3] == V().id("blue") || (*c)[3] == V().id("green") || (*c)[3] == V().id("yellow")));
  }

  // Diff oracle: the parsed claim lists differ in exactly one position and
  // the replacement claim is false in the world.
  const auto& fx = test::trained();
  int checked = 0;
  for (const auto& id : fx.held_out_ids) {
    const ToyWorld& world = fx.worlds.get(id);
    for (const auto& r : sft_records(world, rng)) {
      const auto c = rule_corrupt(world, r.prompt, r.response, rng);
      if (!c) continue;
      ++checked;
      CHECK(*c != r.response);
      const Prompt p = parse_prompt(r.prompt);
      const auto a = parse_response(p, r.response).claims();
      const auto pr = parse_response(p, *c);
      CHECK(pr.well_formed());
      const auto b = pr.claims();
      REQUIRE(a.size() == b.size());
      int changed = 0;
      for (std::size_t k = 0; k < a.size(); ++k)
        if (!(a[k] == b[k])) {
          ++changed;
          CHECK_FALSE(claim_holds(world, b[k]));
        }
      CHECK(changed == 1);
    }
  }
  CHECK(checked > 1000);
}

TEST_CASE("the oracle prefers ground truth over its corruption") {
  const auto& fx = test::trained();
  Rng rng = substream(3, "oracle-sweep");
  int correct = 0, total = 0;
  for (const auto& id : fx.held_out_ids) {
    const ToyWorld& world = fx.worlds.get(id);
    for (const auto& r : sft_records(world, rng)) {
      const auto c = rule_corrupt(world, r.prompt, r.response, rng);
      if (!c) continue;
      ++total;
      correct += oracle_annotate(world, r.prompt, r.response, *c).winner == Winner::first;
    }
  }
  CHECK(static_cast<double>(correct) / total >= 0.99);
}

TEST_CASE("online pairs: ties skip, seeds reproduce, chosen is better") {
  const auto& fx = test::trained();
  const Annotator oracle;
  const ToyWorld& w = fx.worlds.get(fx.held_out_ids[0]);
  const TokenSeq prompt = V().encode("describe the image .");
  OnlinePairOptions greedy;
  greedy.greedy = true;
  Rng rng = substream(4, "online");
  int logged = 0;
  CHECK_FALSE(online_pair(fx.policy, oracle, w, prompt, greedy, rng, "g", [&](const std::string&) { ++logged; }));
  CHECK(logged == 1);

  Rng r1 = substream(5, "online-rep"), r2 = substream(5, "online-rep");
  const auto a = online_pair(fx.policy, oracle, w, prompt, {}, r1, "rep");
  const auto b = online_pair(fx.policy, oracle, w, prompt, {}, r2, "rep");
  CHECK(a.has_value() == b.has_value());
  if (a && b) CHECK(*a == *b);

  Rng rs = substream(6, "online-stats");
  double chosen_err = 0, rejected_err = 0;
  int pairs = 0;
  for (int round = 0; pairs < 1000 && round < 10; ++round)
    for (const auto& id : fx.held_out_ids) {
      if (pairs >= 1000) break;
      const ToyWorld& world = fx.worlds.get(id);
      const auto recs = sft_records(world, rs);
      const auto& rec = recs[static_cast<std::size_t>(round) % recs.size()];
      OnlinePairOptions hot;
      hot.temperature = 1.5;
      const auto e = online_pair(fx.policy, oracle, world, rec.prompt, hot, rs, id);
      if (!e) continue;
      ++pairs;
      chosen_err += false_claims(world, e->prompt, e->chosen);
      rejected_err += false_claims(world, e->prompt, e->rejected);
    }
  REQUIRE(pairs == 1000);
  CHECK(chosen_err / pairs < rejected_err / pairs);
}

TEST_CASE("dataset JSONL round-trip and validation") {
  const auto dir = test::scratch_dir("dataset");
  std::filesystem::create_directories(dir);
  WorldStore store;
  ToyWorld w = two_objects();
  store.add(w);
  PreferenceSet data = {example("a", "two"), example("b", "two")};
  data[1].provenance = Provenance::bdhs;
  save_dataset(dir / "d.jsonl", data);
  CHECK(load_dataset(dir / "d.jsonl", &store) == data);
  const std::string first_line = [&] {
    std::ifstream in(dir / "d.jsonl");
    std::string l;
    std::getline(in, l);
    return l;
  }();
  CHECK(first_line.rfind("{\"id\":\"a\",\"prompt\":", 0) == 0);

  std::ofstream(dir / "empty.jsonl").close();
  CHECK(load_dataset(dir / "empty.jsonl").empty());

  PreferenceExample same = example("dup", "two");
  same.rejected = same.chosen;
  {
    std::ofstream out(dir / "bad.jsonl");
    out << example("ok", "two").to_json().dump() << "\n" << same.to_json().dump() << "\n";
  }
  try {
    load_dataset(dir / "bad.jsonl");
    FAIL("accepted chosen == rejected");
  } catch (const DataError& e) {
    const std::string what = e.what();
    CHECK(what.find("dup") != std::string::npos);
    CHECK(what.find(":2") != std::string::npos);
  }
  {
    std::ofstream out(dir / "garbled.jsonl");
    out << example("ok", "two").to_json().dump() << "\n{not json\n";
  }
  CHECK_THROWS_AS(load_dataset(dir / "garbled.jsonl"), DataError);
  const WorldStore no_worlds;
  CHECK_THROWS_AS(load_dataset(dir / "d.jsonl", &no_worlds), DataError);
  std::filesystem::remove_all(dir);
}

TEST_CASE("subsampling and statistics") {
  PreferenceSet data;
  for (int i = 0; i < 30; ++i) data.push_back(example("e" + std::to_string(i), "two"));
  CHECK(subsample(data, data.size(), 1) == data);
  CHECK(subsample(data, 10, 7) == subsample(data, 10, 7));
  CHECK(subsample(data, 10, 7).size() == 10);
  const DatasetStats s = dataset_stats(data);
  CHECK(s.size == 30);
  CHECK(s.by_provenance.at("rule-corrupt") == 30);
  CHECK(s.chosen_length == 3.0);

  // BDHS pairs captured by the acceptance rule are dissimilar on average.
  const auto& fx = test::trained();
  const HashedBigramEmbedder e;
  BDHSConfig c = BDHSConfig::attn(0.99);
  Rng rng = substream(8, "bdhs-sim");
  PreferenceSet accepted;
  for (std::size_t i = 0; i < 60; ++i) {
    const auto& id = fx.held_out_ids[i];
    const auto recs = sft_records(fx.worlds.get(id), rng);
    const auto& r = recs[5];
    const BdhsResult b = bdhs(fx.policy, fx.worlds.get(id).image(), r.prompt, r.response, c, e, id);
    if (b.accepted && b.rejected != r.response)
      accepted.push_back({id, r.prompt, id, r.response, b.rejected, Provenance::bdhs, nlohmann::json::object()});
  }
  REQUIRE_FALSE(accepted.empty());
  CHECK(dataset_stats(accepted).similarity < c.eps_s);
}
