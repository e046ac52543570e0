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

#include "mmpref/prefdata.hpp"

#include "mmpref/bdhs.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace mmpref {

namespace {

constexpr std::array<std::pair<Provenance, std::string_view>, 5> kProvenance = {{
    {Provenance::sft_groundtruth, "sft-groundtruth"},
    {Provenance::bdhs, "bdhs"},
    {Provenance::povid_distort, "povid-distort"},
    {Provenance::rule_corrupt, "rule-corrupt"},
    {Provenance::online_ranked, "online-ranked"},
}};

TokenSeq words_of(const nlohmann::json& j, const char* field) {
  return Vocab::get().encode(j.at(field).get<std::string>());
}

}  // namespace

std::string_view name(Provenance p) {
  for (const auto& [k, v] : kProvenance)
    if (k == p) return v;
  return "?";
}

Provenance provenance_from(std::string_view s) {
  for (const auto& [k, v] : kProvenance)
    if (v == s) return k;
  throw DataError("unknown provenance '" + std::string(s) + "'");
}

void PreferenceExample::validate(const WorldStore* worlds) const {
  if (id.empty()) throw DataError("preference example with empty id");
  if (chosen.empty() || rejected.empty()) throw DataError("example " + id + ": empty response");
  if (chosen == rejected) throw DataError("example " + id + ": chosen equals rejected");
  for (const TokenSeq* s : {&prompt, &chosen, &rejected})
    for (Token t : *s)
      if (!Vocab::get().valid(t)) throw DataError("example " + id + ": token outside vocabulary");
  try {
    parse_prompt(prompt);
  } catch (const VocabError& e) {
    throw DataError("example " + id + ": " + e.what());
  }
  if (worlds && !worlds->contains(image)) throw DataError("example " + id + ": unknown image '" + image + "'");
  if (!meta.is_object()) throw DataError("example " + id + ": meta must be an object");
}

nlohmann::ordered_json PreferenceExample::to_json() const {
  const Vocab& v = Vocab::get();
  nlohmann::ordered_json j;
  j["id"] = id;
  j["prompt"] = v.decode(prompt);
  j["image"] = image;
  j["chosen"] = v.decode(chosen);
  j["rejected"] = v.decode(rejected);
  j["provenance"] = name(provenance);
  j["meta"] = nlohmann::ordered_json::parse(meta.dump());
  return j;
}

PreferenceExample PreferenceExample::from_json(const nlohmann::json& j) {
  static const std::array<std::string_view, 7> kFields = {"id",       "prompt",     "image", "chosen",
                                                          "rejected", "provenance", "meta"};
  if (!j.is_object()) throw DataError("record is not a JSON object");
  for (const auto& [key, _] : j.items())
    if (std::find(kFields.begin(), kFields.end(), key) == kFields.end())
      throw DataError("unknown field '" + key + "'");
  PreferenceExample e;
  e.id = j.at("id").get<std::string>();
  e.prompt = words_of(j, "prompt");
  e.image = j.at("image").get<std::string>();
  e.chosen = words_of(j, "chosen");
  e.rejected = words_of(j, "rejected");
  e.provenance = provenance_from(j.at("provenance").get<std::string>());
  e.meta = j.contains("meta") ? j.at("meta") : nlohmann::json::object();
  return e;
}

void save_dataset(const std::filesystem::path& path, const PreferenceSet& data) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write " + path.string());
  for (const auto& e : data) os << e.to_json().dump() << '\n';
}

PreferenceSet load_dataset(const std::filesystem::path& path, const WorldStore* worlds) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot read " + path.string());
  PreferenceSet out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      PreferenceExample e = PreferenceExample::from_json(nlohmann::json::parse(line));
      e.validate(worlds);
      out.push_back(std::move(e));
    } catch (const std::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

nlohmann::json ResponseAudit::to_json() const {
  return {{"true_claims", true_claims}, {"false_claims", false_claims}, {"unparsed", unparsed},
          {"flagged", flagged},         {"violated", violated},         {"satisfied", satisfied}};
}

ResponseAudit audit(const ToyWorld& world, const Prompt& prompt, std::span<const Token> response) {
  ResponseAudit a;
  const ParsedResponse parsed = parse_response(prompt, response);
  for (const Claim& c : parsed.claims()) {
    if (claim_holds(world, c)) {
      ++a.true_claims;
      a.satisfied.push_back(c.describe());
    } else {
      ++a.false_claims;
      a.violated.push_back(c.describe());
    }
  }
  a.unparsed = parsed.unparsed;
  a.flagged = !parsed.well_formed();
  return a;
}

AnnotatorVerdict oracle_annotate(const ToyWorld& world, std::span<const Token> prompt, std::span<const Token> a,
                                 std::span<const Token> b) {
  const Prompt p = parse_prompt(prompt);
  AnnotatorVerdict v;
  v.first = audit(world, p, a);
  v.second = audit(world, p, b);
  if (v.first.false_claims != v.second.false_claims)
    v.winner = v.first.false_claims < v.second.false_claims ? Winner::first : Winner::second;
  else if (v.first.true_claims != v.second.true_claims)
    v.winner = v.first.true_claims > v.second.true_claims ? Winner::first : Winner::second;
  return v;
}

Annotator::Annotator(double error_rate) : error_rate_(error_rate) {
  if (!(error_rate >= 0.0 && error_rate <= 1.0)) throw std::invalid_argument("annotator error rate outside [0, 1]");
}

AnnotatorVerdict Annotator::operator()(const ToyWorld& world, std::span<const Token> prompt, std::span<const Token> a,
                                       std::span<const Token> b, Rng& rng) const {
  AnnotatorVerdict v = oracle_annotate(world, prompt, a, b);
  // Draw unconditionally so the stream depends on neither the verdict nor the
  // error rate; annotators of different strength then see the same samples.
  const bool flip = bernoulli(rng, error_rate_);
  if (flip && v.winner != Winner::tie) {
    v.winner = v.winner == Winner::first ? Winner::second : Winner::first;
    v.flipped = true;
  }
  return v;
}

std::optional<PreferenceExample> online_pair(const Policy& policy, const Annotator& annotator, const ToyWorld& world,
                                             std::span<const Token> prompt, const OnlinePairOptions& options,
                                             Rng& rng, const std::string& id, const SkipLog& log) {
  if (!options.greedy && !(options.temperature > 0.0))
    throw std::invalid_argument("online_pair: temperature must be positive");
  GenerateOptions g;
  g.stop = StopRule::eos_only;
  g.temperature = options.temperature;
  g.greedy = options.greedy;
  const ToyImage img = world.image();
  for (int attempt = 0; attempt <= options.max_ties; ++attempt) {
    TokenSeq a = generate(policy, img, nullptr, prompt, g, rng).tokens;
    TokenSeq b = generate(policy, img, nullptr, prompt, g, rng).tokens;
    AnnotatorVerdict v = annotator(world, prompt, a, b, rng);
    if (v.winner == Winner::tie) continue;
    const bool first = v.winner == Winner::first;
    PreferenceExample e;
    e.id = id;
    e.prompt.assign(prompt.begin(), prompt.end());
    e.image = world.id();
    e.chosen = first ? a : b;
    e.rejected = first ? b : a;
    e.provenance = Provenance::online_ranked;
    e.meta = {{"attempts", attempt + 1},
              {"flipped", v.flipped},
              {"chosen_audit", (first ? v.first : v.second).to_json()},
              {"rejected_audit", (first ? v.second : v.first).to_json()},
              {"annotator_error_rate", annotator.error_rate()}};
    return e;
  }
  if (log) log("online_pair " + id + ": skipped after " + std::to_string(options.max_ties + 1) + " tied draws");
  return std::nullopt;
}

std::optional<TokenSeq> rule_corrupt(const ToyWorld& world, std::span<const Token> prompt,
                                     std::span<const Token> y_plus, Rng& rng) {
  const Prompt p = parse_prompt(prompt);
  const ParsedResponse parsed = parse_response(p, y_plus);
  struct Site {
    const Sentence* sentence;
    Slot slot;
  };
  std::vector<Site> sites;
  for (const auto& s : parsed.sentences)
    for (const auto& sl : s.slots) sites.push_back({&s, sl});
  std::shuffle(sites.begin(), sites.end(), rng);

  const Vocab& v = Vocab::get();
  for (const Site& site : sites) {
    // Candidate fillers for the slot, as token runs.
    std::vector<TokenSeq> fill;
    switch (site.slot.kind) {
      case SlotKind::polarity: fill.push_back({y_plus[site.slot.first] == v.yes() ? v.no() : v.yes()}); break;
      case SlotKind::color:
        for (Color c : kColors) fill.push_back({token_of(c)});
        break;
      case SlotKind::shape:
        for (Shape s : kShapes) fill.push_back({token_of(s)});
        break;
      case SlotKind::position:
        for (int r = 0; r < world.height(); ++r)
          for (int c = 0; c < world.width(); ++c) fill.push_back({row_token(r), col_token(c)});
        break;
      case SlotKind::count:
        for (int n = 1; n <= 3; ++n) fill.push_back({count_token(n)});
        break;
    }
    std::vector<TokenSeq> options;
    const auto span_begin = y_plus.begin() + static_cast<long>(site.slot.first);
    const TokenSeq original(span_begin, span_begin + static_cast<long>(site.slot.length));
    for (auto& f : fill) {
      if (f == original) continue;
      TokenSeq cand(y_plus.begin(), y_plus.end());
      std::copy(f.begin(), f.end(), cand.begin() + static_cast<long>(site.slot.first));
      // The rewritten sentence must parse and state a falsehood.
      const ParsedResponse rp = parse_response(p, cand);
      if (rp.unparsed != parsed.unparsed || rp.sentences.size() != parsed.sentences.size()) continue;
      const std::size_t k = static_cast<std::size_t>(site.sentence - parsed.sentences.data());
      const auto& claim = rp.sentences[k].claim;
      if (!claim || claim_holds(world, *claim)) continue;
      options.push_back(std::move(cand));
    }
    if (options.empty()) continue;
    return options[std::uniform_int_distribution<std::size_t>(0, options.size() - 1)(rng)];
  }
  return std::nullopt;
}

nlohmann::json DatasetStats::to_json() const {
  return {{"size", size},
          {"by_provenance", by_provenance},
          {"chosen_length", chosen_length},
          {"rejected_length", rejected_length},
          {"similarity", similarity}};
}

DatasetStats dataset_stats(const PreferenceSet& data) {
  DatasetStats s;
  s.size = data.size();
  if (data.empty()) return s;
  const HashedBigramEmbedder emb;
  for (const auto& e : data) {
    ++s.by_provenance[std::string(name(e.provenance))];
    s.chosen_length += static_cast<double>(e.chosen.size());
    s.rejected_length += static_cast<double>(e.rejected.size());
    s.similarity += emb.similarity(e.chosen, e.rejected);
  }
  const double n = static_cast<double>(data.size());
  s.chosen_length /= n;
  s.rejected_length /= n;
  s.similarity /= n;
  return s;
}

PreferenceSet subsample(const PreferenceSet& data, std::size_t n, std::uint64_t seed) {
  if (n > data.size())
    throw DataError("subsample: requested " + std::to_string(n) + " of " + std::to_string(data.size()) + " examples");
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng = substream(seed, "subsample");
  std::shuffle(idx.begin(), idx.end(), rng);
  idx.resize(n);
  std::sort(idx.begin(), idx.end());
  PreferenceSet out;
  out.reserve(n);
  for (std::size_t i : idx) out.push_back(data[i]);
  return out;
}

std::vector<std::size_t> epoch_order(const PreferenceSet& data, bool stratified, Rng& rng) {
  std::vector<std::size_t> idx(data.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::shuffle(idx.begin(), idx.end(), rng);
  if (!stratified) return idx;
  // Rank within each provenance group, scaled to [0, 1), orders the epoch.
  std::map<Provenance, std::vector<std::size_t>> groups;
  for (std::size_t i : idx) groups[data[i].provenance].push_back(i);
  std::vector<std::pair<double, std::size_t>> keyed;
  for (const auto& [_, g] : groups)
    for (std::size_t r = 0; r < g.size(); ++r)
      keyed.push_back({(static_cast<double>(r) + uniform01(rng)) / static_cast<double>(g.size()), g[r]});
  std::sort(keyed.begin(), keyed.end());
  std::vector<std::size_t> out;
  for (const auto& [_, i] : keyed) out.push_back(i);
  return out;
}

}  // namespace mmpref
