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

#include "mmpref/grammar.hpp"

#include <algorithm>
#include <sstream>

namespace mmpref {

namespace {

const Vocab& V() { return Vocab::get(); }

const char* kCountWords[] = {"zero", "one", "two", "three", "four",
                             "five", "six", "seven", "eight", "nine"};

std::optional<Shape> as_shape(Token t) {
  for (Shape s : kShapes)
    if (token_of(s) == t) return s;
  return std::nullopt;
}

std::optional<Color> as_color(Token t) {
  for (Color c : kColors)
    if (token_of(c) == t) return c;
  return std::nullopt;
}

std::optional<int> as_row(Token t) {
  for (int r = 0; r < ToyWorld::kMaxSide; ++r)
    if (row_token(r) == t) return r;
  return std::nullopt;
}

std::optional<int> as_col(Token t) {
  for (int c = 0; c < ToyWorld::kMaxSide; ++c)
    if (col_token(c) == t) return c;
  return std::nullopt;
}

std::optional<int> as_count(Token t) {
  for (int n = 0; n < 10; ++n)
    if (count_token(n) == t) return n;
  return std::nullopt;
}

bool matches(std::span<const Token> s, std::initializer_list<const char*> words, std::size_t at = 0) {
  if (s.size() < at + words.size()) return false;
  std::size_t i = at;
  for (const char* w : words) {
    if (w[0] != '*' && s[i] != V().id(w)) return false;
    ++i;
  }
  return true;
}

TokenSeq words(std::initializer_list<std::string_view> ws) {
  TokenSeq out;
  for (auto w : ws) out.push_back(V().id(w));
  return out;
}

// Parses one sentence (including its trailing "."), offsets relative to the
// response start.
Sentence parse_sentence(const Prompt& prompt, std::span<const Token> s, std::size_t begin) {
  Sentence out;
  out.begin = begin;
  out.end = begin + s.size();
  const Token dot = V().sep();
  if (s.empty() || s.back() != dot) return out;

  if (s.size() == 2 && (s[0] == V().yes() || s[0] == V().no())) {
    if (prompt.kind == PromptKind::presence && prompt.object) {
      Claim c{ClaimKind::presence};
      c.object = *prompt.object;
      c.polarity = s[0] == V().yes();
      out.claim = c;
      out.slots.push_back({SlotKind::polarity, begin, 1});
    }
    return out;
  }
  // the S is C .
  if (s.size() == 5 && matches(s, {"the", "*", "is", "*", "."})) {
    auto shape = as_shape(s[1]);
    auto color = as_color(s[3]);
    if (shape && color) {
      Claim c{ClaimKind::has_object};
      c.object = {*shape, *color};
      out.claim = c;
      out.slots.push_back({SlotKind::shape, begin + 1, 1});
      out.slots.push_back({SlotKind::color, begin + 3, 1});
    }
    return out;
  }
  // the S is at R C .
  if (s.size() == 7 && matches(s, {"the", "*", "is", "at", "*", "*", "."})) {
    auto shape = as_shape(s[1]);
    auto row = as_row(s[4]);
    auto col = as_col(s[5]);
    if (shape && row && col) {
      Claim c{ClaimKind::location};
      c.shape = *shape;
      c.row = *row;
      c.col = *col;
      out.claim = c;
      out.slots.push_back({SlotKind::shape, begin + 1, 1});
      out.slots.push_back({SlotKind::position, begin + 4, 2});
    }
    return out;
  }
  // the number of objects is N .
  if (s.size() == 7 && matches(s, {"the", "number", "of", "objects", "is", "*", "."})) {
    if (auto n = as_count(s[5])) {
      Claim c{ClaimKind::count};
      c.count = *n;
      out.claim = c;
      out.slots.push_back({SlotKind::count, begin + 5, 1});
    }
    return out;
  }
  return out;
}

}  // namespace

Token token_of(Shape s) { return V().id(name(s)); }
Token token_of(Color c) { return V().id(name(c)); }
Token row_token(int r) { return V().id("r" + std::to_string(r)); }
Token col_token(int c) { return V().id("c" + std::to_string(c)); }
Token count_token(int n) {
  if (n < 0 || n > 9) throw VocabError("count outside 0..9");
  return V().id(kCountWords[n]);
}

TokenSeq encode_prompt(const Prompt& p) {
  switch (p.kind) {
    case PromptKind::presence: {
      TokenSeq t = words({"is", "there", "a"});
      t.push_back(token_of(p.object->color));
      t.push_back(token_of(p.object->shape));
      t.push_back(V().qmark());
      return t;
    }
    case PromptKind::color: {
      TokenSeq t = words({"what", "color", "is", "the"});
      t.push_back(token_of(*p.shape));
      t.push_back(V().qmark());
      return t;
    }
    case PromptKind::where: {
      TokenSeq t = words({"where", "is", "the"});
      t.push_back(token_of(*p.shape));
      t.push_back(V().qmark());
      return t;
    }
    case PromptKind::count: return words({"how", "many", "objects", "are", "there", "?"});
    case PromptKind::describe: return words({"describe", "the", "image", "."});
  }
  return {};
}

Prompt parse_prompt(std::span<const Token> t) {
  if (t.size() == 6 && matches(t, {"is", "there", "a", "*", "*", "?"})) {
    auto c = as_color(t[3]);
    auto s = as_shape(t[4]);
    if (c && s) return {PromptKind::presence, Object{*s, *c}, *s};
  }
  if (t.size() == 6 && matches(t, {"what", "color", "is", "the", "*", "?"}))
    if (auto s = as_shape(t[4])) return {PromptKind::color, std::nullopt, *s};
  if (t.size() == 5 && matches(t, {"where", "is", "the", "*", "?"}))
    if (auto s = as_shape(t[3])) return {PromptKind::where, std::nullopt, *s};
  if (t.size() == 6 && matches(t, {"how", "many", "objects", "are", "there", "?"}))
    return {PromptKind::count, std::nullopt, std::nullopt};
  if (t.size() == 4 && matches(t, {"describe", "the", "image", "."}))
    return {PromptKind::describe, std::nullopt, std::nullopt};
  throw VocabError("prompt outside template grammar: '" + V().decode(t) + "'");
}

TokenSeq ground_truth(const ToyWorld& world, const Prompt& p) {
  TokenSeq out;
  auto shape_fact = [&](Shape s) {
    auto f = world.find(s);
    if (!f) throw WorldError("world " + world.id() + " has no " + std::string(name(s)));
    return *f;
  };
  switch (p.kind) {
    case PromptKind::presence:
      out = {world.contains(*p.object) ? V().yes() : V().no(), V().sep()};
      break;
    case PromptKind::color: {
      const Fact f = shape_fact(*p.shape);
      out = words({"the"});
      out.push_back(token_of(f.object.shape));
      out.push_back(V().id("is"));
      out.push_back(token_of(f.object.color));
      out.push_back(V().sep());
      break;
    }
    case PromptKind::where: {
      const Fact f = shape_fact(*p.shape);
      out = words({"the"});
      out.push_back(token_of(f.object.shape));
      for (Token t : words({"is", "at"})) out.push_back(t);
      out.push_back(row_token(f.row));
      out.push_back(col_token(f.col));
      out.push_back(V().sep());
      break;
    }
    case PromptKind::count:
      out = words({"the", "number", "of", "objects", "is"});
      out.push_back(count_token(world.object_count()));
      out.push_back(V().sep());
      break;
    case PromptKind::describe:
      for (Shape s : kShapes) {
        auto f = world.find(s);
        if (!f) continue;
        out.push_back(V().id("the"));
        out.push_back(token_of(s));
        out.push_back(V().id("is"));
        out.push_back(token_of(f->object.color));
        out.push_back(V().sep());
      }
      break;
  }
  out.push_back(V().eos());
  return out;
}

std::string Claim::describe() const {
  std::ostringstream os;
  switch (kind) {
    case ClaimKind::presence:
      os << (polarity ? "present(" : "absent(") << name(object.color) << " " << name(object.shape) << ")";
      break;
    case ClaimKind::has_object:
      os << "object(" << name(object.color) << " " << name(object.shape) << ")";
      break;
    case ClaimKind::location:
      os << "at(" << name(shape) << ",r" << row << ",c" << col << ")";
      break;
    case ClaimKind::count:
      os << "count(" << count << ")";
      break;
  }
  return os.str();
}

std::vector<Claim> ParsedResponse::claims() const {
  std::vector<Claim> out;
  for (const auto& s : sentences)
    if (s.claim) out.push_back(*s.claim);
  return out;
}

ParsedResponse parse_response(const Prompt& prompt, std::span<const Token> response) {
  ParsedResponse out;
  out.terminated = false;
  std::size_t start = 0;
  for (std::size_t i = 0; i < response.size(); ++i) {
    const Token t = response[i];
    if (t == V().eos()) {
      if (i > start) {
        out.sentences.push_back(parse_sentence(prompt, response.subspan(start, i - start), start));
      }
      out.terminated = true;
      break;
    }
    if (t == V().sep()) {
      out.sentences.push_back(parse_sentence(prompt, response.subspan(start, i + 1 - start), start));
      start = i + 1;
    }
  }
  if (!out.terminated && start < response.size())
    out.sentences.push_back(parse_sentence(prompt, response.subspan(start), start));
  for (const auto& s : out.sentences)
    if (!s.claim) ++out.unparsed;
  return out;
}

bool claim_holds(const ToyWorld& world, const Claim& c) {
  switch (c.kind) {
    case ClaimKind::presence: return world.contains(c.object) == c.polarity;
    case ClaimKind::has_object: return world.contains(c.object);
    case ClaimKind::location: {
      auto f = world.find(c.shape);
      return f && f->row == c.row && f->col == c.col;
    }
    case ClaimKind::count: return world.object_count() == c.count;
  }
  return false;
}

std::vector<Object> plausible_absent(const ToyWorld& world) {
  std::vector<Object> out;
  for (const Fact& f : world.facts())
    for (Color c : kColors)
      if (c != f.object.color) out.push_back({f.object.shape, c});
  const Object red_square{Shape::square, Color::red};
  if (!world.contains(red_square) && std::find(out.begin(), out.end(), red_square) == out.end())
    out.push_back(red_square);
  return out;
}

std::vector<SftRecord> sft_records(const ToyWorld& world, Rng& rng) {
  const auto facts = world.facts();
  auto pick_fact = [&]() {
    return facts[std::uniform_int_distribution<std::size_t>(0, facts.size() - 1)(rng)];
  };
  const auto absent = plausible_absent(world);
  std::vector<Prompt> prompts;
  prompts.push_back({PromptKind::presence, pick_fact().object, std::nullopt});
  prompts.push_back({PromptKind::presence,
                     absent[std::uniform_int_distribution<std::size_t>(0, absent.size() - 1)(rng)],
                     std::nullopt});
  prompts.push_back({PromptKind::color, std::nullopt, pick_fact().object.shape});
  prompts.push_back({PromptKind::where, std::nullopt, pick_fact().object.shape});
  prompts.push_back({PromptKind::count, std::nullopt, std::nullopt});
  prompts.push_back({PromptKind::describe, std::nullopt, std::nullopt});

  std::vector<SftRecord> out;
  for (auto& p : prompts) {
    if (p.object) p.shape = p.object->shape;
    out.push_back({world.id(), encode_prompt(p), ground_truth(world, p)});
  }
  return out;
}

}  // namespace mmpref
