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

// The templated toy language: prompt builders, ground-truth answers, and the
// parser that turns responses back into factual claims.

#include "mmpref/vocab.hpp"
#include "mmpref/world.hpp"

#include <optional>
#include <string>
#include <vector>

namespace mmpref {

enum class PromptKind { presence, color, where, count, describe };

struct Prompt {
  PromptKind kind;
  /// presence: the object asked about; color/where: `object->shape` is used.
  std::optional<Object> object;
  std::optional<Shape> shape;
};

TokenSeq encode_prompt(const Prompt& p);
/// Throws VocabError for sequences outside the prompt templates.
Prompt parse_prompt(std::span<const Token> tokens);

/// The correct response, sentences ending in "." and a trailing <eos>.
/// Throws WorldError for questions about absent shapes.
TokenSeq ground_truth(const ToyWorld& world, const Prompt& prompt);

enum class ClaimKind { presence, has_object, location, count };

struct Claim {
  ClaimKind kind;
  Object object{};     // presence, has_object
  bool polarity = true;  // presence: answered yes
  int row = -1, col = -1;  // location
  Shape shape{};       // location
  int count = -1;      // count

  std::string describe() const;
  friend bool operator==(const Claim&, const Claim&) = default;
};

/// Slot kinds a single-fact corruption may rewrite.
enum class SlotKind { polarity, color, shape, position, count };

struct Slot {
  SlotKind kind;
  std::size_t first;  // token index in the response
  std::size_t length;
};

struct Sentence {
  std::size_t begin = 0, end = 0;  // [begin, end) including the "."
  std::optional<Claim> claim;
  std::vector<Slot> slots;
};

struct ParsedResponse {
  std::vector<Sentence> sentences;
  int unparsed = 0;       // sentences outside the grammar
  bool terminated = true; // ended with <eos>

  std::vector<Claim> claims() const;
  bool well_formed() const { return unparsed == 0 && terminated; }
};

ParsedResponse parse_response(const Prompt& prompt, std::span<const Token> response);

bool claim_holds(const ToyWorld& world, const Claim& claim);

/// Object words and count words.
Token token_of(Shape s);
Token token_of(Color c);
Token row_token(int r);
Token col_token(int c);
Token count_token(int n);

/// Absent objects a question could plausibly ask about: the present shapes
/// in other colors, and the red square whenever it is absent.
std::vector<Object> plausible_absent(const ToyWorld& world);

struct SftRecord {
  std::string world_id;
  TokenSeq prompt;
  TokenSeq response;
};

/// One record per prompt kind: presence (yes), presence (no), color, where,
/// count, describe.
std::vector<SftRecord> sft_records(const ToyWorld& world, Rng& rng);

}  // namespace mmpref
