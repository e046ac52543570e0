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

#include "mmpref/vocab.hpp"

#include <algorithm>
#include <sstream>

namespace mmpref {

namespace {

std::vector<std::string> build_words() {
  std::vector<std::string> w = {
      "<eos>", ".", "?", "yes", "no",
      // shapes, colors
      "square", "circle", "triangle", "red", "blue", "green", "yellow",
      // grid coordinates
      "r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7",
      "c0", "c1", "c2", "c3", "c4", "c5", "c6", "c7",
      // counts
      "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine",
      // template words
      "is", "there", "a", "the", "what", "color", "where", "how", "many", "objects", "are",
      "at", "describe", "image", "number", "of"};
  for (int i = 0; w.size() < 64; ++i) w.push_back("<unused" + std::to_string(i) + ">");
  return w;
}

}  // namespace

const Vocab& Vocab::get() {
  static const Vocab v;
  return v;
}

Vocab::Vocab() : words_(build_words()) {
  eos_ = id("<eos>");
  sep_ = id(".");
  qmark_ = id("?");
  yes_ = id("yes");
  no_ = id("no");
}

Token Vocab::id(std::string_view word) const {
  auto it = std::find(words_.begin(), words_.end(), word);
  if (it == words_.end()) throw VocabError("unknown token '" + std::string(word) + "'");
  return static_cast<Token>(it - words_.begin());
}

bool Vocab::contains(std::string_view word) const {
  return std::find(words_.begin(), words_.end(), word) != words_.end();
}

const std::string& Vocab::word(Token t) const {
  if (!valid(t)) throw VocabError("token id " + std::to_string(t) + " outside vocabulary");
  return words_[static_cast<std::size_t>(t)];
}

TokenSeq Vocab::encode(std::string_view text) const {
  TokenSeq out;
  std::istringstream is{std::string(text)};
  std::string w;
  while (is >> w) out.push_back(id(w));
  return out;
}

std::string Vocab::decode(std::span<const Token> tokens) const {
  std::string out;
  for (Token t : tokens) {
    if (!out.empty()) out += ' ';
    out += word(t);
  }
  return out;
}

}  // namespace mmpref
