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

#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace mmpref {

using Token = int;
using TokenSeq = std::vector<Token>;

class VocabError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Fixed 64-entry vocabulary of the templated toy language.
class Vocab {
 public:
  static const Vocab& get();

  int size() const { return static_cast<int>(words_.size()); }
  Token id(std::string_view word) const;
  bool contains(std::string_view word) const;
  const std::string& word(Token t) const;
  bool valid(Token t) const { return t >= 0 && t < size(); }

  /// Space separated words to tokens; throws VocabError on unknown words.
  TokenSeq encode(std::string_view text) const;
  std::string decode(std::span<const Token> tokens) const;

  // Reserved tokens.
  Token eos() const { return eos_; }
  Token sep() const { return sep_; }
  Token qmark() const { return qmark_; }
  Token yes() const { return yes_; }
  Token no() const { return no_; }

 private:
  Vocab();
  std::vector<std::string> words_;
  Token eos_, sep_, qmark_, yes_, no_;
};

}  // namespace mmpref
