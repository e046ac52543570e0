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

// Shared fixtures: a small world store and a policy fine-tuned on it.

#include "mmpref/grammar.hpp"
#include "mmpref/policy.hpp"
#include "mmpref/train.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace mmpref::test {

struct Trained {
  WorldStore worlds;
  std::vector<std::string> train_ids, held_out_ids;
  std::vector<SftRecord> corpus;
  Policy policy{PolicyConfig{}};
};

/// 400 training worlds plus 200 held out, fine-tuned once per process.
const Trained& trained();

/// Fresh empty directory under the system temp root.
std::filesystem::path scratch_dir(const std::string& name);

}  // namespace mmpref::test
