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

#include "support.hpp"

namespace mmpref::test {

const Trained& trained() {
  static const Trained t = [] {
    Trained out;
    Rng rng = substream(20, "fixture-worlds");
    for (int i = 0; i < 600; ++i) {
      const std::string id = (i < 400 ? "f" : "h") + std::to_string(i);
      out.worlds.add(generate_world(id, {}, rng));
      (i < 400 ? out.train_ids : out.held_out_ids).push_back(id);
    }
    for (const auto& id : out.train_ids) {
      auto r = sft_records(out.worlds.get(id), rng);
      out.corpus.insert(out.corpus.end(), r.begin(), r.end());
    }
    PolicyConfig pc;
    pc.init_seed = 21;
    SftConfig sc;
    sc.epochs = 12;
    sc.seed = 22;
    sc.image_dropout = 0.15;
    out.policy = sft_train(Policy(pc), out.corpus, out.worlds, sc).policy;
    return out;
  }();
  return t;
}

std::filesystem::path scratch_dir(const std::string& name) {
  std::filesystem::path p = std::filesystem::temp_directory_path() / ("mmpref-test-" + name);
  std::filesystem::remove_all(p);
  return p;
}

}  // namespace mmpref::test
