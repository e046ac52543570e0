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

#include "mmpref/world.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

namespace mmpref {

std::string_view name(Shape s) {
  switch (s) {
    case Shape::square: return "square";
    case Shape::circle: return "circle";
    case Shape::triangle: return "triangle";
  }
  return "?";
}

std::string_view name(Color c) {
  switch (c) {
    case Color::red: return "red";
    case Color::blue: return "blue";
    case Color::green: return "green";
    case Color::yellow: return "yellow";
  }
  return "?";
}

Shape shape_from(std::string_view s) {
  for (Shape x : kShapes)
    if (name(x) == s) return x;
  throw WorldError("unknown shape '" + std::string(s) + "'");
}

Color color_from(std::string_view s) {
  for (Color x : kColors)
    if (name(x) == s) return x;
  throw WorldError("unknown color '" + std::string(s) + "'");
}

ToyWorld::ToyWorld(std::string id, int height, int width)
    : id_(std::move(id)), height_(height), width_(width) {
  if (height < 1 || width < 1 || height > kMaxSide || width > kMaxSide)
    throw WorldError("grid size out of range: " + std::to_string(height) + "x" + std::to_string(width));
  grid_.resize(static_cast<std::size_t>(height * width));
}

void ToyWorld::place(int row, int col, Object obj) {
  if (row < 0 || row >= height_ || col < 0 || col >= width_)
    throw WorldError("cell out of range in world " + id_);
  if (at(row, col)) throw WorldError("cell already occupied in world " + id_);
  if (find(obj.shape)) throw WorldError("shape placed twice in world " + id_);
  grid_[static_cast<std::size_t>(row * width_ + col)] = obj;
}

const std::optional<Object>& ToyWorld::at(int row, int col) const {
  return grid_[static_cast<std::size_t>(row * width_ + col)];
}

std::vector<Fact> ToyWorld::facts() const {
  std::vector<Fact> out;
  for (int r = 0; r < height_; ++r)
    for (int c = 0; c < width_; ++c)
      if (const auto& o = at(r, c)) out.push_back({*o, r, c});
  return out;
}

std::optional<Fact> ToyWorld::find(Shape s) const {
  for (const Fact& f : facts())
    if (f.object.shape == s) return f;
  return std::nullopt;
}

bool ToyWorld::contains(const Object& obj) const {
  auto f = find(obj.shape);
  return f && f->object.color == obj.color;
}

int ToyWorld::object_count() const {
  return static_cast<int>(std::count_if(grid_.begin(), grid_.end(), [](const auto& o) { return o.has_value(); }));
}

ToyImage ToyWorld::image() const {
  ToyImage img = ToyImage::Zero(cells(), kFeatureDim);
  for (int i = 0; i < cells(); ++i) {
    const auto& o = grid_[static_cast<std::size_t>(i)];
    if (!o) continue;
    img(i, 0) = 1.0;
    img(i, 1 + static_cast<int>(o->shape)) = 1.0;
    img(i, 4 + static_cast<int>(o->color)) = 1.0;
    img(i, 8 + 4 * static_cast<int>(o->shape) + static_cast<int>(o->color)) = 1.0;
  }
  return img;
}

void ToyWorld::validate() const {
  if (object_count() == 0) throw WorldError("world " + id_ + " has no objects");
}

nlohmann::json ToyWorld::to_json() const {
  nlohmann::json cells_json = nlohmann::json::array();
  for (int r = 0; r < height_; ++r) {
    nlohmann::json row = nlohmann::json::array();
    for (int c = 0; c < width_; ++c) {
      const auto& o = at(r, c);
      if (o)
        row.push_back({{"color", name(o->color)}, {"shape", name(o->shape)}});
      else
        row.push_back(nullptr);
    }
    cells_json.push_back(std::move(row));
  }
  return {{"id", id_}, {"height", height_}, {"width", width_}, {"cells", std::move(cells_json)}};
}

ToyWorld ToyWorld::from_json(const nlohmann::json& j) {
  ToyWorld w(j.at("id").get<std::string>(), j.at("height").get<int>(), j.at("width").get<int>());
  const auto& cells = j.at("cells");
  if (!cells.is_array() || static_cast<int>(cells.size()) != w.height_)
    throw WorldError("world " + w.id_ + ": cells must have `height` rows");
  for (int r = 0; r < w.height_; ++r) {
    const auto& row = cells[static_cast<std::size_t>(r)];
    if (!row.is_array() || static_cast<int>(row.size()) != w.width_)
      throw WorldError("world " + w.id_ + ": row width mismatch");
    for (int c = 0; c < w.width_; ++c) {
      const auto& cell = row[static_cast<std::size_t>(c)];
      if (cell.is_null()) continue;
      w.place(r, c, {shape_from(cell.at("shape").get<std::string>()),
                     color_from(cell.at("color").get<std::string>())});
    }
  }
  w.validate();
  return w;
}

ToyWorld generate_world(std::string id, const WorldGenParams& params, Rng& rng,
                        std::optional<Object> must_include) {
  if (params.min_objects < 1 || params.max_objects > 3 || params.min_objects > params.max_objects)
    throw WorldError("object count range must lie within [1, 3]");
  if (params.height * params.width < params.max_objects) throw WorldError("grid too small");
  ToyWorld w(std::move(id), params.height, params.width);

  const int n = std::uniform_int_distribution<int>(params.min_objects, params.max_objects)(rng);
  std::vector<Shape> shapes(kShapes.begin(), kShapes.end());
  std::shuffle(shapes.begin(), shapes.end(), rng);
  if (must_include) {
    std::erase(shapes, must_include->shape);
    shapes.insert(shapes.begin(), must_include->shape);
  }
  shapes.resize(static_cast<std::size_t>(std::max(n, must_include ? 1 : 0)));

  std::vector<int> cells(static_cast<std::size_t>(w.cells()));
  std::iota(cells.begin(), cells.end(), 0);
  std::shuffle(cells.begin(), cells.end(), rng);

  for (std::size_t i = 0; i < shapes.size(); ++i) {
    Color color;
    if (must_include && i == 0) {
      color = must_include->color;
    } else if (shapes[i] == Shape::square) {
      if (bernoulli(rng, params.red_square_bias)) {
        color = Color::red;
      } else {
        const int k = std::uniform_int_distribution<int>(1, 3)(rng);
        color = kColors[static_cast<std::size_t>(k)];
      }
    } else {
      color = kColors[static_cast<std::size_t>(std::uniform_int_distribution<int>(0, 3)(rng))];
    }
    const int cell = cells[i];
    w.place(cell / w.width(), cell % w.width(), {shapes[i], color});
  }
  return w;
}

void WorldStore::add(ToyWorld w) {
  w.validate();
  const std::string id = w.id();
  if (!worlds_.emplace(id, std::move(w)).second) throw WorldError("duplicate world id " + id);
}

const ToyWorld& WorldStore::get(const std::string& id) const {
  auto it = worlds_.find(id);
  if (it == worlds_.end()) throw WorldError("world '" + id + "' not in store");
  return it->second;
}

std::vector<const ToyWorld*> WorldStore::all() const {
  std::vector<const ToyWorld*> out;
  for (const auto& [_, w] : worlds_) out.push_back(&w);
  return out;
}

void WorldStore::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  for (const auto& [id, w] : worlds_) {
    std::ofstream os(dir / (id + ".json"), std::ios::binary);
    os << w.to_json().dump() << '\n';
  }
}

WorldStore WorldStore::load(const std::filesystem::path& dir) {
  WorldStore store;
  if (!std::filesystem::exists(dir)) throw WorldError("world store " + dir.string() + " does not exist");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir))
    if (e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  for (const auto& f : files) {
    std::ifstream is(f);
    try {
      store.add(ToyWorld::from_json(nlohmann::json::parse(is)));
    } catch (const nlohmann::json::exception& e) {
      throw WorldError(f.string() + ": " + e.what());
    }
  }
  return store;
}

}  // namespace mmpref
