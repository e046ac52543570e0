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

#include "mmpref/autodiff.hpp"
#include "mmpref/rng.hpp"

#include <nlohmann/json.hpp>

#include <array>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace mmpref {

enum class Shape { square, circle, triangle };
enum class Color { red, blue, green, yellow };

inline constexpr std::array<Shape, 3> kShapes = {Shape::square, Shape::circle, Shape::triangle};
inline constexpr std::array<Color, 4> kColors = {Color::red, Color::blue, Color::green, Color::yellow};

std::string_view name(Shape s);
std::string_view name(Color c);
Shape shape_from(std::string_view s);
Color color_from(std::string_view s);

struct Object {
  Shape shape;
  Color color;
  friend bool operator==(const Object&, const Object&) = default;
  friend auto operator<=>(const Object&, const Object&) = default;
};

struct Fact {
  Object object;
  int row;
  int col;
  friend bool operator==(const Fact&, const Fact&) = default;
};

/// Cell features: occupied, one-hot shape, one-hot color, one-hot
/// (shape, color) identity.
inline constexpr int kFeatureDim = 1 + 3 + 4 + 12;

/// Image as a (cells × kFeatureDim) real array in row-major cell order.
using ToyImage = ad::Matrix<double>;

class WorldError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Grid of optional objects. Each shape occurs at most once, so every
/// question the template language can ask has one answer.
class ToyWorld {
 public:
  inline static constexpr int kMaxSide = 8;

  ToyWorld(std::string id, int height, int width);

  const std::string& id() const { return id_; }
  int height() const { return height_; }
  int width() const { return width_; }
  int cells() const { return height_ * width_; }

  void place(int row, int col, Object obj);
  const std::optional<Object>& at(int row, int col) const;

  /// Ground-truth facts in row-major order.
  std::vector<Fact> facts() const;
  std::optional<Fact> find(Shape s) const;
  bool contains(const Object& obj) const;
  int object_count() const;

  ToyImage image() const;

  /// Throws WorldError unless at least one cell is occupied.
  void validate() const;

  nlohmann::json to_json() const;
  static ToyWorld from_json(const nlohmann::json& j);

 private:
  std::string id_;
  int height_, width_;
  std::vector<std::optional<Object>> grid_;
};

struct WorldGenParams {
  int height = 4;
  int width = 4;
  int min_objects = 1;
  int max_objects = 3;
  /// Probability that a square is red; the other colors share the rest.
  double red_square_bias = 0.9;
};

/// Random world; `must_include` forces one object (placed at a random cell).
ToyWorld generate_world(std::string id, const WorldGenParams& params, Rng& rng,
                        std::optional<Object> must_include = std::nullopt);

/// Directory of `<id>.json` grid files.
class WorldStore {
 public:
  void add(ToyWorld w);
  const ToyWorld& get(const std::string& id) const;
  bool contains(const std::string& id) const { return worlds_.count(id) != 0; }
  std::size_t size() const { return worlds_.size(); }
  std::vector<const ToyWorld*> all() const;

  void save(const std::filesystem::path& dir) const;
  static WorldStore load(const std::filesystem::path& dir);

 private:
  std::map<std::string, ToyWorld> worlds_;
};

}  // namespace mmpref
