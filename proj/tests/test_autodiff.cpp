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

#include "mmpref/autodiff.hpp"
#include "mmpref/gradcheck.hpp"
#include "mmpref/rng.hpp"

#include <doctest.h>

#include <cmath>

using namespace mmpref;
using namespace mmpref::ad;
using M = Matrix<double>;

namespace {

M scalar(double v) {
  M m(1, 1);
  m(0, 0) = v;
  return m;
}

M random(int r, int c, std::uint64_t seed) {
  Rng rng = substream(seed, "autodiff-test");
  M m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = 2.0 * uniform01(rng) - 1.0;
  return m;
}

}  // namespace

TEST_CASE("forward values of the elementwise primitives") {
  Tape<double> t;
  CHECK(sigmoid(t.leaf(scalar(0.0))).item() == 0.5);
  CHECK(log(exp(t.leaf(scalar(1.5)))).item() == doctest::Approx(1.5).epsilon(1e-15));
  M zeros = M::Zero(1, 3);
  const M sm = softmax_rows(t.leaf(zeros)).value();
  for (int j = 0; j < 3; ++j) CHECK(sm(0, j) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(relu(t.leaf(scalar(-2.0))).item() == 0.0);
  CHECK(relu(t.leaf(scalar(2.0))).item() == 2.0);
}

TEST_CASE("softmax rows stay finite for huge logits") {
  Tape<double> t;
  M x(1, 3);
  x << 1000.0, 0.0, kMaskedScore;
  const M sm = softmax_rows(t.leaf(x)).value();
  CHECK(sm(0, 0) == doctest::Approx(1.0));
  CHECK(sm(0, 2) == 0.0);
  const M lsm = log_softmax_rows(t.leaf(x)).value();
  CHECK(std::isfinite(lsm(0, 1)));
  CHECK(lsm(0, 1) == doctest::Approx(-1000.0));
}

TEST_CASE("backward on textbook derivatives") {
  {
    Tape<double> t;
    auto x = t.leaf(scalar(0.0));
    t.backward(sigmoid(x));
    CHECK(x.grad()(0, 0) == doctest::Approx(0.25).epsilon(1e-15));
  }
  {
    Tape<double> t;
    auto x = t.leaf(scalar(0.0));
    t.backward(-log_sigmoid(x));
    CHECK(x.grad()(0, 0) == doctest::Approx(-0.5).epsilon(1e-15));
  }
  {
    Tape<double> t;
    auto x = t.leaf(M::Constant(4, 1, 3.0));
    t.backward(mean(x));
    for (int i = 0; i < 4; ++i) CHECK(x.grad()(i, 0) == 0.25);
  }
}

TEST_CASE("shape errors name the op and the shapes") {
  Tape<double> t;
  auto a = t.leaf(M::Zero(2, 3));
  auto b = t.leaf(M::Zero(2, 3));
  try {
    matmul(a, b);
    FAIL("matmul accepted incompatible shapes");
  } catch (const ShapeError& e) {
    const std::string what = e.what();
    CHECK(what.find("matmul") != std::string::npos);
    CHECK(what.find("2x3") != std::string::npos);
  }
  CHECK_THROWS_AS(add(a, t.leaf(M::Zero(3, 2))), ShapeError);
  CHECK_THROWS_AS(embedding(a, {5}), ShapeError);
}

TEST_CASE("backward rejects non-scalar losses and reuse") {
  Tape<double> t;
  auto a = t.leaf(M::Ones(2, 2));
  CHECK_THROWS_AS(t.backward(a), ShapeError);
  Tape<double> t2;
  auto x = t2.leaf(scalar(1.0));
  auto y = square(x);
  t2.backward(y);
  CHECK(x.grad()(0, 0) == 2.0);
  CHECK_THROWS_AS(t2.backward(y), TapeError);
  Tape<double> other;
  auto z = other.leaf(scalar(1.0));
  CHECK_THROWS_AS(add(x, z), TapeError);
}

TEST_CASE("ops without gradient inputs leave the tape inert") {
  Tape<double> t;
  auto a = t.constant(M::Ones(2, 2));
  auto s = sum(mul(a, a));
  CHECK_FALSE(s.requires_grad());
  t.backward(s);
  CHECK(a.grad().isZero());
}

TEST_CASE("gradients of matmul attention and norm match finite differences") {
  const KeyLayout layout{{true, false, true}};
  LossBuilder<double> attention = [&](Tape<double>&, const std::vector<Tensor<double>>& x) {
    auto scores = masked_attention_scores(x[0], x[1], layout);
    auto w = softmax_rows(scores);
    auto v = matmul(w, x[2]);
    auto n = rms_norm_rows(v, x[3]);
    return mean(square(n));
  };
  const auto r = gradcheck<double>(attention, {random(2, 4, 1), random(5, 4, 2), random(5, 3, 3), random(1, 3, 4)},
                                   1e-5, 1e-6);
  CHECK_MESSAGE(r.passed, "max relative error " << r.max_rel_error);

  LossBuilder<double> lookup = [](Tape<double>&, const std::vector<Tensor<double>>& x) {
    auto e = embedding(x[0], {2, 0, 2});
    auto lp = log_softmax_rows(matmul(e, x[1]));
    return sum(pick(lp, {{0, 1}, {1, 0}, {2, 3}}));
  };
  const auto r2 = gradcheck<double>(lookup, {random(3, 4, 5), random(4, 5, 6)}, 1e-5, 1e-6);
  CHECK_MESSAGE(r2.passed, "max relative error " << r2.max_rel_error);

  LossBuilder<double> layout_ops = [](Tape<double>&, const std::vector<Tensor<double>>& x) {
    auto c = concat_cols(concat_rows(x[0], x[1]), x[2]);
    auto s = slice_rows(c, 1, 2);
    return mean(sigmoid(s) + exp(scale(shift(s, 0.5), 0.1)) + mul(s, s) - relu(s));
  };
  // relu is evaluated away from its kink: inputs lie in (-1, 1) minus a margin.
  M a = random(2, 2, 10), b = random(1, 2, 11), c = random(3, 1, 12);
  for (M* m : {&a, &b, &c})
    for (Index i = 0; i < m->size(); ++i)
      if (std::abs(m->data()[i]) < 0.05) m->data()[i] = 0.5;
  const auto r3 = gradcheck<double>(layout_ops, {a, b, c}, 1e-5, 1e-6);
  CHECK_MESSAGE(r3.passed, "max relative error " << r3.max_rel_error);
}

TEST_CASE("masked keys receive no attention weight and no gradient") {
  Tape<double> t;
  auto q = t.leaf(random(3, 4, 7));
  auto k = t.leaf(random(2 + 3, 4, 8));
  auto w = softmax_rows(masked_attention_scores(q, k, KeyLayout{{false, true}}));
  for (int r = 0; r < 3; ++r) {
    CHECK(w.value()(r, 0) == 0.0);
    for (int j = r + 1; j < 3; ++j) CHECK(w.value()(r, 2 + j) == 0.0);
  }
  t.backward(sum(w * 1.0));
  CHECK(k.grad().row(0).isZero());
}

TEST_CASE("the perturbation hook makes gradcheck fail") {
  LossBuilder<double> f = [](Tape<double>&, const std::vector<Tensor<double>>& x) { return sum(square(x[0])); };
  CHECK(gradcheck<double>(f, {random(3, 1, 9)}).passed);
  CHECK_FALSE(gradcheck<double>(f, {random(3, 1, 9)}, 1e-4, 1e-5, 1e-3).passed);
}

TEST_CASE("the tape works for float scalars") {
  Tape<float> t;
  Matrix<float> m(1, 1);
  m(0, 0) = 0.0f;
  auto x = t.leaf(m);
  t.backward(sigmoid(x));
  CHECK(x.grad()(0, 0) == doctest::Approx(0.25f));
}
