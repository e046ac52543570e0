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

// Minimal reverse-mode differentiation over dense row-major matrices.
//
// A Tape owns every intermediate value. Tensors are light handles (tape,
// index) into it. Nodes are appended in evaluation order, so parents always
// precede children and a single reverse sweep visits each node once.
//
// Broadcasting is limited to scalar-with-tensor; anything else needs an
// explicit op.

#include <Eigen/Dense>

#include <array>
#include <cmath>
#include <cstddef>
#include <deque>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace mmpref::ad {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Index = Eigen::Index;

/// Added to attention scores of hidden keys before the softmax.
inline constexpr double kMaskedScore = -1e9;

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <typename Scalar>
class Tape;

template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  /// Zero matrix of matching shape until backward has reached this node.
  Matrix<Scalar> grad() const { return tape_->grad(id_); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
  std::array<Index, 2> shape() const { return {rows(), cols()}; }
  Index size() const { return value().size(); }
  Scalar item() const {
    if (size() != 1) throw ShapeError("item: tensor is not a scalar");
    return value()(0, 0);
  }

  Tape<Scalar>* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using TensorT = Tensor<Scalar>;
  /// Reads the node's accumulated gradient and pushes contributions to parents.
  using BackwardFn = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf owning its value.
  TensorT leaf(Mat value, bool requires_grad = true) {
    Node n;
    n.owned = std::move(value);
    n.requires_grad = requires_grad;
    n.op = "leaf";
    return push(std::move(n));
  }

  TensorT constant(Mat value) { return leaf(std::move(value), false); }

  TensorT scalar(Scalar v, bool requires_grad = false) {
    Mat m(1, 1);
    m(0, 0) = v;
    return leaf(std::move(m), requires_grad);
  }

  /// Leaf referring to storage that must outlive the tape (model parameters).
  TensorT view(const Mat& value, bool requires_grad) {
    Node n;
    n.external = &value;
    n.requires_grad = requires_grad;
    n.op = "view";
    return push(std::move(n));
  }

  /// Appends an op result. The backward closure is kept only when some parent
  /// requires a gradient.
  TensorT record(const char* op, Mat value, std::vector<int> parents, BackwardFn fn) {
    Node n;
    n.owned = std::move(value);
    n.op = op;
    for (int p : parents) n.requires_grad = n.requires_grad || nodes_[p].requires_grad;
    if (n.requires_grad) {
      n.parents = std::move(parents);
      n.backward = std::move(fn);
    }
    return push(std::move(n));
  }

  void backward(const TensorT& loss) {
    if (loss.tape() != this) throw TapeError("backward: tensor belongs to another tape");
    if (consumed_) throw TapeError("backward: tape already consumed");
    if (nodes_.empty()) throw TapeError("backward: empty tape");
    const Mat& v = value(loss.id());
    if (v.rows() != 1 || v.cols() != 1) {
      std::ostringstream os;
      os << "backward: loss must be scalar, got [" << v.rows() << "x" << v.cols() << "]";
      throw ShapeError(os.str());
    }
    consumed_ = true;
    if (!nodes_[loss.id()].requires_grad) return;
    grad_ref(loss.id()).setOnes();
    for (int i = loss.id(); i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.has_grad || !n.backward) continue;
      n.backward(*this, i);
    }
  }

  const Mat& value(int id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.owned;
  }

  Mat grad(int id) const {
    const Node& n = nodes_[id];
    if (n.has_grad) return n.grad;
    const Mat& v = value(id);
    return Mat::Zero(v.rows(), v.cols());
  }

  const Mat& upstream(int id) const { return nodes_[id].grad; }

  bool requires_grad(int id) const { return nodes_[id].requires_grad; }
  int parent(int id, std::size_t k) const { return nodes_[id].parents[k]; }
  const char* op(int id) const { return nodes_[id].op; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Adds `delta` into the gradient of node `id` if it participates.
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& delta) {
    if (!nodes_[id].requires_grad) return;
    grad_ref(id) += delta;
  }

  void accumulate_scalar(int id, Scalar delta) {
    if (!nodes_[id].requires_grad) return;
    grad_ref(id).array() += delta;
  }

  void reset() {
    nodes_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    Mat owned;
    const Mat* external = nullptr;
    Mat grad;
    bool has_grad = false;
    bool requires_grad = false;
    std::vector<int> parents;
    BackwardFn backward;
    const char* op = "";
  };

  TensorT push(Node n) {
    if (consumed_) throw TapeError("record: tape already consumed");
    nodes_.push_back(std::move(n));
    return TensorT(this, static_cast<int>(nodes_.size() - 1));
  }

  Mat& grad_ref(int id) {
    Node& n = nodes_[id];
    if (!n.has_grad) {
      const Mat& v = n.external ? *n.external : n.owned;
      n.grad = Mat::Zero(v.rows(), v.cols());
      n.has_grad = true;
    }
    return n.grad;
  }

  // deque keeps references to existing nodes stable across push_back.
  std::deque<Node> nodes_;
  bool consumed_ = false;
};

namespace detail {

template <typename Scalar>
std::string shape_str(const Tensor<Scalar>& t) {
  std::ostringstream os;
  os << "[" << t.rows() << "x" << t.cols() << "]";
  return os.str();
}

template <typename Scalar>
[[noreturn]] void shape_fail(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}

template <typename Scalar>
Tape<Scalar>& same_tape(const char* op, const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.tape() != b.tape()) throw TapeError(std::string(op) + ": operands on different tapes");
  return *a.tape();
}

template <typename Scalar>
bool is_scalar(const Tensor<Scalar>& t) {
  return t.rows() == 1 && t.cols() == 1;
}

// Elementwise unary op given value map f and local derivative df(x, y).
template <typename Scalar, typename F, typename DF>
Tensor<Scalar> unary(const char* op, const Tensor<Scalar>& a, F f, DF df) {
  Tape<Scalar>& tape = *a.tape();
  Matrix<Scalar> out = a.value().unaryExpr(f);
  const int ia = a.id();
  return tape.record(op, std::move(out), {ia}, [ia, df](Tape<Scalar>& t, int self) {
    const auto& x = t.value(ia);
    const auto& y = t.value(self);
    Matrix<Scalar> local = x.binaryExpr(y, df);
    t.accumulate(ia, t.upstream(self).cwiseProduct(local));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape("matmul", a, b);
  if (a.cols() != b.rows()) detail::shape_fail("matmul", a, b);
  Matrix<Scalar> out = a.value() * b.value();
  const int ia = a.id(), ib = b.id();
  return tape.record("matmul", std::move(out), {ia, ib}, [ia, ib](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape("add", a, b);
  const int ia = a.id(), ib = b.id();
  if (a.shape() == b.shape()) {
    Matrix<Scalar> out = a.value() + b.value();
    return tape.record("add", std::move(out), {ia, ib}, [ia, ib](Tape<Scalar>& t, int self) {
      t.accumulate(ia, t.upstream(self));
      t.accumulate(ib, t.upstream(self));
    });
  }
  if (detail::is_scalar(b)) {
    Matrix<Scalar> out = a.value().array() + b.item();
    return tape.record("add", std::move(out), {ia, ib}, [ia, ib](Tape<Scalar>& t, int self) {
      t.accumulate(ia, t.upstream(self));
      t.accumulate_scalar(ib, t.upstream(self).sum());
    });
  }
  if (detail::is_scalar(a)) return add(b, a);
  detail::shape_fail("add", a, b);
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape("sub", a, b);
  const int ia = a.id(), ib = b.id();
  if (a.shape() == b.shape()) {
    Matrix<Scalar> out = a.value() - b.value();
    return tape.record("sub", std::move(out), {ia, ib}, [ia, ib](Tape<Scalar>& t, int self) {
      t.accumulate(ia, t.upstream(self));
      t.accumulate(ib, -t.upstream(self));
    });
  }
  if (detail::is_scalar(b)) {
    Matrix<Scalar> out = a.value().array() - b.item();
    return tape.record("sub", std::move(out), {ia, ib}, [ia, ib](Tape<Scalar>& t, int self) {
      t.accumulate(ia, t.upstream(self));
      t.accumulate_scalar(ib, -t.upstream(self).sum());
    });
  }
  if (detail::is_scalar(a)) {
    Matrix<Scalar> out = (-b.value().array() + a.item()).matrix();
    return tape.record("sub", std::move(out), {ia, ib}, [ia, ib](Tape<Scalar>& t, int self) {
      t.accumulate_scalar(ia, t.upstream(self).sum());
      t.accumulate(ib, -t.upstream(self));
    });
  }
  detail::shape_fail("sub", a, b);
}

/// Elementwise (Hadamard) product.
template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape("mul", a, b);
  const int ia = a.id(), ib = b.id();
  if (a.shape() == b.shape()) {
    Matrix<Scalar> out = a.value().cwiseProduct(b.value());
    return tape.record("mul", std::move(out), {ia, ib}, [ia, ib](Tape<Scalar>& t, int self) {
      const auto& g = t.upstream(self);
      if (t.requires_grad(ia)) t.accumulate(ia, g.cwiseProduct(t.value(ib)));
      if (t.requires_grad(ib)) t.accumulate(ib, g.cwiseProduct(t.value(ia)));
    });
  }
  if (detail::is_scalar(b)) {
    Matrix<Scalar> out = a.value() * b.item();
    return tape.record("mul", std::move(out), {ia, ib}, [ia, ib](Tape<Scalar>& t, int self) {
      const auto& g = t.upstream(self);
      if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib)(0, 0));
      if (t.requires_grad(ib)) t.accumulate_scalar(ib, g.cwiseProduct(t.value(ia)).sum());
    });
  }
  if (detail::is_scalar(a)) return mul(b, a);
  detail::shape_fail("mul", a, b);
}

/// Multiplication by a constant.
template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar c) {
  Matrix<Scalar> out = a.value() * c;
  const int ia = a.id();
  return a.tape()->record("scale", std::move(out), {ia}, [ia, c](Tape<Scalar>& t, int self) {
    t.accumulate(ia, t.upstream(self) * c);
  });
}

/// Addition of a constant.
template <typename Scalar>
Tensor<Scalar> shift(const Tensor<Scalar>& a, Scalar c) {
  Matrix<Scalar> out = a.value().array() + c;
  const int ia = a.id();
  return a.tape()->record("shift", std::move(out), {ia}, [ia](Tape<Scalar>& t, int self) {
    t.accumulate(ia, t.upstream(self));
  });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a) { return scale(a, Scalar(-1)); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar c, const Tensor<Scalar>& a) { return scale(a, c); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, Scalar c) { return scale(a, c); }

// ---------------------------------------------------------------------------
// Elementwise nonlinearities

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& a) {
  return detail::unary(
      "exp", a, [](Scalar x) { return std::exp(x); }, [](Scalar, Scalar y) { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& a) {
  return detail::unary(
      "log", a, [](Scalar x) { return std::log(x); }, [](Scalar x, Scalar) { return Scalar(1) / x; });
}

template <typename Scalar>
Scalar stable_sigmoid(Scalar x) {
  if (x >= 0) return Scalar(1) / (Scalar(1) + std::exp(-x));
  const Scalar e = std::exp(x);
  return e / (Scalar(1) + e);
}

/// log(1 + exp(x)) without overflow.
template <typename Scalar>
Scalar softplus(Scalar x) {
  return x > 0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x));
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& a) {
  return detail::unary(
      "sigmoid", a, [](Scalar x) { return stable_sigmoid(x); },
      [](Scalar, Scalar y) { return y * (Scalar(1) - y); });
}

/// log σ(x), computed as −softplus(−x).
template <typename Scalar>
Tensor<Scalar> log_sigmoid(const Tensor<Scalar>& a) {
  return detail::unary(
      "log_sigmoid", a, [](Scalar x) { return -softplus(-x); },
      [](Scalar x, Scalar) { return Scalar(1) - stable_sigmoid(x); });
}

/// max(0, x); the subgradient at 0 is taken as 0.
template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& a) {
  return detail::unary(
      "relu", a, [](Scalar x) { return x > 0 ? x : Scalar(0); },
      [](Scalar x, Scalar) { return x > 0 ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& a) {
  return detail::unary(
      "square", a, [](Scalar x) { return x * x; }, [](Scalar x, Scalar) { return Scalar(2) * x; });
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& a) {
  Matrix<Scalar> out(1, 1);
  out(0, 0) = a.value().sum();
  const int ia = a.id();
  return a.tape()->record("sum", std::move(out), {ia}, [ia](Tape<Scalar>& t, int self) {
    t.accumulate_scalar(ia, t.upstream(self)(0, 0));
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  Matrix<Scalar> out(1, 1);
  const Scalar n = static_cast<Scalar>(a.size());
  out(0, 0) = a.value().sum() / n;
  const int ia = a.id();
  return a.tape()->record("mean", std::move(out), {ia}, [ia, n](Tape<Scalar>& t, int self) {
    t.accumulate_scalar(ia, t.upstream(self)(0, 0) / n);
  });
}

// ---------------------------------------------------------------------------
// Row-wise ops

template <typename Scalar>
Tensor<Scalar> softmax_rows(const Tensor<Scalar>& a) {
  const auto& x = a.value();
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    out.row(r) = (x.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  const int ia = a.id();
  return a.tape()->record("softmax", std::move(out), {ia}, [ia](Tape<Scalar>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.upstream(self);
    Matrix<Scalar> dx(y.rows(), y.cols());
    for (Index r = 0; r < y.rows(); ++r) {
      const Scalar dot = g.row(r).dot(y.row(r));
      dx.row(r) = (y.row(r).array() * (g.row(r).array() - dot)).matrix();
    }
    t.accumulate(ia, dx);
  });
}

template <typename Scalar>
Tensor<Scalar> log_softmax_rows(const Tensor<Scalar>& a) {
  const auto& x = a.value();
  Matrix<Scalar> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const Scalar m = x.row(r).maxCoeff();
    const Scalar lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = (x.row(r).array() - lse).matrix();
  }
  const int ia = a.id();
  return a.tape()->record("log_softmax", std::move(out), {ia}, [ia](Tape<Scalar>& t, int self) {
    const auto& y = t.value(self);
    const auto& g = t.upstream(self);
    Matrix<Scalar> dx(y.rows(), y.cols());
    for (Index r = 0; r < y.rows(); ++r) {
      const Scalar gs = g.row(r).sum();
      dx.row(r) = (g.row(r).array() - y.row(r).array().exp() * gs).matrix();
    }
    t.accumulate(ia, dx);
  });
}

/// x_ij / rms(x_i) * gain_j, gain is 1×cols.
template <typename Scalar>
Tensor<Scalar> rms_norm_rows(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                             Scalar eps = Scalar(1e-6)) {
  Tape<Scalar>& tape = detail::same_tape("rms_norm", x, gain);
  if (gain.rows() != 1 || gain.cols() != x.cols()) detail::shape_fail("rms_norm", x, gain);
  const auto& xv = x.value();
  const Index d = xv.cols();
  Eigen::Matrix<Scalar, Eigen::Dynamic, 1> inv_rms(xv.rows());
  for (Index r = 0; r < xv.rows(); ++r)
    inv_rms(r) = Scalar(1) / std::sqrt(xv.row(r).squaredNorm() / Scalar(d) + eps);
  Matrix<Scalar> out = inv_rms.asDiagonal() * xv;
  out = out * gain.value().row(0).asDiagonal();
  const int ix = x.id(), ig = gain.id();
  return tape.record("rms_norm", std::move(out), {ix, ig},
                     [ix, ig, inv_rms, d](Tape<Scalar>& t, int self) {
                       const auto& xv = t.value(ix);
                       const auto& gv = t.value(ig);
                       const auto& g = t.upstream(self);
                       if (t.requires_grad(ig)) {
                         Matrix<Scalar> normed = inv_rms.asDiagonal() * xv;
                         t.accumulate(ig, g.cwiseProduct(normed).colwise().sum());
                       }
                       if (t.requires_grad(ix)) {
                         Matrix<Scalar> gg = g * gv.row(0).asDiagonal();
                         Matrix<Scalar> dx(xv.rows(), xv.cols());
                         for (Index r = 0; r < xv.rows(); ++r) {
                           const Scalar s = inv_rms(r);
                           const Scalar proj = gg.row(r).dot(xv.row(r));
                           dx.row(r) = gg.row(r) * s - xv.row(r) * (proj * s * s * s / Scalar(d));
                         }
                         t.accumulate(ix, dx);
                       }
                     });
}

// ---------------------------------------------------------------------------
// Indexing and layout

/// Gathers rows of `table` by id.
template <typename Scalar>
Tensor<Scalar> embedding(const Tensor<Scalar>& table, const std::vector<int>& ids) {
  const auto& tv = table.value();
  Matrix<Scalar> out(static_cast<Index>(ids.size()), tv.cols());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= tv.rows()) {
      std::ostringstream os;
      os << "embedding: id " << ids[i] << " out of range for table " << detail::shape_str(table);
      throw ShapeError(os.str());
    }
    out.row(static_cast<Index>(i)) = tv.row(ids[i]);
  }
  const int it = table.id();
  return table.tape()->record("embedding", std::move(out), {it}, [it, ids](Tape<Scalar>& t, int self) {
    if (!t.requires_grad(it)) return;
    const auto& g = t.upstream(self);
    const auto& tv = t.value(it);
    Matrix<Scalar> dt = Matrix<Scalar>::Zero(tv.rows(), tv.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) dt.row(ids[i]) += g.row(static_cast<Index>(i));
    t.accumulate(it, dt);
  });
}

/// Column vector of a(rows[i], cols[i]).
template <typename Scalar>
Tensor<Scalar> pick(const Tensor<Scalar>& a, const std::vector<std::pair<int, int>>& at) {
  const auto& av = a.value();
  Matrix<Scalar> out(static_cast<Index>(at.size()), 1);
  for (std::size_t i = 0; i < at.size(); ++i) {
    const auto [r, c] = at[i];
    if (r < 0 || r >= av.rows() || c < 0 || c >= av.cols()) {
      std::ostringstream os;
      os << "pick: index (" << r << "," << c << ") outside " << detail::shape_str(a);
      throw ShapeError(os.str());
    }
    out(static_cast<Index>(i), 0) = av(r, c);
  }
  const int ia = a.id();
  return a.tape()->record("pick", std::move(out), {ia}, [ia, at](Tape<Scalar>& t, int self) {
    if (!t.requires_grad(ia)) return;
    const auto& g = t.upstream(self);
    const auto& av = t.value(ia);
    Matrix<Scalar> da = Matrix<Scalar>::Zero(av.rows(), av.cols());
    for (std::size_t i = 0; i < at.size(); ++i) da(at[i].first, at[i].second) += g(static_cast<Index>(i), 0);
    t.accumulate(ia, da);
  });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& a, Index start, Index count) {
  if (start < 0 || count < 0 || start + count > a.rows()) {
    std::ostringstream os;
    os << "slice_rows: [" << start << "," << start + count << ") outside " << detail::shape_str(a);
    throw ShapeError(os.str());
  }
  Matrix<Scalar> out = a.value().middleRows(start, count);
  const int ia = a.id();
  return a.tape()->record("slice_rows", std::move(out), {ia},
                          [ia, start, count](Tape<Scalar>& t, int self) {
                            const auto& av = t.value(ia);
                            Matrix<Scalar> da = Matrix<Scalar>::Zero(av.rows(), av.cols());
                            da.middleRows(start, count) = t.upstream(self);
                            t.accumulate(ia, da);
                          });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape("concat_rows", a, b);
  if (a.cols() != b.cols()) detail::shape_fail("concat_rows", a, b);
  Matrix<Scalar> out(a.rows() + b.rows(), a.cols());
  out << a.value(), b.value();
  const int ia = a.id(), ib = b.id();
  const Index ra = a.rows(), rb = b.rows();
  return tape.record("concat_rows", std::move(out), {ia, ib}, [=](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    t.accumulate(ia, g.topRows(ra));
    t.accumulate(ib, g.bottomRows(rb));
  });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape("concat_cols", a, b);
  if (a.rows() != b.rows()) detail::shape_fail("concat_cols", a, b);
  Matrix<Scalar> out(a.rows(), a.cols() + b.cols());
  out << a.value(), b.value();
  const int ia = a.id(), ib = b.id();
  const Index ca = a.cols(), cb = b.cols();
  return tape.record("concat_cols", std::move(out), {ia, ib}, [=](Tape<Scalar>& t, int self) {
    const auto& g = t.upstream(self);
    t.accumulate(ia, g.leftCols(ca));
    t.accumulate(ib, g.rightCols(cb));
  });
}

// ---------------------------------------------------------------------------
// Attention

/// Key layout for text queries attending to [memory ∥ text].
///
/// The first `memory_visible.size()` keys are memory (image) tokens, visible
/// to every query iff their flag is set. The remaining keys are text tokens
/// under a causal rule: query t sees text key j iff j <= t.
struct KeyLayout {
  std::vector<bool> memory_visible;
};

/// (q kᵀ) / sqrt(head_dim) plus kMaskedScore on hidden keys.
template <typename Scalar>
Tensor<Scalar> masked_attention_scores(const Tensor<Scalar>& q, const Tensor<Scalar>& k,
                                       const KeyLayout& layout) {
  Tape<Scalar>& tape = detail::same_tape("masked_attention_scores", q, k);
  const Index n_mem = static_cast<Index>(layout.memory_visible.size());
  if (q.cols() != k.cols() || k.rows() != n_mem + q.rows())
    detail::shape_fail("masked_attention_scores", q, k);
  const Scalar s = Scalar(1) / std::sqrt(static_cast<Scalar>(q.cols()));
  Matrix<Scalar> out = (q.value() * k.value().transpose()) * s;
  for (Index j = 0; j < n_mem; ++j)
    if (!layout.memory_visible[static_cast<std::size_t>(j)]) out.col(j).array() += Scalar(kMaskedScore);
  for (Index t = 0; t < q.rows(); ++t)
    for (Index j = t + 1; j < q.rows(); ++j) out(t, n_mem + j) += Scalar(kMaskedScore);
  const int iq = q.id(), ik = k.id();
  return tape.record("masked_attention_scores", std::move(out), {iq, ik},
                     [iq, ik, s](Tape<Scalar>& t, int self) {
                       const auto& g = t.upstream(self);
                       if (t.requires_grad(iq)) t.accumulate(iq, (g * t.value(ik)) * s);
                       if (t.requires_grad(ik)) t.accumulate(ik, (g.transpose() * t.value(iq)) * s);
                     });
}

}  // namespace mmpref::ad
