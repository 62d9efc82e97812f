#pragma once

// Dense float tensors with reverse-mode automatic differentiation.
//
// A Graph records every primitive op it executes (kind, input ids, saved
// state needed for backward) in execution order; backward() walks the record
// once in reverse and accumulates gradients. Parameters live outside the
// graph and are imported as leaves; their gradients accumulate across
// backward calls until the caller zeroes them.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <deque>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "mimn/common.hpp"

namespace mimn {

// Plain n-dimensional value: shape + row-major data.
template <typename S>
class Array {
 public:
  Array() = default;

  explicit Array(std::vector<Index> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(count(shape_)), S(0));
  }

  Array(std::vector<Index> shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (count(shape_) != static_cast<Index>(data_.size())) {
      throw DimensionError("data length " + std::to_string(data_.size()) +
                           " does not match shape " + shape_str(shape_));
    }
  }

  static Array full(std::vector<Index> shape, S v) {
    Array a(std::move(shape));
    std::fill(a.data_.begin(), a.data_.end(), v);
    return a;
  }

  const std::vector<Index>& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return static_cast<Index>(data_.size()); }
  bool empty() const { return data_.empty(); }

  // rank-2 helpers; a rank-1 array is treated as a single row
  Index rows() const { return rank() == 2 ? shape_[0] : 1; }
  Index cols() const { return rank() == 2 ? shape_[1] : (rank() == 1 ? shape_[0] : 1); }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }

  S& operator[](Index i) { return data_[static_cast<size_t>(i)]; }
  S operator[](Index i) const { return data_[static_cast<size_t>(i)]; }

  S& at(Index r, Index c) { return data_[static_cast<size_t>(r * cols() + c)]; }
  S at(Index r, Index c) const { return data_[static_cast<size_t>(r * cols() + c)]; }

  bool same_shape(const Array& o) const { return shape_ == o.shape_; }

  bool all_finite() const {
    for (S v : data_) {
      if (!std::isfinite(static_cast<double>(v))) return false;
    }
    return true;
  }

  static Index count(const std::vector<Index>& shape) {
    Index n = 1;
    for (Index d : shape) {
      if (d <= 0) throw DimensionError("non-positive extent in shape " + shape_str(shape));
      n *= d;
    }
    return n;
  }

 private:
  std::vector<Index> shape_;
  std::vector<S> data_;
};

// A named trainable (or frozen) tensor with persistent gradient storage.
template <typename S>
struct Parameter {
  std::string name;
  Array<S> value;
  Array<S> grad;  // same shape; accumulates across backward calls
  bool trainable = true;

  Parameter(std::string n, Array<S> v, bool train)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()), trainable(train) {}
};

// Named collection of parameters. Registration order is the canonical order
// for snapshots, checkpoints and reports.
template <typename S>
class ParameterSet {
 public:
  Parameter<S>& add(std::string name, Array<S> value, bool trainable = true) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    items_.push_back(std::make_unique<Parameter<S>>(name, std::move(value), trainable));
    index_[items_.back()->name] = items_.size() - 1;
    return *items_.back();
  }

  Parameter<S>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : items_[it->second].get();
  }

  Parameter<S>& at(const std::string& name) {
    Parameter<S>* p = find(name);
    if (!p) throw ContractError("unknown parameter: " + name);
    return *p;
  }

  size_t size() const { return items_.size(); }
  Parameter<S>& operator[](size_t i) { return *items_[i]; }
  const Parameter<S>& operator[](size_t i) const { return *items_[i]; }

  void zero_grads() {
    for (auto& p : items_) {
      std::fill(p->grad.data(), p->grad.data() + p->grad.size(), S(0));
    }
  }

  Index trainable_count() const {
    Index n = 0;
    for (const auto& p : items_) {
      if (p->trainable) n += p->value.size();
    }
    return n;
  }

  std::vector<Array<S>> snapshot_values() const {
    std::vector<Array<S>> out;
    out.reserve(items_.size());
    for (const auto& p : items_) out.push_back(p->value);
    return out;
  }

  void restore_values(const std::vector<Array<S>>& vals) {
    if (vals.size() != items_.size()) throw ContractError("snapshot size mismatch");
    for (size_t i = 0; i < items_.size(); ++i) {
      if (!vals[i].same_shape(items_[i]->value)) throw ContractError("snapshot shape mismatch");
      items_[i]->value = vals[i];
    }
  }

 private:
  std::vector<std::unique_ptr<Parameter<S>>> items_;
  std::unordered_map<std::string, size_t> index_;
};

enum class Op {
  kLeaf,
  kParam,
  kMatmul,
  kMatvec,
  kTranspose,
  kAdd,
  kAddBias,  // [n x h] + [h], bias added to every row
  kSub,
  kMul,
  kAddN,
  kScale,
  kRelu,
  kTanh,
  kSigmoid,
  kSoftmaxMasked,
  kSoftmaxRowsMasked,
  kConcat,
  kSlice,
  kRow,
  kStackRows,
  kMaskRows,
  kReduceMax,
  kReduceMean,
  kSumAll,
  kPick,
  kLog,
  kDropout,
};

template <typename S>
class Graph;

// Lightweight handle to a node in a Graph.
template <typename S>
struct Tensor {
  Graph<S>* graph = nullptr;
  int id = -1;

  bool valid() const { return graph != nullptr && id >= 0; }
  const Array<S>& value() const;
  const Array<S>& grad() const;
  const std::vector<Index>& shape() const { return value().shape(); }
  bool requires_grad() const;
};

template <typename S>
struct Node {
  Op op = Op::kLeaf;
  std::vector<int> inputs;
  Array<S> value;
  Array<S> grad;  // allocated lazily during backward
  bool requires_grad = false;

  std::vector<Index> iaux;    // axis / start / index / argmax rows, op-specific
  std::vector<uint8_t> mask;  // boolean mask where the op needs one
  Array<S> saved;             // saved activations (e.g. dropout keep-mask)
  S scalar = S(0);            // scale factor
  Parameter<S>* param = nullptr;
};

template <typename S>
class Graph {
 public:
  // ---- leaves ----

  // Non-differentiable constant input.
  Tensor<S> constant(Array<S> v) { return input(std::move(v), false); }

  // Ad-hoc leaf; requires_grad leaves collect gradients in-node (used by
  // primitive-level gradient tests).
  Tensor<S> input(Array<S> v, bool requires_grad) {
    Node<S> n;
    n.op = Op::kLeaf;
    n.value = std::move(v);
    n.requires_grad = requires_grad;
    return emplace(std::move(n));
  }

  // Import a parameter. Re-importing the same parameter returns the same
  // node, so each parameter has exactly one leaf per graph.
  Tensor<S> param(Parameter<S>& p) {
    auto it = param_nodes_.find(&p);
    if (it != param_nodes_.end()) return Tensor<S>{this, it->second};
    Node<S> n;
    n.op = Op::kParam;
    n.value = p.value;
    n.requires_grad = p.trainable;
    n.param = &p;
    Tensor<S> t = emplace(std::move(n));
    param_nodes_[&p] = t.id;
    return t;
  }

  // ---- primitives ----

  Tensor<S> matmul(Tensor<S> a, Tensor<S> b) {
    const Array<S>&A = val(a), &B = val(b);
    if (A.rank() != 2 || B.rank() != 2 || A.shape()[1] != B.shape()[0]) {
      throw DimensionError("matmul: incompatible shapes " + shape_str(A.shape()) + " and " +
                           shape_str(B.shape()));
    }
    const Index m = A.shape()[0], k = A.shape()[1], n2 = B.shape()[1];
    Node<S> node = binary(Op::kMatmul, a, b, Array<S>({m, n2}));
    Array<S>& C = node.value;
    for (Index i = 0; i < m; ++i) {
      for (Index kk = 0; kk < k; ++kk) {
        const S av = A.at(i, kk);
        if (av == S(0)) continue;
        const S* brow = B.data() + kk * n2;
        S* crow = C.data() + i * n2;
        for (Index j = 0; j < n2; ++j) crow[j] += av * brow[j];
      }
    }
    return emplace(std::move(node));
  }

  Tensor<S> matvec(Tensor<S> w, Tensor<S> x) {
    const Array<S>&W = val(w), &X = val(x);
    if (W.rank() != 2 || X.rank() != 1 || W.shape()[1] != X.shape()[0]) {
      throw DimensionError("matvec: incompatible shapes " + shape_str(W.shape()) + " and " +
                           shape_str(X.shape()));
    }
    const Index m = W.shape()[0], k = W.shape()[1];
    Node<S> node = binary(Op::kMatvec, w, x, Array<S>({m}));
    for (Index i = 0; i < m; ++i) {
      const S* wrow = W.data() + i * k;
      S acc = S(0);
      for (Index j = 0; j < k; ++j) acc += wrow[j] * X[j];
      node.value[i] = acc;
    }
    return emplace(std::move(node));
  }

  Tensor<S> transpose(Tensor<S> a) {
    const Array<S>& A = val(a);
    if (A.rank() != 2) throw DimensionError("transpose: rank-2 tensor required, got " + shape_str(A.shape()));
    const Index m = A.shape()[0], n = A.shape()[1];
    Node<S> node = unary(Op::kTranspose, a, Array<S>({n, m}));
    for (Index i = 0; i < m; ++i) {
      for (Index j = 0; j < n; ++j) node.value.at(j, i) = A.at(i, j);
    }
    return emplace(std::move(node));
  }

  // Same-shape add, plus the one supported broadcast: [n x h] + [h].
  Tensor<S> add(Tensor<S> a, Tensor<S> b) {
    const Array<S>&A = val(a), &B = val(b);
    if (A.same_shape(B)) {
      Node<S> node = binary(Op::kAdd, a, b, Array<S>(A.shape()));
      for (Index i = 0; i < A.size(); ++i) node.value[i] = A[i] + B[i];
      return emplace(std::move(node));
    }
    if (A.rank() == 2 && B.rank() == 1 && A.shape()[1] == B.shape()[0]) {
      Node<S> node = binary(Op::kAddBias, a, b, Array<S>(A.shape()));
      const Index n = A.shape()[0], h = A.shape()[1];
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < h; ++j) node.value.at(i, j) = A.at(i, j) + B[j];
      }
      return emplace(std::move(node));
    }
    throw DimensionError("add: incompatible shapes " + shape_str(A.shape()) + " and " +
                         shape_str(B.shape()));
  }

  Tensor<S> sub(Tensor<S> a, Tensor<S> b) {
    const Array<S>&A = val(a), &B = val(b);
    if (!A.same_shape(B)) {
      throw DimensionError("sub: incompatible shapes " + shape_str(A.shape()) + " and " +
                           shape_str(B.shape()));
    }
    Node<S> node = binary(Op::kSub, a, b, Array<S>(A.shape()));
    for (Index i = 0; i < A.size(); ++i) node.value[i] = A[i] - B[i];
    return emplace(std::move(node));
  }

  Tensor<S> mul(Tensor<S> a, Tensor<S> b) {
    const Array<S>&A = val(a), &B = val(b);
    if (!A.same_shape(B)) {
      throw DimensionError("mul: incompatible shapes " + shape_str(A.shape()) + " and " +
                           shape_str(B.shape()));
    }
    Node<S> node = binary(Op::kMul, a, b, Array<S>(A.shape()));
    for (Index i = 0; i < A.size(); ++i) node.value[i] = A[i] * B[i];
    return emplace(std::move(node));
  }

  Tensor<S> add_n(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ContractError("add_n: empty input list");
    const Array<S>& first = val(parts[0]);
    Node<S> node;
    node.op = Op::kAddN;
    node.value = Array<S>(first.shape());
    for (const Tensor<S>& t : parts) {
      const Array<S>& A = val(t);
      if (!A.same_shape(first)) {
        throw DimensionError("add_n: incompatible shapes " + shape_str(first.shape()) + " and " +
                             shape_str(A.shape()));
      }
      node.inputs.push_back(t.id);
      node.requires_grad = node.requires_grad || nodes_[t.id].requires_grad;
      for (Index i = 0; i < A.size(); ++i) node.value[i] += A[i];
    }
    return emplace(std::move(node));
  }

  Tensor<S> scale(Tensor<S> a, S c) {
    const Array<S>& A = val(a);
    Node<S> node = unary(Op::kScale, a, Array<S>(A.shape()));
    node.scalar = c;
    for (Index i = 0; i < A.size(); ++i) node.value[i] = c * A[i];
    return emplace(std::move(node));
  }

  Tensor<S> relu(Tensor<S> a) {
    const Array<S>& A = val(a);
    Node<S> node = unary(Op::kRelu, a, Array<S>(A.shape()));
    for (Index i = 0; i < A.size(); ++i) node.value[i] = A[i] > S(0) ? A[i] : S(0);
    return emplace(std::move(node));
  }

  Tensor<S> tanh(Tensor<S> a) {
    const Array<S>& A = val(a);
    Node<S> node = unary(Op::kTanh, a, Array<S>(A.shape()));
    for (Index i = 0; i < A.size(); ++i) node.value[i] = std::tanh(A[i]);
    return emplace(std::move(node));
  }

  Tensor<S> sigmoid(Tensor<S> a) {
    const Array<S>& A = val(a);
    Node<S> node = unary(Op::kSigmoid, a, Array<S>(A.shape()));
    for (Index i = 0; i < A.size(); ++i) node.value[i] = S(1) / (S(1) + std::exp(-A[i]));
    return emplace(std::move(node));
  }

  // Masked positions get exactly 0; unmasked positions are exp-normalized
  // with max subtraction.
  Tensor<S> softmax_masked(Tensor<S> scores, const std::vector<uint8_t>& mask) {
    const Array<S>& A = val(scores);
    if (A.rank() != 1) throw DimensionError("softmax_masked: rank-1 tensor required, got " + shape_str(A.shape()));
    if (static_cast<Index>(mask.size()) != A.size()) {
      throw DimensionError("softmax_masked: mask length " + std::to_string(mask.size()) +
                           " does not match " + shape_str(A.shape()));
    }
    Node<S> node = unary(Op::kSoftmaxMasked, scores, Array<S>(A.shape()));
    node.mask = mask;
    softmax_row(A.data(), node.value.data(), mask, A.size());
    return emplace(std::move(node));
  }

  // Row-wise masked softmax over the columns of a matrix; every row is
  // normalized over the unmasked columns.
  Tensor<S> softmax_rows_masked(Tensor<S> scores, const std::vector<uint8_t>& col_mask) {
    const Array<S>& A = val(scores);
    if (A.rank() != 2) throw DimensionError("softmax_rows_masked: rank-2 tensor required, got " + shape_str(A.shape()));
    if (static_cast<Index>(col_mask.size()) != A.shape()[1]) {
      throw DimensionError("softmax_rows_masked: mask length " + std::to_string(col_mask.size()) +
                           " does not match " + shape_str(A.shape()));
    }
    Node<S> node = unary(Op::kSoftmaxRowsMasked, scores, Array<S>(A.shape()));
    node.mask = col_mask;
    const Index n = A.shape()[0], h = A.shape()[1];
    for (Index i = 0; i < n; ++i) {
      softmax_row(A.data() + i * h, node.value.data() + i * h, col_mask, h);
    }
    return emplace(std::move(node));
  }

  Tensor<S> concat(const std::vector<Tensor<S>>& parts, int axis) {
    if (parts.empty()) throw ContractError("concat: empty input list");
    const Array<S>& first = val(parts[0]);
    const Index rank = first.rank();
    if (rank < 1 || rank > 2 || axis < 0 || axis >= rank) {
      throw DimensionError("concat: unsupported rank/axis for shape " + shape_str(first.shape()));
    }
    Index total = 0;
    for (const Tensor<S>& t : parts) {
      const Array<S>& A = val(t);
      if (A.rank() != rank) throw DimensionError("concat: rank mismatch");
      for (Index d = 0; d < rank; ++d) {
        if (d != axis && A.shape()[d] != first.shape()[d]) {
          throw DimensionError("concat: extent mismatch " + shape_str(first.shape()) + " vs " +
                               shape_str(A.shape()));
        }
      }
      total += A.shape()[axis];
    }
    std::vector<Index> out_shape = first.shape();
    out_shape[static_cast<size_t>(axis)] = total;
    Node<S> node;
    node.op = Op::kConcat;
    node.iaux = {static_cast<Index>(axis)};
    node.value = Array<S>(out_shape);
    for (const Tensor<S>& t : parts) {
      node.inputs.push_back(t.id);
      node.requires_grad = node.requires_grad || nodes_[t.id].requires_grad;
    }
    if (rank == 1 || axis == 0) {
      // contiguous blocks
      Index off = 0;
      for (const Tensor<S>& t : parts) {
        const Array<S>& A = val(t);
        std::copy(A.data(), A.data() + A.size(), node.value.data() + off);
        off += A.size();
      }
    } else {
      const Index n = first.shape()[0];
      Index col_off = 0;
      for (const Tensor<S>& t : parts) {
        const Array<S>& A = val(t);
        const Index w = A.shape()[1];
        for (Index i = 0; i < n; ++i) {
          std::copy(A.data() + i * w, A.data() + (i + 1) * w, node.value.data() + i * total + col_off);
        }
        col_off += w;
      }
    }
    return emplace(std::move(node));
  }

  Tensor<S> slice(Tensor<S> a, int axis, Index start, Index len) {
    const Array<S>& A = val(a);
    const Index rank = A.rank();
    if (rank < 1 || rank > 2 || axis < 0 || axis >= rank) {
      throw DimensionError("slice: unsupported rank/axis for shape " + shape_str(A.shape()));
    }
    if (len < 1 || start < 0 || start + len > A.shape()[axis]) {
      throw DimensionError("slice: range [" + std::to_string(start) + ", " +
                           std::to_string(start + len) + ") out of bounds for " + shape_str(A.shape()));
    }
    std::vector<Index> out_shape = A.shape();
    out_shape[static_cast<size_t>(axis)] = len;
    Node<S> node = unary(Op::kSlice, a, Array<S>(out_shape));
    node.iaux = {static_cast<Index>(axis), start, len};
    if (rank == 1 || axis == 0) {
      const Index w = (rank == 2) ? A.shape()[1] : 1;
      std::copy(A.data() + start * w, A.data() + (start + len) * w, node.value.data());
    } else {
      const Index n = A.shape()[0], w = A.shape()[1];
      for (Index i = 0; i < n; ++i) {
        std::copy(A.data() + i * w + start, A.data() + i * w + start + len, node.value.data() + i * len);
      }
    }
    return emplace(std::move(node));
  }

  // Row of a matrix as a rank-1 tensor.
  Tensor<S> row(Tensor<S> a, Index i) {
    const Array<S>& A = val(a);
    if (A.rank() != 2) throw DimensionError("row: rank-2 tensor required, got " + shape_str(A.shape()));
    if (i < 0 || i >= A.shape()[0]) {
      throw DimensionError("row: index " + std::to_string(i) + " out of bounds for " + shape_str(A.shape()));
    }
    const Index w = A.shape()[1];
    Node<S> node = unary(Op::kRow, a, Array<S>({w}));
    node.iaux = {i};
    std::copy(A.data() + i * w, A.data() + (i + 1) * w, node.value.data());
    return emplace(std::move(node));
  }

  // Stack rank-1 tensors of equal length into a matrix.
  Tensor<S> stack_rows(const std::vector<Tensor<S>>& parts) {
    if (parts.empty()) throw ContractError("stack_rows: empty input list");
    const Array<S>& first = val(parts[0]);
    if (first.rank() != 1) throw DimensionError("stack_rows: rank-1 tensors required");
    const Index w = first.size();
    Node<S> node;
    node.op = Op::kStackRows;
    node.value = Array<S>({static_cast<Index>(parts.size()), w});
    Index r = 0;
    for (const Tensor<S>& t : parts) {
      const Array<S>& A = val(t);
      if (A.rank() != 1 || A.size() != w) {
        throw DimensionError("stack_rows: extent mismatch " + shape_str(first.shape()) + " vs " +
                             shape_str(A.shape()));
      }
      node.inputs.push_back(t.id);
      node.requires_grad = node.requires_grad || nodes_[t.id].requires_grad;
      std::copy(A.data(), A.data() + w, node.value.data() + r * w);
      ++r;
    }
    return emplace(std::move(node));
  }

  // Zero the masked rows of a matrix.
  Tensor<S> mask_rows(Tensor<S> a, const std::vector<uint8_t>& row_mask) {
    const Array<S>& A = val(a);
    if (A.rank() != 2) throw DimensionError("mask_rows: rank-2 tensor required, got " + shape_str(A.shape()));
    if (static_cast<Index>(row_mask.size()) != A.shape()[0]) {
      throw DimensionError("mask_rows: mask length " + std::to_string(row_mask.size()) +
                           " does not match " + shape_str(A.shape()));
    }
    Node<S> node = unary(Op::kMaskRows, a, Array<S>(A.shape()));
    node.mask = row_mask;
    const Index n = A.shape()[0], w = A.shape()[1];
    for (Index i = 0; i < n; ++i) {
      if (row_mask[static_cast<size_t>(i)]) {
        std::copy(A.data() + i * w, A.data() + (i + 1) * w, node.value.data() + i * w);
      }
    }
    return emplace(std::move(node));
  }

  // Column-wise max over unmasked rows; ties resolve to the first row.
  Tensor<S> reduce_max(Tensor<S> a, const std::vector<uint8_t>& row_mask) {
    Node<S> node = reduce_common(Op::kReduceMax, a, row_mask);
    const Array<S>& A = val(a);
    const Index n = A.shape()[0], w = A.shape()[1];
    node.iaux.assign(static_cast<size_t>(w), Index(-1));
    for (Index j = 0; j < w; ++j) {
      Index arg = -1;
      S best = S(0);
      for (Index i = 0; i < n; ++i) {
        if (!row_mask[static_cast<size_t>(i)]) continue;
        if (arg < 0 || A.at(i, j) > best) {
          best = A.at(i, j);
          arg = i;
        }
      }
      node.value[j] = best;
      node.iaux[static_cast<size_t>(j)] = arg;
    }
    return emplace(std::move(node));
  }

  // Column-wise mean over unmasked rows.
  Tensor<S> reduce_mean(Tensor<S> a, const std::vector<uint8_t>& row_mask) {
    Node<S> node = reduce_common(Op::kReduceMean, a, row_mask);
    const Array<S>& A = val(a);
    const Index n = A.shape()[0], w = A.shape()[1];
    Index m = 0;
    for (uint8_t b : row_mask) m += b ? 1 : 0;
    node.scalar = S(1) / static_cast<S>(m);
    for (Index j = 0; j < w; ++j) {
      S acc = S(0);
      for (Index i = 0; i < n; ++i) {
        if (row_mask[static_cast<size_t>(i)]) acc += A.at(i, j);
      }
      node.value[j] = acc * node.scalar;
    }
    return emplace(std::move(node));
  }

  // Sum of all entries as a scalar (shape {1}).
  Tensor<S> sum_all(Tensor<S> a) {
    const Array<S>& A = val(a);
    Node<S> node = unary(Op::kSumAll, a, Array<S>({1}));
    S acc = S(0);
    for (Index i = 0; i < A.size(); ++i) acc += A[i];
    node.value[0] = acc;
    return emplace(std::move(node));
  }

  // Single element of a rank-1 tensor as a scalar.
  Tensor<S> pick(Tensor<S> a, Index i) {
    const Array<S>& A = val(a);
    if (A.rank() != 1) throw DimensionError("pick: rank-1 tensor required, got " + shape_str(A.shape()));
    if (i < 0 || i >= A.size()) {
      throw ContractError("pick: index " + std::to_string(i) + " out of bounds for " + shape_str(A.shape()));
    }
    Node<S> node = unary(Op::kPick, a, Array<S>({1}));
    node.iaux = {i};
    node.value[0] = A[i];
    return emplace(std::move(node));
  }

  Tensor<S> log(Tensor<S> a) {
    const Array<S>& A = val(a);
    Node<S> node = unary(Op::kLog, a, Array<S>(A.shape()));
    for (Index i = 0; i < A.size(); ++i) node.value[i] = std::log(A[i]);
    return emplace(std::move(node));
  }

  // Inverted dropout: kept entries are scaled by 1/(1-rate) so evaluation is
  // an identity. The keep mask is drawn from rng and saved for backward.
  Tensor<S> dropout(Tensor<S> a, double rate, Rng& rng) {
    if (rate < 0.0 || rate >= 1.0) throw ContractError("dropout: rate must be in [0, 1), got " + std::to_string(rate));
    const Array<S>& A = val(a);
    Node<S> node = unary(Op::kDropout, a, Array<S>(A.shape()));
    node.saved = Array<S>(A.shape());
    const S keep_scale = static_cast<S>(1.0 / (1.0 - rate));
    for (Index i = 0; i < A.size(); ++i) {
      node.saved[i] = rng.uniform() < rate ? S(0) : keep_scale;
      node.value[i] = A[i] * node.saved[i];
    }
    return emplace(std::move(node));
  }

  // ---- backward ----

  // Populates gradients of every requires_grad tensor reachable from loss,
  // accumulating additively; parameter gradients are added into the owning
  // Parameter's grad buffer.
  void backward(Tensor<S> loss) {
    if (loss.graph != this) throw ContractError("backward: tensor belongs to another graph");
    Node<S>& root = nodes_[loss.id];
    if (root.value.size() != 1) {
      throw ContractError("backward: loss must be scalar, got shape " + shape_str(root.value.shape()));
    }
    ensure_grad(loss.id);
    root.grad[0] += S(1);
    for (int id = loss.id; id >= 0; --id) {
      Node<S>& n = nodes_[id];
      if (!n.requires_grad || n.grad.empty()) continue;
      backward_node(n);
    }
  }

  void clear() {
    nodes_.clear();
    param_nodes_.clear();
  }

  size_t size() const { return nodes_.size(); }

  const Node<S>& node(int id) const { return nodes_[id]; }
  Node<S>& node(int id) { return nodes_[id]; }

  // Test fixture: scales the relu input-gradient by (1 + fuzz) so gradient
  // checking has a negative control.
  void set_backward_fuzz(S fuzz) { backward_fuzz_ = fuzz; }

 private:
  // deque keeps node references stable while new ops are recorded
  std::deque<Node<S>> nodes_;
  std::unordered_map<const Parameter<S>*, int> param_nodes_;
  S backward_fuzz_ = S(0);

  const Array<S>& val(Tensor<S> t) const {
    if (t.graph != this || t.id < 0 || t.id >= static_cast<int>(nodes_.size())) {
      throw ContractError("tensor handle does not belong to this graph");
    }
    return nodes_[t.id].value;
  }

  Node<S> unary(Op op, Tensor<S> a, Array<S> out) {
    Node<S> n;
    n.op = op;
    n.inputs = {a.id};
    n.requires_grad = nodes_[a.id].requires_grad;
    n.value = std::move(out);
    return n;
  }

  Node<S> binary(Op op, Tensor<S> a, Tensor<S> b, Array<S> out) {
    Node<S> n;
    n.op = op;
    n.inputs = {a.id, b.id};
    n.requires_grad = nodes_[a.id].requires_grad || nodes_[b.id].requires_grad;
    n.value = std::move(out);
    return n;
  }

  Node<S> reduce_common(Op op, Tensor<S> a, const std::vector<uint8_t>& row_mask) {
    const Array<S>& A = val(a);
    if (A.rank() != 2) throw DimensionError("reduce: rank-2 tensor required, got " + shape_str(A.shape()));
    if (static_cast<Index>(row_mask.size()) != A.shape()[0]) {
      throw DimensionError("reduce: mask length " + std::to_string(row_mask.size()) +
                           " does not match " + shape_str(A.shape()));
    }
    if (std::find(row_mask.begin(), row_mask.end(), uint8_t(1)) == row_mask.end()) {
      throw DegenerateInputError("reduce: all rows masked");
    }
    Node<S> node = unary(op, a, Array<S>({A.shape()[1]}));
    node.mask = row_mask;
    return node;
  }

  static void softmax_row(const S* in, S* out, const std::vector<uint8_t>& mask, Index n) {
    S max_v = S(0);
    bool any = false;
    for (Index i = 0; i < n; ++i) {
      if (!mask[static_cast<size_t>(i)]) continue;
      if (!any || in[i] > max_v) max_v = in[i];
      any = true;
    }
    if (!any) throw DegenerateInputError("softmax: all positions masked");
    S denom = S(0);
    for (Index i = 0; i < n; ++i) {
      if (mask[static_cast<size_t>(i)]) {
        out[i] = std::exp(in[i] - max_v);
        denom += out[i];
      } else {
        out[i] = S(0);
      }
    }
    for (Index i = 0; i < n; ++i) {
      if (mask[static_cast<size_t>(i)]) out[i] /= denom;
    }
  }

  Array<S>& ensure_grad(int id) {
    Node<S>& n = nodes_[id];
    if (n.grad.empty()) n.grad = Array<S>(n.value.shape());
    return n.grad;
  }

  // Accumulate into the grad of input slot `slot` of node n, if it wants one.
  Array<S>* grad_of(Node<S>& n, size_t slot) {
    int id = n.inputs[slot];
    if (!nodes_[id].requires_grad) return nullptr;
    return &ensure_grad(id);
  }

  void backward_node(Node<S>& n) {
    const Array<S>& g = n.grad;
    switch (n.op) {
      case Op::kLeaf:
        break;
      case Op::kParam: {
        Array<S>& pg = n.param->grad;
        for (Index i = 0; i < g.size(); ++i) pg[i] += g[i];
        break;
      }
      case Op::kMatmul: {
        const Array<S>& A = nodes_[n.inputs[0]].value;
        const Array<S>& B = nodes_[n.inputs[1]].value;
        const Index m = A.shape()[0], k = A.shape()[1], n2 = B.shape()[1];
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < m; ++i) {
            const S* grow = g.data() + i * n2;
            for (Index kk = 0; kk < k; ++kk) {
              const S* brow = B.data() + kk * n2;
              S acc = S(0);
              for (Index j = 0; j < n2; ++j) acc += grow[j] * brow[j];
              (*ga)[i * k + kk] += acc;
            }
          }
        }
        if (Array<S>* gb = grad_of(n, 1)) {
          for (Index i = 0; i < m; ++i) {
            const S* grow = g.data() + i * n2;
            const S* arow = A.data() + i * k;
            for (Index kk = 0; kk < k; ++kk) {
              const S av = arow[kk];
              if (av == S(0)) continue;
              S* gbrow = gb->data() + kk * n2;
              for (Index j = 0; j < n2; ++j) gbrow[j] += av * grow[j];
            }
          }
        }
        break;
      }
      case Op::kMatvec: {
        const Array<S>& W = nodes_[n.inputs[0]].value;
        const Array<S>& X = nodes_[n.inputs[1]].value;
        const Index m = W.shape()[0], k = W.shape()[1];
        if (Array<S>* gw = grad_of(n, 0)) {
          for (Index i = 0; i < m; ++i) {
            const S gv = g[i];
            if (gv == S(0)) continue;
            S* grow = gw->data() + i * k;
            for (Index j = 0; j < k; ++j) grow[j] += gv * X[j];
          }
        }
        if (Array<S>* gx = grad_of(n, 1)) {
          for (Index i = 0; i < m; ++i) {
            const S gv = g[i];
            if (gv == S(0)) continue;
            const S* wrow = W.data() + i * k;
            for (Index j = 0; j < k; ++j) (*gx)[j] += gv * wrow[j];
          }
        }
        break;
      }
      case Op::kTranspose: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const Index m = ga->shape()[0], k = ga->shape()[1];
          for (Index i = 0; i < m; ++i) {
            for (Index j = 0; j < k; ++j) (*ga)[i * k + j] += g.at(j, i);
          }
        }
        break;
      }
      case Op::kAdd: {
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        }
        if (Array<S>* gb = grad_of(n, 1)) {
          for (Index i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
        }
        break;
      }
      case Op::kAddBias: {
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        }
        if (Array<S>* gb = grad_of(n, 1)) {
          const Index rows = g.shape()[0], h = g.shape()[1];
          for (Index i = 0; i < rows; ++i) {
            const S* grow = g.data() + i * h;
            for (Index j = 0; j < h; ++j) (*gb)[j] += grow[j];
          }
        }
        break;
      }
      case Op::kSub: {
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
        }
        if (Array<S>* gb = grad_of(n, 1)) {
          for (Index i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
        }
        break;
      }
      case Op::kMul: {
        const Array<S>& A = nodes_[n.inputs[0]].value;
        const Array<S>& B = nodes_[n.inputs[1]].value;
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * B[i];
        }
        if (Array<S>* gb = grad_of(n, 1)) {
          for (Index i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * A[i];
        }
        break;
      }
      case Op::kAddN: {
        for (size_t s = 0; s < n.inputs.size(); ++s) {
          if (Array<S>* gi = grad_of(n, s)) {
            for (Index i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
          }
        }
        break;
      }
      case Op::kScale: {
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += n.scalar * g[i];
        }
        break;
      }
      case Op::kRelu: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const S f = S(1) + backward_fuzz_;
          for (Index i = 0; i < g.size(); ++i) {
            if (n.value[i] > S(0)) (*ga)[i] += f * g[i];
          }
        }
        break;
      }
      case Op::kTanh: {
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * (S(1) - n.value[i] * n.value[i]);
        }
        break;
      }
      case Op::kSigmoid: {
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * n.value[i] * (S(1) - n.value[i]);
        }
        break;
      }
      case Op::kSoftmaxMasked: {
        if (Array<S>* ga = grad_of(n, 0)) {
          softmax_backward_row(g.data(), n.value.data(), n.mask, ga->data(), g.size());
        }
        break;
      }
      case Op::kSoftmaxRowsMasked: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const Index rows = g.shape()[0], h = g.shape()[1];
          for (Index i = 0; i < rows; ++i) {
            softmax_backward_row(g.data() + i * h, n.value.data() + i * h, n.mask, ga->data() + i * h, h);
          }
        }
        break;
      }
      case Op::kConcat: {
        const int axis = static_cast<int>(n.iaux[0]);
        if (n.value.rank() == 1 || axis == 0) {
          Index off = 0;
          for (size_t s = 0; s < n.inputs.size(); ++s) {
            const Index sz = nodes_[n.inputs[s]].value.size();
            if (Array<S>* gi = grad_of(n, s)) {
              for (Index i = 0; i < sz; ++i) (*gi)[i] += g[off + i];
            }
            off += sz;
          }
        } else {
          const Index rows = n.value.shape()[0], total = n.value.shape()[1];
          Index col_off = 0;
          for (size_t s = 0; s < n.inputs.size(); ++s) {
            const Index w = nodes_[n.inputs[s]].value.shape()[1];
            if (Array<S>* gi = grad_of(n, s)) {
              for (Index i = 0; i < rows; ++i) {
                for (Index j = 0; j < w; ++j) (*gi)[i * w + j] += g[i * total + col_off + j];
              }
            }
            col_off += w;
          }
        }
        break;
      }
      case Op::kSlice: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const Array<S>& A = nodes_[n.inputs[0]].value;
          const int axis = static_cast<int>(n.iaux[0]);
          const Index start = n.iaux[1], len = n.iaux[2];
          if (A.rank() == 1 || axis == 0) {
            const Index w = (A.rank() == 2) ? A.shape()[1] : 1;
            for (Index i = 0; i < len * w; ++i) (*ga)[start * w + i] += g[i];
          } else {
            const Index rows = A.shape()[0], w = A.shape()[1];
            for (Index i = 0; i < rows; ++i) {
              for (Index j = 0; j < len; ++j) (*ga)[i * w + start + j] += g[i * len + j];
            }
          }
        }
        break;
      }
      case Op::kRow: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const Index w = g.size();
          const Index i = n.iaux[0];
          for (Index j = 0; j < w; ++j) (*ga)[i * w + j] += g[j];
        }
        break;
      }
      case Op::kStackRows: {
        const Index w = n.value.shape()[1];
        for (size_t s = 0; s < n.inputs.size(); ++s) {
          if (Array<S>* gi = grad_of(n, s)) {
            for (Index j = 0; j < w; ++j) (*gi)[j] += g[static_cast<Index>(s) * w + j];
          }
        }
        break;
      }
      case Op::kMaskRows: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const Index rows = g.shape()[0], w = g.shape()[1];
          for (Index i = 0; i < rows; ++i) {
            if (!n.mask[static_cast<size_t>(i)]) continue;
            for (Index j = 0; j < w; ++j) (*ga)[i * w + j] += g[i * w + j];
          }
        }
        break;
      }
      case Op::kReduceMax: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const Index w = g.size();
          const Index cols = ga->shape()[1];
          for (Index j = 0; j < w; ++j) {
            const Index arg = n.iaux[static_cast<size_t>(j)];
            (*ga)[arg * cols + j] += g[j];
          }
        }
        break;
      }
      case Op::kReduceMean: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const Index rows = ga->shape()[0], w = g.size();
          for (Index i = 0; i < rows; ++i) {
            if (!n.mask[static_cast<size_t>(i)]) continue;
            for (Index j = 0; j < w; ++j) (*ga)[i * w + j] += g[j] * n.scalar;
          }
        }
        break;
      }
      case Op::kSumAll: {
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < ga->size(); ++i) (*ga)[i] += g[0];
        }
        break;
      }
      case Op::kPick: {
        if (Array<S>* ga = grad_of(n, 0)) (*ga)[n.iaux[0]] += g[0];
        break;
      }
      case Op::kLog: {
        if (Array<S>* ga = grad_of(n, 0)) {
          const Array<S>& A = nodes_[n.inputs[0]].value;
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i] / A[i];
        }
        break;
      }
      case Op::kDropout: {
        if (Array<S>* ga = grad_of(n, 0)) {
          for (Index i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * n.saved[i];
        }
        break;
      }
    }
  }

  static void softmax_backward_row(const S* g, const S* y, const std::vector<uint8_t>& mask, S* out,
                                   Index n) {
    S dot = S(0);
    for (Index i = 0; i < n; ++i) {
      if (mask[static_cast<size_t>(i)]) dot += g[i] * y[i];
    }
    for (Index i = 0; i < n; ++i) {
      if (mask[static_cast<size_t>(i)]) out[i] += y[i] * (g[i] - dot);
    }
  }

  Tensor<S> emplace(Node<S> n) {
    nodes_.push_back(std::move(n));
    return Tensor<S>{this, static_cast<int>(nodes_.size()) - 1};
  }
};

template <typename S>
const Array<S>& Tensor<S>::value() const {
  return graph->node(id).value;
}

template <typename S>
const Array<S>& Tensor<S>::grad() const {
  return graph->node(id).grad;
}

template <typename S>
bool Tensor<S>::requires_grad() const {
  return graph->node(id).requires_grad;
}

// argmax over a rank-1 array; first index wins ties
template <typename S>
inline Index argmax(const Array<S>& a) {
  Index best = 0;
  for (Index i = 1; i < a.size(); ++i) {
    if (a[i] > a[best]) best = i;
  }
  return best;
}

}  // namespace mimn
