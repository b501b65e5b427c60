// Copyright 2026 The mhred Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense double-precision tensors with tape-free reverse-mode differentiation.
//
// Every op returns a fresh Tensor whose node keeps shared ownership of its
// inputs, so the expression graph lives exactly as long as the values that
// depend on it. backward() orders the reachable nodes topologically and runs
// each node's local chain rule once.

#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "mhred/error.hpp"

namespace mhred {

using Shape = std::vector<std::size_t>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_size(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // sized iff requires_grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into its inputs' grads.
  std::function<void(Node&)> backward;
};

inline bool& grad_disabled() {
  thread_local bool disabled = false;
  return disabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled()) { detail::grad_disabled() = true; }
  ~NoGradGuard() { detail::grad_disabled() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> v(shape_size(shape), 0.0);
    return from(std::move(shape), std::move(v), requires_grad);
  }

  static Tensor full(Shape shape, double value) {
    std::vector<double> v(shape_size(shape), value);
    return from(std::move(shape), std::move(v));
  }

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
    if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
    for (auto d : shape)
      if (d == 0) throw DimensionError("zero-sized dimension in shape " + shape_str(shape));
    if (shape_size(shape) != values.size())
      throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                           std::to_string(values.size()) + " values");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(values);
    n->requires_grad = requires_grad;
    if (requires_grad) n->grad.assign(n->value.size(), 0.0);
    return Tensor(std::move(n));
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return from({1}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t ndim() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> data() const { return node_->value; }
  std::span<double> mutable_data() { return node_->value; }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad() { return node_->grad; }

  double item() const {
    if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }
  double operator()(std::size_t i, std::size_t j) const {
    return node_->value[i * node_->shape.back() + j];
  }

  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  /// Value copy without graph history or gradient.
  Tensor detach() const { return from(shape(), node_->value); }

  const detail::Node* id() const { return node_.get(); }
  detail::Node& node() const { return *node_; }
  const std::shared_ptr<detail::Node>& handle() const { return node_; }

  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value,
                          std::initializer_list<const Tensor*> inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (!grad_disabled()) {
    for (const Tensor* t : inputs) {
      if (t->requires_grad()) n->requires_grad = true;
    }
    if (n->requires_grad) {
      n->grad.assign(n->value.size(), 0.0);
      for (const Tensor* t : inputs) n->inputs.push_back(t->handle());
    }
  }
  return Tensor(std::move(n));
}

inline Tensor make_result_list(Shape shape, std::vector<double> value,
                               const std::vector<Tensor>& inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  if (!grad_disabled()) {
    for (const Tensor& t : inputs)
      if (t.requires_grad()) n->requires_grad = true;
    if (n->requires_grad) {
      n->grad.assign(n->value.size(), 0.0);
      for (const Tensor& t : inputs) n->inputs.push_back(t.handle());
    }
  }
  return Tensor(std::move(n));
}

inline void require_2d(const Tensor& t, const char* op) {
  if (t.ndim() != 2)
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_str(t.shape()));
}

inline void require_same(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

inline double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// c[m,n] += a[m,k] * b[k,n]; transposes selected by flags on the logical operands.
inline void gemm_acc(std::span<const double> a, bool ta, std::span<const double> b, bool tb,
                     std::span<double> c, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ta ? a[p * m + i] : a[i * k + p];
      if (av == 0.0) continue;
      if (!tb) {
        const double* brow = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      } else {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      }
    }
  }
}

}  // namespace detail

/// a[m,k] x b[k,n].
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_2d(a, "matmul");
  detail::require_2d(b, "matmul");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k)
    throw DimensionError("matmul: inner dimensions differ, " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  std::vector<double> out(m * n, 0.0);
  detail::gemm_acc(a.data(), false, b.data(), false, out, m, k, n);
  Tensor r = detail::make_result({m, n}, std::move(out), {&a, &b});
  if (r.requires_grad()) {
    r.node().backward = [m, k, n](detail::Node& self) {
      auto& A = *self.inputs[0];
      auto& B = *self.inputs[1];
      if (A.requires_grad) detail::gemm_acc(self.grad, false, B.value, true, A.grad, m, n, k);
      if (B.requires_grad) detail::gemm_acc(A.value, true, self.grad, false, B.grad, k, m, n);
    };
  }
  return r;
}

namespace detail {

template <class Fwd, class Da, class Db>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd f, Da da, Db db) {
  require_same(a, b, name);
  std::vector<double> out(a.size());
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  Tensor r = make_result(a.shape(), std::move(out), {&a, &b});
  if (r.requires_grad()) {
    r.node().backward = [da, db](Node& self) {
      auto& A = *self.inputs[0];
      auto& B = *self.inputs[1];
      for (std::size_t i = 0; i < self.grad.size(); ++i) {
        const double g = self.grad[i];
        if (A.requires_grad) A.grad[i] += g * da(A.value[i], B.value[i]);
        if (B.requires_grad) B.grad[i] += g * db(A.value[i], B.value[i]);
      }
    };
  }
  return r;
}

// Unary op whose derivative is expressed through the output value.
template <class Fwd, class Dy>
Tensor unary_op(const Tensor& x, Fwd f, Dy dy) {
  std::vector<double> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  Tensor r = make_result(x.shape(), std::move(out), {&x});
  if (r.requires_grad()) {
    r.node().backward = [dy](Node& self) {
      auto& X = *self.inputs[0];
      for (std::size_t i = 0; i < self.grad.size(); ++i)
        X.grad[i] += self.grad[i] * dy(self.value[i]);
    };
  }
  return r;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return detail::stable_sigmoid(v); },
      [](double y) { return y * (1.0 - y); });
}

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); }, [](double y) { return 1.0 - y * y; });
}

/// scale * x + shift, elementwise.
inline Tensor affine(const Tensor& x, double scale, double shift) {
  std::vector<double> out(x.size());
  auto xv = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = scale * xv[i] + shift;
  Tensor r = detail::make_result(x.shape(), std::move(out), {&x});
  if (r.requires_grad()) {
    r.node().backward = [scale](detail::Node& self) {
      auto& X = *self.inputs[0];
      for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += scale * self.grad[i];
    };
  }
  return r;
}

inline Tensor scale(const Tensor& x, double c) { return affine(x, c, 0.0); }

enum class Elementwise { add, mul, sigmoid, tanh };

/// Dispatches to the pointwise ops; binary kinds take two operands.
inline Tensor elementwise(Elementwise kind, const std::vector<Tensor>& args) {
  const bool binary = kind == Elementwise::add || kind == Elementwise::mul;
  if (args.size() != (binary ? 2u : 1u))
    throw ContractError("elementwise: wrong operand count " + std::to_string(args.size()));
  switch (kind) {
    case Elementwise::add: return add(args[0], args[1]);
    case Elementwise::mul: return mul(args[0], args[1]);
    case Elementwise::sigmoid: return sigmoid(args[0]);
    case Elementwise::tanh: return tanh(args[0]);
  }
  throw ContractError("elementwise: unknown kind");
}

/// x[m,n] + bias[1,n] broadcast over rows.
inline Tensor add_bias(const Tensor& x, const Tensor& bias) {
  detail::require_2d(x, "add_bias");
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (bias.size() != n || bias.dim(0) != (bias.ndim() == 2 ? 1u : n))
    throw DimensionError("add_bias: bias " + shape_str(bias.shape()) + " does not fit rows of " +
                         shape_str(x.shape()));
  std::vector<double> out(x.data().begin(), x.data().end());
  auto bv = bias.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += bv[j];
  Tensor r = detail::make_result({m, n}, std::move(out), {&x, &bias});
  if (r.requires_grad()) {
    r.node().backward = [m, n](detail::Node& self) {
      auto& X = *self.inputs[0];
      auto& B = *self.inputs[1];
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          const double g = self.grad[i * n + j];
          if (X.requires_grad) X.grad[i * n + j] += g;
          if (B.requires_grad) B.grad[j] += g;
        }
    };
  }
  return r;
}

/// Sum of all elements, as a [1] tensor.
inline Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor r = detail::make_result({1}, {s}, {&x});
  if (r.requires_grad()) {
    r.node().backward = [](detail::Node& self) {
      auto& X = *self.inputs[0];
      for (double& g : X.grad) g += self.grad[0];
    };
  }
  return r;
}

inline Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_size(shape) != x.size())
    throw DimensionError("reshape: " + shape_str(x.shape()) + " to " + shape_str(shape));
  std::vector<double> out(x.data().begin(), x.data().end());
  Tensor r = detail::make_result(std::move(shape), std::move(out), {&x});
  if (r.requires_grad()) {
    r.node().backward = [](detail::Node& self) {
      auto& X = *self.inputs[0];
      for (std::size_t i = 0; i < self.grad.size(); ++i) X.grad[i] += self.grad[i];
    };
  }
  return r;
}

/// Concatenates along `axis`; all other extents must agree.
inline Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no operands");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size())
    throw DimensionError("concat: axis " + std::to_string(axis) + " out of range for " +
                         shape_str(s0));
  std::size_t total = 0;
  for (const Tensor& t : parts) {
    const Shape& s = t.shape();
    bool ok = s.size() == s0.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d)
      if (d != axis && s[d] != s0[d]) ok = false;
    if (!ok)
      throw DimensionError("concat: shape " + shape_str(s) + " incompatible with " +
                           shape_str(s0) + " on axis " + std::to_string(axis));
    total += s[axis];
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < s0.size(); ++d) inner *= s0[d];
  Shape out_shape = s0;
  out_shape[axis] = total;
  std::vector<double> out(outer * total * inner);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const Tensor& t : parts) {
    offsets.push_back(off);
    const std::size_t w = t.dim(axis) * inner;
    auto v = t.data();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.begin() + o * w, w, out.begin() + o * total * inner + off * inner);
    off += t.dim(axis);
  }
  Tensor r = detail::make_result_list(std::move(out_shape), std::move(out), parts);
  if (r.requires_grad()) {
    r.node().backward = [offsets, outer, inner, total, axis](detail::Node& self) {
      for (std::size_t p = 0; p < self.inputs.size(); ++p) {
        auto& X = *self.inputs[p];
        if (!X.requires_grad) continue;
        const std::size_t w = X.shape[axis] * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = self.grad.data() + o * total * inner + offsets[p] * inner;
          double* dst = X.grad.data() + o * w;
          for (std::size_t i = 0; i < w; ++i) dst[i] += src[i];
        }
      }
    };
  }
  return r;
}

/// Half-open range [begin, end) along `axis`.
inline Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end) {
  const Shape& s = x.shape();
  if (axis >= s.size() || begin >= end || end > s[axis])
    throw DimensionError("slice: [" + std::to_string(begin) + "," + std::to_string(end) +
                         ") on axis " + std::to_string(axis) + " of " + shape_str(s));
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s[d];
  for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
  const std::size_t len = end - begin, full = s[axis];
  Shape out_shape = s;
  out_shape[axis] = len;
  std::vector<double> out(outer * len * inner);
  auto v = x.data();
  for (std::size_t o = 0; o < outer; ++o)
    std::copy_n(v.begin() + (o * full + begin) * inner, len * inner,
                out.begin() + o * len * inner);
  Tensor r = detail::make_result(std::move(out_shape), std::move(out), {&x});
  if (r.requires_grad()) {
    r.node().backward = [outer, inner, len, full, begin](detail::Node& self) {
      auto& X = *self.inputs[0];
      for (std::size_t o = 0; o < outer; ++o) {
        const double* src = self.grad.data() + o * len * inner;
        double* dst = X.grad.data() + (o * full + begin) * inner;
        for (std::size_t i = 0; i < len * inner; ++i) dst[i] += src[i];
      }
    };
  }
  return r;
}

/// Stacks equally shaped [b, d] tensors into [b, n, d].
inline Tensor stack_steps(const std::vector<Tensor>& steps) {
  if (steps.empty()) throw ContractError("stack_steps: no operands");
  std::vector<Tensor> expanded;
  expanded.reserve(steps.size());
  for (const Tensor& t : steps) {
    detail::require_2d(t, "stack_steps");
    expanded.push_back(reshape(t, {t.dim(0), 1, t.dim(1)}));
  }
  return concat(expanded, 1);
}

/// Row `t` of the middle axis of x[b, T, d], as [b, d].
inline Tensor step_at(const Tensor& x, std::size_t t) {
  if (x.ndim() != 3) throw DimensionError("step_at: expected [b,T,d], got " + shape_str(x.shape()));
  Tensor s = slice(x, 1, t, t + 1);
  return reshape(s, {x.dim(0), x.dim(2)});
}

/// Gathers rows of table[V, e]; rows whose id equals `padding_id` are zero and get no gradient.
inline Tensor embedding_lookup(const Tensor& table, std::span<const std::size_t> ids,
                               std::size_t padding_id = static_cast<std::size_t>(-1)) {
  detail::require_2d(table, "embedding_lookup");
  const std::size_t vocab = table.dim(0), e = table.dim(1);
  if (ids.empty()) throw ContractError("embedding_lookup: empty id list");
  std::vector<double> out(ids.size() * e, 0.0);
  auto tv = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] >= vocab)
      throw IndexError("embedding_lookup: id " + std::to_string(ids[i]) + " >= vocab " +
                       std::to_string(vocab));
    if (ids[i] == padding_id) continue;
    std::copy_n(tv.begin() + ids[i] * e, e, out.begin() + i * e);
  }
  Tensor r = detail::make_result({ids.size(), e}, std::move(out), {&table});
  if (r.requires_grad()) {
    std::vector<std::size_t> idv(ids.begin(), ids.end());
    r.node().backward = [idv = std::move(idv), e, padding_id](detail::Node& self) {
      auto& T = *self.inputs[0];
      for (std::size_t i = 0; i < idv.size(); ++i) {
        if (idv[i] == padding_id) continue;
        for (std::size_t j = 0; j < e; ++j) T.grad[idv[i] * e + j] += self.grad[i * e + j];
      }
    };
  }
  return r;
}

/// Row-wise choice: out[i] = keep[i] != 0 ? taken[i] : other[i].
inline Tensor select_rows(std::span<const double> keep, const Tensor& taken, const Tensor& other) {
  detail::require_same(taken, other, "select_rows");
  detail::require_2d(taken, "select_rows");
  const std::size_t m = taken.dim(0), n = taken.dim(1);
  if (keep.size() != m)
    throw DimensionError("select_rows: mask of " + std::to_string(keep.size()) +
                         " entries for " + std::to_string(m) + " rows");
  std::vector<double> out(m * n);
  auto tv = taken.data();
  auto ov = other.data();
  std::vector<char> sel(m);
  for (std::size_t i = 0; i < m; ++i) {
    sel[i] = keep[i] != 0.0;
    std::copy_n((sel[i] ? tv : ov).begin() + i * n, n, out.begin() + i * n);
  }
  Tensor r = detail::make_result({m, n}, std::move(out), {&taken, &other});
  if (r.requires_grad()) {
    r.node().backward = [sel = std::move(sel), n](detail::Node& self) {
      for (std::size_t i = 0; i < sel.size(); ++i) {
        auto& dst = *self.inputs[sel[i] ? 0 : 1];
        if (!dst.requires_grad) continue;
        for (std::size_t j = 0; j < n; ++j) dst.grad[i * n + j] += self.grad[i * n + j];
      }
    };
  }
  return r;
}

/// Softmax over the last axis of a matrix, max-subtracted.
inline Tensor softmax_rows(const Tensor& x) {
  detail::require_2d(x, "softmax_rows");
  const std::size_t m = x.dim(0), n = x.dim(1);
  std::vector<double> out(m * n);
  auto xv = x.data();
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += (out[i * n + j] = std::exp(row[j] - mx));
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  Tensor r = detail::make_result({m, n}, std::move(out), {&x});
  if (r.requires_grad()) {
    r.node().backward = [m, n](detail::Node& self) {
      auto& X = *self.inputs[0];
      for (std::size_t i = 0; i < m; ++i) {
        const double* y = self.value.data() + i * n;
        const double* g = self.grad.data() + i * n;
        double dot = 0.0;
        for (std::size_t j = 0; j < n; ++j) dot += g[j] * y[j];
        for (std::size_t j = 0; j < n; ++j) X.grad[i * n + j] += y[j] * (g[j] - dot);
      }
    };
  }
  return r;
}

/// Mean over unmasked rows of -log softmax(logits)[target]. All rows masked gives 0.
inline Tensor softmax_cross_entropy(const Tensor& logits, std::span<const std::size_t> targets,
                                    std::span<const double> mask) {
  detail::require_2d(logits, "softmax_cross_entropy");
  const std::size_t m = logits.dim(0), n = logits.dim(1);
  if (targets.size() != m || mask.size() != m)
    throw DimensionError("softmax_cross_entropy: " + std::to_string(targets.size()) +
                         " targets and " + std::to_string(mask.size()) + " mask entries for " +
                         std::to_string(m) + " rows");
  auto xv = logits.data();
  std::vector<double> probs(m * n, 0.0);
  double total = 0.0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < m; ++i) {
    if (mask[i] == 0.0) continue;
    if (targets[i] >= n)
      throw IndexError("softmax_cross_entropy: target " + std::to_string(targets[i]) +
                       " >= vocab " + std::to_string(n));
    const double* row = xv.data() + i * n;
    const double mx = *std::max_element(row, row + n);
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) probs[i * n + j] = std::exp(row[j] - lse);
    total += lse - row[targets[i]];
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  Tensor r = detail::make_result({1}, {loss}, {&logits});
  if (r.requires_grad() && count) {
    std::vector<std::size_t> tv(targets.begin(), targets.end());
    std::vector<char> live(m);
    for (std::size_t i = 0; i < m; ++i) live[i] = mask[i] != 0.0;
    r.node().backward = [probs = std::move(probs), tv = std::move(tv), live = std::move(live), n,
                         count](detail::Node& self) {
      auto& X = *self.inputs[0];
      const double g = self.grad[0] / static_cast<double>(count);
      for (std::size_t i = 0; i < live.size(); ++i) {
        if (!live[i]) continue;
        for (std::size_t j = 0; j < n; ++j) {
          const double d = probs[i * n + j] - (j == tv[i] ? 1.0 : 0.0);
          X.grad[i * n + j] += g * d;
        }
      }
    };
  }
  return r;
}

/// scores[b, s] = <keys[b, s, :], query[b, :]>.
inline Tensor batched_dot(const Tensor& keys, const Tensor& query) {
  if (keys.ndim() != 3 || query.ndim() != 2 || keys.dim(0) != query.dim(0) ||
      keys.dim(2) != query.dim(1))
    throw DimensionError("batched_dot: keys " + shape_str(keys.shape()) + " vs query " +
                         shape_str(query.shape()));
  const std::size_t b = keys.dim(0), s = keys.dim(1), h = keys.dim(2);
  std::vector<double> out(b * s, 0.0);
  auto kv = keys.data();
  auto qv = query.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      double acc = 0.0;
      for (std::size_t d = 0; d < h; ++d) acc += kv[(i * s + j) * h + d] * qv[i * h + d];
      out[i * s + j] = acc;
    }
  Tensor r = detail::make_result({b, s}, std::move(out), {&keys, &query});
  if (r.requires_grad()) {
    r.node().backward = [b, s, h](detail::Node& self) {
      auto& K = *self.inputs[0];
      auto& Q = *self.inputs[1];
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < s; ++j) {
          const double g = self.grad[i * s + j];
          if (g == 0.0) continue;
          for (std::size_t d = 0; d < h; ++d) {
            if (K.requires_grad) K.grad[(i * s + j) * h + d] += g * Q.value[i * h + d];
            if (Q.requires_grad) Q.grad[i * h + d] += g * K.value[(i * s + j) * h + d];
          }
        }
    };
  }
  return r;
}

/// out[b, :] = sum_s weights[b, s] * keys[b, s, :].
inline Tensor weighted_sum(const Tensor& weights, const Tensor& keys) {
  if (keys.ndim() != 3 || weights.ndim() != 2 || keys.dim(0) != weights.dim(0) ||
      keys.dim(1) != weights.dim(1))
    throw DimensionError("weighted_sum: weights " + shape_str(weights.shape()) + " vs keys " +
                         shape_str(keys.shape()));
  const std::size_t b = keys.dim(0), s = keys.dim(1), h = keys.dim(2);
  std::vector<double> out(b * h, 0.0);
  auto kv = keys.data();
  auto wv = weights.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t j = 0; j < s; ++j) {
      const double w = wv[i * s + j];
      if (w == 0.0) continue;
      for (std::size_t d = 0; d < h; ++d) out[i * h + d] += w * kv[(i * s + j) * h + d];
    }
  Tensor r = detail::make_result({b, h}, std::move(out), {&weights, &keys});
  if (r.requires_grad()) {
    r.node().backward = [b, s, h](detail::Node& self) {
      auto& W = *self.inputs[0];
      auto& K = *self.inputs[1];
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t j = 0; j < s; ++j) {
          double gw = 0.0;
          const double w = W.value[i * s + j];
          for (std::size_t d = 0; d < h; ++d) {
            const double g = self.grad[i * h + d];
            gw += g * K.value[(i * s + j) * h + d];
            if (K.requires_grad) K.grad[(i * s + j) * h + d] += g * w;
          }
          if (W.requires_grad) W.grad[i * s + j] += gw;
        }
    };
  }
  return r;
}

/// Accumulates d(root)/d(leaf) into every reachable leaf that requires grad.
/// Intermediate grads are reset on each call; leaf grads accumulate.
inline void backward(const Tensor& root) {
  if (!root.defined() || root.size() != 1)
    throw ContractError("backward: root must be a scalar, got shape " +
                        (root.defined() ? shape_str(root.shape()) : std::string("<null>")));
  if (!root.requires_grad()) throw ContractError("backward: root does not require grad");

  std::vector<detail::Node*> order;
  std::unordered_set<const detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  // `order` is post-order: inputs precede their consumers.
  for (detail::Node* n : order)
    if (n->backward) std::fill(n->grad.begin(), n->grad.end(), 0.0);
  root.node().grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

}  // namespace mhred
