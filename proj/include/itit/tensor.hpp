#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major tensors.
//
// A Tensor is a shared handle to a Node holding shape, values and (lazily) a
// gradient buffer. Operations executed while a Tape is active record a
// backward closure whenever one of their inputs requires a gradient;
// Tape::backward replays those closures in reverse order exactly once.
//
// The scalar type is a template parameter: float for training, double for
// finite-difference gradient checks.

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "itit/rng.hpp"

namespace itit {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

[[noreturn]] inline void shape_mismatch(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a) + " vs " + to_string(b));
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until a gradient reaches this node
  bool requires_grad = false;

  std::span<T> grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <class T>
class Tape;

template <class T>
Tape<T>*& active_tape() {
  thread_local Tape<T>* tape = nullptr;
  return tape;
}

template <class T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    if (numel(shape) != values.size())
      throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                       to_string(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
  }
  static Tensor full(Shape shape, T v) {
    auto n = numel(shape);
    return Tensor(std::move(shape), std::vector<T>(n, v));
  }
  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  explicit operator bool() const { return static_cast<bool>(node_); }

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t size() const { return node_->value.size(); }

  std::span<const T> values() const { return node_->value; }
  /// Mutable view for leaves (parameters, optimizer updates). Never call on a
  /// tensor that participates in a live tape.
  std::span<T> mutable_values() { return node_->value; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad.clear(); }

  T item() const {
    if (size() != 1) throw ShapeError("item: tensor has shape " + to_string(shape()));
    return node_->value[0];
  }
  T at(std::size_t i) const { return node_->value.at(i); }

  Node<T>* node() const { return node_.get(); }
  const std::shared_ptr<Node<T>>& shared() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Ordered record of differentiable operations.
template <class T>
class Tape {
 public:
  struct Record {
    const char* op;
    std::vector<std::shared_ptr<Node<T>>> inputs;
    std::shared_ptr<Node<T>> output;
    std::function<void(const Node<T>&)> backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void push(Record r) { records_.push_back(std::move(r)); }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }
  void clear() { records_.clear(); }

  /// Seeds d(root)/d(root) = 1 and runs every recorded closure once, newest
  /// first. Records whose output received no gradient are skipped.
  void backward(const Tensor<T>& root) {
    if (root.size() != 1) throw ShapeError("backward: root must be a scalar, got " + to_string(root.shape()));
    if (!root.requires_grad()) return;
    auto g = root.node()->grad_buffer();
    g[0] += T(1);
    for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
      if (it->output->grad.empty()) continue;
      it->backward(*it->output);
    }
  }

 private:
  std::vector<Record> records_;
};

/// Makes `tape` the recording target for this thread until destruction.
template <class T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>* tape) : previous_(active_tape<T>()) { active_tape<T>() = tape; }
  ~TapeScope() { active_tape<T>() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Suspends recording (inference, synthesis passes).
template <class T>
class NoGradScope : public TapeScope<T> {
 public:
  NoGradScope() : TapeScope<T>(nullptr) {}
};

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <class T>
using MutMap = Eigen::Map<RowMat<T>>;

/// Gradient buffer of an input, or an empty span if it does not need one.
template <class T>
std::span<T> grad_of(Node<T>* n) {
  if (!n->requires_grad) return {};
  return n->grad_buffer();
}

/// Wraps a forward result; records `backward(gout)` when any input needs grad.
template <class T, class F>
Tensor<T> finish(const char* op, Shape shape, std::vector<T> value,
                 std::vector<Tensor<T>> inputs, F&& backward) {
  Tensor<T> out(std::move(shape), std::move(value));
  Tape<T>* tape = active_tape<T>();
  if (tape == nullptr) return out;
  bool needed = false;
  for (auto& in : inputs) needed = needed || in.requires_grad();
  if (!needed) return out;
  out.set_requires_grad(true);
  typename Tape<T>::Record rec{op, {}, out.shared(), std::forward<F>(backward)};
  rec.inputs.reserve(inputs.size());
  for (auto& in : inputs) rec.inputs.push_back(in.shared());
  tape->push(std::move(rec));
  return out;
}

enum class Broadcast { kSame, kScalar, kTrailing };

inline Broadcast classify(const char* op, const Shape& big, const Shape& small) {
  if (big == small) return Broadcast::kSame;
  if (numel(small) == 1) return Broadcast::kScalar;
  if (small.size() <= big.size() && std::equal(small.rbegin(), small.rend(), big.rbegin()))
    return Broadcast::kTrailing;
  shape_mismatch(op, big, small);
}

inline std::size_t axis_index(const char* op, std::ptrdiff_t axis, std::size_t rank) {
  auto a = axis < 0 ? axis + static_cast<std::ptrdiff_t>(rank) : axis;
  if (a < 0 || a >= static_cast<std::ptrdiff_t>(rank))
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                     std::to_string(rank));
  return static_cast<std::size_t>(a);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. The second operand may broadcast as a scalar or as
// a trailing-axis block (e.g. a bias of shape [d] against [n, d]).

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.size() > a.size()) return add(b, a);
  auto mode = detail::classify("add", a.shape(), b.shape());
  const std::size_t n = a.size(), nb = b.size();
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  if (mode == detail::Broadcast::kScalar) {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[0];
  } else {
    for (std::size_t i = 0; i < n; ++i) out[i] = av[i] + bv[i % nb];
  }
  auto* an = a.node();
  auto* bn = b.node();
  return detail::finish<T>("add", a.shape(), std::move(out), {a, b}, [an, bn, n, nb](const Node<T>& o) {
    const auto& g = o.grad;
    if (auto ga = detail::grad_of(an); !ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (auto gb = detail::grad_of(bn); !gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i];
  });
}

/// a - b, with b broadcast against a.
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  auto mode = detail::classify("sub", a.shape(), b.shape());
  (void)mode;
  const std::size_t n = a.size(), nb = b.size();
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] - bv[i % nb];
  auto* an = a.node();
  auto* bn = b.node();
  return detail::finish<T>("sub", a.shape(), std::move(out), {a, b}, [an, bn, n, nb](const Node<T>& o) {
    const auto& g = o.grad;
    if (auto ga = detail::grad_of(an); !ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i];
    if (auto gb = detail::grad_of(bn); !gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] -= g[i];
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  if (b.size() > a.size()) return mul(b, a);
  detail::classify("mul", a.shape(), b.shape());
  const std::size_t n = a.size(), nb = b.size();
  std::vector<T> out(n);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = av[i] * bv[i % nb];
  auto* an = a.node();
  auto* bn = b.node();
  return detail::finish<T>("mul", a.shape(), std::move(out), {a, b}, [an, bn, n, nb](const Node<T>& o) {
    const auto& g = o.grad;
    if (auto ga = detail::grad_of(an); !ga.empty())
      for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * bn->value[i % nb];
    if (auto gb = detail::grad_of(bn); !gb.empty())
      for (std::size_t i = 0; i < n; ++i) gb[i % nb] += g[i] * an->value[i];
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& x, T c) {
  std::vector<T> out(x.values().begin(), x.values().end());
  for (auto& v : out) v *= c;
  auto* xn = x.node();
  return detail::finish<T>("scale", x.shape(), std::move(out), {x}, [xn, c](const Node<T>& o) {
    const auto& g = o.grad;
    auto gx = detail::grad_of(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += c * g[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra.

/// [..., m, k] x [k, n] -> [..., m, n]; or batched [B, m, k] x [B, k, n].
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  using detail::ConstMap;
  using detail::MutMap;
  if (a.rank() < 2) shape_mismatch("matmul", a.shape(), b.shape());
  if (b.rank() == 2) {
    const std::size_t k = a.shape().back();
    if (b.dim(0) != k) shape_mismatch("matmul", a.shape(), b.shape());
    const std::size_t m = a.size() / k, n = b.dim(1);
    Shape os = a.shape();
    os.back() = n;
    std::vector<T> out(m * n);
    MutMap<T>(out.data(), m, n).noalias() = ConstMap<T>(a.values().data(), m, k) * ConstMap<T>(b.values().data(), k, n);
    auto* an = a.node();
    auto* bn = b.node();
    return detail::finish<T>("matmul", std::move(os), std::move(out), {a, b}, [an, bn, m, k, n](const Node<T>& o) {
    const auto& g = o.grad;
      ConstMap<T> G(g.data(), m, n);
      if (auto ga = detail::grad_of(an); !ga.empty())
        MutMap<T>(ga.data(), m, k).noalias() += G * ConstMap<T>(bn->value.data(), k, n).transpose();
      if (auto gb = detail::grad_of(bn); !gb.empty())
        MutMap<T>(gb.data(), k, n).noalias() += ConstMap<T>(an->value.data(), m, k).transpose() * G;
    });
  }
  if (a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0) && a.dim(2) == b.dim(1)) {
    const std::size_t B = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    std::vector<T> out(B * m * n);
    for (std::size_t i = 0; i < B; ++i)
      MutMap<T>(out.data() + i * m * n, m, n).noalias() =
          ConstMap<T>(a.values().data() + i * m * k, m, k) * ConstMap<T>(b.values().data() + i * k * n, k, n);
    auto* an = a.node();
    auto* bn = b.node();
    return detail::finish<T>("matmul", Shape{B, m, n}, std::move(out), {a, b}, [an, bn, B, m, k, n](const Node<T>& o) {
    const auto& g = o.grad;
      auto ga = detail::grad_of(an);
      auto gb = detail::grad_of(bn);
      for (std::size_t i = 0; i < B; ++i) {
        ConstMap<T> G(g.data() + i * m * n, m, n);
        if (!ga.empty())
          MutMap<T>(ga.data() + i * m * k, m, k).noalias() +=
              G * ConstMap<T>(bn->value.data() + i * k * n, k, n).transpose();
        if (!gb.empty())
          MutMap<T>(gb.data() + i * k * n, k, n).noalias() +=
              ConstMap<T>(an->value.data() + i * m * k, m, k).transpose() * G;
      }
    });
  }
  shape_mismatch("matmul", a.shape(), b.shape());
}

namespace detail {

/// Copies `src` (shape `in`) into `dst` with axes reordered by `perm`
/// (output axis i = input axis perm[i]). When `inverse` is set the roles are
/// swapped and values are accumulated, which is the backward of a permute.
template <class T>
void permute_copy(const T* src, T* dst, const Shape& in, const std::vector<std::size_t>& perm, bool accumulate) {
  const std::size_t r = in.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r; i-- > 1;) in_stride[i - 1] = in_stride[i] * in[i];
  Shape out(r);
  std::vector<std::size_t> step(r);
  for (std::size_t i = 0; i < r; ++i) {
    out[i] = in[perm[i]];
    step[i] = in_stride[perm[i]];
  }
  const std::size_t n = numel(in);
  std::vector<std::size_t> idx(r, 0);
  std::size_t offset = 0;
  const std::size_t last = r - 1;
  for (std::size_t o = 0; o < n;) {
    // Innermost axis as a tight loop.
    const std::size_t len = out[last], st = step[last];
    if (accumulate) {
      for (std::size_t j = 0; j < len; ++j) dst[offset + j * st] += src[o + j];
    } else {
      for (std::size_t j = 0; j < len; ++j) dst[o + j] = src[offset + j * st];
    }
    o += len;
    for (std::size_t ax = last; ax-- > 0;) {
      offset += step[ax];
      if (++idx[ax] < out[ax]) break;
      offset -= step[ax] * out[ax];
      idx[ax] = 0;
    }
  }
}

}  // namespace detail

/// Reorders axes: output axis i is input axis perm[i].
template <class T>
Tensor<T> permute(const Tensor<T>& x, std::vector<std::size_t> perm) {
  const std::size_t r = x.rank();
  std::vector<bool> seen(r, false);
  bool ok = perm.size() == r;
  for (std::size_t i = 0; ok && i < r; ++i) {
    ok = perm[i] < r && !seen[perm[i]];
    if (ok) seen[perm[i]] = true;
  }
  if (!ok) throw ShapeError("permute: invalid axis order for shape " + to_string(x.shape()));
  Shape os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = x.dim(perm[i]);
  std::vector<T> out(x.size());
  if (x.size() > 0) detail::permute_copy(x.values().data(), out.data(), x.shape(), perm, false);
  auto* xn = x.node();
  return detail::finish<T>("permute", std::move(os), std::move(out), {x}, [xn, perm](const Node<T>& o) {
    auto gx = detail::grad_of(xn);
    // Scatter output-ordered gradient back to input offsets.
    detail::permute_copy(o.grad.data(), gx.data(), xn->shape, perm, true);
  });
}

/// Swaps two axes.
template <class T>
Tensor<T> transpose(const Tensor<T>& x, std::ptrdiff_t axis0, std::ptrdiff_t axis1) {
  const std::size_t r = x.rank();
  auto a0 = detail::axis_index("transpose", axis0, r);
  auto a1 = detail::axis_index("transpose", axis1, r);
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::swap(perm[a0], perm[a1]);
  return permute(x, std::move(perm));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  if (numel(shape) != x.size()) shape_mismatch("reshape", x.shape(), shape);
  std::vector<T> out(x.values().begin(), x.values().end());
  auto* xn = x.node();
  return detail::finish<T>("reshape", std::move(shape), std::move(out), {x}, [xn](const Node<T>& o) {
    const auto& g = o.grad;
    auto gx = detail::grad_of(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
  });
}

template <class T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, std::ptrdiff_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const std::size_t ax = detail::axis_index("concat", axis, s0.size());
  Shape os = s0;
  os[ax] = 0;
  for (auto& p : parts) {
    if (p.rank() != s0.size()) shape_mismatch("concat", s0, p.shape());
    for (std::size_t i = 0; i < s0.size(); ++i)
      if (i != ax && p.dim(i) != s0[i]) shape_mismatch("concat", s0, p.shape());
    os[ax] += p.dim(ax);
  }
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= s0[i];
  for (std::size_t i = ax + 1; i < s0.size(); ++i) inner *= s0[i];
  const std::size_t out_row = os[ax] * inner;
  std::vector<T> out(numel(os));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (auto& p : parts) {
    offsets.push_back(off);
    const std::size_t row = p.dim(ax) * inner;
    auto pv = p.values();
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(pv.data() + o * row, row, out.data() + o * out_row + off);
    off += row;
  }
  std::vector<Node<T>*> nodes;
  std::vector<std::size_t> rows;
  for (auto& p : parts) {
    nodes.push_back(p.node());
    rows.push_back(p.dim(ax) * inner);
  }
  return detail::finish<T>("concat", std::move(os), std::move(out), parts,
                           [nodes, rows, offsets, outer, out_row](const Node<T>& o) {
    const auto& g = o.grad;
                             for (std::size_t p = 0; p < nodes.size(); ++p) {
                               auto gp = detail::grad_of(nodes[p]);
                               if (gp.empty()) continue;
                               for (std::size_t o = 0; o < outer; ++o)
                                 for (std::size_t j = 0; j < rows[p]; ++j)
                                   gp[o * rows[p] + j] += g[o * out_row + offsets[p] + j];
                             }
                           });
}

/// Elements [begin, end) along `axis`.
template <class T>
Tensor<T> slice(const Tensor<T>& x, std::ptrdiff_t axis, std::size_t begin, std::size_t end) {
  const std::size_t ax = detail::axis_index("slice", axis, x.rank());
  if (begin > end || end > x.dim(ax))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) + ") out of bounds for " +
                     to_string(x.shape()));
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < ax; ++i) outer *= x.dim(i);
  for (std::size_t i = ax + 1; i < x.rank(); ++i) inner *= x.dim(i);
  Shape os = x.shape();
  os[ax] = end - begin;
  const std::size_t in_row = x.dim(ax) * inner, out_row = (end - begin) * inner, off = begin * inner;
  std::vector<T> out(outer * out_row);
  auto xv = x.values();
  for (std::size_t o = 0; o < outer; ++o) std::copy_n(xv.data() + o * in_row + off, out_row, out.data() + o * out_row);
  auto* xn = x.node();
  return detail::finish<T>("slice", std::move(os), std::move(out), {x},
                           [xn, outer, in_row, out_row, off](const Node<T>& o) {
    const auto& g = o.grad;
                             auto gx = detail::grad_of(xn);
                             for (std::size_t o = 0; o < outer; ++o)
                               for (std::size_t j = 0; j < out_row; ++j) gx[o * in_row + off + j] += g[o * out_row + j];
                           });
}

/// Row gather from a [N, d] matrix: out[i] = table[rows[i]]. Doubles as
/// embedding lookup; repeated rows accumulate gradient.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::vector<std::size_t> rows) {
  if (table.rank() != 2) throw ShapeError("gather_rows: expected a matrix, got " + to_string(table.shape()));
  const std::size_t n = table.dim(0), d = table.dim(1);
  std::vector<T> out(rows.size() * d);
  auto tv = table.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= n)
      throw std::out_of_range("gather_rows: index " + std::to_string(rows[i]) + " >= " + std::to_string(n));
    std::copy_n(tv.data() + rows[i] * d, d, out.data() + i * d);
  }
  auto* tn = table.node();
  Shape os{rows.size(), d};
  return detail::finish<T>("gather_rows", std::move(os), std::move(out), {table},
                           [tn, rows = std::move(rows), d](const Node<T>& o) {
    const auto& g = o.grad;
                             auto gt = detail::grad_of(tn);
                             for (std::size_t i = 0; i < rows.size(); ++i)
                               for (std::size_t j = 0; j < d; ++j) gt[rows[i] * d + j] += g[i * d + j];
                           });
}

template <class T>
Tensor<T> embedding(const Tensor<T>& table, const std::vector<int>& ids) {
  std::vector<std::size_t> rows(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0) throw std::out_of_range("embedding: negative index");
    rows[i] = static_cast<std::size_t>(ids[i]);
  }
  return gather_rows(table, std::move(rows));
}

// ---------------------------------------------------------------------------
// Normalizations and nonlinearities (all over the last axis).

template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("softmax: scalar input");
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T* o = out.data() + r * d;
    T mx = *std::max_element(in, in + d);
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += (o[j] = std::exp(in[j] - mx));
    for (std::size_t j = 0; j < d; ++j) o[j] /= s;
  }
  auto* xn = x.node();
  return detail::finish<T>("softmax", x.shape(), std::move(out), {x}, [xn, d, rows](const Node<T>& o) {
    auto gx = detail::grad_of(xn);
    for (std::size_t r = 0; r < rows; ++r) {
      const T* y = o.value.data() + r * d;
      const T* gy = o.grad.data() + r * d;
      T dot = 0;
      for (std::size_t j = 0; j < d; ++j) dot += gy[j] * y[j];
      for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += y[j] * (gy[j] - dot);
    }
  });
}

template <class T>
Tensor<T> log_softmax(const Tensor<T>& x) {
  if (x.rank() == 0) throw ShapeError("log_softmax: scalar input");
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  std::vector<T> out(x.size());
  std::vector<T> probs(x.size());
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mx = *std::max_element(in, in + d);
    T s = 0;
    for (std::size_t j = 0; j < d; ++j) s += std::exp(in[j] - mx);
    T lse = mx + std::log(s);
    for (std::size_t j = 0; j < d; ++j) {
      out[r * d + j] = in[j] - lse;
      probs[r * d + j] = std::exp(out[r * d + j]);
    }
  }
  auto* xn = x.node();
  return detail::finish<T>("log_softmax", x.shape(), std::move(out), {x},
                           [xn, d, rows, probs = std::move(probs)](const Node<T>& o) {
    const auto& g = o.grad;
                             auto gx = detail::grad_of(xn);
                             for (std::size_t r = 0; r < rows; ++r) {
                               T s = 0;
                               for (std::size_t j = 0; j < d; ++j) s += g[r * d + j];
                               for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += g[r * d + j] - probs[r * d + j] * s;
                             }
                           });
}

template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps = T(1e-5)) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  if (gamma.size() != d || beta.size() != d) shape_mismatch("layer_norm", x.shape(), gamma.shape());
  std::vector<T> out(x.size()), xhat(x.size()), inv_std(rows);
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    T mean = 0;
    for (std::size_t j = 0; j < d; ++j) mean += in[j];
    mean /= T(d);
    T var = 0;
    for (std::size_t j = 0; j < d; ++j) var += (in[j] - mean) * (in[j] - mean);
    var /= T(d);
    T is = T(1) / std::sqrt(var + eps);
    inv_std[r] = is;
    for (std::size_t j = 0; j < d; ++j) {
      T h = (in[j] - mean) * is;
      xhat[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  auto* xn = x.node();
  auto* gn = gamma.node();
  auto* bn = beta.node();
  return detail::finish<T>(
      "layer_norm", x.shape(), std::move(out), {x, gamma, beta},
      [xn, gn, bn, d, rows, xhat = std::move(xhat), inv_std = std::move(inv_std)](const Node<T>& o) {
    const auto& g = o.grad;
        auto gx = detail::grad_of(xn);
        auto gg = detail::grad_of(gn);
        auto gb = detail::grad_of(bn);
        std::vector<T> dh(d);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* gr = g.data() + r * d;
          const T* h = xhat.data() + r * d;
          if (!gg.empty())
            for (std::size_t j = 0; j < d; ++j) gg[j] += gr[j] * h[j];
          if (!gb.empty())
            for (std::size_t j = 0; j < d; ++j) gb[j] += gr[j];
          if (gx.empty()) continue;
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < d; ++j) {
            dh[j] = gr[j] * gn->value[j];
            m1 += dh[j];
            m2 += dh[j] * h[j];
          }
          m1 /= T(d);
          m2 /= T(d);
          for (std::size_t j = 0; j < d; ++j) gx[r * d + j] += inv_std[r] * (dh[j] - m1 - h[j] * m2);
        }
      });
}

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
  std::vector<T> out(x.size());
  auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * kInvSqrt2));
  auto* xn = x.node();
  return detail::finish<T>("gelu", x.shape(), std::move(out), {x}, [xn](const Node<T>& o) {
    const auto& g = o.grad;
    auto gx = detail::grad_of(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      T v = xn->value[i];
      T cdf = T(0.5) * (T(1) + std::erf(v * kInvSqrt2));
      T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * v * v);
      gx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.values()) s += v;
  auto* xn = x.node();
  return detail::finish<T>("sum", Shape{}, std::vector<T>{s}, {x}, [xn](const Node<T>& o) {
    const auto& g = o.grad;
    auto gx = detail::grad_of(xn);
    for (auto& v : gx) v += g[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  if (x.size() == 0) throw ShapeError("mean: empty tensor");
  T s = 0;
  for (auto v : x.values()) s += v;
  const T inv = T(1) / T(x.size());
  auto* xn = x.node();
  return detail::finish<T>("mean", Shape{}, std::vector<T>{s * inv}, {x}, [xn, inv](const Node<T>& o) {
    const auto& g = o.grad;
    auto gx = detail::grad_of(xn);
    for (auto& v : gx) v += g[0] * inv;
  });
}

// ---------------------------------------------------------------------------
// Losses.

/// Mean over rows of the label-smoothed cross entropy
///   -sum_v q_v log_softmax(logits)_v,  q = (1 - eps) onehot(target) + eps / V.
template <class T>
Tensor<T> cross_entropy_smoothed(const Tensor<T>& logits, const std::vector<int>& targets, T eps) {
  if (logits.rank() != 2 || logits.dim(0) != targets.size())
    throw ShapeError("cross_entropy_smoothed: logits " + to_string(logits.shape()) + " vs " +
                     std::to_string(targets.size()) + " targets");
  if (eps < T(0) || eps >= T(1)) throw std::invalid_argument("cross_entropy_smoothed: epsilon must lie in [0, 1)");
  const std::size_t n = logits.dim(0), v = logits.dim(1);
  if (n == 0) throw ShapeError("cross_entropy_smoothed: no rows");
  for (int t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= v)
      throw std::out_of_range("cross_entropy_smoothed: target " + std::to_string(t) + " outside [0," +
                              std::to_string(v) + ")");
  const T off = eps / T(v), on = T(1) - eps + off;
  std::vector<T> probs(logits.size());
  T total = 0;
  auto lv = logits.values();
  for (std::size_t r = 0; r < n; ++r) {
    const T* in = lv.data() + r * v;
    T mx = *std::max_element(in, in + v);
    T s = 0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(in[j] - mx);
    T lse = mx + std::log(s);
    T row = 0;
    for (std::size_t j = 0; j < v; ++j) {
      T lp = in[j] - lse;
      probs[r * v + j] = std::exp(lp);
      row -= (static_cast<int>(j) == targets[r] ? on : off) * lp;
    }
    total += row;
  }
  auto* ln = logits.node();
  const T inv = T(1) / T(n);
  return detail::finish<T>("cross_entropy_smoothed", Shape{}, std::vector<T>{total * inv}, {logits},
                           [ln, targets, probs = std::move(probs), n, v, on, off, inv](const Node<T>& o) {
    const auto& g = o.grad;
                             auto gl = detail::grad_of(ln);
                             for (std::size_t r = 0; r < n; ++r)
                               for (std::size_t j = 0; j < v; ++j) {
                                 T q = static_cast<int>(j) == targets[r] ? on : off;
                                 gl[r * v + j] += g[0] * inv * (probs[r * v + j] - q);
                               }
                           });
}

// ---------------------------------------------------------------------------
// Gradient manipulation.

/// Forward identity, no gradient to `x`.
template <class T>
Tensor<T> stop_gradient(const Tensor<T>& x) {
  return Tensor<T>(x.shape(), std::vector<T>(x.values().begin(), x.values().end()));
}

/// Forward identity; backward multiplies the upstream gradient by alpha,
/// i.e. alpha * x + stop_gradient((1 - alpha) * x).
template <class T>
Tensor<T> scale_gradient(const Tensor<T>& x, T alpha) {
  if (alpha < T(0) || alpha > T(1)) throw std::invalid_argument("scale_gradient: alpha must lie in [0, 1]");
  std::vector<T> out(x.values().begin(), x.values().end());
  auto* xn = x.node();
  return detail::finish<T>("scale_gradient", x.shape(), std::move(out), {x}, [xn, alpha](const Node<T>& o) {
    const auto& g = o.grad;
    auto gx = detail::grad_of(xn);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += alpha * g[i];
  });
}

/// Row argmax, lowest index on ties.
template <class T>
std::vector<int> argmax_rows(const Tensor<T>& x) {
  const std::size_t d = x.shape().back(), rows = x.size() / d;
  std::vector<int> out(rows);
  auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = xv.data() + r * d;
    out[r] = static_cast<int>(std::max_element(in, in + d) - in);
  }
  return out;
}

template <class T>
Tensor<T> one_hot(const std::vector<int>& ids, std::size_t classes) {
  std::vector<T> v(ids.size() * classes, T(0));
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= classes)
      throw std::out_of_range("one_hot: index " + std::to_string(ids[i]) + " outside [0," + std::to_string(classes) + ")");
    v[i * classes + static_cast<std::size_t>(ids[i])] = T(1);
  }
  return Tensor<T>(Shape{ids.size(), classes}, std::move(v));
}

/// Forward: exact one-hot of each row's argmax. Backward: identity, the
/// upstream gradient is copied onto `probs`
/// (probs + stop_gradient(onehot - probs) without the rounding).
template <class T>
Tensor<T> straight_through_onehot(const Tensor<T>& probs) {
  const std::size_t d = probs.shape().back();
  auto hot = one_hot<T>(argmax_rows(probs), d);
  std::vector<T> out(hot.values().begin(), hot.values().end());
  auto* pn = probs.node();
  return detail::finish<T>("straight_through_onehot", probs.shape(), std::move(out), {probs},
                           [pn](const Node<T>& o) {
    const auto& g = o.grad;
                             auto gp = detail::grad_of(pn);
                             for (std::size_t i = 0; i < gp.size(); ++i) gp[i] += g[i];
                           });
}

/// Straight-through Gumbel softmax: forward one-hot(argmax(logits + s*G)),
/// backward through softmax(logits + s*G).
template <class T>
Tensor<T> gumbel_softmax(const Tensor<T>& logits, T strength, Rng& rng) {
  if (!(strength > T(0))) throw std::invalid_argument("gumbel_softmax: strength must be positive");
  std::vector<T> noise(logits.size());
  for (auto& v : noise) v = strength * static_cast<T>(rng.gumbel());
  Tensor<T> perturbed = add(logits, Tensor<T>(logits.shape(), std::move(noise)));
  return straight_through_onehot(softmax(perturbed));
}

}  // namespace itit
