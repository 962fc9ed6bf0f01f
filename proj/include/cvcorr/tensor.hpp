#pragma once

// Dense tensors on a reverse-mode tape.
//
// Tensors are value-type handles onto shared nodes (shape + flat data +
// optional gradient). Operations are free functions; while a Tape<S> is
// alive on the current thread they record backward closures onto it, and
// Tape::backward replays the record once in reverse. Without an active
// tape the same functions are plain forward math. All inner dense
// kernels route through Eigen; reductions that feed exactness contracts
// use plain index-order loops.

#include <atomic>
#include <cmath>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <type_traits>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "cvcorr/common.hpp"

namespace cvcorr {

template <typename S>
using MatRM = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename S>
using MapM = Eigen::Map<MatRM<S>>;
template <typename S>
using CMapM = Eigen::Map<const MatRM<S>>;

// When enabled, every op validates that finite inputs produced finite
// outputs and throws NumericError otherwise. Off by default (it adds a
// full pass over each result).
inline std::atomic<bool>& nan_check_flag() {
  static std::atomic<bool> f{false};
  return f;
}
inline void set_nan_check(bool on) { nan_check_flag().store(on); }
inline bool nan_check_enabled() { return nan_check_flag().load(std::memory_order_relaxed); }

template <typename S>
struct TensorNode {
  std::vector<int> shape;
  std::vector<S> value;
  std::vector<S> grad;  // empty until first touched
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  using Node = TensorNode<S>;

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, S fill = S(0), bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    node_->shape = std::move(shape);
    node_->value.assign(static_cast<size_t>(numel(node_->shape)), fill);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(S v, bool requires_grad = false) {
    Tensor t({1}, v, requires_grad);
    return t;
  }
  static Tensor from(std::vector<int> shape, std::vector<S> data, bool requires_grad = false) {
    if (static_cast<int64_t>(data.size()) != numel(shape))
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = std::move(shape);
    t.node_->value = std::move(data);
    t.node_->requires_grad = requires_grad;
    return t;
  }
  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape), S(0)); }
  static Tensor ones(std::vector<int> shape) { return Tensor(std::move(shape), S(1)); }
  static Tensor full(std::vector<int> shape, S v) { return Tensor(std::move(shape), v); }

  bool defined() const { return node_ != nullptr; }
  const std::vector<int>& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }

  std::vector<S>& data() { return node_->value; }
  const std::vector<S>& data() const { return node_->value; }
  S* ptr() { return node_->value.data(); }
  const S* ptr() const { return node_->value.data(); }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  std::vector<S>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<S>& grad() const {
    node_->ensure_grad();
    return node_->grad;
  }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), S(0));
  }

  S item() const {
    if (size() != 1) throw UsageError("item() requires a scalar tensor, got " + shape_str(shape()));
    return node_->value[0];
  }

  // Element accessors for tests and small hand-written kernels.
  S& operator()(int i) { return node_->value[static_cast<size_t>(i)]; }
  S operator()(int i) const { return node_->value[static_cast<size_t>(i)]; }
  S& operator()(int i, int j) { return node_->value[static_cast<size_t>(i) * dim(1) + j]; }
  S operator()(int i, int j) const { return node_->value[static_cast<size_t>(i) * dim(1) + j]; }
  S& operator()(int c, int i, int j) {
    return node_->value[(static_cast<size_t>(c) * dim(1) + i) * dim(2) + j];
  }
  S operator()(int c, int i, int j) const {
    return node_->value[(static_cast<size_t>(c) * dim(1) + i) * dim(2) + j];
  }

  // Deep copy with no tape linkage.
  Tensor clone() const {
    Tensor t;
    t.node_ = std::make_shared<Node>();
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    t.node_->requires_grad = node_->requires_grad;
    return t;
  }

  template <typename T>
  Tensor<T> cast() const {
    std::vector<T> v(node_->value.size());
    for (size_t i = 0; i < v.size(); ++i) v[i] = static_cast<T>(node_->value[i]);
    return Tensor<T>::from(node_->shape, std::move(v), node_->requires_grad);
  }

  std::shared_ptr<Node> node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Ordered operation record for one differentiation pass. Constructing a
// Tape makes it the active tape for the current thread (nestable);
// destruction restores the previous one. A step's closure captures the
// node pointers and saved activations it needs.
template <typename S>
class Tape {
 public:
  Tape() : prev_(active_) { active_ = this; }
  ~Tape() { active_ = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return active_; }

  void record(const char* op, std::shared_ptr<TensorNode<S>> out, std::function<void()> fn) {
    steps_.push_back(Step{op, std::move(out), std::move(fn)});
  }

  size_t size() const { return steps_.size(); }

  // Reverse sweep from a scalar loss. Gradients of op outputs are reset
  // each call; leaf gradients accumulate across calls.
  void backward(const Tensor<S>& loss) {
    if (loss.size() != 1)
      throw UsageError("backward() requires a scalar loss, got " + shape_str(loss.shape()));
    for (auto& s : steps_) {
      s.out->ensure_grad();
      std::fill(s.out->grad.begin(), s.out->grad.end(), S(0));
    }
    auto ln = loss.node();
    ln->ensure_grad();
    ln->grad[0] += S(1);
    for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) it->fn();
  }

 private:
  struct Step {
    const char* op;
    std::shared_ptr<TensorNode<S>> out;
    std::function<void()> fn;
  };
  std::vector<Step> steps_;
  Tape* prev_ = nullptr;
  static thread_local Tape* active_;
};

template <typename S>
thread_local Tape<S>* Tape<S>::active_ = nullptr;

namespace detail {

template <typename S>
inline bool tracking(std::initializer_list<const Tensor<S>*> ins) {
  if (!Tape<S>::active()) return false;
  for (const Tensor<S>* t : ins)
    if (t->requires_grad()) return true;
  return false;
}

template <typename S>
inline void check_finite(const char* op, const Tensor<S>& out) {
  if (!nan_check_enabled()) return;
  for (S v : out.data())
    if (!std::isfinite(v))
      throw NumericError(std::string(op) + " produced a non-finite value");
}

template <typename S>
inline void require_same_shape(const char* op, const Tensor<S>& a, const Tensor<S>& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops. Shapes must match exactly, or one operand may be
// a scalar (single-element) tensor; no other broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

enum class BinKind { add, sub, mul, div };

template <typename S>
Tensor<S> binary_op(const char* name, BinKind kind, const Tensor<S>& a, const Tensor<S>& b) {
  const bool a_scalar = a.size() == 1;
  const bool b_scalar = b.size() == 1;
  if (!a_scalar && !b_scalar) require_same_shape(name, a, b);

  const Tensor<S>& big = (a_scalar && !b_scalar) ? b : a;
  Tensor<S> out(big.shape());
  const int64_t n = out.size();
  const S* pa = a.ptr();
  const S* pb = b.ptr();
  S* po = out.ptr();
  const int64_t sa = a_scalar ? 0 : 1;
  const int64_t sb = b_scalar ? 0 : 1;
  switch (kind) {
    case BinKind::add:
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] + pb[i * sb];
      break;
    case BinKind::sub:
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] - pb[i * sb];
      break;
    case BinKind::mul:
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] * pb[i * sb];
      break;
    case BinKind::div:
      for (int64_t i = 0; i < n; ++i) po[i] = pa[i * sa] / pb[i * sb];
      break;
  }
  check_finite(name, out);

  if (tracking<S>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<S>::active()->record(name, on, [name, kind, an, bn, on, n, sa, sb] {
      const S* g = on->grad.data();
      if (an->requires_grad) {
        an->ensure_grad();
        S* ga = an->grad.data();
        const S* pb2 = bn->value.data();
        const S* pa2 = an->value.data();
        switch (kind) {
          case BinKind::add:
            for (int64_t i = 0; i < n; ++i) ga[i * sa] += g[i];
            break;
          case BinKind::sub:
            for (int64_t i = 0; i < n; ++i) ga[i * sa] += g[i];
            break;
          case BinKind::mul:
            for (int64_t i = 0; i < n; ++i) ga[i * sa] += g[i] * pb2[i * sb];
            break;
          case BinKind::div:
            for (int64_t i = 0; i < n; ++i) ga[i * sa] += g[i] / pb2[i * sb];
            break;
        }
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        S* gb = bn->grad.data();
        const S* pa2 = an->value.data();
        const S* pb2 = bn->value.data();
        switch (kind) {
          case BinKind::add:
            for (int64_t i = 0; i < n; ++i) gb[i * sb] += g[i];
            break;
          case BinKind::sub:
            for (int64_t i = 0; i < n; ++i) gb[i * sb] -= g[i];
            break;
          case BinKind::mul:
            for (int64_t i = 0; i < n; ++i) gb[i * sb] += g[i] * pa2[i * sa];
            break;
          case BinKind::div:
            for (int64_t i = 0; i < n; ++i) {
              const S b2 = pb2[i * sb];
              gb[i * sb] -= g[i] * pa2[i * sa] / (b2 * b2);
            }
            break;
        }
      }
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op("add", detail::BinKind::add, a, b);
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op("sub", detail::BinKind::sub, a, b);
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op("mul", detail::BinKind::mul, a, b);
}
template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op("div", detail::BinKind::div, a, b);
}

// Constant-scalar variants (the constant carries no gradient).
template <typename S>
Tensor<S> add_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] + c;
  detail::check_finite("add_scalar", out);
  if (detail::tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record("add_scalar", on, [an, on, n] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> mul_scalar(const Tensor<S>& a, S c) {
  Tensor<S> out(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = a.ptr()[i] * c;
  detail::check_finite("mul_scalar", out);
  if (detail::tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record("mul_scalar", on, [an, on, n, c] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[i] += c * on->grad[i];
    });
  }
  return out;
}

// c - x, used for 1-mask terms.
template <typename S>
Tensor<S> rsub_scalar(S c, const Tensor<S>& a) {
  Tensor<S> out(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = c - a.ptr()[i];
  detail::check_finite("rsub_scalar", out);
  if (detail::tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record("rsub_scalar", on, [an, on, n] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i) an->grad[i] -= on->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return mul_scalar(a, S(-1));
}
template <typename S>
Tensor<S> one_minus(const Tensor<S>& a) {
  return rsub_scalar(S(1), a);
}

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

namespace detail {

template <typename S, typename Fwd, typename Bwd>
Tensor<S> unary_op(const char* name, const Tensor<S>& a, Fwd fwd, Bwd dfn) {
  Tensor<S> out(a.shape());
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) out.ptr()[i] = fwd(a.ptr()[i]);
  check_finite(name, out);
  if (tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record(name, on, [an, on, n, dfn] {
      an->ensure_grad();
      for (int64_t i = 0; i < n; ++i)
        an->grad[i] += on->grad[i] * dfn(an->value[i], on->value[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::unary_op(
      "sigmoid", a,
      [](S x) {
        // Split by sign for stability at large |x|.
        if (x >= S(0)) return S(1) / (S(1) + std::exp(-x));
        const S e = std::exp(x);
        return e / (S(1) + e);
      },
      [](S, S y) { return y * (S(1) - y); });
}

// log with a clamp floor: log(max(x, floor)). The gradient is zero in the
// clamped region.
template <typename S>
Tensor<S> log_clamped(const Tensor<S>& a, S floor) {
  return detail::unary_op(
      "log", a, [floor](S x) { return std::log(x < floor ? floor : x); },
      [floor](S x, S) { return x < floor ? S(0) : S(1) / x; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return detail::unary_op(
      "relu", a, [](S x) { return x > S(0) ? x : S(0); },
      [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

// Exact GELU: x * Phi(x).
template <typename S>
Tensor<S> gelu(const Tensor<S>& a) {
  constexpr double inv_sqrt2 = 0.7071067811865475244;
  constexpr double inv_sqrt2pi = 0.3989422804014326779;
  return detail::unary_op(
      "gelu", a,
      [](S x) {
        const double xd = static_cast<double>(x);
        return static_cast<S>(xd * 0.5 * (1.0 + std::erf(xd * inv_sqrt2)));
      },
      [](S x, S) {
        const double xd = static_cast<double>(x);
        const double phi = 0.5 * (1.0 + std::erf(xd * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * xd * xd);
        return static_cast<S>(phi + xd * pdf);
      });
}

// ---------------------------------------------------------------------------
// Reductions. Plain index-order accumulation (bit-stable across runs).
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  S acc = S(0);
  const int64_t n = a.size();
  for (int64_t i = 0; i < n; ++i) acc += a.ptr()[i];
  Tensor<S> out = Tensor<S>::scalar(acc);
  detail::check_finite("sum", out);
  if (detail::tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record("sum", on, [an, on, n] {
      an->ensure_grad();
      const S g = on->grad[0];
      for (int64_t i = 0; i < n; ++i) an->grad[i] += g;
    });
  }
  return out;
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  const int64_t n = a.size();
  S acc = S(0);
  for (int64_t i = 0; i < n; ++i) acc += a.ptr()[i];
  Tensor<S> out = Tensor<S>::scalar(acc / static_cast<S>(n));
  detail::check_finite("mean", out);
  if (detail::tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record("mean", on, [an, on, n] {
      an->ensure_grad();
      const S g = on->grad[0] / static_cast<S>(n);
      for (int64_t i = 0; i < n; ++i) an->grad[i] += g;
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape ops.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<int> shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Tensor<S> out = Tensor<S>::from(std::move(shape), a.data());
  if (detail::tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record("reshape", on, [an, on] {
      an->ensure_grad();
      for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += on->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose(const Tensor<S>& a) {
  if (a.ndim() != 2) throw ShapeError("transpose expects a 2-d tensor, got " + shape_str(a.shape()));
  const int m = a.dim(0), n = a.dim(1);
  Tensor<S> out({n, m});
  CMapM<S> A(a.ptr(), m, n);
  MapM<S> O(out.ptr(), n, m);
  O = A.transpose();
  if (detail::tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record("transpose", on, [an, on, m, n] {
      an->ensure_grad();
      CMapM<S> G(on->grad.data(), n, m);
      MapM<S> GA(an->grad.data(), m, n);
      GA += G.transpose();
    });
  }
  return out;
}

// Rows [r0, r1) of a 2-d tensor.
template <typename S>
Tensor<S> slice_rows(const Tensor<S>& a, int r0, int r1) {
  if (a.ndim() != 2) throw ShapeError("slice_rows expects a 2-d tensor");
  const int m = a.dim(0), n = a.dim(1);
  if (r0 < 0 || r1 > m || r0 >= r1)
    throw ShapeError("slice_rows: range [" + std::to_string(r0) + "," + std::to_string(r1) +
                     ") out of bounds for " + shape_str(a.shape()));
  Tensor<S> out({r1 - r0, n});
  std::memcpy(out.ptr(), a.ptr() + static_cast<size_t>(r0) * n,
              sizeof(S) * static_cast<size_t>(r1 - r0) * n);
  if (detail::tracking<S>({&a})) {
    out.set_requires_grad(true);
    auto an = a.node(), on = out.node();
    Tape<S>::active()->record("slice_rows", on, [an, on, r0, n] {
      an->ensure_grad();
      S* ga = an->grad.data() + static_cast<size_t>(r0) * n;
      for (size_t i = 0; i < on->grad.size(); ++i) ga[i] += on->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> concat_rows(const std::vector<Tensor<S>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: empty input");
  const int cols = parts[0].dim(1);
  int rows = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(1) != cols)
      throw ShapeError("concat_rows: column mismatch");
    rows += p.dim(0);
  }
  Tensor<S> out({rows, cols});
  size_t off = 0;
  for (const auto& p : parts) {
    std::memcpy(out.ptr() + off, p.ptr(), sizeof(S) * static_cast<size_t>(p.size()));
    off += static_cast<size_t>(p.size());
  }
  bool track = false;
  if (Tape<S>::active())
    for (const auto& p : parts)
      if (p.requires_grad()) track = true;
  if (track) {
    out.set_requires_grad(true);
    std::vector<std::shared_ptr<TensorNode<S>>> nodes;
    nodes.reserve(parts.size());
    for (const auto& p : parts) nodes.push_back(p.node());
    auto on = out.node();
    Tape<S>::active()->record("concat_rows", on, [nodes, on] {
      size_t off2 = 0;
      for (auto& nd : nodes) {
        const size_t sz = nd->value.size();
        if (nd->requires_grad) {
          nd->ensure_grad();
          for (size_t i = 0; i < sz; ++i) nd->grad[i] += on->grad[off2 + i];
        }
        off2 += sz;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Linear algebra.
// ---------------------------------------------------------------------------

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<S> out({m, n});
  MapM<S>(out.ptr(), m, n).noalias() = CMapM<S>(a.ptr(), m, k) * CMapM<S>(b.ptr(), k, n);
  detail::check_finite("matmul", out);
  if (detail::tracking<S>({&a, &b})) {
    out.set_requires_grad(true);
    auto an = a.node(), bn = b.node(), on = out.node();
    Tape<S>::active()->record("matmul", on, [an, bn, on, m, k, n] {
      CMapM<S> G(on->grad.data(), m, n);
      if (an->requires_grad) {
        an->ensure_grad();
        MapM<S>(an->grad.data(), m, k).noalias() += G * CMapM<S>(bn->value.data(), k, n).transpose();
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        MapM<S>(bn->grad.data(), k, n).noalias() += CMapM<S>(an->value.data(), m, k).transpose() * G;
      }
    });
  }
  return out;
}

// x[n,d] + b[d] broadcast over rows (the bias pattern).
template <typename S>
Tensor<S> add_rowvec(const Tensor<S>& x, const Tensor<S>& b) {
  if (x.ndim() != 2 || b.size() != x.dim(1))
    throw ShapeError("add_rowvec: " + shape_str(x.shape()) + " vs " + shape_str(b.shape()));
  const int n = x.dim(0), d = x.dim(1);
  Tensor<S> out(x.shape());
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d; ++j) out(i, j) = x(i, j) + b.ptr()[j];
  detail::check_finite("add_rowvec", out);
  if (detail::tracking<S>({&x, &b})) {
    out.set_requires_grad(true);
    auto xn = x.node(), bn = b.node(), on = out.node();
    Tape<S>::active()->record("add_rowvec", on, [xn, bn, on, n, d] {
      if (xn->requires_grad) {
        xn->ensure_grad();
        for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += on->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < d; ++j) bn->grad[j] += on->grad[static_cast<size_t>(i) * d + j];
      }
    });
  }
  return out;
}

template <typename S>
Tensor<S> linear(const Tensor<S>& x, const Tensor<S>& w, const Tensor<S>& b) {
  return add_rowvec(matmul(x, w), b);
}

}  // namespace cvcorr
