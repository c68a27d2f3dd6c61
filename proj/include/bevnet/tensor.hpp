#pragma once

// Reverse-mode automatic differentiation over dense tensors.
//
// Tensors are contiguous row-major arrays with a shape. Operations record
// backward closures onto an ambient per-thread Tape; Tape::backward walks the
// recorded nodes in reverse. Double precision is the default scalar; float is
// available through the same templates for faster training.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace bevnet {

using Shape = std::vector<int>;

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

inline size_t shape_numel(const Shape& s) {
  size_t n = 1;
  for (int d : s) n *= static_cast<size_t>(d);
  return n;
}

[[noreturn]] inline void shape_error(const std::string& what, const Shape& a,
                                     const Shape& b) {
  throw std::invalid_argument(what + ": shapes " + shape_str(a) + " and " +
                              shape_str(b));
}

template <typename S>
struct TensorStorage {
  std::vector<S> data;
  std::vector<S> grad;  // allocated lazily, same length as data
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), S(0));
  }
};

template <typename S>
class Tensor {
 public:
  Tensor() : shape_{0}, st_(std::make_shared<TensorStorage<S>>()) {}

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), st_(std::make_shared<TensorStorage<S>>()) {
    if (shape_numel(shape_) != data.size())
      throw std::invalid_argument("tensor data length " +
                                  std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape_));
    st_->data = std::move(data);
  }

  static Tensor zeros(Shape shape) {
    size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<S>(n, S(0)));
  }
  static Tensor full(Shape shape, S value) {
    size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<S>(n, value));
  }
  static Tensor scalar(S value) { return Tensor({1}, {value}); }

  const Shape& shape() const { return shape_; }
  int dim(int i) const {
    if (i < 0) i += static_cast<int>(shape_.size());
    return shape_[static_cast<size_t>(i)];
  }
  int rank() const { return static_cast<int>(shape_.size()); }
  size_t numel() const { return shape_numel(shape_); }

  S* data() { return st_->data.data(); }
  const S* data() const { return st_->data.data(); }
  std::vector<S>& vec() { return st_->data; }
  const std::vector<S>& vec() const { return st_->data; }

  S item() const {
    if (numel() != 1)
      throw std::invalid_argument("item() on tensor of shape " +
                                  shape_str(shape_));
    return st_->data[0];
  }

  bool requires_grad() const { return st_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    st_->requires_grad = v;
    return *this;
  }

  // Gradient accessors; zero until a backward pass touches this tensor.
  const std::vector<S>& grad() const {
    st_->ensure_grad();
    return st_->grad;
  }
  std::vector<S>& grad_mut() {
    st_->ensure_grad();
    return st_->grad;
  }
  void zero_grad() { st_->grad.clear(); }

  // Same values, no graph connection.
  Tensor detach() const {
    Tensor t(shape_, st_->data);
    return t;
  }

  std::shared_ptr<TensorStorage<S>> storage() const { return st_; }

  // In-place reinterpretation; numel must match. Does not record a node, so
  // only for leaf bookkeeping — use reshape() inside differentiable code.
  Tensor viewed(Shape shape) const {
    if (shape_numel(shape) != numel())
      shape_error("viewed: numel mismatch", shape_, shape);
    Tensor t = *this;
    t.shape_ = std::move(shape);
    return t;
  }

 private:
  Shape shape_;
  std::shared_ptr<TensorStorage<S>> st_;
};

// ----------------------------------------------------------------------------
// Tape

template <typename S>
class Tape {
 public:
  void record(std::function<void()> backward_fn) {
    nodes_.push_back(std::move(backward_fn));
  }

  size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  // Seeds d(loss)/d(loss) = 1 and replays recorded nodes in reverse order.
  void backward(Tensor<S>& loss) {
    if (loss.numel() != 1)
      throw std::invalid_argument("backward() expects a scalar, got " +
                                  shape_str(loss.shape()));
    loss.grad_mut()[0] = S(1);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

template <typename S>
inline Tape<S>*& active_tape() {
  thread_local Tape<S>* tape = nullptr;
  return tape;
}

// RAII activation of a tape for the current thread.
template <typename S>
class TapeScope {
 public:
  explicit TapeScope(Tape<S>& tape) : prev_(active_tape<S>()) {
    active_tape<S>() = &tape;
  }
  ~TapeScope() { active_tape<S>() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<S>* prev_;
};

template <typename S>
inline bool grad_enabled(const Tensor<S>& t) {
  return t.requires_grad() && active_tape<S>() != nullptr;
}

// ----------------------------------------------------------------------------
// Broadcasting (trailing-dimension alignment)

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
  size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (size_t i = 0; i < r; ++i) {
    int da = i < r - a.size() ? 1 : a[i - (r - a.size())];
    int db = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (da != db && da != 1 && db != 1)
      shape_error("broadcast mismatch", a, b);
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides, with zeros on broadcast axes, aligned to `out` rank.
inline std::vector<size_t> broadcast_strides(const Shape& in,
                                             const Shape& out) {
  std::vector<size_t> st(out.size(), 0);
  size_t stride = 1;
  size_t off = out.size() - in.size();
  for (size_t i = in.size(); i-- > 0;) {
    st[i + off] = (in[i] == 1 && out[i + off] != 1) ? 0 : stride;
    stride *= static_cast<size_t>(in[i]);
  }
  return st;
}

namespace detail {

// Calls f(out_linear_index, in_linear_index) for every element of `out`.
template <typename F>
inline void for_each_broadcast(const Shape& out, const std::vector<size_t>& st,
                               F&& f) {
  size_t n = shape_numel(out);
  size_t r = out.size();
  std::vector<size_t> idx(r, 0);
  size_t in = 0;
  for (size_t o = 0; o < n; ++o) {
    f(o, in);
    for (size_t i = r; i-- > 0;) {
      ++idx[i];
      in += st[i];
      if (idx[i] < static_cast<size_t>(out[i])) break;
      idx[i] = 0;
      in -= st[i] * static_cast<size_t>(out[i]);
    }
  }
}

}  // namespace detail

// Reduces a gradient of shape `from` down to shape `to` by summing over
// broadcast axes. Used by every broadcasting binary op's backward rule.
template <typename S>
inline void reduce_broadcast_grad(const std::vector<S>& g, const Shape& from,
                                  std::vector<S>& out, const Shape& to) {
  if (from == to) {
    for (size_t i = 0; i < g.size(); ++i) out[i] += g[i];
    return;
  }
  auto st = broadcast_strides(to, from);
  detail::for_each_broadcast(from, st,
                             [&](size_t o, size_t i) { out[i] += g[o]; });
}

// ----------------------------------------------------------------------------
// Elementwise operations

enum class EwOp { add, sub, mul, div, exp, log, relu, sigmoid, tanh, neg, pow };

namespace detail {

template <typename S>
inline Tensor<S> binary_op(const Tensor<S>& a, const Tensor<S>& b,
                           const char* name, S (*fwd)(S, S),
                           S (*dfa)(S, S, S), S (*dfb)(S, S, S)) {
  Shape os = broadcast_shape(a.shape(), b.shape());
  Tensor<S> out = Tensor<S>::zeros(os);
  const S* pa = a.data();
  const S* pb = b.data();
  S* po = out.data();
  size_t n = out.numel();
  if (a.shape() == os && b.shape() == os) {
    for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], pb[i]);
  } else if (a.shape() == os && b.numel() == 1) {
    S bv = pb[0];
    for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i], bv);
  } else {
    auto sa = broadcast_strides(a.shape(), os);
    auto sb = broadcast_strides(b.shape(), os);
    std::vector<size_t> ia(n), ib(n);
    for_each_broadcast(os, sa, [&](size_t o, size_t i) { ia[o] = i; });
    for_each_broadcast(os, sb, [&](size_t o, size_t i) { ib[o] = i; });
    for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[ia[i]], pb[ib[i]]);
  }
  (void)name;
  if ((a.requires_grad() || b.requires_grad()) &&
      active_tape<S>() != nullptr) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto bs = b.storage();
    auto ost = out.storage();
    Shape ash = a.shape(), bsh = b.shape(), osh = os;
    active_tape<S>()->record([as, bs, ost, ash, bsh, osh, fwd, dfa, dfb]() {
      if (ost->grad.empty()) return;
      size_t n = ost->data.size();
      auto sa = broadcast_strides(ash, osh);
      auto sb = broadcast_strides(bsh, osh);
      std::vector<size_t> ia(n), ib(n);
      for_each_broadcast(osh, sa, [&](size_t o, size_t i) { ia[o] = i; });
      for_each_broadcast(osh, sb, [&](size_t o, size_t i) { ib[o] = i; });
      if (as->requires_grad) {
        as->ensure_grad();
        for (size_t i = 0; i < n; ++i)
          as->grad[ia[i]] +=
              ost->grad[i] * dfa(as->data[ia[i]], bs->data[ib[i]], ost->data[i]);
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        for (size_t i = 0; i < n; ++i)
          bs->grad[ib[i]] +=
              ost->grad[i] * dfb(as->data[ia[i]], bs->data[ib[i]], ost->data[i]);
      }
    });
  }
  return out;
}

template <typename S>
inline Tensor<S> unary_op(const Tensor<S>& a, S (*fwd)(S), S (*df)(S, S)) {
  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  size_t n = out.numel();
  for (size_t i = 0; i < n; ++i) po[i] = fwd(pa[i]);
  if (grad_enabled(a)) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto ost = out.storage();
    active_tape<S>()->record([as, ost, df]() {
      if (ost->grad.empty()) return;
      as->ensure_grad();
      size_t n = ost->data.size();
      for (size_t i = 0; i < n; ++i)
        as->grad[i] += ost->grad[i] * df(as->data[i], ost->data[i]);
    });
  }
  return out;
}

}  // namespace detail

template <typename S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, "add", [](S x, S y) { return x + y; },
      [](S, S, S) { return S(1); }, [](S, S, S) { return S(1); });
}

template <typename S>
Tensor<S> sub(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, "sub", [](S x, S y) { return x - y; },
      [](S, S, S) { return S(1); }, [](S, S, S) { return S(-1); });
}

template <typename S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, "mul", [](S x, S y) { return x * y; },
      [](S, S y, S) { return y; }, [](S x, S, S) { return x; });
}

template <typename S>
Tensor<S> div(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, "div", [](S x, S y) { return x / y; },
      [](S, S y, S) { return S(1) / y; },
      [](S, S y, S o) { return -o / y; });
}

template <typename S>
Tensor<S> pow(const Tensor<S>& a, const Tensor<S>& b) {
  return detail::binary_op<S>(
      a, b, "pow", [](S x, S y) { return std::pow(x, y); },
      [](S x, S y, S) { return y * std::pow(x, y - S(1)); },
      [](S x, S, S o) { return o * std::log(x); });
}

template <typename S>
Tensor<S> exp(const Tensor<S>& a) {
  return detail::unary_op<S>(a, [](S x) { return std::exp(x); },
                             [](S, S o) { return o; });
}

template <typename S>
Tensor<S> log(const Tensor<S>& a) {
  return detail::unary_op<S>(a, [](S x) { return std::log(x); },
                             [](S x, S) { return S(1) / x; });
}

template <typename S>
Tensor<S> relu(const Tensor<S>& a) {
  return detail::unary_op<S>(a, [](S x) { return x > S(0) ? x : S(0); },
                             [](S x, S) { return x > S(0) ? S(1) : S(0); });
}

template <typename S>
Tensor<S> sigmoid(const Tensor<S>& a) {
  return detail::unary_op<S>(
      a,
      [](S x) {
        return x >= S(0) ? S(1) / (S(1) + std::exp(-x))
                         : std::exp(x) / (S(1) + std::exp(x));
      },
      [](S, S o) { return o * (S(1) - o); });
}

template <typename S>
Tensor<S> tanh(const Tensor<S>& a) {
  return detail::unary_op<S>(a, [](S x) { return std::tanh(x); },
                             [](S, S o) { return S(1) - o * o; });
}

template <typename S>
Tensor<S> neg(const Tensor<S>& a) {
  return detail::unary_op<S>(a, [](S x) { return -x; },
                             [](S, S) { return S(-1); });
}

template <typename S>
Tensor<S> abs(const Tensor<S>& a) {
  return detail::unary_op<S>(
      a, [](S x) { return x < S(0) ? -x : x; },
      [](S x, S) { return x < S(0) ? S(-1) : (x > S(0) ? S(1) : S(0)); });
}

template <typename S>
Tensor<S> sqrt(const Tensor<S>& a) {
  return detail::unary_op<S>(a, [](S x) { return std::sqrt(x); },
                             [](S, S o) { return S(0.5) / o; });
}

// Spec-surface dispatcher over the named elementwise kinds. Unary kinds
// ignore b; binary kinds require it.
template <typename S>
Tensor<S> elementwise(EwOp op, const Tensor<S>& a,
                      const Tensor<S>* b = nullptr) {
  auto need_b = [&]() -> const Tensor<S>& {
    if (!b) throw std::invalid_argument("elementwise: binary op needs b");
    return *b;
  };
  switch (op) {
    case EwOp::add: return add(a, need_b());
    case EwOp::sub: return sub(a, need_b());
    case EwOp::mul: return mul(a, need_b());
    case EwOp::div: return div(a, need_b());
    case EwOp::pow: return pow(a, need_b());
    case EwOp::exp: return exp(a);
    case EwOp::log: return log(a);
    case EwOp::relu: return relu(a);
    case EwOp::sigmoid: return sigmoid(a);
    case EwOp::tanh: return tanh(a);
    case EwOp::neg: return neg(a);
  }
  throw std::invalid_argument("elementwise: unknown op kind");
}

// Scalar conveniences.
template <typename S>
Tensor<S> add(const Tensor<S>& a, S c) {
  return add(a, Tensor<S>::scalar(c));
}
template <typename S>
Tensor<S> sub(const Tensor<S>& a, S c) {
  return sub(a, Tensor<S>::scalar(c));
}
template <typename S>
Tensor<S> mul(const Tensor<S>& a, S c) {
  return mul(a, Tensor<S>::scalar(c));
}
template <typename S>
Tensor<S> sub(S c, const Tensor<S>& a) { return add(neg(a), c); }
template <typename S>
Tensor<S> div(S c, const Tensor<S>& a) {
  return div(Tensor<S>::scalar(c), a);
}
template <typename S>
Tensor<S> div(const Tensor<S>& a, S c) {
  return div(a, Tensor<S>::scalar(c));
}
template <typename S>
Tensor<S> pow(const Tensor<S>& a, S c) {
  return pow(a, Tensor<S>::scalar(c));
}

// ----------------------------------------------------------------------------
// Matmul: [..., m, k] x [..., k, n] -> [..., m, n]. Batch dims must match
// exactly, or either operand may be rank-2 (shared across the batch).

template <typename S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
  if (a.rank() < 2 || b.rank() < 2)
    shape_error("matmul: rank < 2", a.shape(), b.shape());
  int m = a.dim(-2), ka = a.dim(-1);
  int kb = b.dim(-2), n = b.dim(-1);
  if (ka != kb) shape_error("matmul: inner dimension mismatch", a.shape(),
                            b.shape());
  Shape abatch(a.shape().begin(), a.shape().end() - 2);
  Shape bbatch(b.shape().begin(), b.shape().end() - 2);
  Shape batch;
  if (abatch == bbatch) batch = abatch;
  else if (abatch.empty()) batch = bbatch;
  else if (bbatch.empty()) batch = abatch;
  else shape_error("matmul: batch dims mismatch", a.shape(), b.shape());

  Shape os = batch;
  os.push_back(m);
  os.push_back(n);
  Tensor<S> out = Tensor<S>::zeros(os);
  size_t nbatch = shape_numel(batch);
  size_t a_step = abatch.empty() ? 0 : static_cast<size_t>(m) * ka;
  size_t b_step = bbatch.empty() ? 0 : static_cast<size_t>(ka) * n;

  auto gemm = [m, n, kdim = ka](const S* A, const S* B, S* C) {
    // C[m,n] += A[m,k] * B[k,n]; j-contiguous inner loop.
    for (int i = 0; i < m; ++i) {
      S* crow = C + static_cast<size_t>(i) * n;
      const S* arow = A + static_cast<size_t>(i) * kdim;
      for (int k = 0; k < kdim; ++k) {
        S av = arow[k];
        if (av == S(0)) continue;
        const S* brow = B + static_cast<size_t>(k) * n;
        for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  };
  auto gemm_bt = [](int rows, int cols, int kk, const S* A, const S* Bt,
                    S* C) {
    // C[rows,cols] += A[rows,kk] * Bt[cols,kk]^T; dot-product inner loop.
    for (int i = 0; i < rows; ++i) {
      const S* arow = A + static_cast<size_t>(i) * kk;
      S* crow = C + static_cast<size_t>(i) * cols;
      for (int j = 0; j < cols; ++j) {
        const S* brow = Bt + static_cast<size_t>(j) * kk;
        S acc = S(0);
        for (int k = 0; k < kk; ++k) acc += arow[k] * brow[k];
        crow[j] += acc;
      }
    }
  };

  {
    const S* pa = a.data();
    const S* pb = b.data();
    S* po = out.data();
    for (size_t bidx = 0; bidx < nbatch; ++bidx)
      gemm(pa + bidx * a_step, pb + bidx * b_step,
           po + bidx * static_cast<size_t>(m) * n);
  }

  if ((a.requires_grad() || b.requires_grad()) &&
      active_tape<S>() != nullptr) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto bs = b.storage();
    auto ost = out.storage();
    active_tape<S>()->record([as, bs, ost, m, n, k = ka, nbatch, a_step,
                              b_step, gemm_bt]() {
      if (ost->grad.empty()) return;
      const S* go = ost->grad.data();
      if (as->requires_grad) {
        as->ensure_grad();
        // dA = dC * B^T
        for (size_t bi = 0; bi < nbatch; ++bi)
          gemm_bt(m, k, n, go + bi * static_cast<size_t>(m) * n,
                  bs->data.data() + bi * b_step,
                  as->grad.data() + bi * a_step);
      }
      if (bs->requires_grad) {
        bs->ensure_grad();
        // dB = A^T * dC, accumulated row-by-row.
        for (size_t bi = 0; bi < nbatch; ++bi) {
          const S* A = as->data.data() + bi * a_step;
          const S* G = go + bi * static_cast<size_t>(m) * n;
          S* dB = bs->grad.data() + bi * b_step;
          for (int i = 0; i < m; ++i) {
            const S* arow = A + static_cast<size_t>(i) * k;
            const S* grow = G + static_cast<size_t>(i) * n;
            for (int kk = 0; kk < k; ++kk) {
              S av = arow[kk];
              if (av == S(0)) continue;
              S* brow = dB + static_cast<size_t>(kk) * n;
              for (int j = 0; j < n; ++j) brow[j] += av * grow[j];
            }
          }
        }
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------------
// Softmax along an axis, stabilized by max subtraction.

template <typename S>
Tensor<S> softmax(const Tensor<S>& a, int axis) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("softmax: axis out of range for shape " +
                                shape_str(a.shape()));
  size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<size_t>(a.dim(i));
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(a.dim(i));
  size_t len = static_cast<size_t>(a.dim(axis));

  Tensor<S> out = Tensor<S>::zeros(a.shape());
  const S* pa = a.data();
  S* po = out.data();
  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      size_t base = o * len * inner + in;
      S mx = pa[base];
      for (size_t l = 1; l < len; ++l)
        mx = std::max(mx, pa[base + l * inner]);
      S sum = S(0);
      for (size_t l = 0; l < len; ++l) {
        S e = std::exp(pa[base + l * inner] - mx);
        po[base + l * inner] = e;
        sum += e;
      }
      S inv = S(1) / sum;
      for (size_t l = 0; l < len; ++l) po[base + l * inner] *= inv;
    }
  }

  if (grad_enabled(a)) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto ost = out.storage();
    active_tape<S>()->record([as, ost, outer, inner, len]() {
      if (ost->grad.empty()) return;
      as->ensure_grad();
      const S* y = ost->data.data();
      const S* gy = ost->grad.data();
      for (size_t o = 0; o < outer; ++o) {
        for (size_t in = 0; in < inner; ++in) {
          size_t base = o * len * inner + in;
          S dot = S(0);
          for (size_t l = 0; l < len; ++l)
            dot += gy[base + l * inner] * y[base + l * inner];
          for (size_t l = 0; l < len; ++l) {
            size_t i = base + l * inner;
            as->grad[i] += y[i] * (gy[i] - dot);
          }
        }
      }
    });
  }
  return out;
}

// ----------------------------------------------------------------------------
// Shape manipulation

template <typename S>
Tensor<S> reshape(const Tensor<S>& a, Shape shape) {
  // A -1 dimension is inferred.
  int infer = -1;
  size_t known = 1;
  for (size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw std::invalid_argument("reshape: multiple -1 dims");
      infer = static_cast<int>(i);
    } else {
      known *= static_cast<size_t>(shape[i]);
    }
  }
  if (infer >= 0) shape[static_cast<size_t>(infer)] =
      static_cast<int>(a.numel() / std::max<size_t>(known, 1));
  if (shape_numel(shape) != a.numel())
    shape_error("reshape: numel mismatch", a.shape(), shape);
  Tensor<S> out(shape, a.vec());
  if (grad_enabled(a)) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto ost = out.storage();
    active_tape<S>()->record([as, ost]() {
      if (ost->grad.empty()) return;
      as->ensure_grad();
      for (size_t i = 0; i < ost->grad.size(); ++i)
        as->grad[i] += ost->grad[i];
    });
  }
  return out;
}

template <typename S>
Tensor<S> permute(const Tensor<S>& a, const std::vector<int>& perm) {
  int r = a.rank();
  if (static_cast<int>(perm.size()) != r)
    throw std::invalid_argument("permute: perm rank mismatch");
  Shape os(r);
  for (int i = 0; i < r; ++i) os[i] = a.dim(perm[i]);
  Tensor<S> out = Tensor<S>::zeros(os);

  std::vector<size_t> in_strides(r, 1);
  for (int i = r - 2; i >= 0; --i)
    in_strides[i] = in_strides[i + 1] * static_cast<size_t>(a.dim(i + 1));
  std::vector<size_t> perm_strides(r);
  for (int i = 0; i < r; ++i) perm_strides[i] = in_strides[perm[i]];

  size_t n = a.numel();
  std::vector<size_t> mapping(n);
  {
    std::vector<size_t> idx(r, 0);
    size_t src = 0;
    for (size_t o = 0; o < n; ++o) {
      mapping[o] = src;
      for (int i = r; i-- > 0;) {
        ++idx[i];
        src += perm_strides[i];
        if (idx[i] < static_cast<size_t>(os[i])) break;
        idx[i] = 0;
        src -= perm_strides[i] * static_cast<size_t>(os[i]);
      }
    }
  }
  const S* pa = a.data();
  S* po = out.data();
  for (size_t o = 0; o < n; ++o) po[o] = pa[mapping[o]];

  if (grad_enabled(a)) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto ost = out.storage();
    active_tape<S>()->record([as, ost, mapping = std::move(mapping)]() {
      if (ost->grad.empty()) return;
      as->ensure_grad();
      for (size_t o = 0; o < ost->grad.size(); ++o)
        as->grad[mapping[o]] += ost->grad[o];
    });
  }
  return out;
}

template <typename S>
Tensor<S> transpose2d(const Tensor<S>& a) {
  if (a.rank() != 2) throw std::invalid_argument("transpose2d: rank != 2");
  return permute(a, {1, 0});
}

template <typename S>
Tensor<S> concat(const std::vector<Tensor<S>>& ts, int axis) {
  if (ts.empty()) throw std::invalid_argument("concat: empty input list");
  int r = ts[0].rank();
  if (axis < 0) axis += r;
  int cat = 0;
  for (const auto& t : ts) {
    if (t.rank() != r) shape_error("concat: rank mismatch", ts[0].shape(),
                                   t.shape());
    for (int i = 0; i < r; ++i)
      if (i != axis && t.dim(i) != ts[0].dim(i))
        shape_error("concat: dim mismatch", ts[0].shape(), t.shape());
    cat += t.dim(axis);
  }
  Shape os = ts[0].shape();
  os[static_cast<size_t>(axis)] = cat;
  Tensor<S> out = Tensor<S>::zeros(os);

  size_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<size_t>(os[i]);
  size_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(os[i]);
  size_t out_row = static_cast<size_t>(cat) * inner;

  bool rg = false;
  size_t offset = 0;
  std::vector<std::pair<std::shared_ptr<TensorStorage<S>>, size_t>> pieces;
  for (const auto& t : ts) {
    size_t t_row = static_cast<size_t>(t.dim(axis)) * inner;
    const S* pt = t.data();
    S* po = out.data();
    for (size_t o = 0; o < outer; ++o)
      std::copy(pt + o * t_row, pt + (o + 1) * t_row,
                po + o * out_row + offset);
    rg = rg || t.requires_grad();
    pieces.emplace_back(t.storage(), offset);
    offset += t_row;
  }

  if (rg && active_tape<S>() != nullptr) {
    out.set_requires_grad(true);
    auto ost = out.storage();
    active_tape<S>()->record([ost, pieces, outer, inner, out_row]() {
      if (ost->grad.empty()) return;
      for (auto& [st, off] : pieces) {
        if (!st->requires_grad) continue;
        st->ensure_grad();
        size_t t_row = st->data.size() / std::max<size_t>(outer, 1);
        (void)inner;
        for (size_t o = 0; o < outer; ++o)
          for (size_t i = 0; i < t_row; ++i)
            st->grad[o * t_row + i] += ost->grad[o * out_row + off + i];
      }
    });
  }
  return out;
}

// Contiguous slice along one axis.
template <typename S>
Tensor<S> slice(const Tensor<S>& a, int axis, int start, int len) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (start < 0 || len < 0 || start + len > a.dim(axis))
    throw std::invalid_argument("slice: range [" + std::to_string(start) +
                                "," + std::to_string(start + len) +
                                ") out of bounds for shape " +
                                shape_str(a.shape()));
  Shape os = a.shape();
  os[static_cast<size_t>(axis)] = len;
  Tensor<S> out = Tensor<S>::zeros(os);
  size_t inner = 1;
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<size_t>(a.dim(i));
  size_t outer = 1;
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(a.dim(i));
  size_t in_row = static_cast<size_t>(a.dim(axis)) * inner;
  size_t out_row = static_cast<size_t>(len) * inner;
  size_t off = static_cast<size_t>(start) * inner;

  const S* pa = a.data();
  S* po = out.data();
  for (size_t o = 0; o < outer; ++o)
    std::copy(pa + o * in_row + off, pa + o * in_row + off + out_row,
              po + o * out_row);

  if (grad_enabled(a)) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto ost = out.storage();
    active_tape<S>()->record([as, ost, outer, in_row, out_row, off]() {
      if (ost->grad.empty()) return;
      as->ensure_grad();
      for (size_t o = 0; o < outer; ++o)
        for (size_t i = 0; i < out_row; ++i)
          as->grad[o * in_row + off + i] += ost->grad[o * out_row + i];
    });
  }
  return out;
}

// Rows of a 2-D (or higher) tensor by index along axis 0; backward scatters.
template <typename S>
Tensor<S> gather_rows(const Tensor<S>& a, const std::vector<int>& idx) {
  if (a.rank() < 1) throw std::invalid_argument("gather_rows: rank 0");
  size_t row = a.numel() / static_cast<size_t>(a.dim(0));
  Shape os = a.shape();
  os[0] = static_cast<int>(idx.size());
  Tensor<S> out = Tensor<S>::zeros(os);
  const S* pa = a.data();
  S* po = out.data();
  for (size_t i = 0; i < idx.size(); ++i) {
    int r = idx[i];
    if (r < 0 || r >= a.dim(0))
      throw std::invalid_argument("gather_rows: index " + std::to_string(r) +
                                  " out of range 0.." +
                                  std::to_string(a.dim(0) - 1));
    std::copy(pa + r * row, pa + (r + 1) * row, po + i * row);
  }
  if (grad_enabled(a)) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto ost = out.storage();
    active_tape<S>()->record([as, ost, idx, row]() {
      if (ost->grad.empty()) return;
      as->ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i)
        for (size_t j = 0; j < row; ++j)
          as->grad[static_cast<size_t>(idx[i]) * row + j] +=
              ost->grad[i * row + j];
    });
  }
  return out;
}

// Scatter-add rows of `a` into a fresh [n_rows, ...] tensor; backward gathers.
template <typename S>
Tensor<S> scatter_add_rows(const Tensor<S>& a, const std::vector<int>& idx,
                           int n_rows) {
  if (static_cast<size_t>(a.dim(0)) != idx.size())
    throw std::invalid_argument("scatter_add_rows: index count mismatch");
  size_t row = a.numel() / std::max<size_t>(static_cast<size_t>(a.dim(0)), 1);
  Shape os = a.shape();
  os[0] = n_rows;
  Tensor<S> out = Tensor<S>::zeros(os);
  const S* pa = a.data();
  S* po = out.data();
  for (size_t i = 0; i < idx.size(); ++i)
    for (size_t j = 0; j < row; ++j)
      po[static_cast<size_t>(idx[i]) * row + j] += pa[i * row + j];
  if (grad_enabled(a)) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto ost = out.storage();
    active_tape<S>()->record([as, ost, idx, row]() {
      if (ost->grad.empty()) return;
      as->ensure_grad();
      for (size_t i = 0; i < idx.size(); ++i)
        for (size_t j = 0; j < row; ++j)
          as->grad[i * row + j] +=
              ost->grad[static_cast<size_t>(idx[i]) * row + j];
    });
  }
  return out;
}

// ----------------------------------------------------------------------------
// Reductions

enum class ReduceOp { sum, mean, max };

template <typename S>
Tensor<S> reduce(const Tensor<S>& a, ReduceOp op, int axis,
                 bool keepdim = false) {
  int r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r)
    throw std::invalid_argument("reduce: axis out of range for shape " +
                                shape_str(a.shape()));
  size_t inner = 1, outer = 1;
  for (int i = axis + 1; i < r; ++i) inner *= static_cast<size_t>(a.dim(i));
  for (int i = 0; i < axis; ++i) outer *= static_cast<size_t>(a.dim(i));
  size_t len = static_cast<size_t>(a.dim(axis));

  Shape os;
  for (int i = 0; i < r; ++i) {
    if (i == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(a.dim(i));
    }
  }
  if (os.empty()) os.push_back(1);
  Tensor<S> out = Tensor<S>::zeros(os);
  const S* pa = a.data();
  S* po = out.data();
  std::vector<int> argmax;
  if (op == ReduceOp::max) argmax.resize(outer * inner);

  for (size_t o = 0; o < outer; ++o) {
    for (size_t in = 0; in < inner; ++in) {
      size_t base = o * len * inner + in;
      size_t oidx = o * inner + in;
      if (op == ReduceOp::max) {
        S best = pa[base];
        int bidx = 0;
        for (size_t l = 1; l < len; ++l) {
          S v = pa[base + l * inner];
          if (v > best) {
            best = v;
            bidx = static_cast<int>(l);
          }
        }
        po[oidx] = best;
        argmax[oidx] = bidx;
      } else {
        S acc = S(0);
        for (size_t l = 0; l < len; ++l) acc += pa[base + l * inner];
        po[oidx] = op == ReduceOp::mean ? acc / static_cast<S>(len) : acc;
      }
    }
  }

  if (grad_enabled(a)) {
    out.set_requires_grad(true);
    auto as = a.storage();
    auto ost = out.storage();
    active_tape<S>()->record(
        [as, ost, outer, inner, len, op, argmax = std::move(argmax)]() {
          if (ost->grad.empty()) return;
          as->ensure_grad();
          for (size_t o = 0; o < outer; ++o) {
            for (size_t in = 0; in < inner; ++in) {
              size_t base = o * len * inner + in;
              size_t oidx = o * inner + in;
              S g = ost->grad[oidx];
              if (op == ReduceOp::max) {
                as->grad[base + static_cast<size_t>(argmax[oidx]) * inner] += g;
              } else {
                S scale = op == ReduceOp::mean ? g / static_cast<S>(len) : g;
                for (size_t l = 0; l < len; ++l)
                  as->grad[base + l * inner] += scale;
              }
            }
          }
        });
  }
  return out;
}

// Full reduction to a scalar tensor of shape [1].
template <typename S>
Tensor<S> sum_all(const Tensor<S>& a) {
  Tensor<S> flat = reshape(a, {static_cast<int>(a.numel())});
  return reduce(flat, ReduceOp::sum, 0);
}

template <typename S>
Tensor<S> mean_all(const Tensor<S>& a) {
  Tensor<S> flat = reshape(a, {static_cast<int>(a.numel())});
  return reduce(flat, ReduceOp::mean, 0);
}

template <typename S>
Tensor<S> reduce_sum(const Tensor<S>& a, int axis, bool keepdim = false) {
  return reduce(a, ReduceOp::sum, axis, keepdim);
}
template <typename S>
Tensor<S> reduce_mean(const Tensor<S>& a, int axis, bool keepdim = false) {
  return reduce(a, ReduceOp::mean, axis, keepdim);
}
template <typename S>
Tensor<S> reduce_max(const Tensor<S>& a, int axis, bool keepdim = false) {
  return reduce(a, ReduceOp::max, axis, keepdim);
}

template <typename S>
Tensor<S> stack(const std::vector<Tensor<S>>& ts, int axis = 0) {
  std::vector<Tensor<S>> expanded;
  expanded.reserve(ts.size());
  for (const auto& t : ts) {
    Shape s = t.shape();
    s.insert(s.begin() + axis, 1);
    expanded.push_back(reshape(t, s));
  }
  return concat(expanded, axis);
}

}  // namespace bevnet
