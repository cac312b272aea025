// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace xcaps {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

inline Shape shape_without_axis(const Shape& s, std::size_t axis) {
  Shape out;
  out.reserve(s.size() - 1);
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

template <typename T>
class Tape;

// Dense row-major tensor. Value buffers are shared and treated as immutable
// once built; gradients live on the Tape that recorded the tensor.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values)
      : shape_(std::move(shape)),
        values_(std::make_shared<std::vector<T>>(std::move(values))) {
    for (auto e : shape_)
      if (e == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape_));
    if (values_->size() != numel(shape_))
      throw std::invalid_argument("tensor: " + std::to_string(values_->size()) +
                                  " values for shape " + shape_str(shape_));
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  static Tensor full(Shape shape, T v) {
    std::vector<T> vals(numel(shape), v);
    return Tensor(std::move(shape), std::move(vals));
  }

  static Tensor zeros(Shape shape) { return full(std::move(shape), T(0)); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return values_ ? values_->size() : 0; }
  bool empty() const { return !values_; }

  const std::vector<T>& values() const {
    if (!values_) throw std::logic_error("tensor: empty");
    return *values_;
  }

  std::shared_ptr<const std::vector<T>> shared_values() const { return values_; }

  T item() const {
    if (size() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape_));
    return (*values_)[0];
  }

  bool requires_grad() const { return requires_grad_; }
  bool on_tape() const { return tape_ != nullptr; }
  Tape<T>* tape() const { return tape_; }
  std::ptrdiff_t node() const { return node_; }

  // Gradient buffer populated by Tape::backward; empty if this tensor never
  // took part in a backward pass (constants, nodes past the loss).
  const std::vector<T>& grad() const;

 private:
  friend class Tape<T>;
  friend struct TensorAccess;
  Shape shape_{};
  std::shared_ptr<std::vector<T>> values_{};
  Tape<T>* tape_ = nullptr;
  std::ptrdiff_t node_ = -1;
  bool requires_grad_ = false;
};

struct TensorAccess {
  template <typename T>
  static Tensor<T> make(Shape shape, std::shared_ptr<std::vector<T>> values, Tape<T>* tape,
                        std::ptrdiff_t node) {
    Tensor<T> t;
    t.shape_ = std::move(shape);
    t.values_ = std::move(values);
    t.tape_ = tape;
    t.node_ = node;
    t.requires_grad_ = tape != nullptr;
    return t;
  }
};

// Wengert list: nodes are appended in execution order, which is a valid
// topological order, so one reverse sweep visits every node exactly once.
template <typename T>
class Tape {
 public:
  struct Node {
    Shape shape;
    std::shared_ptr<std::vector<T>> values;
    std::vector<T> grad;
    std::function<void(Tape&)> backward;  // accumulates into input grads
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<T> leaf(Shape shape, std::shared_ptr<std::vector<T>> values, bool requires_grad = true) {
    if (!values || values->size() != numel(shape))
      throw std::invalid_argument("tape: leaf values do not match shape " + shape_str(shape));
    if (!requires_grad) return TensorAccess::make<T>(std::move(shape), std::move(values), nullptr, -1);
    std::ptrdiff_t id = record(shape, values, nullptr);
    return TensorAccess::make<T>(std::move(shape), std::move(values), this, id);
  }

  Tensor<T> leaf(Shape shape, std::vector<T> values, bool requires_grad = true) {
    return leaf(std::move(shape), std::make_shared<std::vector<T>>(std::move(values)), requires_grad);
  }

  std::ptrdiff_t next_id() const { return static_cast<std::ptrdiff_t>(nodes_.size()); }

  std::ptrdiff_t record(Shape shape, std::shared_ptr<std::vector<T>> values,
                        std::function<void(Tape&)> backward) {
    nodes_.push_back(Node{std::move(shape), std::move(values), {}, std::move(backward)});
    return static_cast<std::ptrdiff_t>(nodes_.size()) - 1;
  }

  std::vector<T>& grad_buf(std::ptrdiff_t id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (n.grad.empty()) n.grad.assign(numel(n.shape), T(0));
    return n.grad;
  }

  const std::vector<T>& grad(std::ptrdiff_t id) const {
    static const std::vector<T> kEmpty;
    if (id < 0 || id >= static_cast<std::ptrdiff_t>(nodes_.size())) return kEmpty;
    return nodes_[static_cast<std::size_t>(id)].grad;
  }

  std::size_t node_count() const { return nodes_.size(); }

  // Reverse sweep from a scalar loss. Every node at or before the loss gets a
  // zero-initialized gradient buffer, so tensors disconnected from the loss
  // read back zeros rather than stale data.
  void backward(const Tensor<T>& loss) {
    if (loss.tape() != this || loss.node() < 0)
      throw std::invalid_argument("backward: loss is not recorded on this tape");
    if (loss.size() != 1)
      throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
    if (backward_done_)
      throw std::logic_error("backward: called twice without reset_grads()");
    backward_done_ = true;

    const std::ptrdiff_t last = loss.node();
    for (std::ptrdiff_t id = 0; id <= last; ++id) grad_buf(id);
    grad_buf(last)[0] = T(1);
    for (std::ptrdiff_t id = last; id >= 0; --id) {
      Node& n = nodes_[static_cast<std::size_t>(id)];
      if (n.backward) n.backward(*this);
    }
  }

  void reset_grads() {
    for (Node& n : nodes_) n.grad.clear();
    backward_done_ = false;
  }

 private:
  std::vector<Node> nodes_;
  bool backward_done_ = false;
};

template <typename T>
const std::vector<T>& Tensor<T>::grad() const {
  static const std::vector<T> kEmpty;
  if (!tape_ || node_ < 0) return kEmpty;
  return tape_->grad(node_);
}

template <typename T>
bool all_finite(const std::vector<T>& v) {
  for (T x : v)
    if (!std::isfinite(static_cast<double>(x))) return false;
  return true;
}

template <typename T>
bool all_finite(const Tensor<T>& t) {
  return all_finite(t.values());
}

template <typename T>
void assert_finite(const Tensor<T>& t, const std::string& context) {
  if (!all_finite(t)) throw std::runtime_error(context + ": non-finite value detected");
}

// ---------------------------------------------------------------------------
// op plumbing

namespace detail {

template <typename T>
Tape<T>* common_tape(std::initializer_list<const Tensor<T>*> ins) {
  Tape<T>* tape = nullptr;
  for (const Tensor<T>* t : ins) {
    if (!t->requires_grad()) continue;
    if (tape && t->tape() != tape)
      throw std::invalid_argument("op: inputs live on different tapes");
    tape = t->tape();
  }
  return tape;
}

template <typename T>
std::ptrdiff_t grad_id(const Tensor<T>& t) {
  return t.requires_grad() ? t.node() : -1;
}

template <typename T>
Tensor<T> emit(Shape shape, std::vector<T> values, Tape<T>* tape,
               std::function<void(Tape<T>&)> backward) {
  auto buf = std::make_shared<std::vector<T>>(std::move(values));
  if (!tape) return TensorAccess::make<T>(std::move(shape), std::move(buf), nullptr, -1);
  std::ptrdiff_t id = tape->record(shape, buf, std::move(backward));
  return TensorAccess::make<T>(std::move(shape), std::move(buf), tape, id);
}

template <typename T, typename F, typename DF>
Tensor<T> unary_op(const Tensor<T>& a, F f, DF dfdx) {
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);

  Tape<T>* tape = common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = grad_id(a);
    auto aval = a.shared_values();
    auto oval = std::make_shared<std::vector<T>>(out);
    bw = [out_id, aid, aval, oval, dfdx](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& da = tp.grad_buf(aid);
      const std::vector<T>& x = *aval;
      const std::vector<T>& y = *oval;
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * dfdx(x[i], y[i]);
    };
  }
  return emit(a.shape(), std::move(out), tape, std::move(bw));
}

// Binary with scalar broadcast: shapes must match, or one operand has a
// single element (broadcast against the other).
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary_op(const Tensor<T>& a, const Tensor<T>& b, const char* name, F f, DA dfda, DB dfdb) {
  const auto& av = a.values();
  const auto& bv = b.values();
  bool a_scalar = av.size() == 1 && a.shape() != b.shape();
  bool b_scalar = bv.size() == 1 && a.shape() != b.shape();
  Shape out_shape;
  if (a.shape() == b.shape()) {
    out_shape = a.shape();
  } else if (b_scalar) {
    out_shape = a.shape();
    a_scalar = false;
  } else if (a_scalar) {
    out_shape = b.shape();
  } else {
    throw std::invalid_argument(std::string(name) + ": shape mismatch " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  }

  const std::size_t n = numel(out_shape);
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);

  Tape<T>* tape = common_tape<T>({&a, &b});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = grad_id(a);
    const std::ptrdiff_t bid = grad_id(b);
    auto aval = a.shared_values();
    auto bval = b.shared_values();
    auto oval = std::make_shared<std::vector<T>>(out);
    bw = [out_id, aid, bid, a_scalar, b_scalar, aval, bval, oval, dfda, dfdb](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      const std::vector<T>& x = *aval;
      const std::vector<T>& y = *bval;
      const std::vector<T>& o = *oval;
      if (aid >= 0) {
        std::vector<T>& da = tp.grad_buf(aid);
        for (std::size_t i = 0; i < g.size(); ++i)
          da[a_scalar ? 0 : i] += g[i] * dfda(x[a_scalar ? 0 : i], y[b_scalar ? 0 : i], o[i]);
      }
      if (bid >= 0) {
        std::vector<T>& db = tp.grad_buf(bid);
        for (std::size_t i = 0; i < g.size(); ++i)
          db[b_scalar ? 0 : i] += g[i] * dfdb(x[a_scalar ? 0 : i], y[b_scalar ? 0 : i], o[i]);
      }
    };
  }
  return emit(std::move(out_shape), std::move(out), tape, std::move(bw));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// elementwise

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return detail::binary_op(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T o) { return -o / y; });
}

template <typename T>
Tensor<T> neg(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return -x; }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> exp(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::exp(x); }, [](T, T y) { return y; });
}

template <typename T>
Tensor<T> log(const Tensor<T>& a) {
  for (T x : a.values())
    if (!(x > T(0))) throw std::domain_error("log: non-positive input " + std::to_string(x));
  return detail::unary_op(a, [](T x) { return std::log(x); }, [](T x, T) { return T(1) / x; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& a) {
  for (T x : a.values())
    if (x < T(0)) throw std::domain_error("sqrt: negative input " + std::to_string(x));
  return detail::unary_op(a, [](T x) { return std::sqrt(x); },
                          [](T, T y) { return T(0.5) / y; });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& a) {
  auto f = [](T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    T e = std::exp(x);
    return e / (T(1) + e);
  };
  return detail::unary_op(a, f, [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return x > T(0) ? x : T(0); },
                          [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& a) {
  return detail::unary_op(a, [](T x) { return std::abs(x); },
                          [](T x, T) { return x > T(0) ? T(1) : (x < T(0) ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
  return detail::unary_op(a, [c](T x) { return c * x; }, [c](T, T) { return c; });
}

template <typename T>
Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T>
Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T>
Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }
template <typename T>
Tensor<T> operator/(const Tensor<T>& a, const Tensor<T>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// matmul

namespace detail {

// C[m x n] += A[m x k] * B[k x n]
template <typename T>
void gemm_acc(const T* A, const T* B, T* C, std::size_t m, std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const T* arow = A + i * k;
    T* __restrict crow = C + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T a = arow[p];
      const T* __restrict brow = B + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += a * brow[j];
    }
  }
}

}  // namespace detail

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw std::invalid_argument("matmul: expects rank-2 tensors, got " + shape_str(a.shape()) +
                                " and " + shape_str(b.shape()));
  const std::size_t m = a.shape()[0], k = a.shape()[1];
  const std::size_t k2 = b.shape()[0], n = b.shape()[1];
  if (k != k2)
    throw std::invalid_argument("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                                " vs " + shape_str(b.shape()));
  const auto& av = a.values();
  const auto& bv = b.values();
  std::vector<T> out(m * n, T(0));
  detail::gemm_acc(av.data(), bv.data(), out.data(), m, k, n);

  Tape<T>* tape = detail::common_tape<T>({&a, &b});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    const std::ptrdiff_t bid = detail::grad_id(b);
    auto aval = a.shared_values();
    auto bval = b.shared_values();
    bw = [out_id, aid, bid, aval, bval, m, k, n](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      if (aid >= 0) {  // dA = dC * B^T
        std::vector<T>& da = tp.grad_buf(aid);
        const std::vector<T>& bvv = *bval;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            T acc = T(0);
            const T* grow = g.data() + i * n;
            const T* brow = bvv.data() + p * n;
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            da[i * k + p] += acc;
          }
      }
      if (bid >= 0) {  // dB = A^T * dC
        std::vector<T>& db = tp.grad_buf(bid);
        const std::vector<T>& avv = *aval;
        for (std::size_t p = 0; p < k; ++p) {
          T* dbrow = db.data() + p * n;
          for (std::size_t i = 0; i < m; ++i) {
            const T x = avv[i * k + p];
            const T* grow = g.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) dbrow[j] += x * grow[j];
          }
        }
      }
    };
  }
  return detail::emit(Shape{m, n}, std::move(out), tape, std::move(bw));
}

// ---------------------------------------------------------------------------
// conv2d: valid cross-correlation, input [Ci x H x W], kernels [Co x Ci x kh x kw].
// Lowered to im2col + accumulate-style matrix products so the inner loops stay
// contiguous and vectorize.

namespace detail {

// columns[(ci*kh*kw) x (ho*wo)] from the input patchwise
template <typename T>
void im2col(const T* in, std::size_t ci, std::size_t h, std::size_t w, std::size_t kh,
            std::size_t kw, std::size_t stride, std::size_t ho, std::size_t wo, T* cols) {
  const std::size_t L = ho * wo;
  for (std::size_t icn = 0; icn < ci; ++icn)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        T* dst = cols + ((icn * kh + ky) * kw + kx) * L;
        for (std::size_t y = 0; y < ho; ++y) {
          const T* src = in + icn * h * w + (y * stride + ky) * w + kx;
          if (stride == 1) {
            for (std::size_t x = 0; x < wo; ++x) dst[y * wo + x] = src[x];
          } else {
            for (std::size_t x = 0; x < wo; ++x) dst[y * wo + x] = src[x * stride];
          }
        }
      }
}

template <typename T>
void col2im_acc(const T* cols, std::size_t ci, std::size_t h, std::size_t w, std::size_t kh,
                std::size_t kw, std::size_t stride, std::size_t ho, std::size_t wo, T* in) {
  const std::size_t L = ho * wo;
  for (std::size_t icn = 0; icn < ci; ++icn)
    for (std::size_t ky = 0; ky < kh; ++ky)
      for (std::size_t kx = 0; kx < kw; ++kx) {
        const T* src = cols + ((icn * kh + ky) * kw + kx) * L;
        for (std::size_t y = 0; y < ho; ++y) {
          T* dst = in + icn * h * w + (y * stride + ky) * w + kx;
          for (std::size_t x = 0; x < wo; ++x) dst[x * stride] += src[y * wo + x];
        }
      }
}

}  // namespace detail

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, const Tensor<T>& bias,
                 std::size_t stride) {
  if (input.rank() != 3) throw std::invalid_argument("conv2d: input must be CxHxW, got " + shape_str(input.shape()));
  if (kernels.rank() != 4)
    throw std::invalid_argument("conv2d: kernels must be CoxCixKhxKw, got " + shape_str(kernels.shape()));
  if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
  const std::size_t ci = input.shape()[0], h = input.shape()[1], w = input.shape()[2];
  const std::size_t co = kernels.shape()[0], kci = kernels.shape()[1];
  const std::size_t kh = kernels.shape()[2], kw = kernels.shape()[3];
  if (kci != ci)
    throw std::invalid_argument("conv2d: kernel input channels " + std::to_string(kci) +
                                " != input channels " + std::to_string(ci));
  if (kh > h || kw > w)
    throw std::invalid_argument("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                                " larger than input " + std::to_string(h) + "x" + std::to_string(w));
  const bool has_bias = !bias.empty();
  if (has_bias && bias.size() != co)
    throw std::invalid_argument("conv2d: bias size must equal output channels");

  const std::size_t ho = (h - kh) / stride + 1;
  const std::size_t wo = (w - kw) / stride + 1;
  const std::size_t L = ho * wo;
  const std::size_t K = ci * kh * kw;

  auto cols = std::make_shared<std::vector<T>>(K * L);
  detail::im2col(input.values().data(), ci, h, w, kh, kw, stride, ho, wo, cols->data());

  std::vector<T> out(co * L, T(0));
  if (has_bias) {
    for (std::size_t oc = 0; oc < co; ++oc) {
      const T b = bias.values()[oc];
      for (std::size_t i = 0; i < L; ++i) out[oc * L + i] = b;
    }
  }
  detail::gemm_acc(kernels.values().data(), cols->data(), out.data(), co, K, L);

  Tape<T>* tape = detail::common_tape<T>({&input, &kernels, &bias});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t iid = detail::grad_id(input);
    const std::ptrdiff_t kid = detail::grad_id(kernels);
    const std::ptrdiff_t bid = has_bias ? detail::grad_id(bias) : -1;
    auto kval_p = kernels.shared_values();
    bw = [=](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      if (bid >= 0) {
        std::vector<T>& db = tp.grad_buf(bid);
        for (std::size_t oc = 0; oc < co; ++oc) {
          T acc = T(0);
          const T* gplane = g.data() + oc * L;
          for (std::size_t i = 0; i < L; ++i) acc += gplane[i];
          db[oc] += acc;
        }
      }
      if (kid >= 0) {
        // dK[co x K] += G[co x L] * cols^T; transpose cols once so the inner
        // loop runs contiguous
        std::vector<T> colsT(L * K);
        for (std::size_t r = 0; r < K; ++r)
          for (std::size_t l = 0; l < L; ++l) colsT[l * K + r] = (*cols)[r * L + l];
        std::vector<T>& dk = tp.grad_buf(kid);
        for (std::size_t oc = 0; oc < co; ++oc) {
          const T* grow = g.data() + oc * L;
          T* __restrict dkrow = dk.data() + oc * K;
          for (std::size_t l = 0; l < L; ++l) {
            const T gv = grow[l];
            const T* __restrict crow = colsT.data() + l * K;
            for (std::size_t r = 0; r < K; ++r) dkrow[r] += gv * crow[r];
          }
        }
      }
      if (iid >= 0) {
        // dcols[K x L] = W^T * G, then scatter back through col2im
        std::vector<T> dcols(K * L, T(0));
        const std::vector<T>& kvv = *kval_p;
        for (std::size_t oc = 0; oc < co; ++oc) {
          const T* grow = g.data() + oc * L;
          const T* krow = kvv.data() + oc * K;
          for (std::size_t r = 0; r < K; ++r) {
            const T kv = krow[r];
            T* __restrict drow = dcols.data() + r * L;
            for (std::size_t l = 0; l < L; ++l) drow[l] += kv * grow[l];
          }
        }
        std::vector<T>& di = tp.grad_buf(iid);
        detail::col2im_acc(dcols.data(), ci, h, w, kh, kw, stride, ho, wo, di.data());
      }
    };
  }
  return detail::emit(Shape{co, ho, wo}, std::move(out), tape, std::move(bw));
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& kernels, std::size_t stride) {
  return conv2d(input, kernels, Tensor<T>{}, stride);
}

// ---------------------------------------------------------------------------
// reductions along one axis (axis removed from the shape)

namespace detail {

template <typename T>
void check_axis(const Tensor<T>& a, std::size_t axis, const char* name) {
  if (axis >= a.rank())
    throw std::invalid_argument(std::string(name) + ": axis " + std::to_string(axis) +
                                " out of range for " + shape_str(a.shape()));
}

inline void axis_spans(const Shape& s, std::size_t axis, std::size_t& outer, std::size_t& n,
                       std::size_t& inner) {
  outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  n = s[axis];
  inner = 1;
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
}

}  // namespace detail

template <typename T>
Tensor<T> reduce_sum(const Tensor<T>& a, std::size_t axis) {
  detail::check_axis(a, axis, "reduce_sum");
  std::size_t outer, n, inner;
  detail::axis_spans(a.shape(), axis, outer, n, inner);
  const auto& av = a.values();
  std::vector<T> out(outer * inner, T(0));
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t j = 0; j < n; ++j) {
      const T* src = av.data() + (o * n + j) * inner;
      T* dst = out.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
    }

  Tape<T>* tape = detail::common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    bw = [out_id, aid, outer, n, inner](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& da = tp.grad_buf(aid);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t j = 0; j < n; ++j) {
          T* dst = da.data() + (o * n + j) * inner;
          const T* src = g.data() + o * inner;
          for (std::size_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  }
  return detail::emit(shape_without_axis(a.shape(), axis), std::move(out), tape, std::move(bw));
}

template <typename T>
Tensor<T> reduce_mean(const Tensor<T>& a, std::size_t axis) {
  detail::check_axis(a, axis, "reduce_mean");
  const T inv = T(1) / static_cast<T>(a.shape()[axis]);
  return scale(reduce_sum(a, axis), inv);
}

// max along an axis; gradient flows to the first maximal element
template <typename T>
Tensor<T> reduce_max(const Tensor<T>& a, std::size_t axis) {
  detail::check_axis(a, axis, "reduce_max");
  std::size_t outer, n, inner;
  detail::axis_spans(a.shape(), axis, outer, n, inner);
  const auto& av = a.values();
  std::vector<T> out(outer * inner);
  auto argmax = std::make_shared<std::vector<std::size_t>>(outer * inner, 0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T best = av[(o * n) * inner + i];
      std::size_t bj = 0;
      for (std::size_t j = 1; j < n; ++j) {
        const T v = av[(o * n + j) * inner + i];
        if (v > best) {
          best = v;
          bj = j;
        }
      }
      out[o * inner + i] = best;
      (*argmax)[o * inner + i] = bj;
    }

  Tape<T>* tape = detail::common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    bw = [out_id, aid, argmax, outer, n, inner](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& da = tp.grad_buf(aid);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t j = (*argmax)[o * inner + i];
          da[(o * n + j) * inner + i] += g[o * inner + i];
        }
    };
  }
  return detail::emit(shape_without_axis(a.shape(), axis), std::move(out), tape, std::move(bw));
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& a) {
  const auto& av = a.values();
  T acc = T(0);
  for (T x : av) acc += x;

  Tape<T>* tape = detail::common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    bw = [out_id, aid](Tape<T>& tp) {
      const T g = tp.grad(out_id)[0];
      std::vector<T>& da = tp.grad_buf(aid);
      for (T& d : da) d += g;
    };
  }
  return detail::emit(Shape{}, std::vector<T>{acc}, tape, std::move(bw));
}

// ---------------------------------------------------------------------------
// softmax along an axis, max-shifted for stability

template <typename T>
Tensor<T> softmax(const Tensor<T>& a, std::size_t axis) {
  detail::check_axis(a, axis, "softmax");
  if (!all_finite(a)) throw std::domain_error("softmax: non-finite input");
  std::size_t outer, n, inner;
  detail::axis_spans(a.shape(), axis, outer, n, inner);
  const auto& av = a.values();
  std::vector<T> out(av.size());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T m = av[(o * n) * inner + i];
      for (std::size_t j = 1; j < n; ++j) m = std::max(m, av[(o * n + j) * inner + i]);
      T z = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T e = std::exp(av[(o * n + j) * inner + i] - m);
        out[(o * n + j) * inner + i] = e;
        z += e;
      }
      const T invz = T(1) / z;
      for (std::size_t j = 0; j < n; ++j) out[(o * n + j) * inner + i] *= invz;
    }

  Tape<T>* tape = detail::common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    auto oval = std::make_shared<std::vector<T>>(out);
    bw = [out_id, aid, oval, outer, n, inner](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& da = tp.grad_buf(aid);
      const std::vector<T>& s = *oval;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          T dot = T(0);
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = (o * n + j) * inner + i;
            dot += g[idx] * s[idx];
          }
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = (o * n + j) * inner + i;
            da[idx] += s[idx] * (g[idx] - dot);
          }
        }
    };
  }
  return detail::emit(a.shape(), std::move(out), tape, std::move(bw));
}

// ---------------------------------------------------------------------------
// Euclidean norm along an axis; gradient a/||a|| with epsilon guard at zero

inline constexpr double kNormEps = 1e-12;

template <typename T>
Tensor<T> l2_norm(const Tensor<T>& a, std::size_t axis) {
  detail::check_axis(a, axis, "l2_norm");
  std::size_t outer, n, inner;
  detail::axis_spans(a.shape(), axis, outer, n, inner);
  const auto& av = a.values();
  std::vector<T> out(outer * inner);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t i = 0; i < inner; ++i) {
      T acc = T(0);
      for (std::size_t j = 0; j < n; ++j) {
        const T v = av[(o * n + j) * inner + i];
        acc += v * v;
      }
      out[o * inner + i] = std::sqrt(acc);
    }

  Tape<T>* tape = detail::common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    auto aval = a.shared_values();
    auto oval = std::make_shared<std::vector<T>>(out);
    bw = [out_id, aid, aval, oval, outer, n, inner](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& da = tp.grad_buf(aid);
      const std::vector<T>& x = *aval;
      const std::vector<T>& nv = *oval;
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < inner; ++i) {
          const T denom = std::max(nv[o * inner + i], static_cast<T>(kNormEps));
          const T gn = g[o * inner + i] / denom;
          for (std::size_t j = 0; j < n; ++j) {
            const std::size_t idx = (o * n + j) * inner + i;
            da[idx] += gn * x[idx];
          }
        }
    };
  }
  return detail::emit(shape_without_axis(a.shape(), axis), std::move(out), tape, std::move(bw));
}

// ---------------------------------------------------------------------------
// shape manipulation

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape new_shape) {
  if (numel(new_shape) != a.size())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " to " + shape_str(new_shape) +
                                " changes element count");
  Tape<T>* tape = detail::common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    bw = [out_id, aid](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& da = tp.grad_buf(aid);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
    };
  }
  return detail::emit(std::move(new_shape), std::vector<T>(a.values()), tape, std::move(bw));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a, const std::vector<std::size_t>& perm) {
  if (perm.size() != a.rank()) throw std::invalid_argument("transpose: perm rank mismatch");
  std::vector<bool> seen(perm.size(), false);
  for (auto p : perm) {
    if (p >= perm.size() || seen[p]) throw std::invalid_argument("transpose: invalid permutation");
    seen[p] = true;
  }
  const Shape& in_shape = a.shape();
  Shape out_shape(perm.size());
  for (std::size_t d = 0; d < perm.size(); ++d) out_shape[d] = in_shape[perm[d]];

  std::vector<std::size_t> in_strides(in_shape.size(), 1);
  for (std::size_t d = in_shape.size(); d-- > 1;) in_strides[d - 1] = in_strides[d] * in_shape[d];

  const std::size_t n = a.size();
  auto mapping = std::make_shared<std::vector<std::size_t>>(n);
  {
    std::vector<std::size_t> idx(out_shape.size(), 0);
    for (std::size_t lin = 0; lin < n; ++lin) {
      std::size_t src = 0;
      for (std::size_t d = 0; d < out_shape.size(); ++d) src += idx[d] * in_strides[perm[d]];
      (*mapping)[lin] = src;
      for (std::size_t d = out_shape.size(); d-- > 0;) {
        if (++idx[d] < out_shape[d]) break;
        idx[d] = 0;
      }
    }
  }
  const auto& av = a.values();
  std::vector<T> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[(*mapping)[i]];

  Tape<T>* tape = detail::common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    bw = [out_id, aid, mapping](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& da = tp.grad_buf(aid);
      for (std::size_t i = 0; i < g.size(); ++i) da[(*mapping)[i]] += g[i];
    };
  }
  return detail::emit(std::move(out_shape), std::move(out), tape, std::move(bw));
}

// repeat every element k times along a new trailing axis
template <typename T>
Tensor<T> expand_last(const Tensor<T>& a, std::size_t k) {
  if (k == 0) throw std::invalid_argument("expand_last: k must be positive");
  const auto& av = a.values();
  std::vector<T> out(av.size() * k);
  for (std::size_t i = 0; i < av.size(); ++i)
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] = av[i];
  Shape out_shape = a.shape();
  out_shape.push_back(k);

  Tape<T>* tape = detail::common_tape<T>({&a});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t aid = detail::grad_id(a);
    bw = [out_id, aid, k](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& da = tp.grad_buf(aid);
      for (std::size_t i = 0; i < da.size(); ++i) {
        T acc = T(0);
        for (std::size_t j = 0; j < k; ++j) acc += g[i * k + j];
        da[i] += acc;
      }
    };
  }
  return detail::emit(std::move(out_shape), std::move(out), tape, std::move(bw));
}

}  // namespace xcaps
