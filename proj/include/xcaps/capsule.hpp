// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <utility>
#include <vector>

#include "xcaps/tensor.hpp"

namespace xcaps::caps {

enum class RoutingMode { kSigmoid, kSoftmax };

// mode=sigmoid pairs with prior 1 (per-edge logistic, children may feed every
// parent); mode=softmax pairs with prior 0 (per-child competition).
struct RoutingConfig {
  RoutingMode mode = RoutingMode::kSigmoid;
  std::size_t iterations = 3;
  double prior_init = 1.0;

  static RoutingConfig sigmoid(std::size_t iterations = 3) {
    return RoutingConfig{RoutingMode::kSigmoid, iterations, 1.0};
  }
  static RoutingConfig softmax(std::size_t iterations = 3) {
    return RoutingConfig{RoutingMode::kSoftmax, iterations, 0.0};
  }

  void validate() const {
    if (iterations < 1) throw std::invalid_argument("routing: iterations must be >= 1");
    if (mode == RoutingMode::kSigmoid && prior_init != 1.0)
      throw std::invalid_argument("routing: sigmoid mode requires prior_init = 1");
    if (mode == RoutingMode::kSoftmax && prior_init != 0.0)
      throw std::invalid_argument("routing: softmax mode requires prior_init = 0");
  }
};

// A set of capsule types, each a grid of pose vectors; data is [types x grid x dim].
template <typename T>
struct CapsuleTensor {
  std::size_t types = 0;
  std::size_t grid = 0;
  std::size_t dim = 0;
  Tensor<T> data;

  CapsuleTensor() = default;
  CapsuleTensor(std::size_t types_, std::size_t grid_, std::size_t dim_, Tensor<T> data_)
      : types(types_), grid(grid_), dim(dim_), data(std::move(data_)) {
    if (data.size() != types * grid * dim)
      throw std::invalid_argument("capsule tensor: data does not match types*grid*dim");
  }

  std::size_t count() const { return types * grid; }

  // flat [count x dim] view
  Tensor<T> rows() const { return xcaps::reshape(data, Shape{count(), dim}); }
};

// ---------------------------------------------------------------------------
// squash: v = (|s|^2 / (1 + |s|^2)) * s/|s|, applied along the last axis.
// Composite of checked primitives; the 1e-12 guard makes the zero vector map
// to zero with zero gradient.

inline constexpr double kSquashEps = 1e-12;

template <typename T>
Tensor<T> squash(const Tensor<T>& s) {
  if (s.rank() < 1) throw std::invalid_argument("squash: rank-0 input");
  const std::size_t dim = s.shape().back();
  const std::size_t rows = s.size() / dim;
  Tensor<T> flat = reshape(s, Shape{rows, dim});
  Tensor<T> n2 = reduce_sum(mul(flat, flat), 1);                       // [rows]
  Tensor<T> denom = mul(add(n2, Tensor<T>::scalar(T(1))),
                        sqrt(add(n2, Tensor<T>::scalar(static_cast<T>(kSquashEps)))));
  Tensor<T> factor = div(n2, denom);                                   // |s|^2/((1+|s|^2)|s|)
  Tensor<T> v = mul(flat, expand_last(factor, dim));
  return reshape(v, s.shape());
}

// ---------------------------------------------------------------------------
// routing normalizations over logits b [children x parents]

// Eq-style per-edge logistic: r_ij = exp(b_ij) / (exp(b_ij) + 1). Each entry
// depends only on its own logit, so a child can feed every parent.
template <typename T>
Tensor<T> routing_sigmoid(const Tensor<T>& b) {
  if (b.rank() != 2) throw std::invalid_argument("routing_sigmoid: logits must be [children x parents]");
  return sigmoid(b);
}

// Original per-child competition: each child's row sums to 1 across parents.
template <typename T>
Tensor<T> routing_softmax(const Tensor<T>& b) {
  if (b.rank() != 2) throw std::invalid_argument("routing_softmax: logits must be [children x parents]");
  return softmax(b, 1);
}

namespace detail_caps {

template <typename T>
inline T sigmoid_val(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

// raw-value routing normalization used inside the iteration loop
template <typename T>
std::vector<T> normalize_logits(const std::vector<T>& b, std::size_t children, std::size_t parents,
                                RoutingMode mode) {
  std::vector<T> r(b.size());
  if (mode == RoutingMode::kSigmoid) {
    for (std::size_t i = 0; i < b.size(); ++i) r[i] = sigmoid_val(b[i]);
  } else {
    for (std::size_t c = 0; c < children; ++c) {
      const T* row = b.data() + c * parents;
      T m = row[0];
      for (std::size_t j = 1; j < parents; ++j) m = std::max(m, row[j]);
      T z = T(0);
      for (std::size_t j = 0; j < parents; ++j) {
        r[c * parents + j] = std::exp(row[j] - m);
        z += r[c * parents + j];
      }
      for (std::size_t j = 0; j < parents; ++j) r[c * parents + j] /= z;
    }
  }
  return r;
}

template <typename T>
std::vector<T> squash_values(const std::vector<T>& s, std::size_t rows, std::size_t dim) {
  std::vector<T> v(s.size());
  for (std::size_t p = 0; p < rows; ++p) {
    T n2 = T(0);
    for (std::size_t d = 0; d < dim; ++d) n2 += s[p * dim + d] * s[p * dim + d];
    const T factor = n2 / ((n2 + T(1)) * std::sqrt(n2 + static_cast<T>(kSquashEps)));
    for (std::size_t d = 0; d < dim; ++d) v[p * dim + d] = s[p * dim + d] * factor;
  }
  return v;
}

}  // namespace detail_caps

// s_j = sum_i r_ij * u_hat[i,j,:] with fixed (non-differentiable) coefficients r.
template <typename T>
Tensor<T> route_weighted_sum(const Tensor<T>& u_hat, const std::vector<T>& r) {
  if (u_hat.rank() != 3)
    throw std::invalid_argument("route_weighted_sum: predictions must be [children x parents x dim]");
  const std::size_t children = u_hat.shape()[0];
  const std::size_t parents = u_hat.shape()[1];
  const std::size_t dim = u_hat.shape()[2];
  if (r.size() != children * parents)
    throw std::invalid_argument("route_weighted_sum: coefficient count mismatch");

  const auto& uv = u_hat.values();
  std::vector<T> out(parents * dim, T(0));
  for (std::size_t c = 0; c < children; ++c)
    for (std::size_t j = 0; j < parents; ++j) {
      const T w = r[c * parents + j];
      const T* src = uv.data() + (c * parents + j) * dim;
      T* dst = out.data() + j * dim;
      for (std::size_t d = 0; d < dim; ++d) dst[d] += w * src[d];
    }

  Tape<T>* tape = xcaps::detail::common_tape<T>({&u_hat});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t uid = xcaps::detail::grad_id(u_hat);
    auto rcopy = std::make_shared<std::vector<T>>(r);
    bw = [out_id, uid, rcopy, children, parents, dim](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      std::vector<T>& du = tp.grad_buf(uid);
      for (std::size_t c = 0; c < children; ++c)
        for (std::size_t j = 0; j < parents; ++j) {
          const T w = (*rcopy)[c * parents + j];
          T* dst = du.data() + (c * parents + j) * dim;
          const T* src = g.data() + j * dim;
          for (std::size_t d = 0; d < dim; ++d) dst[d] += w * src[d];
        }
    };
  }
  return xcaps::detail::emit(Shape{parents, dim}, std::move(out), tape, std::move(bw));
}

// u_hat[i,j,:] = W[i,j] * u[i], a batched matrix-vector product per (child, parent).
template <typename T>
Tensor<T> caps_predict(const Tensor<T>& weights, const Tensor<T>& children) {
  if (weights.rank() != 4)
    throw std::invalid_argument("caps_predict: weights must be [children x parents x out x in]");
  if (children.rank() != 2)
    throw std::invalid_argument("caps_predict: children must be [children x in]");
  const std::size_t c = weights.shape()[0], p = weights.shape()[1];
  const std::size_t od = weights.shape()[2], id = weights.shape()[3];
  if (children.shape()[0] != c || children.shape()[1] != id)
    throw std::invalid_argument("caps_predict: children " + shape_str(children.shape()) +
                                " incompatible with weights " + shape_str(weights.shape()));

  const auto& wv = weights.values();
  const auto& uv = children.values();
  std::vector<T> out(c * p * od, T(0));
  for (std::size_t i = 0; i < c; ++i) {
    const T* u = uv.data() + i * id;
    for (std::size_t j = 0; j < p; ++j) {
      const T* wm = wv.data() + ((i * p + j) * od) * id;
      T* dst = out.data() + (i * p + j) * od;
      for (std::size_t o = 0; o < od; ++o) {
        T acc = T(0);
        const T* wrow = wm + o * id;
        for (std::size_t k = 0; k < id; ++k) acc += wrow[k] * u[k];
        dst[o] = acc;
      }
    }
  }

  Tape<T>* tape = xcaps::detail::common_tape<T>({&weights, &children});
  std::function<void(Tape<T>&)> bw;
  if (tape) {
    const std::ptrdiff_t out_id = tape->next_id();
    const std::ptrdiff_t wid = xcaps::detail::grad_id(weights);
    const std::ptrdiff_t uid = xcaps::detail::grad_id(children);
    auto wval = weights.shared_values();
    auto uval = children.shared_values();
    bw = [out_id, wid, uid, wval, uval, c, p, od, id](Tape<T>& tp) {
      const std::vector<T>& g = tp.grad(out_id);
      if (wid >= 0) {
        std::vector<T>& dw = tp.grad_buf(wid);
        const std::vector<T>& u = *uval;
        for (std::size_t i = 0; i < c; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const T* gv = g.data() + (i * p + j) * od;
            T* dwm = dw.data() + ((i * p + j) * od) * id;
            for (std::size_t o = 0; o < od; ++o) {
              const T go = gv[o];
              const T* urow = u.data() + i * id;
              T* dwrow = dwm + o * id;
              for (std::size_t k = 0; k < id; ++k) dwrow[k] += go * urow[k];
            }
          }
      }
      if (uid >= 0) {
        std::vector<T>& du = tp.grad_buf(uid);
        const std::vector<T>& w = *wval;
        for (std::size_t i = 0; i < c; ++i)
          for (std::size_t j = 0; j < p; ++j) {
            const T* gv = g.data() + (i * p + j) * od;
            const T* wm = w.data() + ((i * p + j) * od) * id;
            T* durow = du.data() + i * id;
            for (std::size_t o = 0; o < od; ++o) {
              const T go = gv[o];
              const T* wrow = wm + o * id;
              for (std::size_t k = 0; k < id; ++k) durow[k] += go * wrow[k];
            }
          }
      }
    };
  }
  return xcaps::detail::emit(Shape{c, p, od}, std::move(out), tape, std::move(bw));
}

// ---------------------------------------------------------------------------
// dynamic routing by agreement

template <typename T>
struct RoutingResult {
  Tensor<T> parents;           // [parents x dim], squashed
  std::vector<T> coefficients; // final r, [children x parents]
};

// Iterative agreement routing over prediction vectors u_hat [children x
// parents x dim]. Coefficients are recomputed from logits each round and are
// treated as constants on the tape: only the final weighted sum and squash
// are differentiable, with gradients flowing through u_hat. Intermediate
// rounds therefore run on raw values. Passing fixed_coefficients skips the
// iteration and routes with the given r (used to freeze coefficients when
// finite-differencing the surrounding network).
template <typename T>
RoutingResult<T> dynamic_routing(const Tensor<T>& u_hat, const RoutingConfig& cfg,
                                 const std::optional<std::vector<T>>& fixed_coefficients = {}) {
  cfg.validate();
  if (u_hat.rank() != 3)
    throw std::invalid_argument("dynamic_routing: predictions must be [children x parents x dim]");
  if (!all_finite(u_hat)) throw std::domain_error("dynamic_routing: non-finite predictions");
  const std::size_t children = u_hat.shape()[0];
  const std::size_t parents = u_hat.shape()[1];
  const std::size_t dim = u_hat.shape()[2];
  const auto& uv = u_hat.values();

  std::vector<T> r;
  if (fixed_coefficients) {
    if (fixed_coefficients->size() != children * parents)
      throw std::invalid_argument("dynamic_routing: fixed coefficient count mismatch");
    r = *fixed_coefficients;
  } else {
    std::vector<T> b(children * parents, static_cast<T>(cfg.prior_init));
    for (std::size_t iter = 0;; ++iter) {
      r = detail_caps::normalize_logits(b, children, parents, cfg.mode);
      if (iter + 1 == cfg.iterations) break;
      // agreement update on raw values
      std::vector<T> s(parents * dim, T(0));
      for (std::size_t c = 0; c < children; ++c)
        for (std::size_t j = 0; j < parents; ++j) {
          const T w = r[c * parents + j];
          const T* src = uv.data() + (c * parents + j) * dim;
          T* dst = s.data() + j * dim;
          for (std::size_t d = 0; d < dim; ++d) dst[d] += w * src[d];
        }
      const std::vector<T> v = detail_caps::squash_values(s, parents, dim);
      for (std::size_t c = 0; c < children; ++c)
        for (std::size_t j = 0; j < parents; ++j) {
          const T* src = uv.data() + (c * parents + j) * dim;
          T agree = T(0);
          for (std::size_t d = 0; d < dim; ++d) agree += src[d] * v[j * dim + d];
          b[c * parents + j] += agree;
        }
    }
  }

  Tensor<T> s = route_weighted_sum(u_hat, r);
  return RoutingResult<T>{squash(s), std::move(r)};
}

// ---------------------------------------------------------------------------
// layers

// Convolutional capsule formation: a conv producing types*dim channels,
// regrouped so each (type, grid position) owns a dim-vector, then squashed.
template <typename T>
CapsuleTensor<T> primary_caps_layer(const Tensor<T>& features, const Tensor<T>& kernels,
                                    const Tensor<T>& bias, std::size_t stride, std::size_t types,
                                    std::size_t dim) {
  if (kernels.shape()[0] != types * dim)
    throw std::invalid_argument("primary_caps_layer: kernels must produce types*dim channels");
  Tensor<T> conv = conv2d(features, kernels, bias, stride);
  const std::size_t gh = conv.shape()[1], gw = conv.shape()[2];
  // channels are type-major: channel = type*dim + d
  Tensor<T> grouped = reshape(conv, Shape{types, dim, gh * gw});
  Tensor<T> vectors = transpose(grouped, {0, 2, 1});  // [types x grid x dim]
  return CapsuleTensor<T>(types, gh * gw, dim, squash(vectors));
}

// Fully-connected capsule layer: per-(child, parent) transform then dynamic
// routing. Returns parent capsules as [parents x 1 x out_dim].
template <typename T>
struct FcCapsOutput {
  CapsuleTensor<T> capsules;
  std::vector<T> coefficients;
};

template <typename T>
FcCapsOutput<T> fc_caps_layer(const CapsuleTensor<T>& children, const Tensor<T>& weights,
                              const RoutingConfig& cfg,
                              const std::optional<std::vector<T>>& fixed_coefficients = {}) {
  if (weights.rank() != 4)
    throw std::invalid_argument("fc_caps_layer: weights must be [children x parents x out x in]");
  if (weights.shape()[0] != children.count() || weights.shape()[3] != children.dim)
    throw std::invalid_argument("fc_caps_layer: weights " + shape_str(weights.shape()) +
                                " incompatible with " + std::to_string(children.count()) +
                                " children of dim " + std::to_string(children.dim));
  const std::size_t parents = weights.shape()[1];
  const std::size_t out_dim = weights.shape()[2];
  Tensor<T> u_hat = caps_predict(weights, children.rows());
  RoutingResult<T> routed = dynamic_routing(u_hat, cfg, fixed_coefficients);
  Tensor<T> data = reshape(routed.parents, Shape{parents, 1, out_dim});
  return FcCapsOutput<T>{CapsuleTensor<T>(parents, 1, out_dim, std::move(data)),
                         std::move(routed.coefficients)};
}

}  // namespace xcaps::caps
