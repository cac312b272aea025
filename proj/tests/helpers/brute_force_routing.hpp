// SPDX-License-Identifier: Apache-2.0
#pragma once

// Naive triple-loop dynamic routing over plain doubles. Kept deliberately
// free of the tensor library so it can serve as an independent oracle.

#include <cmath>
#include <cstddef>
#include <vector>

namespace oracle {

struct BruteRouting {
  std::vector<double> parents;       // [parents * dim]
  std::vector<double> coefficients;  // [children * parents]
};

inline double brute_sigmoid(double b) { return std::exp(b) / (std::exp(b) + 1.0); }

// mode: true = per-edge sigmoid (prior 1), false = per-child softmax (prior 0)
inline BruteRouting brute_force_routing(const std::vector<double>& u_hat, std::size_t children,
                                        std::size_t parents, std::size_t dim, bool sigmoid_mode,
                                        std::size_t iterations, double prior) {
  std::vector<double> b(children * parents, prior);
  std::vector<double> r(children * parents, 0.0);
  std::vector<double> v(parents * dim, 0.0);

  for (std::size_t iter = 0; iter < iterations; ++iter) {
    if (sigmoid_mode) {
      for (std::size_t i = 0; i < children; ++i)
        for (std::size_t j = 0; j < parents; ++j)
          r[i * parents + j] = brute_sigmoid(b[i * parents + j]);
    } else {
      for (std::size_t i = 0; i < children; ++i) {
        double m = b[i * parents];
        for (std::size_t j = 1; j < parents; ++j) m = std::max(m, b[i * parents + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < parents; ++j) {
          r[i * parents + j] = std::exp(b[i * parents + j] - m);
          z += r[i * parents + j];
        }
        for (std::size_t j = 0; j < parents; ++j) r[i * parents + j] /= z;
      }
    }

    for (std::size_t j = 0; j < parents; ++j) {
      std::vector<double> s(dim, 0.0);
      for (std::size_t i = 0; i < children; ++i)
        for (std::size_t d = 0; d < dim; ++d)
          s[d] += r[i * parents + j] * u_hat[(i * parents + j) * dim + d];
      double n2 = 0.0;
      for (std::size_t d = 0; d < dim; ++d) n2 += s[d] * s[d];
      const double factor = n2 / ((1.0 + n2) * std::sqrt(n2 + 1e-12));
      for (std::size_t d = 0; d < dim; ++d) v[j * dim + d] = factor * s[d];
    }

    if (iter + 1 == iterations) break;
    for (std::size_t i = 0; i < children; ++i)
      for (std::size_t j = 0; j < parents; ++j) {
        double agree = 0.0;
        for (std::size_t d = 0; d < dim; ++d)
          agree += u_hat[(i * parents + j) * dim + d] * v[j * dim + d];
        b[i * parents + j] += agree;
      }
  }
  return BruteRouting{v, r};
}

}  // namespace oracle
