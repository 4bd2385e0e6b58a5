#pragma once

// Test-only eigenvalue oracle: cyclic Jacobi rotations on a symmetric matrix.
// Kept out of the library on purpose so power iteration and the curvature
// solver are validated against genuinely independent code.

#include <cmath>

#include "hies/tensor.hpp"

namespace hies::testing {

inline double jacobi_max_eigenvalue(Tensor a) {
  const int n = a.rows();
  if (a.cols() != n) throw ShapeError("jacobi oracle expects a square matrix");
  for (int sweep = 0; sweep < 200; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < n; ++p)
      for (int q = p + 1; q < n; ++q) off += a.at(p, q) * a.at(p, q);
    if (off < 1e-300) break;
    for (int p = 0; p < n; ++p) {
      for (int q = p + 1; q < n; ++q) {
        const double apq = a.at(p, q);
        if (apq == 0.0) continue;
        const double tau = (a.at(q, q) - a.at(p, p)) / (2.0 * apq);
        const double t = (tau >= 0.0 ? 1.0 : -1.0) / (std::abs(tau) + std::sqrt(1.0 + tau * tau));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = t * c;
        for (int k = 0; k < n; ++k) {
          const double akp = a.at(k, p), akq = a.at(k, q);
          a.at(k, p) = c * akp - s * akq;
          a.at(k, q) = s * akp + c * akq;
        }
        for (int k = 0; k < n; ++k) {
          const double apk = a.at(p, k), aqk = a.at(q, k);
          a.at(p, k) = c * apk - s * aqk;
          a.at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  double best = a.at(0, 0);
  for (int i = 1; i < n; ++i) best = std::max(best, a.at(i, i));
  return best;
}

// sigma_max(M) as sqrt(lambda_max(M^T M)).
inline double jacobi_sigma_max(const Tensor& m) {
  Tensor gram = matmul_plain(transposed(m), m);
  const double lam = jacobi_max_eigenvalue(gram);
  return std::sqrt(std::max(0.0, lam));
}

}  // namespace hies::testing
