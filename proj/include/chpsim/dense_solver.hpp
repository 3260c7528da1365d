#pragma once

// Small dense linear solver used by the dispatch oracle and equilibrium
// expansion. Kept separate from the Eigen-based simulation path so the
// oracle does not share numerics with the code it certifies.

#include <cmath>
#include <cstddef>
#include <vector>

#include "chpsim/errors.hpp"

namespace chpsim {

/// Row-major dense matrix with flat storage.
class DenseMatrix {
public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols)
      : rows_(rows), cols_(cols), data_(rows * cols, 0.0) {}

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }

private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

/// Solves A x = b by Gaussian elimination with partial pivoting.
/// Throws NumericalError when a pivot falls below the singularity threshold.
inline std::vector<double> solve_linear(DenseMatrix a, std::vector<double> b,
                                        double pivot_tol = 1e-13) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.size() != n)
    throw NumericalError("solve_linear: dimension mismatch");

  // Scale-aware singularity test: compare pivots against the largest
  // entry of the original matrix.
  double scale = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) scale = std::max(scale, std::abs(a(i, j)));
  if (scale == 0.0) throw NumericalError("solve_linear: zero matrix");

  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;

  for (std::size_t k = 0; k < n; ++k) {
    std::size_t pivot_row = k;
    double pivot_mag = std::abs(a(perm[k], k));
    for (std::size_t i = k + 1; i < n; ++i) {
      const double mag = std::abs(a(perm[i], k));
      if (mag > pivot_mag) {
        pivot_mag = mag;
        pivot_row = i;
      }
    }
    if (pivot_mag < pivot_tol * scale)
      throw NumericalError("solve_linear: matrix is singular to working precision");
    std::swap(perm[k], perm[pivot_row]);

    const double pivot = a(perm[k], k);
    for (std::size_t i = k + 1; i < n; ++i) {
      const double factor = a(perm[i], k) / pivot;
      if (factor == 0.0) continue;
      a(perm[i], k) = 0.0;
      for (std::size_t j = k + 1; j < n; ++j) a(perm[i], j) -= factor * a(perm[k], j);
      b[perm[i]] -= factor * b[perm[k]];
    }
  }

  std::vector<double> x(n, 0.0);
  for (std::size_t k = n; k-- > 0;) {
    double acc = b[perm[k]];
    for (std::size_t j = k + 1; j < n; ++j) acc -= a(perm[k], j) * x[j];
    x[k] = acc / a(perm[k], k);
  }
  return x;
}

} // namespace chpsim
