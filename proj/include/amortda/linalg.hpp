#pragma once

#include <vector>

#include "amortda/common.hpp"

namespace amortda {

/// Small dense row-major matrix for the filter algebra (D <= a few hundred).
struct Matrix {
  int rows = 0, cols = 0;
  std::vector<double> a;

  Matrix() = default;
  Matrix(int r, int c) : rows(r), cols(c), a((size_t)r * c, 0.0) {}
  double& operator()(int i, int j) { return a[(size_t)i * cols + j]; }
  double operator()(int i, int j) const { return a[(size_t)i * cols + j]; }
};

Matrix matmul(const Matrix& x, const Matrix& y);

/// In-place Cholesky factorization of a symmetric positive-definite matrix.
/// Throws Error if the matrix is not numerically SPD.
class CholeskyFactor {
 public:
  explicit CholeskyFactor(Matrix spd);
  /// Solve A x = b for one right-hand side.
  std::vector<double> solve(const std::vector<double>& b) const;

 private:
  Matrix l_;
};

}  // namespace amortda
