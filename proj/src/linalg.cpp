#include "amortda/linalg.hpp"

#include <cmath>

namespace amortda {

Matrix matmul(const Matrix& x, const Matrix& y) {
  if (x.cols != y.rows) throw Error("matmul: shape mismatch");
  Matrix out(x.rows, y.cols);
  for (int i = 0; i < x.rows; ++i)
    for (int k = 0; k < x.cols; ++k) {
      const double v = x(i, k);
      for (int j = 0; j < y.cols; ++j) out(i, j) += v * y(k, j);
    }
  return out;
}

CholeskyFactor::CholeskyFactor(Matrix spd) : l_(std::move(spd)) {
  if (l_.rows != l_.cols) throw Error("cholesky: matrix must be square");
  const int n = l_.rows;
  for (int j = 0; j < n; ++j) {
    double d = l_(j, j);
    for (int k = 0; k < j; ++k) d -= l_(j, k) * l_(j, k);
    if (!(d > 0.0) || !std::isfinite(d))
      throw Error("cholesky: matrix not positive definite (innovation system singular?)");
    const double ljj = std::sqrt(d);
    l_(j, j) = ljj;
    for (int i = j + 1; i < n; ++i) {
      double s = l_(i, j);
      for (int k = 0; k < j; ++k) s -= l_(i, k) * l_(j, k);
      l_(i, j) = s / ljj;
    }
  }
}

std::vector<double> CholeskyFactor::solve(const std::vector<double>& b) const {
  const int n = l_.rows;
  if ((int)b.size() != n) throw Error("cholesky solve: rhs size mismatch");
  std::vector<double> y(b);
  for (int i = 0; i < n; ++i) {
    double s = y[(size_t)i];
    for (int k = 0; k < i; ++k) s -= l_(i, k) * y[(size_t)k];
    y[(size_t)i] = s / l_(i, i);
  }
  for (int i = n - 1; i >= 0; --i) {
    double s = y[(size_t)i];
    for (int k = i + 1; k < n; ++k) s -= l_(k, i) * y[(size_t)k];
    y[(size_t)i] = s / l_(i, i);
  }
  return y;
}

}  // namespace amortda
