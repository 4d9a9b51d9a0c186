#pragma once

#include <vector>

namespace amortda::kern {

// Dense kernels behind the tape's conv1d and matmul. All matrices row-major.

/// C[M][N] = (acc ? C : 0) + A[M][K] * B[K][N]
void gemm_nn(int M, int K, int N, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool acc);

/// C[M][N] = (acc ? C : 0) + A^T * B, with A stored [K][M]
void gemm_tn(int M, int K, int N, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool acc);

/// C[M][N] = (acc ? C : 0) + A * B^T, with B stored [N][K]
void gemm_nt(int M, int K, int N, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool acc);

/// x [C][B][D] -> xcol [(C*W)][(B*D)], circular padding (W-1)/2.
void im2col_circ(const double* x, int C, int B, int D, int W, double* xcol);

/// Accumulate xcol [(C*W)][(B*D)] back into dx [C][B][D] (adjoint of im2col).
void col2im_circ_acc(const double* xcol, int C, int B, int D, int W, double* dx);

/// Thread-local scratch buffer, grown on demand.
std::vector<double>& scratch(size_t n);
std::vector<double>& scratch2(size_t n);

}  // namespace amortda::kern
