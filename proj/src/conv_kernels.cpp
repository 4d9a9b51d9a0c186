#include "amortda/conv_kernels.hpp"

#include <algorithm>
#include <cstring>

#if defined(__AVX512F__) || defined(__AVX2__)
#include <immintrin.h>
#endif

namespace amortda::kern {

namespace {

constexpr int MR = 6;
constexpr int NR = 16;

// Microkernel: C[mr][NR] (+)= Ap[mr][K] * B[K][NR]. Ap is a packed panel with
// contiguous rows; B rows are strided by ldb. Accumulators stay in registers.
#if defined(__AVX512F__)

template <int MRT>
void micro(int K, const double* __restrict Ap, const double* __restrict B, int ldb,
           double* __restrict C, int ldc, bool acc) {
  __m512d c0[MRT], c1[MRT];
  for (int i = 0; i < MRT; ++i) {
    if (acc) {
      c0[i] = _mm512_loadu_pd(C + i * (size_t)ldc);
      c1[i] = _mm512_loadu_pd(C + i * (size_t)ldc + 8);
    } else {
      c0[i] = _mm512_setzero_pd();
      c1[i] = _mm512_setzero_pd();
    }
  }
  for (int k = 0; k < K; ++k) {
    const double* __restrict b = B + (size_t)k * ldb;
    const __m512d b0 = _mm512_loadu_pd(b);
    const __m512d b1 = _mm512_loadu_pd(b + 8);
    for (int i = 0; i < MRT; ++i) {
      const __m512d a = _mm512_set1_pd(Ap[i * (size_t)K + k]);
      c0[i] = _mm512_fmadd_pd(a, b0, c0[i]);
      c1[i] = _mm512_fmadd_pd(a, b1, c1[i]);
    }
  }
  for (int i = 0; i < MRT; ++i) {
    _mm512_storeu_pd(C + i * (size_t)ldc, c0[i]);
    _mm512_storeu_pd(C + i * (size_t)ldc + 8, c1[i]);
  }
}

#elif defined(__AVX2__)

template <int MRT>
void micro(int K, const double* __restrict Ap, const double* __restrict B, int ldb,
           double* __restrict C, int ldc, bool acc) {
  static_assert(MRT <= 3 || MRT >= 0, "register budget");
  // AVX2: 16 ymm registers; split the 16-column strip into two passes of 8.
  for (int half = 0; half < 2; ++half) {
    const double* Bh = B + half * 8;
    double* Ch = C + half * 8;
    __m256d c0[MRT], c1[MRT];
    for (int i = 0; i < MRT; ++i) {
      if (acc) {
        c0[i] = _mm256_loadu_pd(Ch + i * (size_t)ldc);
        c1[i] = _mm256_loadu_pd(Ch + i * (size_t)ldc + 4);
      } else {
        c0[i] = _mm256_setzero_pd();
        c1[i] = _mm256_setzero_pd();
      }
    }
    for (int k = 0; k < K; ++k) {
      const double* b = Bh + (size_t)k * ldb;
      const __m256d b0 = _mm256_loadu_pd(b);
      const __m256d b1 = _mm256_loadu_pd(b + 4);
      for (int i = 0; i < MRT; ++i) {
        const __m256d a = _mm256_set1_pd(Ap[i * (size_t)K + k]);
        c0[i] = _mm256_fmadd_pd(a, b0, c0[i]);
        c1[i] = _mm256_fmadd_pd(a, b1, c1[i]);
      }
    }
    for (int i = 0; i < MRT; ++i) {
      _mm256_storeu_pd(Ch + i * (size_t)ldc, c0[i]);
      _mm256_storeu_pd(Ch + i * (size_t)ldc + 4, c1[i]);
    }
  }
}

#else

template <int MRT>
void micro(int K, const double* __restrict Ap, const double* __restrict B, int ldb,
           double* __restrict C, int ldc, bool acc) {
  double c[MRT][NR];
  if (acc) {
    for (int i = 0; i < MRT; ++i)
      for (int j = 0; j < NR; ++j) c[i][j] = C[i * (size_t)ldc + j];
  } else {
    for (int i = 0; i < MRT; ++i)
      for (int j = 0; j < NR; ++j) c[i][j] = 0.0;
  }
  for (int k = 0; k < K; ++k) {
    const double* __restrict b = B + (size_t)k * ldb;
    for (int i = 0; i < MRT; ++i) {
      const double a = Ap[i * (size_t)K + k];
      for (int j = 0; j < NR; ++j) c[i][j] += a * b[j];
    }
  }
  for (int i = 0; i < MRT; ++i)
    for (int j = 0; j < NR; ++j) C[i * (size_t)ldc + j] = c[i][j];
}

#endif

using MicroFn = void (*)(int, const double*, const double*, int, double*, int, bool);
constexpr MicroFn kMicro[MR + 1] = {nullptr,  &micro<1>, &micro<2>, &micro<3>,
                                    &micro<4>, &micro<5>, &micro<6>};

// Remainder columns (n < NR): plain loops.
void edge(int mr, int K, int n, const double* __restrict Ap, const double* __restrict B,
          int ldb, double* __restrict C, int ldc, bool acc) {
  for (int i = 0; i < mr; ++i) {
    double* crow = C + i * (size_t)ldc;
    if (!acc)
      for (int j = 0; j < n; ++j) crow[j] = 0.0;
    const double* arow = Ap + i * (size_t)K;
    for (int k = 0; k < K; ++k) {
      const double a = arow[k];
      const double* b = B + (size_t)k * ldb;
      for (int j = 0; j < n; ++j) crow[j] += a * b[j];
    }
  }
}

enum class PackMode { RowMajor, ColMajor };

// Panel of mr rows of the logical A matrix, rows contiguous along k.
void pack_a(PackMode mode, const double* A, int lda, int i0, int mr, int K, double* panel) {
  if (mode == PackMode::RowMajor) {
    for (int i = 0; i < mr; ++i)
      std::memcpy(panel + i * (size_t)K, A + (i0 + i) * (size_t)lda, sizeof(double) * (size_t)K);
  } else {  // logical A = stored^T : panel[i][k] = A[k*lda + i0+i]
    for (int i = 0; i < mr; ++i)
      for (int k = 0; k < K; ++k) panel[i * (size_t)K + k] = A[(size_t)k * lda + i0 + i];
  }
}

// Private pack buffers; callers may be holding scratch()/scratch2().
std::vector<double>& panel_buf(size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}
std::vector<double>& strip_buf(size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

void gemm_driver(int M, int K, int N, PackMode amode, const double* A, int lda,
                 const double* B, int ldb, double* C, int ldc, bool acc) {
  std::vector<double>& panel = panel_buf((size_t)MR * (size_t)K);
  const int n_full = (N / NR) * NR;
  for (int i0 = 0; i0 < M; i0 += MR) {
    const int mr = std::min(MR, M - i0);
    pack_a(amode, A, lda, i0, mr, K, panel.data());
    double* crow = C + (size_t)i0 * ldc;
    for (int j0 = 0; j0 < n_full; j0 += NR)
      kMicro[mr](K, panel.data(), B + j0, ldb, crow + j0, ldc, acc);
    if (n_full < N)
      edge(mr, K, N - n_full, panel.data(), B + n_full, ldb, crow + n_full, ldc, acc);
  }
}

// For gemm_nt the logical B is stored^T [N][K]; pack the NR-column strip
// into [K][NR] so the microkernel sees contiguous rows.
void pack_b_t(const double* B, int ldb, int j0, int nr, int K, double* strip) {
  for (int k = 0; k < K; ++k)
    for (int j = 0; j < nr; ++j) strip[(size_t)k * nr + j] = B[(size_t)(j0 + j) * ldb + k];
}

}  // namespace

std::vector<double>& scratch(size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

std::vector<double>& scratch2(size_t n) {
  thread_local std::vector<double> buf;
  if (buf.size() < n) buf.resize(n);
  return buf;
}

void gemm_nn(int M, int K, int N, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool acc) {
  gemm_driver(M, K, N, PackMode::RowMajor, A, lda, B, ldb, C, ldc, acc);
}

void gemm_tn(int M, int K, int N, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool acc) {
  gemm_driver(M, K, N, PackMode::ColMajor, A, lda, B, ldb, C, ldc, acc);
}

void gemm_nt(int M, int K, int N, const double* A, int lda, const double* B, int ldb,
             double* C, int ldc, bool acc) {
  std::vector<double>& apanel = panel_buf((size_t)MR * (size_t)K);
  std::vector<double>& strip = strip_buf((size_t)K * NR);
  for (int j0 = 0; j0 < N; j0 += NR) {
    const int nr = std::min(NR, N - j0);
    pack_b_t(B, ldb, j0, nr, K, strip.data());
    for (int i0 = 0; i0 < M; i0 += MR) {
      const int mr = std::min(MR, M - i0);
      pack_a(PackMode::RowMajor, A, lda, i0, mr, K, apanel.data());
      double* cblk = C + (size_t)i0 * ldc + j0;
      if (nr == NR)
        kMicro[mr](K, apanel.data(), strip.data(), NR, cblk, ldc, acc);
      else
        edge(mr, K, nr, apanel.data(), strip.data(), nr, cblk, ldc, acc);
    }
  }
}

void im2col_circ(const double* x, int C, int B, int D, int W, double* xcol) {
  const int pad = (W - 1) / 2;
  const size_t bd = (size_t)B * D;
  for (int c = 0; c < C; ++c) {
    for (int w = 0; w < W; ++w) {
      double* dst_row = xcol + ((size_t)c * W + w) * bd;
      const int off = w - pad;  // source index for d=0 is off mod D
      for (int b = 0; b < B; ++b) {
        const double* src = x + ((size_t)c * B + b) * D;
        double* dst = dst_row + (size_t)b * D;
        if (off == 0) {
          std::memcpy(dst, src, sizeof(double) * (size_t)D);
        } else if (off > 0) {
          std::memcpy(dst, src + off, sizeof(double) * (size_t)(D - off));
          std::memcpy(dst + (D - off), src, sizeof(double) * (size_t)off);
        } else {
          std::memcpy(dst, src + (D + off), sizeof(double) * (size_t)(-off));
          std::memcpy(dst - off, src, sizeof(double) * (size_t)(D + off));
        }
      }
    }
  }
}

void col2im_circ_acc(const double* xcol, int C, int B, int D, int W, double* dx) {
  const int pad = (W - 1) / 2;
  const size_t bd = (size_t)B * D;
  for (int c = 0; c < C; ++c) {
    for (int w = 0; w < W; ++w) {
      const double* src_row = xcol + ((size_t)c * W + w) * bd;
      const int off = w - pad;
      for (int b = 0; b < B; ++b) {
        const double* src = src_row + (size_t)b * D;
        double* dst = dx + ((size_t)c * B + b) * D;
        for (int d = 0; d < D; ++d) {
          int s = d + off;
          if (s < 0) s += D;
          else if (s >= D) s -= D;
          dst[s] += src[d];
        }
      }
    }
  }
}

}  // namespace amortda::kern
