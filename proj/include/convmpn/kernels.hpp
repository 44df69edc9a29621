#pragma once

// Flat float kernels behind the autodiff ops: blocked GEMM variants and the
// im2col/col2im pair used by conv2d. All buffers are dense row-major.
//
// Determinism contract: for every output element the reduction order over k
// is a fixed sequential scan, independent of row blocking and of how callers
// partition rows across workers.

#include <cstdint>
#include <cstring>

#include "convmpn/parallel.hpp"

namespace convmpn::detail {

// C[M,N] (+)= A[M,K] * B[K,N]
template <class T>
void gemm_nn_rows(std::int64_t m_lo, std::int64_t m_hi, std::int64_t N, std::int64_t K,
                  const T* A, const T* B, T* C, bool accumulate) {
  std::int64_t m = m_lo;
  for (; m + 4 <= m_hi; m += 4) {
    T* c0 = C + (m + 0) * N;
    T* c1 = C + (m + 1) * N;
    T* c2 = C + (m + 2) * N;
    T* c3 = C + (m + 3) * N;
    if (!accumulate) {
      std::memset(c0, 0, sizeof(T) * static_cast<size_t>(N));
      std::memset(c1, 0, sizeof(T) * static_cast<size_t>(N));
      std::memset(c2, 0, sizeof(T) * static_cast<size_t>(N));
      std::memset(c3, 0, sizeof(T) * static_cast<size_t>(N));
    }
    for (std::int64_t k = 0; k < K; ++k) {
      const T a0 = A[(m + 0) * K + k];
      const T a1 = A[(m + 1) * K + k];
      const T a2 = A[(m + 2) * K + k];
      const T a3 = A[(m + 3) * K + k];
      const T* b = B + k * N;
      for (std::int64_t n = 0; n < N; ++n) {
        const T bn = b[n];
        c0[n] += a0 * bn;
        c1[n] += a1 * bn;
        c2[n] += a2 * bn;
        c3[n] += a3 * bn;
      }
    }
  }
  for (; m < m_hi; ++m) {
    T* c = C + m * N;
    if (!accumulate) std::memset(c, 0, sizeof(T) * static_cast<size_t>(N));
    for (std::int64_t k = 0; k < K; ++k) {
      const T a = A[m * K + k];
      const T* b = B + k * N;
      for (std::int64_t n = 0; n < N; ++n) c[n] += a * b[n];
    }
  }
}

template <class T>
void gemm_nn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C,
             bool accumulate = false, bool parallel = false) {
  if (parallel && M >= 8) {
    const std::int64_t blocks = (M + 3) / 4;
    parallel_for(blocks, [&](std::int64_t blk) {
      const std::int64_t lo = blk * 4;
      const std::int64_t hi = lo + 4 < M ? lo + 4 : M;
      gemm_nn_rows(lo, hi, N, K, A, B, C, accumulate);
    }, 4);
  } else {
    gemm_nn_rows(0, M, N, K, A, B, C, accumulate);
  }
}

// C[M,N] (+)= A[M,K] * B[N,K]^T  (dot products of contiguous rows)
template <class T>
void gemm_nt(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
  for (std::int64_t m = 0; m < M; ++m) {
    const T* a = A + m * K;
    T* c = C + m * N;
    for (std::int64_t n = 0; n < N; ++n) {
      const T* b = B + n * K;
      T acc = 0;
      for (std::int64_t k = 0; k < K; ++k) acc += a[k] * b[k];
      c[n] = accumulate ? c[n] + acc : acc;
    }
  }
}

// C[M,N] (+)= A[K,M]^T * B[K,N]
template <class T>
void gemm_tn(std::int64_t M, std::int64_t N, std::int64_t K, const T* A, const T* B, T* C,
             bool accumulate = false) {
  if (!accumulate)
    std::memset(C, 0, sizeof(T) * static_cast<size_t>(M) * static_cast<size_t>(N));
  for (std::int64_t k = 0; k < K; ++k) {
    const T* a = A + k * M;
    const T* b = B + k * N;
    for (std::int64_t m = 0; m < M; ++m) {
      const T am = a[m];
      T* c = C + m * N;
      for (std::int64_t n = 0; n < N; ++n) c[n] += am * b[n];
    }
  }
}

// cols[Cin*kh*kw, Hout*Wout] from x[Cin,H,W], zero-padded.
template <class T>
void im2col(const T* x, std::int64_t cin, std::int64_t h, std::int64_t w, std::int64_t kh,
            std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t hout,
            std::int64_t wout, T* cols) {
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    const T* xc = x + ci * h * w;
    for (std::int64_t r = 0; r < kh; ++r) {
      for (std::int64_t c = 0; c < kw; ++c) {
        T* row = cols + ((ci * kh + r) * kw + c) * hout * wout;
        for (std::int64_t oh = 0; oh < hout; ++oh) {
          const std::int64_t ih = oh * stride - pad + r;
          T* dst = row + oh * wout;
          if (ih < 0 || ih >= h) {
            std::memset(dst, 0, sizeof(T) * static_cast<size_t>(wout));
            continue;
          }
          const T* src = xc + ih * w;
          if (stride == 1) {
            const std::int64_t shift = c - pad;  // iw = ow + shift
            std::int64_t lo = shift < 0 ? -shift : 0;
            std::int64_t hi = w - shift;  // first ow with iw >= w
            if (hi > wout) hi = wout;
            if (lo > wout) lo = wout;
            if (lo > 0) std::memset(dst, 0, sizeof(T) * static_cast<size_t>(lo));
            if (hi > lo)
              std::memcpy(dst + lo, src + lo + shift, sizeof(T) * static_cast<size_t>(hi - lo));
            if (hi < lo) hi = lo;
            if (wout > hi) std::memset(dst + hi, 0, sizeof(T) * static_cast<size_t>(wout - hi));
          } else {
            for (std::int64_t ow = 0; ow < wout; ++ow) {
              const std::int64_t iw = ow * stride - pad + c;
              dst[ow] = (iw < 0 || iw >= w) ? T(0) : src[iw];
            }
          }
        }
      }
    }
  }
}

// Scatter-add of dcols back into dx[Cin,H,W]. Rows of dcols for a given input
// channel touch only that channel, so callers may parallelize over ci.
template <class T>
void col2im_add(const T* dcols, std::int64_t cin, std::int64_t h, std::int64_t w,
                std::int64_t kh, std::int64_t kw, std::int64_t stride, std::int64_t pad,
                std::int64_t hout, std::int64_t wout, T* dx) {
  for (std::int64_t ci = 0; ci < cin; ++ci) {
    T* xc = dx + ci * h * w;
    for (std::int64_t r = 0; r < kh; ++r) {
      for (std::int64_t c = 0; c < kw; ++c) {
        const T* row = dcols + ((ci * kh + r) * kw + c) * hout * wout;
        for (std::int64_t oh = 0; oh < hout; ++oh) {
          const std::int64_t ih = oh * stride - pad + r;
          if (ih < 0 || ih >= h) continue;
          const T* src = row + oh * wout;
          T* dst = xc + ih * w;
          for (std::int64_t ow = 0; ow < wout; ++ow) {
            const std::int64_t iw = ow * stride - pad + c;
            if (iw >= 0 && iw < w) dst[iw] += src[ow];
          }
        }
      }
    }
  }
}

}  // namespace convmpn::detail
