// Row-major matrix kernels behind the convolution ops. Accumulation order
// over the inner dimension is ascending and identical on every code path,
// so results are reproducible run to run for a given build.
#pragma once

#include <algorithm>
#include <cstring>

#include "dmg/common.hpp"

namespace dmg {

namespace detail {
template <class T>
struct GemmTile {
  static constexpr int64_t nr = 64;
};
template <>
struct GemmTile<double> {
  static constexpr int64_t nr = 32;
};
}  // namespace detail

// C[m,n] = A[m,k] * B[k,n], added into C when accumulate is set.
// Register-blocked 4-row kernel; the inner j loop vectorizes cleanly because
// each output element keeps its own serial accumulator over p.
template <class T>
void gemm_nn(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool accumulate) {
  constexpr int64_t MR = 4;
  constexpr int64_t NR = detail::GemmTile<T>::nr;
  int64_t i0 = 0;
  for (; i0 + MR <= m; i0 += MR) {
    for (int64_t j0 = 0; j0 < n; j0 += NR) {
      int64_t nr = std::min(NR, n - j0);
      if (nr == NR) {
        T acc[MR][NR];
        for (int64_t i = 0; i < MR; ++i) {
          if (accumulate) {
            std::memcpy(acc[i], c + (i0 + i) * n + j0, NR * sizeof(T));
          } else {
            std::memset(acc[i], 0, NR * sizeof(T));
          }
        }
        const T* a0 = a + i0 * k;
        for (int64_t p = 0; p < k; ++p) {
          const T* brow = b + p * n + j0;
          T av0 = a0[p];
          T av1 = a0[k + p];
          T av2 = a0[2 * k + p];
          T av3 = a0[3 * k + p];
          for (int64_t j = 0; j < NR; ++j) {
            T bv = brow[j];
            acc[0][j] += av0 * bv;
            acc[1][j] += av1 * bv;
            acc[2][j] += av2 * bv;
            acc[3][j] += av3 * bv;
          }
        }
        for (int64_t i = 0; i < MR; ++i) {
          std::memcpy(c + (i0 + i) * n + j0, acc[i], NR * sizeof(T));
        }
      } else {
        for (int64_t i = 0; i < MR; ++i) {
          T* crow = c + (i0 + i) * n + j0;
          if (!accumulate) std::memset(crow, 0, nr * sizeof(T));
          const T* arow = a + (i0 + i) * k;
          for (int64_t p = 0; p < k; ++p) {
            const T* brow = b + p * n + j0;
            T av = arow[p];
            for (int64_t j = 0; j < nr; ++j) crow[j] += av * brow[j];
          }
        }
      }
    }
  }
  for (; i0 < m; ++i0) {
    T* crow = c + i0 * n;
    if (!accumulate) std::memset(crow, 0, n * sizeof(T));
    const T* arow = a + i0 * k;
    for (int64_t p = 0; p < k; ++p) {
      const T* brow = b + p * n;
      T av = arow[p];
      for (int64_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

namespace detail {
// Dot product with a fixed 16-lane accumulator tree. The lane layout (not
// the trip count) fixes the reduction order, so length-only changes in the
// surrounding blocking cannot change results.
template <class T>
T dot_lanes(const T* x, const T* y, int64_t n) {
  constexpr int64_t L = 16;
  T lanes[L] = {};
  int64_t p = 0;
  for (; p + L <= n; p += L) {
    for (int64_t l = 0; l < L; ++l) lanes[l] += x[p + l] * y[p + l];
  }
  for (int64_t l = 0; p + l < n; ++l) lanes[l] += x[p + l] * y[p + l];
  for (int64_t stride = L / 2; stride > 0; stride /= 2) {
    for (int64_t l = 0; l < stride; ++l) lanes[l] += lanes[l + stride];
  }
  return lanes[0];
}

// Four simultaneous dot products sharing one streamed y row.
template <class T>
void dot4_lanes(const T* x0, const T* x1, const T* x2, const T* x3, const T* y, int64_t n,
                T out[4]) {
  constexpr int64_t L = 16;
  T lanes[4][L] = {};
  int64_t p = 0;
  for (; p + L <= n; p += L) {
    for (int64_t l = 0; l < L; ++l) {
      T yv = y[p + l];
      lanes[0][l] += x0[p + l] * yv;
      lanes[1][l] += x1[p + l] * yv;
      lanes[2][l] += x2[p + l] * yv;
      lanes[3][l] += x3[p + l] * yv;
    }
  }
  for (int64_t l = 0; p + l < n; ++l) {
    T yv = y[p + l];
    lanes[0][l] += x0[p + l] * yv;
    lanes[1][l] += x1[p + l] * yv;
    lanes[2][l] += x2[p + l] * yv;
    lanes[3][l] += x3[p + l] * yv;
  }
  for (int64_t stride = L / 2; stride > 0; stride /= 2) {
    for (int q = 0; q < 4; ++q) {
      for (int64_t l = 0; l < stride; ++l) lanes[q][l] += lanes[q][l + stride];
    }
  }
  for (int q = 0; q < 4; ++q) out[q] = lanes[q][0];
}
}  // namespace detail

// C[m,n] = A[m,k] * B[n,k]^T, added into C when accumulate is set. The k
// dimension is chunked so four A rows stay cache-resident while B streams
// through once per four-row block.
template <class T>
void gemm_nt(const T* a, const T* b, T* c, int64_t m, int64_t n, int64_t k, bool accumulate) {
  constexpr int64_t KC = 4096;
  if (!accumulate) {
    for (int64_t i = 0; i < m * n; ++i) c[i] = T(0);
  }
  ThreadPool::instance().for_each_chunk((m + 3) / 4, [&](int64_t blk_b, int64_t blk_e) {
    for (int64_t blk = blk_b; blk < blk_e; ++blk) {
      int64_t i0 = blk * 4;
      int64_t mr = std::min<int64_t>(4, m - i0);
      for (int64_t k0 = 0; k0 < k; k0 += KC) {
        int64_t kc = std::min(KC, k - k0);
        if (mr == 4) {
          const T* x0 = a + i0 * k + k0;
          const T* x1 = x0 + k;
          const T* x2 = x1 + k;
          const T* x3 = x2 + k;
          for (int64_t j = 0; j < n; ++j) {
            T v[4];
            detail::dot4_lanes(x0, x1, x2, x3, b + j * k + k0, kc, v);
            for (int q = 0; q < 4; ++q) c[(i0 + q) * n + j] += v[q];
          }
        } else {
          for (int64_t i = i0; i < i0 + mr; ++i) {
            const T* xr = a + i * k + k0;
            for (int64_t j = 0; j < n; ++j) {
              c[i * n + j] += detail::dot_lanes(xr, b + j * k + k0, kc);
            }
          }
        }
      }
    }
  });
}

template <class T>
void transpose(const T* a, int64_t m, int64_t n, T* out) {
  for (int64_t i = 0; i < m; ++i) {
    for (int64_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
  }
}

}  // namespace dmg
