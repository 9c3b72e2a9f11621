#include "skyrm/gemm.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace skyrm {
namespace {

constexpr int kMR = 8;
constexpr int kNR = 32;
constexpr int kKC = 256;
constexpr int kMC = 128;
constexpr int kNC = 2048;

typedef float vec16 __attribute__((vector_size(64)));

int round_up(int v, int to) { return (v + to - 1) / to * to; }

// Packs op(A)[i0:i0+mc, p0:p0+kc] into row panels of kMR, k-major within a panel.
void pack_a(Trans ta, const float* a, int lda, int i0, int mc, int p0, int kc, float* out) {
  for (int ir = 0; ir < mc; ir += kMR) {
    const int mr = std::min(kMR, mc - ir);
    float* dst = out + static_cast<std::size_t>(ir) * kc;
    if (ta == Trans::no) {
      for (int p = 0; p < kc; ++p) {
        float* d = dst + p * kMR;
        for (int r = 0; r < mr; ++r) d[r] = a[static_cast<std::size_t>(i0 + ir + r) * lda + p0 + p];
        for (int r = mr; r < kMR; ++r) d[r] = 0.0f;
      }
    } else {
      for (int p = 0; p < kc; ++p) {
        const float* src = a + static_cast<std::size_t>(p0 + p) * lda + i0 + ir;
        float* d = dst + p * kMR;
        for (int r = 0; r < mr; ++r) d[r] = src[r];
        for (int r = mr; r < kMR; ++r) d[r] = 0.0f;
      }
    }
  }
}

// Packs op(B)[p0:p0+kc, j0:j0+nc] into column panels of kNR, k-major within a panel.
void pack_b(Trans tb, const float* b, int ldb, int p0, int kc, int j0, int nc, float* out) {
  for (int jr = 0; jr < nc; jr += kNR) {
    const int nr = std::min(kNR, nc - jr);
    float* dst = out + static_cast<std::size_t>(jr) * kc;
    if (tb == Trans::no) {
      for (int p = 0; p < kc; ++p) {
        const float* src = b + static_cast<std::size_t>(p0 + p) * ldb + j0 + jr;
        float* d = dst + p * kNR;
        std::memcpy(d, src, sizeof(float) * nr);
        for (int j = nr; j < kNR; ++j) d[j] = 0.0f;
      }
    } else {
      if (nr < kNR) std::fill(dst, dst + static_cast<std::size_t>(kc) * kNR, 0.0f);
      for (int j = 0; j < nr; ++j) {
        const float* src = b + static_cast<std::size_t>(j0 + jr + j) * ldb + p0;
        for (int p = 0; p < kc; ++p) dst[p * kNR + j] = src[p];
      }
    }
  }
}

void micro_kernel(int kc, const float* ap, const float* bp, float* c, int ldc, int mr, int nr,
                  bool accumulate) {
  vec16 acc0[kMR];
  vec16 acc1[kMR];
  for (int r = 0; r < kMR; ++r) {
    acc0[r] = vec16{};
    acc1[r] = vec16{};
  }
  for (int p = 0; p < kc; ++p) {
    vec16 b0;
    vec16 b1;
    std::memcpy(&b0, bp + p * kNR, sizeof(vec16));
    std::memcpy(&b1, bp + p * kNR + 16, sizeof(vec16));
    const float* a = ap + p * kMR;
#pragma GCC unroll 8
    for (int r = 0; r < kMR; ++r) {
      acc0[r] += a[r] * b0;
      acc1[r] += a[r] * b1;
    }
  }
  if (mr == kMR && nr == kNR) {
    for (int r = 0; r < kMR; ++r) {
      float* row = c + static_cast<std::size_t>(r) * ldc;
      if (accumulate) {
        vec16 c0;
        vec16 c1;
        std::memcpy(&c0, row, sizeof(vec16));
        std::memcpy(&c1, row + 16, sizeof(vec16));
        acc0[r] += c0;
        acc1[r] += c1;
      }
      std::memcpy(row, &acc0[r], sizeof(vec16));
      std::memcpy(row + 16, &acc1[r], sizeof(vec16));
    }
    return;
  }
  alignas(64) float tile[kMR][kNR];
  for (int r = 0; r < kMR; ++r) {
    std::memcpy(&tile[r][0], &acc0[r], sizeof(vec16));
    std::memcpy(&tile[r][16], &acc1[r], sizeof(vec16));
  }
  for (int r = 0; r < mr; ++r) {
    float* row = c + static_cast<std::size_t>(r) * ldc;
    if (accumulate) {
      for (int j = 0; j < nr; ++j) row[j] += tile[r][j];
    } else {
      for (int j = 0; j < nr; ++j) row[j] = tile[r][j];
    }
  }
}

}  // namespace

template <>
void gemm<float>(Trans ta, Trans tb, int m, int n, int k, const float* a, int lda, const float* b,
                 int ldb, float* c, int ldc, bool accumulate) {
  if (m <= 0 || n <= 0) return;
  if (k <= 0) {
    if (!accumulate)
      for (int i = 0; i < m; ++i) std::fill(c + static_cast<std::size_t>(i) * ldc, c + static_cast<std::size_t>(i) * ldc + n, 0.0f);
    return;
  }
  thread_local std::vector<float> abuf;
  thread_local std::vector<float> bbuf;
  abuf.resize(static_cast<std::size_t>(round_up(std::min(m, kMC), kMR)) * kKC);
  bbuf.resize(static_cast<std::size_t>(round_up(std::min(n, kNC), kNR)) * kKC);

  for (int jc = 0; jc < n; jc += kNC) {
    const int nc = std::min(kNC, n - jc);
    for (int pc = 0; pc < k; pc += kKC) {
      const int kc = std::min(kKC, k - pc);
      const bool acc = accumulate || pc > 0;
      pack_b(tb, b, ldb, pc, kc, jc, nc, bbuf.data());
      for (int ic = 0; ic < m; ic += kMC) {
        const int mc = std::min(kMC, m - ic);
        pack_a(ta, a, lda, ic, mc, pc, kc, abuf.data());
        for (int jr = 0; jr < nc; jr += kNR) {
          const float* bp = bbuf.data() + static_cast<std::size_t>(jr) * kc;
          for (int ir = 0; ir < mc; ir += kMR) {
            micro_kernel(kc, abuf.data() + static_cast<std::size_t>(ir) * kc, bp,
                         c + static_cast<std::size_t>(ic + ir) * ldc + jc + jr, ldc,
                         std::min(kMR, mc - ir), std::min(kNR, nc - jr), acc);
          }
        }
      }
    }
  }
}

template <>
void gemm<double>(Trans ta, Trans tb, int m, int n, int k, const double* a, int lda,
                  const double* b, int ldb, double* c, int ldc, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    double* row = c + static_cast<std::size_t>(i) * ldc;
    if (!accumulate) std::fill(row, row + n, 0.0);
    for (int p = 0; p < k; ++p) {
      const double aip = ta == Trans::no ? a[static_cast<std::size_t>(i) * lda + p]
                                         : a[static_cast<std::size_t>(p) * lda + i];
      if (aip == 0.0) continue;
      if (tb == Trans::no) {
        const double* brow = b + static_cast<std::size_t>(p) * ldb;
        for (int j = 0; j < n; ++j) row[j] += aip * brow[j];
      } else {
        for (int j = 0; j < n; ++j) row[j] += aip * b[static_cast<std::size_t>(j) * ldb + p];
      }
    }
  }
}

}  // namespace skyrm
