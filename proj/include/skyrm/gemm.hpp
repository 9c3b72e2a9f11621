#pragma once

namespace skyrm {

enum class Trans : bool { no = false, yes = true };

/// Row-major C(MxN) = op(A)(MxK) * op(B)(KxN), or C += ... when `accumulate`.
///
/// op(A) = A when ta == Trans::no (A is MxK with leading dim lda), else A^T
/// (A stored KxM). Same for B. The float specialization packs panels and runs
/// a register-blocked micro-kernel; the double version is a plain loop used by
/// the 64-bit gradient checks.
template <typename T>
void gemm(Trans ta, Trans tb, int m, int n, int k, const T* a, int lda, const T* b, int ldb,
          T* c, int ldc, bool accumulate);

}  // namespace skyrm
