#pragma once

// Dense kernels shared by the autodiff ops and the attention code.
//
// Storage may be float or double; every reduction runs in double. The gemm
// sums each output element strictly in k order, so the result does not
// depend on the blocking parameters below.

#include <algorithm>
#include <cstddef>
#include <cstring>
#include <vector>

#if defined(__AVX512F__)
#include <immintrin.h>
#endif

namespace ceglab::kernels {

enum class trans { no, yes };

namespace detail {

using v8d = double __attribute__((vector_size(64)));

inline constexpr std::size_t mr = 8;
inline constexpr std::size_t nr = 16;
inline constexpr std::size_t kc = 256;
inline constexpr std::size_t mc = 96;
inline constexpr std::size_t nc = 512;

struct gemm_scratch {
  std::vector<double> a;
  std::vector<double> b;
  std::vector<double> c;
};

inline gemm_scratch& scratch() {
  thread_local gemm_scratch s;
  return s;
}

// op(A)[i][p] for rows [i0, i0+rows) and depth [p0, p0+depth) into mr-row
// panels laid out p-major: out[panel][p][r].
template <class TA>
void pack_a(trans ta, const TA* a, std::size_t lda, std::size_t i0, std::size_t rows,
            std::size_t p0, std::size_t depth, double* out) {
  for (std::size_t ip = 0; ip < rows; ip += mr) {
    const std::size_t rr = std::min(mr, rows - ip);
    double* panel = out + ip * depth;
    if (ta == trans::no) {
      for (std::size_t r = 0; r < rr; ++r) {
        const TA* src = a + (i0 + ip + r) * lda + p0;
        for (std::size_t p = 0; p < depth; ++p) panel[p * mr + r] = static_cast<double>(src[p]);
      }
      for (std::size_t r = rr; r < mr; ++r)
        for (std::size_t p = 0; p < depth; ++p) panel[p * mr + r] = 0.0;
    } else {
      for (std::size_t p = 0; p < depth; ++p) {
        const TA* src = a + (p0 + p) * lda + i0 + ip;
        double* dst = panel + p * mr;
        for (std::size_t r = 0; r < rr; ++r) dst[r] = static_cast<double>(src[r]);
        for (std::size_t r = rr; r < mr; ++r) dst[r] = 0.0;
      }
    }
  }
}

template <class TB>
void pack_b(trans tb, const TB* b, std::size_t ldb, std::size_t j0, std::size_t cols,
            std::size_t p0, std::size_t depth, double* out) {
  for (std::size_t jp = 0; jp < cols; jp += nr) {
    const std::size_t cc = std::min(nr, cols - jp);
    double* panel = out + jp * depth;
    for (std::size_t p = 0; p < depth; ++p) {
      double* dst = panel + p * nr;
      const std::size_t k = p0 + p;
      if (tb == trans::no) {
        const TB* src = b + k * ldb + j0 + jp;
        for (std::size_t c = 0; c < cc; ++c) dst[c] = static_cast<double>(src[c]);
      } else {
        for (std::size_t c = 0; c < cc; ++c)
          dst[c] = static_cast<double>(b[(j0 + jp + c) * ldb + k]);
      }
      for (std::size_t c = cc; c < nr; ++c) dst[c] = 0.0;
    }
  }
}

// acc (mr x nr, row-major) += panel_a * panel_b over `depth`.
inline void micro_kernel(std::size_t depth, const double* __restrict a,
                         const double* __restrict b, double* __restrict acc) {
  v8d c0[mr], c1[mr];
  for (std::size_t r = 0; r < mr; ++r) {
    std::memcpy(&c0[r], acc + r * nr, sizeof(v8d));
    std::memcpy(&c1[r], acc + r * nr + 8, sizeof(v8d));
  }
  for (std::size_t p = 0; p < depth; ++p) {
    v8d b0, b1;
    std::memcpy(&b0, b + p * nr, sizeof(v8d));
    std::memcpy(&b1, b + p * nr + 8, sizeof(v8d));
    const double* ap = a + p * mr;
    for (std::size_t r = 0; r < mr; ++r) {
#if defined(__AVX512F__)
      const v8d av = _mm512_set1_pd(ap[r]);
#else
      const v8d av = v8d{} + ap[r];
#endif
      c0[r] += av * b0;
      c1[r] += av * b1;
    }
  }
  for (std::size_t r = 0; r < mr; ++r) {
    std::memcpy(acc + r * nr, &c0[r], sizeof(v8d));
    std::memcpy(acc + r * nr + 8, &c1[r], sizeof(v8d));
  }
}

}  // namespace detail

/// C = alpha * op(A) * op(B), or C += alpha * op(A) * op(B) when accumulate.
///
/// op(A) is m x k, op(B) is k x n. Leading dimensions are row strides of the
/// arrays as stored (before the transpose is applied).
template <class TA, class TB, class TC>
void gemm(trans ta, trans tb, std::size_t m, std::size_t n, std::size_t k, double alpha,
          const TA* a, std::size_t lda, const TB* b, std::size_t ldb, bool accumulate,
          TC* c, std::size_t ldc) {
  using namespace detail;
  if (m == 0 || n == 0) return;
  if (k == 0) {
    if (!accumulate)
      for (std::size_t i = 0; i < m; ++i) std::fill(c + i * ldc, c + i * ldc + n, TC{0});
    return;
  }
  auto& s = scratch();
  const bool multi_pass = k > kc;
  if (multi_pass) s.c.assign(m * n, 0.0);

  double tile[mr * nr];
  for (std::size_t jc = 0; jc < n; jc += nc) {
    const std::size_t ncols = std::min(nc, n - jc);
    const std::size_t ncols_pad = (ncols + nr - 1) / nr * nr;
    for (std::size_t pc = 0; pc < k; pc += kc) {
      const std::size_t depth = std::min(kc, k - pc);
      const bool first = pc == 0;
      const bool last = pc + depth == k;
      if (s.b.size() < ncols_pad * depth) s.b.resize(ncols_pad * depth);
      pack_b(tb, b, ldb, jc, ncols, pc, depth, s.b.data());
      for (std::size_t ic = 0; ic < m; ic += mc) {
        const std::size_t nrows = std::min(mc, m - ic);
        const std::size_t nrows_pad = (nrows + mr - 1) / mr * mr;
        if (s.a.size() < nrows_pad * depth) s.a.resize(nrows_pad * depth);
        pack_a(ta, a, lda, ic, nrows, pc, depth, s.a.data());
        for (std::size_t jp = 0; jp < ncols; jp += nr) {
          const std::size_t cc = std::min(nr, ncols - jp);
          for (std::size_t ip = 0; ip < nrows; ip += mr) {
            const std::size_t rr = std::min(mr, nrows - ip);
            const std::size_t i0 = ic + ip, j0 = jc + jp;
            if (first) {
              std::fill(tile, tile + mr * nr, 0.0);
            } else {
              for (std::size_t r = 0; r < mr; ++r)
                for (std::size_t q = 0; q < nr; ++q)
                  tile[r * nr + q] = (r < rr && q < cc) ? s.c[(i0 + r) * n + j0 + q] : 0.0;
            }
            micro_kernel(depth, s.a.data() + ip * depth, s.b.data() + jp * depth, tile);
            if (last) {
              for (std::size_t r = 0; r < rr; ++r) {
                TC* crow = c + (i0 + r) * ldc + j0;
                for (std::size_t q = 0; q < cc; ++q) {
                  const double v = alpha * tile[r * nr + q];
                  crow[q] = accumulate ? static_cast<TC>(static_cast<double>(crow[q]) + v)
                                       : static_cast<TC>(v);
                }
              }
            } else {
              for (std::size_t r = 0; r < rr; ++r)
                for (std::size_t q = 0; q < cc; ++q)
                  s.c[(i0 + r) * n + j0 + q] = tile[r * nr + q];
            }
          }
        }
      }
    }
  }
}

/// Straight triple loop with the same per-element summation order as gemm.
/// Test oracle; also handy for tiny shapes.
template <class TA, class TB, class TC>
void gemm_reference(trans ta, trans tb, std::size_t m, std::size_t n, std::size_t k,
                    double alpha, const TA* a, std::size_t lda, const TB* b,
                    std::size_t ldb, bool accumulate, TC* c, std::size_t ldc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      double acc = 0.0;
      for (std::size_t p = 0; p < k; ++p) {
        const double av = ta == trans::no ? a[i * lda + p] : a[p * lda + i];
        const double bv = tb == trans::no ? b[p * ldb + j] : b[j * ldb + p];
        acc += av * bv;
      }
      const double v = alpha * acc;
      c[i * ldc + j] = accumulate ? static_cast<TC>(static_cast<double>(c[i * ldc + j]) + v)
                                  : static_cast<TC>(v);
    }
}

template <class T>
double dot(const T* a, const T* b, std::size_t n) {
  double acc = 0.0;
  for (std::size_t i = 0; i < n; ++i) acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  return acc;
}

}  // namespace ceglab::kernels
