#pragma once

// Causal attention masks and the two attention kernels.
//
// The naive kernel materializes the full score matrix, applies the mask and
// a row softmax, and multiplies by V. The blocked kernel walks key/value
// tiles with an online softmax (running max, running denominator, rescaled
// accumulator) and skips tiles the mask rules out entirely. Its backward pass
// recomputes tile probabilities from the saved row log-sum-exp.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ceglab/autodiff.hpp"
#include "ceglab/kernels.hpp"
#include "ceglab/tensor.hpp"

namespace ceglab {

/// Boolean [n, n] matrix; row = query position, column = key position,
/// nonzero = the query may attend to the key.
class AttentionMask {
 public:
  AttentionMask(std::size_t n, std::vector<std::uint8_t> allowed)
      : n_(n), allowed_(std::move(allowed)) {
    if (n_ == 0) throw contract_error("attention mask needs n >= 1");
    if (allowed_.size() != n_ * n_)
      throw dimension_error("attention mask data does not match n = " + std::to_string(n_));
    for (std::size_t i = 0; i < n_; ++i) {
      if (!allowed_[i * n_ + i])
        throw contract_error("attention mask row " + std::to_string(i) + " cannot see itself");
      for (std::size_t j = i + 1; j < n_; ++j)
        if (allowed_[i * n_ + j])
          throw contract_error("attention mask lets position " + std::to_string(i) +
                               " see future position " + std::to_string(j));
    }
  }

  std::size_t size() const noexcept { return n_; }
  bool allowed(std::size_t i, std::size_t j) const { return allowed_[i * n_ + j] != 0; }
  std::span<const std::uint8_t> bits() const noexcept { return allowed_; }

  std::size_t nonzeros() const {
    return static_cast<std::size_t>(std::count(allowed_.begin(), allowed_.end(), 1));
  }

  bool any_in(std::size_t i0, std::size_t i1, std::size_t j0, std::size_t j1) const {
    for (std::size_t i = i0; i < i1; ++i)
      for (std::size_t j = j0; j < std::min(j1, i + 1); ++j)
        if (allowed_[i * n_ + j]) return true;
    return false;
  }

 private:
  std::size_t n_;
  std::vector<std::uint8_t> allowed_;
};

inline AttentionMask causal_mask(std::size_t n) {
  std::vector<std::uint8_t> bits(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) bits[i * n + j] = 1;
  return AttentionMask(n, std::move(bits));
}

/// Strided pattern: a local window of width `stride` plus every
/// stride-th earlier position.
inline AttentionMask strided_sparse_mask(std::size_t n, std::size_t stride) {
  if (stride < 1 || stride > n)
    throw config_error("strided mask needs 1 <= stride <= n (stride " + std::to_string(stride) +
                       ", n " + std::to_string(n) + ")");
  std::vector<std::uint8_t> bits(n * n, 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j <= i; ++j) {
      const std::size_t gap = i - j;
      bits[i * n + j] = (gap < stride || gap % stride == 0) ? 1 : 0;
    }
  return AttentionMask(n, std::move(bits));
}

inline std::size_t ceil_sqrt(std::size_t n) {
  std::size_t r = static_cast<std::size_t>(std::sqrt(static_cast<double>(n)));
  while (r * r < n) ++r;
  while (r > 0 && (r - 1) * (r - 1) >= n) --r;
  return r;
}

enum class attention_kernel_kind { naive, blocked };

struct attention_kernel {
  attention_kernel_kind kind = attention_kernel_kind::naive;
  std::size_t block_rows = 32;
  std::size_t block_cols = 32;

  static attention_kernel naive() { return {}; }
  static attention_kernel blocked(std::size_t rows, std::size_t cols) {
    return {attention_kernel_kind::blocked, rows, cols};
  }
};

/// Shape and memory layout of q/k/v for one attention call.
///
/// token_major: q is [batch*seq, n_head*head_dim] (the projection output),
/// k/v are [batch*seq, n_kv_head*head_dim].
/// head_major: q is [batch, n_head, seq, head_dim], k/v likewise with n_kv_head.
struct attention_layout {
  std::size_t batch = 1;
  std::size_t seq = 1;
  std::size_t n_head = 1;
  std::size_t n_kv_head = 1;
  std::size_t head_dim = 1;
  bool head_major = false;

  std::size_t q_ld() const { return head_major ? head_dim : n_head * head_dim; }
  std::size_t kv_ld() const { return head_major ? head_dim : n_kv_head * head_dim; }
  std::size_t q_offset(std::size_t b, std::size_t h) const {
    return head_major ? (b * n_head + h) * seq * head_dim : b * seq * n_head * head_dim + h * head_dim;
  }
  std::size_t kv_offset(std::size_t b, std::size_t g) const {
    return head_major ? (b * n_kv_head + g) * seq * head_dim
                      : b * seq * n_kv_head * head_dim + g * head_dim;
  }
  std::size_t group_of(std::size_t h) const { return h / (n_head / n_kv_head); }
  std::size_t q_numel() const { return batch * seq * n_head * head_dim; }
  std::size_t kv_numel() const { return batch * seq * n_kv_head * head_dim; }
  double scale() const { return 1.0 / std::sqrt(static_cast<double>(head_dim)); }

  void validate() const {
    if (batch == 0 || seq == 0 || n_head == 0 || n_kv_head == 0 || head_dim == 0)
      throw dimension_error("attention layout has a zero dimension");
    if (n_head % n_kv_head != 0)
      throw config_error("n_head must be divisible by n_kv_head");
  }
};

/// State the forward pass leaves for the backward pass.
struct attention_saved {
  std::vector<double> probs;      // naive: [batch, n_head, seq, seq]
  std::vector<double> lse;        // blocked: [batch, n_head, seq]
  std::vector<double> out_exact;  // blocked: [batch, n_head, seq, head_dim]
};

namespace detail {

struct tile_map {
  std::size_t rows_blocks = 0, cols_blocks = 0;
  std::vector<std::uint8_t> live;
  bool at(std::size_t bi, std::size_t bj) const { return live[bi * cols_blocks + bj] != 0; }
};

inline tile_map make_tile_map(const AttentionMask& mask, std::size_t br, std::size_t bc) {
  const std::size_t n = mask.size();
  tile_map t;
  t.rows_blocks = (n + br - 1) / br;
  t.cols_blocks = (n + bc - 1) / bc;
  t.live.assign(t.rows_blocks * t.cols_blocks, 0);
  for (std::size_t bi = 0; bi < t.rows_blocks; ++bi)
    for (std::size_t bj = 0; bj < t.cols_blocks; ++bj)
      t.live[bi * t.cols_blocks + bj] =
          mask.any_in(bi * br, std::min(n, (bi + 1) * br), bj * bc, std::min(n, (bj + 1) * bc));
  return t;
}

inline void check_call(const attention_layout& L, const AttentionMask& mask,
                       const attention_kernel& kernel) {
  L.validate();
  if (mask.size() != L.seq)
    throw dimension_error("attention mask size " + std::to_string(mask.size()) +
                          " does not match sequence length " + std::to_string(L.seq));
  if (kernel.kind == attention_kernel_kind::blocked &&
      (kernel.block_rows == 0 || kernel.block_cols == 0))
    throw config_error("blocked attention needs block sizes >= 1");
}

inline constexpr double neg_inf = -std::numeric_limits<double>::infinity();

template <class T>
void naive_forward(const attention_layout& L, const AttentionMask& mask, const T* q, const T* k,
                   const T* v, T* out, attention_saved* saved) {
  using kernels::trans;
  const std::size_t n = L.seq, dh = L.head_dim, ldq = L.q_ld(), ldk = L.kv_ld();
  const double scale = L.scale();
  std::vector<double> s(n * n), o(n * dh), denom(n);
  if (saved) saved->probs.assign(L.batch * L.n_head * n * n, 0.0);
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t h = 0; h < L.n_head; ++h) {
      const std::size_t g = L.group_of(h);
      const T* qp = q + L.q_offset(b, h);
      const T* kp = k + L.kv_offset(b, g);
      const T* vp = v + L.kv_offset(b, g);
      kernels::gemm(trans::no, trans::yes, n, n, dh, scale, qp, ldq, kp, ldk, false, s.data(), n);
      for (std::size_t i = 0; i < n; ++i) {
        double* row = s.data() + i * n;
        double mx = neg_inf;
        for (std::size_t j = 0; j < n; ++j)
          if (mask.allowed(i, j)) mx = std::max(mx, row[j]);
        if (mx == neg_inf)
          throw degenerate_row_error("attention row " + std::to_string(i) + " is fully masked");
        double l = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          row[j] = mask.allowed(i, j) ? std::exp(row[j] - mx) : 0.0;
          l += row[j];
        }
        denom[i] = l;
      }
      kernels::gemm(trans::no, trans::no, n, dh, n, 1.0, s.data(), n, vp, ldk, false, o.data(), dh);
      T* op = out + L.q_offset(b, h);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < dh; ++c) op[i * ldq + c] = static_cast<T>(o[i * dh + c] / denom[i]);
      if (saved) {
        double* p = saved->probs.data() + (b * L.n_head + h) * n * n;
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < n; ++j) p[i * n + j] = s[i * n + j] / denom[i];
      }
    }
}

template <class T>
void blocked_forward(const attention_layout& L, const AttentionMask& mask,
                     const attention_kernel& kernel, const T* q, const T* k, const T* v, T* out,
                     attention_saved* saved) {
  using kernels::trans;
  const std::size_t n = L.seq, dh = L.head_dim, ldq = L.q_ld(), ldk = L.kv_ld();
  const std::size_t br = std::min(kernel.block_rows, n), bc = std::min(kernel.block_cols, n);
  const double scale = L.scale();
  const tile_map tiles = make_tile_map(mask, br, bc);
  std::vector<double> s(br * bc), m(br), l(br), acc(br * dh);
  if (saved) {
    saved->lse.assign(L.batch * L.n_head * n, 0.0);
    saved->out_exact.assign(L.batch * L.n_head * n * dh, 0.0);
  }
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t h = 0; h < L.n_head; ++h) {
      const std::size_t g = L.group_of(h);
      const T* qp = q + L.q_offset(b, h);
      const T* kp = k + L.kv_offset(b, g);
      const T* vp = v + L.kv_offset(b, g);
      T* op = out + L.q_offset(b, h);
      for (std::size_t bi = 0; bi < tiles.rows_blocks; ++bi) {
        const std::size_t i0 = bi * br, rows = std::min(br, n - i0);
        std::fill(m.begin(), m.end(), neg_inf);
        std::fill(l.begin(), l.end(), 0.0);
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t bj = 0; bj < tiles.cols_blocks; ++bj) {
          if (!tiles.at(bi, bj)) continue;
          const std::size_t j0 = bj * bc, cols = std::min(bc, n - j0);
          kernels::gemm(trans::no, trans::yes, rows, cols, dh, scale, qp + i0 * ldq, ldq,
                        kp + j0 * ldk, ldk, false, s.data(), cols);
          for (std::size_t r = 0; r < rows; ++r) {
            double* row = s.data() + r * cols;
            double tile_max = neg_inf;
            for (std::size_t c = 0; c < cols; ++c)
              if (mask.allowed(i0 + r, j0 + c)) tile_max = std::max(tile_max, row[c]);
            if (tile_max == neg_inf) {
              std::fill(row, row + cols, 0.0);
              continue;
            }
            const double m_new = std::max(m[r], tile_max);
            const double alpha = std::exp(m[r] - m_new);
            double tile_sum = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
              row[c] = mask.allowed(i0 + r, j0 + c) ? std::exp(row[c] - m_new) : 0.0;
              tile_sum += row[c];
            }
            l[r] = alpha * l[r] + tile_sum;
            for (std::size_t c = 0; c < dh; ++c) acc[r * dh + c] *= alpha;
            m[r] = m_new;
          }
          kernels::gemm(trans::no, trans::no, rows, dh, cols, 1.0, s.data(), cols, vp + j0 * ldk,
                        ldk, true, acc.data(), dh);
        }
        for (std::size_t r = 0; r < rows; ++r) {
          if (!(l[r] > 0.0))
            throw degenerate_row_error("attention row " + std::to_string(i0 + r) +
                                       " is fully masked");
          for (std::size_t c = 0; c < dh; ++c) {
            const double val = acc[r * dh + c] / l[r];
            op[(i0 + r) * ldq + c] = static_cast<T>(val);
            if (saved) saved->out_exact[((b * L.n_head + h) * n + i0 + r) * dh + c] = val;
          }
          if (saved) saved->lse[(b * L.n_head + h) * n + i0 + r] = m[r] + std::log(l[r]);
        }
      }
    }
}

// Adds a [seq, head_dim] double block into a strided T gradient.
template <class T>
void add_block(T* dst, std::size_t ld, const double* src, std::size_t rows, std::size_t dh) {
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t c = 0; c < dh; ++c)
      dst[i * ld + c] = static_cast<T>(static_cast<double>(dst[i * ld + c]) + src[i * dh + c]);
}

template <class T>
void naive_backward(const attention_layout& L, const AttentionMask& mask, const T* q, const T* k,
                    const T* v, const T* dout, const attention_saved& saved, T* dq, T* dk, T* dv) {
  (void)mask;
  using kernels::trans;
  const std::size_t n = L.seq, dh = L.head_dim, ldq = L.q_ld(), ldk = L.kv_ld();
  const std::size_t group = L.n_head / L.n_kv_head;
  const double scale = L.scale();
  std::vector<double> dp(n * n), dk_acc(n * dh), dv_acc(n * dh);
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t g = 0; g < L.n_kv_head; ++g) {
      std::fill(dk_acc.begin(), dk_acc.end(), 0.0);
      std::fill(dv_acc.begin(), dv_acc.end(), 0.0);
      const T* kp = k + L.kv_offset(b, g);
      const T* vp = v + L.kv_offset(b, g);
      for (std::size_t h = g * group; h < (g + 1) * group; ++h) {
        const T* qp = q + L.q_offset(b, h);
        const T* dop = dout + L.q_offset(b, h);
        const double* p = saved.probs.data() + (b * L.n_head + h) * n * n;
        kernels::gemm(trans::no, trans::yes, n, n, dh, 1.0, dop, ldq, vp, ldk, false, dp.data(), n);
        kernels::gemm(trans::yes, trans::no, n, dh, n, 1.0, p, n, dop, ldq, true, dv_acc.data(), dh);
        for (std::size_t i = 0; i < n; ++i) {
          double di = 0.0;
          for (std::size_t j = 0; j < n; ++j) di += p[i * n + j] * dp[i * n + j];
          for (std::size_t j = 0; j < n; ++j) dp[i * n + j] = p[i * n + j] * (dp[i * n + j] - di);
        }
        if (dq)
          kernels::gemm(trans::no, trans::no, n, dh, n, scale, dp.data(), n, kp, ldk, true,
                        dq + L.q_offset(b, h), ldq);
        kernels::gemm(trans::yes, trans::no, n, dh, n, scale, dp.data(), n, qp, ldq, true,
                      dk_acc.data(), dh);
      }
      if (dk) add_block(dk + L.kv_offset(b, g), ldk, dk_acc.data(), n, dh);
      if (dv) add_block(dv + L.kv_offset(b, g), ldk, dv_acc.data(), n, dh);
    }
}

template <class T>
void blocked_backward(const attention_layout& L, const AttentionMask& mask,
                      const attention_kernel& kernel, const T* q, const T* k, const T* v,
                      const T* dout, const attention_saved& saved, T* dq, T* dk, T* dv) {
  using kernels::trans;
  const std::size_t n = L.seq, dh = L.head_dim, ldq = L.q_ld(), ldk = L.kv_ld();
  const std::size_t br = std::min(kernel.block_rows, n), bc = std::min(kernel.block_cols, n);
  const std::size_t group = L.n_head / L.n_kv_head;
  const double scale = L.scale();
  const tile_map tiles = make_tile_map(mask, br, bc);
  std::vector<double> s(br * bc), dp(br * bc), dq_acc(n * dh), dk_acc(n * dh), dv_acc(n * dh),
      dvec(n);
  for (std::size_t b = 0; b < L.batch; ++b)
    for (std::size_t g = 0; g < L.n_kv_head; ++g) {
      std::fill(dk_acc.begin(), dk_acc.end(), 0.0);
      std::fill(dv_acc.begin(), dv_acc.end(), 0.0);
      const T* kp = k + L.kv_offset(b, g);
      const T* vp = v + L.kv_offset(b, g);
      for (std::size_t h = g * group; h < (g + 1) * group; ++h) {
        const T* qp = q + L.q_offset(b, h);
        const T* dop = dout + L.q_offset(b, h);
        const double* lse = saved.lse.data() + (b * L.n_head + h) * n;
        const double* oex = saved.out_exact.data() + (b * L.n_head + h) * n * dh;
        for (std::size_t i = 0; i < n; ++i) {
          double di = 0.0;
          for (std::size_t c = 0; c < dh; ++c) di += static_cast<double>(dop[i * ldq + c]) * oex[i * dh + c];
          dvec[i] = di;
        }
        std::fill(dq_acc.begin(), dq_acc.end(), 0.0);
        for (std::size_t bj = 0; bj < tiles.cols_blocks; ++bj) {
          const std::size_t j0 = bj * bc, cols = std::min(bc, n - j0);
          for (std::size_t bi = 0; bi < tiles.rows_blocks; ++bi) {
            if (!tiles.at(bi, bj)) continue;
            const std::size_t i0 = bi * br, rows = std::min(br, n - i0);
            kernels::gemm(trans::no, trans::yes, rows, cols, dh, scale, qp + i0 * ldq, ldq,
                          kp + j0 * ldk, ldk, false, s.data(), cols);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cols; ++c) {
                double& x = s[r * cols + c];
                x = mask.allowed(i0 + r, j0 + c) ? std::exp(x - lse[i0 + r]) : 0.0;
              }
            kernels::gemm(trans::yes, trans::no, cols, dh, rows, 1.0, s.data(), cols,
                          dop + i0 * ldq, ldq, true, dv_acc.data() + j0 * dh, dh);
            kernels::gemm(trans::no, trans::yes, rows, cols, dh, 1.0, dop + i0 * ldq, ldq,
                          vp + j0 * ldk, ldk, false, dp.data(), cols);
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < cols; ++c)
                dp[r * cols + c] = s[r * cols + c] * (dp[r * cols + c] - dvec[i0 + r]);
            kernels::gemm(trans::no, trans::no, rows, dh, cols, scale, dp.data(), cols,
                          kp + j0 * ldk, ldk, true, dq_acc.data() + i0 * dh, dh);
            kernels::gemm(trans::yes, trans::no, cols, dh, rows, scale, dp.data(), cols,
                          qp + i0 * ldq, ldq, true, dk_acc.data() + j0 * dh, dh);
          }
        }
        if (dq) add_block(dq + L.q_offset(b, h), ldq, dq_acc.data(), n, dh);
      }
      if (dk) add_block(dk + L.kv_offset(b, g), ldk, dk_acc.data(), n, dh);
      if (dv) add_block(dv + L.kv_offset(b, g), ldk, dv_acc.data(), n, dh);
    }
}

}  // namespace detail

/// Raw forward over pointers laid out per `layout`. `out` has q's layout.
template <class T>
void attention_forward(const attention_layout& layout, const AttentionMask& mask,
                       const attention_kernel& kernel, const T* q, const T* k, const T* v, T* out,
                       attention_saved* saved = nullptr) {
  detail::check_call(layout, mask, kernel);
  if (kernel.kind == attention_kernel_kind::naive)
    detail::naive_forward(layout, mask, q, k, v, out, saved);
  else
    detail::blocked_forward(layout, mask, kernel, q, k, v, out, saved);
}

/// Accumulates into dq/dk/dv (any may be null).
template <class T>
void attention_backward(const attention_layout& layout, const AttentionMask& mask,
                        const attention_kernel& kernel, const T* q, const T* k, const T* v,
                        const T* dout, const attention_saved& saved, T* dq, T* dk, T* dv) {
  if (kernel.kind == attention_kernel_kind::naive)
    detail::naive_backward(layout, mask, q, k, v, dout, saved, dq, dk, dv);
  else
    detail::blocked_backward(layout, mask, kernel, q, k, v, dout, saved, dq, dk, dv);
}

namespace detail {

template <class T>
attention_layout heads_layout(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v) {
  if (q.rank() != 3 || k.rank() != 3 || v.rank() != 3 || k.shape() != v.shape() ||
      q.dim(1) != k.dim(1) || q.dim(2) != k.dim(2))
    throw dimension_error("attention expects q [h,n,d] and k, v [h_kv,n,d]; got " +
                          shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                          shape_str(v.shape()));
  attention_layout L;
  L.batch = 1;
  L.n_head = q.dim(0);
  L.n_kv_head = k.dim(0);
  L.seq = q.dim(1);
  L.head_dim = q.dim(2);
  L.head_major = true;
  return L;
}

}  // namespace detail

/// softmax(Q K^T / sqrt(d) + mask) V on [h, n, d] tensors; K/V may carry
/// fewer heads than Q (grouped / multi-query sharing).
template <class T>
Tensor<T> attention_naive(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                          const AttentionMask& mask) {
  const auto L = detail::heads_layout(q, k, v);
  Tensor<T> out(q.shape());
  attention_forward(L, mask, attention_kernel::naive(), q.data().data(), k.data().data(),
                    v.data().data(), out.data().data());
  return out;
}

template <class T>
Tensor<T> attention_blocked(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                            const AttentionMask& mask, std::size_t block_rows,
                            std::size_t block_cols) {
  const auto L = detail::heads_layout(q, k, v);
  Tensor<T> out(q.shape());
  attention_forward(L, mask, attention_kernel::blocked(block_rows, block_cols), q.data().data(),
                    k.data().data(), v.data().data(), out.data().data());
  return out;
}

namespace ops {

/// Differentiable attention. `mask` must outlive the tape.
template <class T>
Tensor<T> attention(Tape<T>& tape, const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                    const attention_layout& layout, std::shared_ptr<const AttentionMask> mask,
                    const attention_kernel& kernel) {
  if (q.numel() != layout.q_numel() || k.numel() != layout.kv_numel() ||
      v.numel() != layout.kv_numel())
    throw dimension_error("attention inputs do not match layout");
  Tensor<T> out(q.shape());
  const bool track = tape.tracks({&q, &k, &v});
  auto saved = track ? std::make_shared<attention_saved>() : nullptr;
  attention_forward(layout, *mask, kernel, q.data().data(), k.data().data(), v.data().data(),
                    out.data().data(), saved.get());
  detail::finish(out, "attention");
  if (track) {
    tape.record("attention", {q, k, v}, out,
                [q, k, v, out, layout, mask, kernel, saved]() mutable {
                  T* dq = q.requires_grad() ? q.ensure_grad().data() : nullptr;
                  T* dk = k.requires_grad() ? k.ensure_grad().data() : nullptr;
                  T* dv = v.requires_grad() ? v.ensure_grad().data() : nullptr;
                  attention_backward(layout, *mask, kernel, q.data().data(), k.data().data(),
                                     v.data().data(), out.grad().data(), *saved, dq, dk, dv);
                });
  }
  return out;
}

}  // namespace ops
}  // namespace ceglab
