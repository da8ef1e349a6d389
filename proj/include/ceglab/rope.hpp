#pragma once

// Rotary position embedding: channel pair (2k, 2k+1) of each head is rotated
// by pos * base^(-2k/d). No parameters.

#include <cmath>
#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ceglab/autodiff.hpp"
#include "ceglab/tensor.hpp"

namespace ceglab {

inline constexpr double default_rope_base = 10000.0;

/// cos/sin of the rotation angle for each (position, pair).
struct rope_table {
  std::size_t head_dim = 0;
  std::vector<double> cos;  // [positions, head_dim/2]
  std::vector<double> sin;

  rope_table(std::span<const std::size_t> positions, std::size_t d, double base)
      : head_dim(d) {
    if (d == 0 || d % 2 != 0)
      throw config_error("rotary embedding needs an even head dimension, got " + std::to_string(d));
    const std::size_t half = d / 2;
    cos.resize(positions.size() * half);
    sin.resize(positions.size() * half);
    for (std::size_t p = 0; p < positions.size(); ++p)
      for (std::size_t k = 0; k < half; ++k) {
        const double freq = std::pow(base, -2.0 * static_cast<double>(k) / static_cast<double>(d));
        const double angle = static_cast<double>(positions[p]) * freq;
        cos[p * half + k] = std::cos(angle);
        sin[p * half + k] = std::sin(angle);
      }
  }

  static rope_table sequential(std::size_t n, std::size_t d, double base) {
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = i;
    return rope_table(pos, d, base);
  }

  // Rotates one head vector in place; inverse rotates by the negative angle.
  template <class T>
  void rotate(T* x, std::size_t pos_index, bool inverse = false) const {
    const std::size_t half = head_dim / 2;
    for (std::size_t k = 0; k < half; ++k) {
      const double c = cos[pos_index * half + k];
      const double s = inverse ? -sin[pos_index * half + k] : sin[pos_index * half + k];
      const double a = x[2 * k], b = x[2 * k + 1];
      x[2 * k] = static_cast<T>(a * c - b * s);
      x[2 * k + 1] = static_cast<T>(a * s + b * c);
    }
  }
};

/// x: [h, n, d]; positions: n entries, one per sequence slot.
template <class T>
Tensor<T> apply_rope(const Tensor<T>& x, std::span<const std::size_t> positions,
                     double theta_base = default_rope_base) {
  if (x.rank() != 3) throw dimension_error("apply_rope expects [h,n,d], got " + shape_str(x.shape()));
  const std::size_t h = x.dim(0), n = x.dim(1), d = x.dim(2);
  if (positions.size() != n)
    throw dimension_error("apply_rope needs one position per sequence slot");
  const rope_table table(positions, d, theta_base);
  Tensor<T> out = x.clone();
  out.set_requires_grad(false);
  out.drop_grad();
  auto o = out.data();
  for (std::size_t head = 0; head < h; ++head)
    for (std::size_t i = 0; i < n; ++i) table.rotate(o.data() + (head * n + i) * d, i);
  return out;
}

namespace ops {

/// Rotates every head of a token-major activation [batch*seq, heads*head_dim];
/// row r sits at position r % seq.
template <class T>
Tensor<T> rope(Tape<T>& tape, const Tensor<T>& x, std::size_t seq, std::size_t head_dim,
               std::shared_ptr<const rope_table> table) {
  if (x.rank() != 2 || x.dim(1) % head_dim != 0 || x.dim(0) % seq != 0 ||
      table->head_dim != head_dim || table->cos.size() < seq * (head_dim / 2))
    throw dimension_error("rope: bad activation " + shape_str(x.shape()));
  const std::size_t rows = x.dim(0), width = x.dim(1), heads = width / head_dim;
  Tensor<T> out(x.shape(), x.values());
  auto o = out.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t h = 0; h < heads; ++h) table->rotate(o.data() + r * width + h * head_dim, r % seq);
  if (tape.tracks({&x})) {
    tape.record("rope", {x}, out, [x, out, table, seq, rows, heads, head_dim, width]() mutable {
      std::vector<T> g(out.grad().begin(), out.grad().end());
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t h = 0; h < heads; ++h)
          table->rotate(g.data() + r * width + h * head_dim, r % seq, true);
      auto dst = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
  }
  return out;
}

}  // namespace ops
}  // namespace ceglab
