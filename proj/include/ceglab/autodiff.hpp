#pragma once

// Tape-based reverse-mode differentiation over a fixed op set.

#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ceglab/kernels.hpp"
#include "ceglab/tensor.hpp"

namespace ceglab {

enum class grad_mode { record, no_grad };

template <class T>
class Tape {
 public:
  struct Op {
    const char* name;
    std::vector<Tensor<T>> inputs;
    Tensor<T> output;
    std::function<void()> backward;
  };

  Tape() = default;
  explicit Tape(grad_mode mode) : mode_(mode) {}

  bool recording() const noexcept { return mode_ == grad_mode::record; }

  // True when an op over `inputs` must be recorded.
  bool tracks(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!recording()) return false;
    for (const auto* t : inputs)
      if (t && *t && t->requires_grad()) return true;
    return false;
  }

  void record(const char* name, std::vector<Tensor<T>> inputs, Tensor<T> output,
              std::function<void()> backward) {
    output.set_requires_grad(true);
    ops_.push_back(Op{name, std::move(inputs), std::move(output), std::move(backward)});
  }

  const std::vector<Op>& ops() const noexcept { return ops_; }
  std::size_t size() const noexcept { return ops_.size(); }
  void clear() { ops_.clear(); }

 private:
  grad_mode mode_ = grad_mode::record;
  std::vector<Op> ops_;
};

/// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Every op runs
/// its rule once; gradients from multiple paths are summed.
template <class T>
void backward(Tensor<T>& loss, Tape<T>& tape) {
  if (!loss || loss.numel() != 1)
    throw contract_error("backward requires a scalar root, got shape " +
                         (loss ? shape_str(loss.shape()) : std::string("<null>")));
  if (!loss.requires_grad())
    throw contract_error("backward root was not produced through the tape");
  loss.ensure_grad()[0] = T{1};
  auto& ops = tape.ops();
  for (auto it = ops.rbegin(); it != ops.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->backward();
    for (const auto& in : it->inputs)
      if (in.requires_grad() && in.has_grad()) require_finite<T>(in.grad(), it->name);
  }
}

namespace ops {

namespace detail {

template <class T>
Tensor<T> finish(Tensor<T> out, const char* name) {
  require_finite<T>(out.data(), name);
  return out;
}

template <class T>
void accumulate(std::span<T> dst, std::size_t i, double v) {
  dst[i] = static_cast<T>(static_cast<double>(dst[i]) + v);
}

}  // namespace detail

template <class T>
Tensor<T> matmul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw dimension_error("matmul shape mismatch: " + shape_str(a.shape()) + " x " +
                          shape_str(b.shape()));
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor<T> out({m, n});
  kernels::gemm(kernels::trans::no, kernels::trans::no, m, n, k, 1.0, a.data().data(), k,
                b.data().data(), n, false, out.data().data(), n);
  detail::finish(out, "matmul");
  if (tape.tracks({&a, &b})) {
    tape.record("matmul", {a, b}, out, [a, b, out, m, n, k]() mutable {
      const T* dc = out.grad().data();
      if (a.requires_grad())
        kernels::gemm(kernels::trans::no, kernels::trans::yes, m, k, n, 1.0, dc, n,
                      b.data().data(), n, true, a.ensure_grad().data(), k);
      if (b.requires_grad())
        kernels::gemm(kernels::trans::yes, kernels::trans::no, k, n, m, 1.0,
                      a.data().data(), k, dc, n, true, b.ensure_grad().data(), n);
    });
  }
  return out;
}

template <class T>
Tensor<T> add(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw dimension_error("add shape mismatch: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] + y[i];
  detail::finish(out, "add");
  if (tape.tracks({&a, &b})) {
    tape.record("add", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      for (const Tensor<T>* t : {&a, &b}) {
        if (!t->requires_grad()) continue;
        auto dst = t->ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> mul(Tape<T>& tape, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape())
    throw dimension_error("mul shape mismatch: " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = x[i] * y[i];
  detail::finish(out, "mul");
  if (tape.tracks({&a, &b})) {
    tape.record("mul", {a, b}, out, [a, b, out]() mutable {
      auto g = out.grad();
      if (a.requires_grad()) {
        auto dst = a.ensure_grad();
        auto y = b.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * y[i];
      }
      if (b.requires_grad()) {
        auto dst = b.ensure_grad();
        auto x = a.data();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * x[i];
      }
    });
  }
  return out;
}

template <class T>
Tensor<T> scale(Tape<T>& tape, const Tensor<T>& a, double factor) {
  Tensor<T> out(a.shape());
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = static_cast<T>(factor * x[i]);
  detail::finish(out, "scale");
  if (tape.tracks({&a})) {
    tape.record("scale", {a}, out, [a, out, factor]() mutable {
      auto g = out.grad();
      auto dst = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) detail::accumulate(dst, i, factor * g[i]);
    });
  }
  return out;
}

template <class T>
Tensor<T> sum(Tape<T>& tape, const Tensor<T>& a) {
  double acc = 0.0;
  for (T v : a.data()) acc += v;
  Tensor<T> out({1}, std::vector<T>{static_cast<T>(acc)});
  detail::finish(out, "sum");
  if (tape.tracks({&a})) {
    tape.record("sum", {a}, out, [a, out]() mutable {
      const T g = out.grad()[0];
      for (auto& d : a.ensure_grad()) d += g;
    });
  }
  return out;
}

/// Same data, new shape. Copies so the tape never aliases storage.
template <class T>
Tensor<T> reshape(Tape<T>& tape, const Tensor<T>& a, shape_t shape) {
  if (numel_of(shape) != a.numel())
    throw dimension_error("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  Tensor<T> out(std::move(shape), a.values());
  if (tape.tracks({&a})) {
    tape.record("reshape", {a}, out, [a, out]() mutable {
      auto g = out.grad();
      auto dst = a.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    });
  }
  return out;
}

template <class T>
Tensor<T> transpose(Tape<T>& tape, const Tensor<T>& a) {
  if (a.rank() != 2) throw dimension_error("transpose expects rank 2, got " + shape_str(a.shape()));
  const std::size_t m = a.dim(0), n = a.dim(1);
  Tensor<T> out({n, m});
  auto o = out.data();
  auto x = a.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) o[j * m + i] = x[i * n + j];
  if (tape.tracks({&a})) {
    tape.record("transpose", {a}, out, [a, out, m, n]() mutable {
      auto g = out.grad();
      auto dst = a.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) dst[i * n + j] += g[j * m + i];
    });
  }
  return out;
}

/// Row-wise softmax with optional boolean mask (nonzero = allowed). Masked
/// entries come out as exactly zero.
template <class T>
Tensor<T> softmax_rows(Tape<T>& tape, const Tensor<T>& x,
                       std::span<const std::uint8_t> mask = {}) {
  if (x.rank() != 2) throw dimension_error("softmax_rows expects rank 2, got " + shape_str(x.shape()));
  const std::size_t m = x.dim(0), n = x.dim(1);
  if (!mask.empty() && mask.size() != m * n)
    throw dimension_error("softmax_rows mask size does not match " + shape_str(x.shape()));
  Tensor<T> out({m, n});
  auto in = x.data();
  auto o = out.data();
  const auto allowed = [&](std::size_t i, std::size_t j) {
    return mask.empty() || mask[i * n + j] != 0;
  };
  for (std::size_t i = 0; i < m; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j)
      if (allowed(i, j)) mx = std::max(mx, static_cast<double>(in[i * n + j]));
    if (mx == -std::numeric_limits<double>::infinity())
      throw degenerate_row_error("softmax row " + std::to_string(i) + " is fully masked");
    double denom = 0.0;
    for (std::size_t j = 0; j < n; ++j)
      if (allowed(i, j)) denom += std::exp(static_cast<double>(in[i * n + j]) - mx);
    for (std::size_t j = 0; j < n; ++j)
      o[i * n + j] = allowed(i, j)
                         ? static_cast<T>(std::exp(static_cast<double>(in[i * n + j]) - mx) / denom)
                         : T{0};
  }
  detail::finish(out, "softmax_rows");
  if (tape.tracks({&x})) {
    tape.record("softmax_rows", {x}, out, [x, out, m, n]() mutable {
      auto g = out.grad();
      auto y = out.data();
      auto dst = x.ensure_grad();
      for (std::size_t i = 0; i < m; ++i) {
        double dotv = 0.0;
        for (std::size_t j = 0; j < n; ++j) dotv += static_cast<double>(y[i * n + j]) * g[i * n + j];
        for (std::size_t j = 0; j < n; ++j)
          detail::accumulate(dst, i * n + j, y[i * n + j] * (g[i * n + j] - dotv));
      }
    });
  }
  return out;
}

/// Standardizes each length-d feature vector, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& gain,
                     const Tensor<T>& bias, double eps = 1e-5) {
  const std::size_t d = x.shape().back();
  if (d < 2) throw dimension_error("layer_norm needs at least 2 features");
  if (gain.numel() != d || bias.numel() != d)
    throw dimension_error("layer_norm gain/bias must have " + std::to_string(d) + " elements");
  const std::size_t rows = x.numel() / d;
  Tensor<T> out(x.shape());
  std::vector<double> xhat(x.numel());
  std::vector<double> rstd(rows);
  auto in = x.data();
  auto o = out.data();
  auto g = gain.data();
  auto b = bias.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = in.data() + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = row[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * rs;
      xhat[r * d + j] = h;
      o[r * d + j] = static_cast<T>(h * g[j] + b[j]);
    }
  }
  detail::finish(out, "layer_norm");
  if (tape.tracks({&x, &gain, &bias})) {
    tape.record("layer_norm", {x, gain, bias}, out,
                [x, gain, bias, out, xhat = std::move(xhat), rstd = std::move(rstd), rows,
                 d]() mutable {
                  auto dy = out.grad();
                  auto gv = gain.data();
                  if (gain.requires_grad() || bias.requires_grad()) {
                    std::vector<double> dg(d, 0.0), db(d, 0.0);
                    for (std::size_t r = 0; r < rows; ++r)
                      for (std::size_t j = 0; j < d; ++j) {
                        dg[j] += dy[r * d + j] * xhat[r * d + j];
                        db[j] += dy[r * d + j];
                      }
                    if (gain.requires_grad()) {
                      auto dst = gain.ensure_grad();
                      for (std::size_t j = 0; j < d; ++j) detail::accumulate(dst, j, dg[j]);
                    }
                    if (bias.requires_grad()) {
                      auto dst = bias.ensure_grad();
                      for (std::size_t j = 0; j < d; ++j) detail::accumulate(dst, j, db[j]);
                    }
                  }
                  if (x.requires_grad()) {
                    auto dst = x.ensure_grad();
                    const double inv_d = 1.0 / static_cast<double>(d);
                    for (std::size_t r = 0; r < rows; ++r) {
                      double mean_dh = 0.0, mean_dh_h = 0.0;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = static_cast<double>(dy[r * d + j]) * gv[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[r * d + j];
                      }
                      mean_dh *= inv_d;
                      mean_dh_h *= inv_d;
                      for (std::size_t j = 0; j < d; ++j) {
                        const double dh = static_cast<double>(dy[r * d + j]) * gv[j];
                        detail::accumulate(dst, r * d + j,
                                           rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h));
                      }
                    }
                  }
                });
  }
  return out;
}

namespace detail {
inline constexpr double gelu_k = 0.7978845608028654;  // sqrt(2/pi)
inline constexpr double gelu_c = 0.044715;
}  // namespace detail

/// tanh-approximated GELU.
template <class T>
Tensor<T> gelu(Tape<T>& tape, const Tensor<T>& x) {
  Tensor<T> out(x.shape());
  auto in = x.data();
  auto o = out.data();
  for (std::size_t i = 0; i < o.size(); ++i) {
    const double v = in[i];
    const double t = std::tanh(detail::gelu_k * (v + detail::gelu_c * v * v * v));
    o[i] = static_cast<T>(0.5 * v * (1.0 + t));
  }
  detail::finish(out, "gelu");
  if (tape.tracks({&x})) {
    tape.record("gelu", {x}, out, [x, out]() mutable {
      auto g = out.grad();
      auto in = x.data();
      auto dst = x.ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) {
        const double v = in[i];
        const double u = detail::gelu_k * (v + detail::gelu_c * v * v * v);
        const double t = std::tanh(u);
        const double du = detail::gelu_k * (1.0 + 3.0 * detail::gelu_c * v * v);
        const double dydx = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du;
        detail::accumulate(dst, i, g[i] * dydx);
      }
    });
  }
  return out;
}

/// Gathers rows of `table` ([vocab, d]) for each id.
template <class T>
Tensor<T> embedding(Tape<T>& tape, const Tensor<T>& table, std::span<const std::int32_t> ids) {
  if (table.rank() != 2) throw dimension_error("embedding table must be rank 2");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  if (ids.empty()) throw dimension_error("embedding needs at least one id");
  for (auto id : ids)
    if (id < 0 || static_cast<std::size_t>(id) >= vocab)
      throw index_error("token id " + std::to_string(id) + " outside vocab of " +
                        std::to_string(vocab));
  Tensor<T> out({ids.size(), d});
  auto o = out.data();
  auto w = table.data();
  for (std::size_t r = 0; r < ids.size(); ++r)
    std::copy_n(w.data() + static_cast<std::size_t>(ids[r]) * d, d, o.data() + r * d);
  if (tape.tracks({&table})) {
    std::vector<std::int32_t> saved(ids.begin(), ids.end());
    tape.record("embedding", {table}, out, [table, out, saved = std::move(saved), d]() mutable {
      auto g = out.grad();
      auto dst = table.ensure_grad();
      for (std::size_t r = 0; r < saved.size(); ++r) {
        T* row = dst.data() + static_cast<std::size_t>(saved[r]) * d;
        for (std::size_t j = 0; j < d; ++j) row[j] += g[r * d + j];
      }
    });
  }
  return out;
}

/// x[r] += table[r % period]; the positional-table add for a [batch*seq, d]
/// activation with period = seq.
template <class T>
Tensor<T> add_periodic_rows(Tape<T>& tape, const Tensor<T>& x, const Tensor<T>& table,
                            std::size_t period) {
  if (x.rank() != 2 || table.rank() != 2 || x.dim(1) != table.dim(1) || period == 0 ||
      period > table.dim(0) || x.dim(0) % period != 0)
    throw dimension_error("add_periodic_rows: " + shape_str(x.shape()) + " with table " +
                          shape_str(table.shape()) + " period " + std::to_string(period));
  const std::size_t rows = x.dim(0), d = x.dim(1);
  Tensor<T> out({rows, d});
  auto o = out.data();
  auto in = x.data();
  auto w = table.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t j = 0; j < d; ++j) o[r * d + j] = in[r * d + j] + w[(r % period) * d + j];
  detail::finish(out, "add_periodic_rows");
  if (tape.tracks({&x, &table})) {
    tape.record("add_periodic_rows", {x, table}, out, [x, table, out, period, rows, d]() mutable {
      auto g = out.grad();
      if (x.requires_grad()) {
        auto dst = x.ensure_grad();
        for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
      }
      if (table.requires_grad()) {
        std::vector<double> acc(period * d, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) acc[(r % period) * d + j] += g[r * d + j];
        auto dst = table.ensure_grad();
        for (std::size_t i = 0; i < acc.size(); ++i) detail::accumulate(dst, i, acc[i]);
      }
    });
  }
  return out;
}

/// Mean negative log-likelihood (nats) of `targets` under row-softmax of
/// logits [..., vocab]. `mean_out`, when given, receives the unrounded mean.
template <class T>
Tensor<T> cross_entropy(Tape<T>& tape, const Tensor<T>& logits,
                        std::span<const std::int32_t> targets, double* mean_out = nullptr) {
  const std::size_t vocab = logits.shape().back();
  const std::size_t rows = logits.numel() / vocab;
  if (logits.rank() < 2 || rows != targets.size())
    throw dimension_error("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                          std::to_string(targets.size()) + " targets");
  for (auto t : targets)
    if (t < 0 || static_cast<std::size_t>(t) >= vocab)
      throw index_error("target id " + std::to_string(t) + " outside vocab of " +
                        std::to_string(vocab));
  auto z = logits.data();
  std::vector<double> lse(rows);
  double total = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = z.data() + r * vocab;
    double mx = row[0];
    for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double s = 0.0;
    for (std::size_t j = 0; j < vocab; ++j) s += std::exp(row[j] - mx);
    lse[r] = mx + std::log(s);
    total += lse[r] - row[targets[r]];
  }
  const double mean = total / static_cast<double>(rows);
  if (!std::isfinite(mean)) throw non_finite_error("non-finite value produced by cross_entropy");
  if (mean_out) *mean_out = mean;
  Tensor<T> out({1}, std::vector<T>{static_cast<T>(mean)});
  detail::finish(out, "cross_entropy");
  if (tape.tracks({&logits})) {
    std::vector<std::int32_t> saved(targets.begin(), targets.end());
    tape.record("cross_entropy", {logits}, out,
                [logits, out, saved = std::move(saved), lse = std::move(lse), rows,
                 vocab]() mutable {
                  const double g = static_cast<double>(out.grad()[0]) / static_cast<double>(rows);
                  auto z = logits.data();
                  auto dst = logits.ensure_grad();
                  for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < vocab; ++j) {
                      double p = std::exp(z[r * vocab + j] - lse[r]);
                      if (static_cast<std::size_t>(saved[r]) == j) p -= 1.0;
                      detail::accumulate(dst, r * vocab + j, g * p);
                    }
                });
  }
  return out;
}

}  // namespace ops
}  // namespace ceglab
