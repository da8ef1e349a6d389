#pragma once

// Central-difference gradient checks.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "ceglab/autodiff.hpp"
#include "ceglab/tensor.hpp"

namespace ceglab {

struct grad_check_report {
  double max_rel_err = 0.0;
  std::size_t checked = 0;
  // The worst coordinate, for diagnostics.
  std::size_t worst_tensor = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

inline double grad_rel_err(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
}

/// `loss` builds a scalar from the current values of `params` on the given
/// tape. Samples `samples` coordinates (all of them if there are fewer).
template <class T>
grad_check_report grad_check(const std::function<Tensor<T>(Tape<T>&)>& loss,
                             std::vector<Tensor<T>> params, std::size_t samples, double h,
                             std::uint64_t seed = 0) {
  for (auto& p : params) {
    p.set_requires_grad(true);
    p.drop_grad();
  }
  Tape<T> tape;
  Tensor<T> root = loss(tape);
  backward(root, tape);

  std::vector<std::size_t> offsets(params.size() + 1, 0);
  for (std::size_t i = 0; i < params.size(); ++i) offsets[i + 1] = offsets[i] + params[i].numel();
  const std::size_t total = offsets.back();

  std::vector<std::size_t> picks(total);
  std::iota(picks.begin(), picks.end(), std::size_t{0});
  if (samples < total) {
    std::mt19937_64 rng(seed);
    for (std::size_t i = 0; i < samples; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, total - 1);
      std::swap(picks[i], picks[pick(rng)]);
    }
    picks.resize(samples);
    std::sort(picks.begin(), picks.end());
  }

  const auto eval = [&]() {
    Tape<T> quiet(grad_mode::no_grad);
    return static_cast<double>(loss(quiet).item());
  };

  grad_check_report rep;
  for (std::size_t flat : picks) {
    const std::size_t t = static_cast<std::size_t>(
        std::upper_bound(offsets.begin(), offsets.end(), flat) - offsets.begin() - 1);
    const std::size_t i = flat - offsets[t];
    Tensor<T>& p = params[t];
    const T saved = p[i];
    p[i] = static_cast<T>(saved + h);
    const double up = eval();
    p[i] = static_cast<T>(saved - h);
    const double down = eval();
    p[i] = saved;
    const double numeric = (up - down) / (2.0 * h);
    const double analytic = p.has_grad() ? static_cast<double>(p.grad()[i]) : 0.0;
    const double err = grad_rel_err(analytic, numeric);
    ++rep.checked;
    if (err >= rep.max_rel_err) {
      rep.max_rel_err = err;
      rep.worst_tensor = t;
      rep.worst_index = i;
      rep.worst_analytic = analytic;
      rep.worst_numeric = numeric;
    }
  }
  return rep;
}

/// Single-input form: f maps x to a scalar.
template <class T>
double grad_check(const std::function<Tensor<T>(Tape<T>&, const Tensor<T>&)>& f, Tensor<T> x,
                  std::size_t samples, double h, std::uint64_t seed = 0) {
  const std::function<Tensor<T>(Tape<T>&)> wrapped = [&](Tape<T>& tape) { return f(tape, x); };
  return grad_check<T>(wrapped, {x}, samples, h, seed).max_rel_err;
}

}  // namespace ceglab
