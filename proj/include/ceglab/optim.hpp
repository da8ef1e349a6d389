#pragma once

// AdamW with decoupled weight decay, warmup + cosine schedule, and global
// gradient-norm clipping.

#include <cmath>
#include <cstddef>
#include <numbers>
#include <span>
#include <vector>

#include "ceglab/config.hpp"
#include "ceglab/model.hpp"

namespace ceglab {

/// Linear warmup to lr_max over warmup_steps, then cosine decay reaching
/// lr_min at total_steps.
struct LrSchedule {
  double lr_max = 1e-3;
  double lr_min = 1e-4;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 1;

  static LrSchedule from(const TrainConfig& t) {
    return {t.lr_max, t.lr_min, t.warmup_steps, t.total_steps};
  }

  double at(std::size_t step) const {
    if (step < warmup_steps)
      return lr_max * static_cast<double>(step + 1) / static_cast<double>(warmup_steps + 1);
    if (step >= total_steps) return lr_min;
    const double progress = static_cast<double>(step - warmup_steps) /
                            static_cast<double>(total_steps - warmup_steps);
    const double c = 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    return lr_min + c * (lr_max - lr_min);
  }
};

struct AdamWHyper {
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;

  static AdamWHyper from(const TrainConfig& t) { return {t.beta1, t.beta2, t.eps, t.weight_decay}; }
};

struct AdamWState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::size_t steps_taken = 0;
};

/// Matrices (embeddings included) decay; gains and biases do not.
template <class T>
bool decays(const NamedTensor<T>& p) {
  return p.tensor.rank() >= 2;
}

/// One update at schedule step `step_index` with learning rate `lr`.
/// Parameters without a gradient are treated as having a zero gradient.
template <class T>
void adamw_step(std::span<NamedTensor<T>> params, AdamWState& state, std::size_t step_index,
                double lr, const AdamWHyper& hp) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw contract_error("optimizer state does not match parameters");
  const double t = static_cast<double>(step_index + 1);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = params[i].tensor;
    auto& m = state.m[i];
    auto& v = state.v[i];
    if (m.size() != w.numel()) throw contract_error("optimizer state shape mismatch for " + params[i].name);
    auto data = w.data();
    const bool has = w.has_grad();
    const T* g = has ? w.grad().data() : nullptr;
    const double shrink = decays(params[i]) ? 1.0 - lr * hp.weight_decay : 1.0;
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double gj = has ? static_cast<double>(g[j]) : 0.0;
      double p = static_cast<double>(data[j]) * shrink;
      m[j] = hp.beta1 * m[j] + (1.0 - hp.beta1) * gj;
      v[j] = hp.beta2 * v[j] + (1.0 - hp.beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p -= lr * mhat / (std::sqrt(vhat) + hp.eps);
      data[j] = static_cast<T>(p);
    }
  }
  state.steps_taken = step_index + 1;
}

template <class T>
double global_grad_norm(std::span<const NamedTensor<T>> params) {
  double sq = 0.0;
  for (const auto& p : params)
    if (p.tensor.has_grad())
      for (T g : p.tensor.grad()) sq += static_cast<double>(g) * static_cast<double>(g);
  return std::sqrt(sq);
}

/// Scales all gradients by clip/(norm + 1e-6) when that is below one.
/// Returns the norm before clipping.
template <class T>
double clip_grad_norm(std::span<NamedTensor<T>> params, double clip) {
  const double norm = global_grad_norm<T>(params);
  const double coef = clip / (norm + 1e-6);
  if (coef < 1.0)
    for (auto& p : params)
      if (p.tensor.has_grad())
        for (auto& g : p.tensor.grad()) g = static_cast<T>(static_cast<double>(g) * coef);
  return norm;
}

}  // namespace ceglab
