#pragma once

// Compute-equivalent gain from loss curves, and the two-scale
// classification.

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>

#include "ceglab/errors.hpp"
#include "ceglab/run_log.hpp"

namespace ceglab {

inline double compute_cost(const RunLog& log, double up_to_step) {
  if (up_to_step < 0.0 || up_to_step > static_cast<double>(log.final_record().step))
    throw analysis_error("step " + std::to_string(up_to_step) + " outside the logged range");
  return log.cost_model.cost(up_to_step);
}

/// First point where the validation curve is at or below `target`. With
/// interpolation the crossing is placed linearly between the bracketing
/// evals; otherwise it is the first eval step at or below target.
inline std::optional<double> steps_to_reach(const RunLog& log, double target, bool interpolate = true) {
  const auto& rs = log.records;
  if (rs.empty()) throw analysis_error("steps_to_reach on an empty log");
  for (std::size_t k = 0; k < rs.size(); ++k) {
    if (!(rs[k].val_loss <= target)) continue;
    const double s = static_cast<double>(rs[k].step);
    if (k == 0 || !interpolate) return s;
    const double s0 = static_cast<double>(rs[k - 1].step);
    const double v0 = rs[k - 1].val_loss, v1 = rs[k].val_loss;
    const double frac = (v0 - target) / (v0 - v1);  // v0 > target >= v1
    return s0 + std::clamp(frac, 0.0, 1.0) * (s - s0);
  }
  return std::nullopt;
}

enum class ceg_mode { primary, auxiliary, incomparable };

inline const char* to_string(ceg_mode m) {
  switch (m) {
    case ceg_mode::primary: return "primary";
    case ceg_mode::auxiliary: return "auxiliary";
    case ceg_mode::incomparable: return "incomparable";
  }
  return "?";
}

struct AuxiliaryCeg {
  double alg_min_loss = 0.0;                // L_alg
  double alg_steps = 0.0;                   // S'_alg
  std::optional<double> baseline_steps;     // S'_base
  std::optional<double> auxiliary_ceg;
};

struct CegResult {
  double target_loss = 0.0;                 // L_target
  double baseline_steps = 0.0;              // S_base
  std::optional<double> alg_steps;          // S_alg
  std::optional<double> primary_ceg;
  std::optional<AuxiliaryCeg> auxiliary;
  ceg_mode mode = ceg_mode::incomparable;

  // The number the report aggregates: primary or auxiliary CEG.
  std::optional<double> value() const {
    if (mode == ceg_mode::primary) return primary_ceg;
    if (mode == ceg_mode::auxiliary && auxiliary) return auxiliary->auxiliary_ceg;
    return std::nullopt;
  }
};

struct CegOptions {
  bool interpolate = true;
};

namespace detail {

// cost_base(sb) / cost_alg(sa); both zero means the curves start at the
// target together.
inline std::optional<double> cost_ratio(const RunLog& base, double sb, const RunLog& alg, double sa) {
  const double cb = base.cost_model.cost(sb), ca = alg.cost_model.cost(sa);
  if (ca == 0.0 && cb == 0.0) return 1.0;
  if (ca == 0.0 || cb == 0.0) return std::nullopt;
  return cb / ca;
}

}  // namespace detail

/// Target is the algorithm's best loss; the baseline must reach it.
inline CegResult auxiliary_ceg(const RunLog& base, const RunLog& alg, const CegOptions& opt = {}) {
  CegResult res;
  res.target_loss = base.final_record().val_loss;
  res.baseline_steps = steps_to_reach(base, res.target_loss, opt.interpolate).value_or(0.0);
  AuxiliaryCeg aux;
  aux.alg_min_loss = alg.min_val_loss();
  aux.alg_steps = *steps_to_reach(alg, aux.alg_min_loss, opt.interpolate);
  aux.baseline_steps = steps_to_reach(base, aux.alg_min_loss, opt.interpolate);
  if (aux.baseline_steps) aux.auxiliary_ceg = detail::cost_ratio(base, *aux.baseline_steps, alg, aux.alg_steps);
  res.mode = aux.auxiliary_ceg ? ceg_mode::auxiliary : ceg_mode::incomparable;
  res.auxiliary = aux;
  return res;
}

/// Target is the baseline's final validation loss. Falls back to the
/// auxiliary rule exactly when the algorithm ends above the target.
inline CegResult primary_ceg(const RunLog& base, const RunLog& alg, const CegOptions& opt = {}) {
  if (base.diverged())
    throw analysis_error("baseline run '" + base.run_id + "' diverged; it defines no target loss");
  const double target = base.final_record().val_loss;
  if (alg.final_record().val_loss > target) return auxiliary_ceg(base, alg, opt);
  CegResult res;
  res.target_loss = target;
  // The baseline may touch its final loss before the last eval; the same
  // first-reach rule applies to both curves.
  res.baseline_steps = *steps_to_reach(base, target, opt.interpolate);
  res.alg_steps = *steps_to_reach(alg, target, opt.interpolate);
  res.primary_ceg = detail::cost_ratio(base, res.baseline_steps, alg, *res.alg_steps);
  res.mode = res.primary_ceg ? ceg_mode::primary : ceg_mode::incomparable;
  return res;
}

enum class classification { independent, dependent, inconclusive };

inline const char* to_string(classification c) {
  switch (c) {
    case classification::independent: return "independent";
    case classification::dependent: return "dependent";
    case classification::inconclusive: return "inconclusive";
  }
  return "?";
}

inline constexpr double default_delta = 0.05;

inline classification classify(std::optional<double> ceg_small, std::optional<double> ceg_large,
                               double delta = default_delta) {
  if (!ceg_small || !ceg_large) return classification::inconclusive;
  const double s = *ceg_small, l = *ceg_large;
  if (s >= 1.0 + delta && l >= 1.0 + delta) return classification::independent;
  if (s < 1.0 + delta && l >= s + delta) return classification::dependent;
  return classification::inconclusive;
}

}  // namespace ceglab
