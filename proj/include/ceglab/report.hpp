#pragma once

// Seed-aggregated CEG table over a suite of run logs, rendered as markdown
// and CSV, plus the long-format loss curve table.

#include <algorithm>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "ceglab/ceg.hpp"
#include "ceglab/run_log.hpp"

namespace ceglab {

struct SeedCeg {
  std::uint64_t seed = 0;
  CegResult result;
};

struct ScaleCell {
  std::string scale;
  std::size_t runs = 0;
  std::size_t diverged = 0;
  double min_val_loss = 0.0;  // median over seeds of each run's minimum
  std::string ceg_mode;       // shared mode, or a per-mode tally when seeds disagree
  std::optional<double> ceg_median, ceg_min, ceg_max;
  std::vector<SeedCeg> seeds;
};

struct VariantReport {
  std::string variant;
  std::vector<ScaleCell> cells;  // one per scale, in scale order
  classification cls = classification::inconclusive;
};

struct ReportOptions {
  std::vector<std::string> scale_order;    // smallest first; defaults to first-seen order
  std::vector<std::string> variant_order;  // defaults to first-seen order
  double delta = default_delta;
  bool interpolate = true;
  std::string baseline = "baseline";
};

struct Report {
  ReportOptions options;
  std::vector<std::string> scales;
  std::vector<VariantReport> rows;
};

inline double median_of(std::vector<double> v) {
  if (v.empty()) throw analysis_error("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

inline void append_unique(std::vector<std::string>& xs, const std::string& x) {
  if (std::find(xs.begin(), xs.end(), x) == xs.end()) xs.push_back(x);
}

}  // namespace detail

inline Report build_report(const std::vector<RunLog>& logs, const ReportOptions& opt = {}) {
  Report rep;
  rep.options = opt;
  std::vector<std::string> scales = opt.scale_order, variants = opt.variant_order;
  for (const auto& l : logs) {
    detail::append_unique(scales, l.scale);
    detail::append_unique(variants, l.variant);
  }
  rep.scales = scales;
  // (scale, variant) -> seed -> log
  std::map<std::pair<std::string, std::string>, std::map<std::uint64_t, const RunLog*>> grid;
  for (const auto& l : logs) {
    auto& slot = grid[{l.scale, l.variant}][l.seed];
    if (slot) throw report_error("duplicate run for " + l.scale + "/" + l.variant + "/seed " + std::to_string(l.seed));
    slot = &l;
  }
  const CegOptions ceg_opt{opt.interpolate};
  for (const auto& s : scales)
    if (!grid.count({s, opt.baseline}))
      throw report_error("no '" + opt.baseline + "' runs at scale '" + s + "'");

  for (const auto& v : variants) {
    VariantReport row;
    row.variant = v;
    for (const auto& s : scales) {
      ScaleCell cell;
      cell.scale = s;
      auto it = grid.find({s, v});
      if (it == grid.end()) {
        cell.ceg_mode = "missing";
        row.cells.push_back(cell);
        continue;
      }
      const auto& base_runs = grid.at({s, opt.baseline});
      std::vector<double> mins, cegs;
      std::map<std::string, std::size_t> modes;
      for (const auto& [seed, log] : it->second) {
        ++cell.runs;
        if (log->diverged()) ++cell.diverged;
        mins.push_back(log->min_val_loss());
        auto b = base_runs.find(seed);
        if (b == base_runs.end())
          throw report_error("no baseline run with seed " + std::to_string(seed) + " at scale '" + s + "'");
        SeedCeg sc{seed, primary_ceg(*b->second, *log, ceg_opt)};
        ++modes[to_string(sc.result.mode)];
        if (auto val = sc.result.value()) cegs.push_back(*val);
        cell.seeds.push_back(sc);
      }
      cell.min_val_loss = median_of(mins);
      if (modes.size() == 1) {
        cell.ceg_mode = modes.begin()->first;
      } else {
        for (const auto& [m, n] : modes) cell.ceg_mode += (cell.ceg_mode.empty() ? "" : "+") + m + ":" + std::to_string(n);
      }
      if (!cegs.empty()) {
        cell.ceg_median = median_of(cegs);
        cell.ceg_min = *std::min_element(cegs.begin(), cegs.end());
        cell.ceg_max = *std::max_element(cegs.begin(), cegs.end());
      }
      row.cells.push_back(cell);
    }
    if (row.cells.size() >= 2)
      row.cls = classify(row.cells.front().ceg_median, row.cells.back().ceg_median, opt.delta);
    rep.rows.push_back(row);
  }
  return rep;
}

namespace detail {

inline std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

inline std::string fmt(const std::optional<double>& v, int digits = 4) {
  return v ? fmt(*v, digits) : std::string();
}

}  // namespace detail

inline std::string report_csv(const Report& rep) {
  std::string out = "variant,scale,min_val_loss,ceg_mode,ceg_median,ceg_min,ceg_max,classification\n";
  for (const auto& row : rep.rows)
    for (const auto& c : row.cells)
      out += row.variant + "," + c.scale + "," + (c.runs ? detail::fmt(c.min_val_loss) : "") + "," +
             c.ceg_mode + "," + detail::fmt(c.ceg_median) + "," + detail::fmt(c.ceg_min) + "," +
             detail::fmt(c.ceg_max) + "," + to_string(row.cls) + "\n";
  return out;
}

/// `param_counts` maps "scale/variant" to the parameter total, when known.
inline std::string report_markdown(const Report& rep,
                                   const std::map<std::string, std::size_t>& param_counts = {}) {
  std::string out = "# CEG report\n\n";
  out += "Validation loss in nats per byte. CEG = cost_base / cost_alg at equal validation loss, ";
  out += "with cost = active parameters per token x tokens per step x steps. ";
  out += "Parameter counts include the token embedding and the untied output head.\n\n";
  out += std::string("- crossing rule: ") + (rep.options.interpolate ? "linear interpolation between evals" : "first eval at or below target") + "\n";
  out += "- classification threshold delta: " + detail::fmt(rep.options.delta, 3) + "\n";
  out += "- scales, small to large: ";
  for (std::size_t i = 0; i < rep.scales.size(); ++i) out += (i ? ", " : "") + rep.scales[i];
  out += "\n\n";
  out += "| variant | scale | params | runs | min val loss | CEG mode | CEG median | CEG range | classification |\n";
  out += "|---|---|---:|---:|---:|---|---:|---|---|\n";
  for (const auto& row : rep.rows)
    for (std::size_t i = 0; i < row.cells.size(); ++i) {
      const auto& c = row.cells[i];
      auto pc = param_counts.find(c.scale + "/" + row.variant);
      std::string runs = std::to_string(c.runs);
      if (c.diverged) runs += " (" + std::to_string(c.diverged) + " diverged)";
      out += "| " + row.variant + " | " + c.scale + " | " +
             (pc != param_counts.end() ? std::to_string(pc->second) : "") + " | " + runs + " | " +
             (c.runs ? detail::fmt(c.min_val_loss) : "") + " | " + c.ceg_mode + " | " +
             detail::fmt(c.ceg_median, 3) + " | " +
             (c.ceg_min ? "[" + detail::fmt(c.ceg_min, 3) + ", " + detail::fmt(c.ceg_max, 3) + "]" : "") +
             " | " + (i == 0 ? to_string(row.cls) : "") + " |\n";
    }
  out += "\n## Per-seed CEG\n\n| variant | scale | seed | mode | target loss | S_base | S_alg | CEG |\n|---|---|---:|---|---:|---:|---:|---:|\n";
  for (const auto& row : rep.rows)
    for (const auto& c : row.cells)
      for (const auto& s : c.seeds) {
        const auto& r = s.result;
        std::string target = detail::fmt(r.target_loss), sb = detail::fmt(r.baseline_steps, 1),
                    sa = detail::fmt(r.alg_steps, 1);
        if (r.mode != ceg_mode::primary && r.auxiliary) {
          target = detail::fmt(r.auxiliary->alg_min_loss);
          sb = detail::fmt(r.auxiliary->baseline_steps, 1);
          sa = detail::fmt(r.auxiliary->alg_steps, 1);
        }
        out += "| " + row.variant + " | " + c.scale + " | " + std::to_string(s.seed) + " | " +
               to_string(r.mode) + " | " + target + " | " + sb + " | " + sa + " | " +
               detail::fmt(r.value(), 3) + " |\n";
      }
  return out;
}

inline std::string loss_curves_csv(std::vector<const RunLog*> logs, const Report& rep) {
  const auto rank = [](const std::vector<std::string>& order, const std::string& x) {
    return static_cast<std::size_t>(std::find(order.begin(), order.end(), x) - order.begin());
  };
  std::vector<std::string> variants;
  for (const auto& r : rep.rows) variants.push_back(r.variant);
  std::sort(logs.begin(), logs.end(), [&](const RunLog* a, const RunLog* b) {
    const auto ka = std::make_tuple(rank(rep.scales, a->scale), rank(variants, a->variant), a->seed);
    const auto kb = std::make_tuple(rank(rep.scales, b->scale), rank(variants, b->variant), b->seed);
    return ka < kb;
  });
  std::string out = "scale,variant,seed,step,val_loss\n";
  for (const auto* l : logs)
    for (const auto& r : l->records)
      out += l->scale + "," + l->variant + "," + std::to_string(l->seed) + "," + std::to_string(r.step) + "," +
             detail::fmt(r.val_loss, 6) + "\n";
  return out;
}

}  // namespace ceglab
