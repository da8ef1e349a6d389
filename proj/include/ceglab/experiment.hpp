#pragma once

// Declarative experiment spec and the (scale x variant x seed) suite driver.

#include <atomic>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ceglab/config.hpp"
#include "ceglab/data.hpp"
#include "ceglab/report.hpp"
#include "ceglab/run_log.hpp"
#include "ceglab/trainer.hpp"

namespace ceglab {

namespace fs = std::filesystem;

struct ScaleSpec {
  std::string name;
  ModelConfig model;  // the scale's baseline
  TrainConfig train;
};

struct VariantSpec {
  std::string name;
  json toggles = json::object();
};

struct ExperimentSpec {
  fs::path corpus;
  fs::path output;
  std::vector<ScaleSpec> scales;      // smallest first
  std::vector<VariantSpec> variants;
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  double delta = default_delta;
  bool interpolate = true;
  std::string text;  // canonical form of the parsed spec

  const ScaleSpec& scale(const std::string& name) const {
    for (const auto& s : scales)
      if (s.name == name) return s;
    throw config_error("spec has no scale '" + name + "'");
  }
  const VariantSpec& variant(const std::string& name) const {
    for (const auto& v : variants)
      if (v.name == name) return v;
    throw config_error("spec has no variant '" + name + "'");
  }
};

namespace detail {

inline json merge_objects(json base, const json& over) {
  for (auto it = over.begin(); it != over.end(); ++it) base[it.key()] = it.value();
  return base;
}

}  // namespace detail

/// Relative paths inside the spec resolve against `base_dir`.
inline ExperimentSpec parse_experiment_spec(const json& j, const fs::path& base_dir = ".") {
  ExperimentSpec spec;
  try {
    if (!j.is_object()) throw config_error("experiment spec must be a JSON object");
    const auto resolve = [&](const std::string& p) {
      fs::path path(p);
      return path.is_absolute() ? path : (base_dir / path).lexically_normal();
    };
    spec.corpus = resolve(j.at("corpus").get<std::string>());
    spec.output = resolve(j.value("output", std::string("output")));
    if (j.contains("seeds")) spec.seeds = j.at("seeds").get<std::vector<std::uint64_t>>();
    if (j.contains("analysis")) {
      spec.delta = j.at("analysis").value("delta", default_delta);
      spec.interpolate = j.at("analysis").value("interpolate", true);
    }
    for (const auto& s : j.at("scales")) {
      ScaleSpec sc;
      sc.name = s.at("name").get<std::string>();
      json model = json::object(), train = json::object();
      if (s.contains("preset")) {
        const auto p = scale_preset(s.at("preset").get<std::string>());
        model = to_json(p.model);
        train = to_json(p.train);
      }
      if (s.contains("model")) model = detail::merge_objects(model, s.at("model"));
      if (s.contains("train")) {
        json over = s.at("train");
        if (train.contains("optimizer") && over.contains("optimizer"))
          over["optimizer"] = detail::merge_objects(train["optimizer"], over["optimizer"]);
        train = detail::merge_objects(train, over);
      }
      sc.model = model_config_from_json(model);
      sc.train = train_config_from_json(train);
      spec.scales.push_back(sc);
    }
    for (const auto& v : j.at("variants")) {
      VariantSpec vs;
      if (v.is_string()) {
        vs.name = v.get<std::string>();
        vs.toggles = builtin_variant_toggles(vs.name);
      } else {
        vs.name = v.at("name").get<std::string>();
        vs.toggles = v.contains("toggles") ? v.at("toggles") : builtin_variant_toggles(vs.name);
      }
      spec.variants.push_back(vs);
    }
  } catch (const json::exception& e) {
    throw config_error(std::string("experiment spec: ") + e.what());
  }

  std::vector<std::string> names;
  for (const auto& s : spec.scales) names.push_back("scale:" + s.name);
  for (const auto& v : spec.variants) names.push_back("variant:" + v.name);
  auto sorted = names;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end())
    throw config_error("experiment spec: scale and variant names must be unique");
  if (spec.scales.empty()) throw config_error("experiment spec: no scales");
  if (std::none_of(spec.variants.begin(), spec.variants.end(), [](const VariantSpec& v) { return v.name == "baseline"; }))
    throw config_error("experiment spec: the variant list must include 'baseline'");
  if (spec.seeds.empty()) throw config_error("experiment spec: no seeds");
  // Every cell's config must be valid before anything runs.
  for (const auto& s : spec.scales)
    for (const auto& v : spec.variants) apply_toggles(s.model, v.toggles);

  json canon = {{"corpus", spec.corpus.string()}, {"output", spec.output.string()}, {"seeds", spec.seeds},
                {"analysis", {{"delta", spec.delta}, {"interpolate", spec.interpolate}}}};
  for (const auto& s : spec.scales)
    canon["scales"].push_back({{"name", s.name}, {"model", to_json(s.model)}, {"train", to_json(s.train)}});
  for (const auto& v : spec.variants) canon["variants"].push_back({{"name", v.name}, {"toggles", v.toggles}});
  spec.text = canon.dump(2);
  return spec;
}

inline ExperimentSpec load_experiment_spec(const fs::path& path) {
  json j;
  try {
    j = json::parse(read_text(path));
  } catch (const json::exception& e) {
    throw config_error("experiment spec '" + path.string() + "': " + e.what());
  }
  return parse_experiment_spec(j, path.has_parent_path() ? path.parent_path() : fs::path("."));
}

struct Cell {
  std::string scale;
  std::string variant;
  std::uint64_t seed = 0;
  ModelConfig model;
  TrainConfig train;

  fs::path dir(const fs::path& out) const { return out / scale / variant / std::to_string(seed); }
};

inline Cell make_cell(const ExperimentSpec& spec, const std::string& scale, const std::string& variant,
                      std::uint64_t seed) {
  Cell c;
  c.scale = scale;
  c.variant = variant;
  c.seed = seed;
  const auto& s = spec.scale(scale);
  c.model = apply_toggles(s.model, spec.variant(variant).toggles);
  c.model.seed = seed;
  c.train = s.train;
  c.train.seed = seed;
  return c;
}

inline std::vector<Cell> suite_cells(const ExperimentSpec& spec) {
  std::vector<Cell> cells;
  for (const auto& s : spec.scales)
    for (const auto& v : spec.variants)
      for (auto seed : spec.seeds) cells.push_back(make_cell(spec, s.name, v.name, seed));
  return cells;
}

/// Corpus and per-context-length splits, loaded once per suite.
class DataCache {
 public:
  explicit DataCache(const fs::path& corpus_path) : corpus_(Corpus::load(corpus_path.string())) {
    tokens_ = tokenize_bytes(corpus_);
  }
  const Corpus& corpus() const { return corpus_; }

  const SplitDataset& get(double val_fraction, std::size_t context_len) {
    std::lock_guard<std::mutex> lock(mu_);
    auto key = std::make_pair(val_fraction, context_len);
    auto it = splits_.find(key);
    if (it == splits_.end()) it = splits_.emplace(key, split(tokens_, val_fraction, context_len)).first;
    return it->second;
  }

 private:
  Corpus corpus_;
  std::vector<std::int32_t> tokens_;
  std::mutex mu_;
  std::map<std::pair<double, std::size_t>, SplitDataset> splits_;
};

enum class cell_status { complete, diverged, failed, skipped };

inline const char* to_string(cell_status s) {
  switch (s) {
    case cell_status::complete: return "complete";
    case cell_status::diverged: return "diverged";
    case cell_status::failed: return "failed";
    case cell_status::skipped: return "skipped";
  }
  return "?";
}

struct CellOutcome {
  Cell cell;
  std::string run_id;
  cell_status status = cell_status::failed;
  bool reused = false;
  std::string error;
};

/// A cell's existing log is reused when its run id matches the current
/// configs and corpus; anything else is retrained.
inline CellOutcome run_cell(const Cell& cell, DataCache& data, const fs::path& out,
                            const std::function<void(const std::string&)>& say = {}) {
  CellOutcome res;
  res.cell = cell;
  res.run_id = make_run_id(cell.model, cell.train, data.corpus().hash());
  const fs::path dir = cell.dir(out);
  const fs::path log_path = dir / "log.jsonl";
  if (fs::exists(log_path)) {
    try {
      const RunLog old = read_run_log(log_path);
      if (old.run_id == res.run_id) {
        res.status = old.diverged() ? cell_status::diverged : cell_status::complete;
        res.reused = true;
        return res;
      }
    } catch (const error&) {
      // unreadable log: retrain
    }
  }
  TrainOptions opts;
  opts.variant = cell.variant;
  opts.scale = cell.scale;
  opts.corpus_hash = data.corpus().hash();
  opts.checkpoint_path = dir / "checkpoint.bin";
  double step_seconds = 0.0;
  opts.step_seconds = &step_seconds;
  const std::string tag = cell.scale + "/" + cell.variant + "/" + std::to_string(cell.seed);
  if (say)
    opts.on_eval = [&](const LogRecord& r) {
      say(tag + " step " + std::to_string(r.step) + " val " + detail::fmt(r.val_loss));
    };
  const auto t0 = std::chrono::steady_clock::now();
  try {
    const SplitDataset& ds = data.get(cell.train.val_fraction, cell.model.context_len);
    RunLog log = train(cell.model, cell.train, ds, opts);
    write_run_log(log, log_path);
    res.status = cell_status::complete;
  } catch (const run_diverged& e) {
    write_run_log(e.log, log_path);
    res.status = cell_status::diverged;
    res.error = e.what();
  } catch (const std::exception& e) {
    res.status = cell_status::failed;
    res.error = e.what();
    return res;
  }
  const double total = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const json timing = {{"run_id", res.run_id},
                       {"train_step_seconds", step_seconds},
                       {"total_seconds", total},
                       {"steps", cell.train.total_steps}};
  write_text_atomic(dir / "timing.json", timing.dump(2) + "\n");
  return res;
}

inline json manifest_json(const ExperimentSpec& spec, const std::string& corpus_hash,
                          const std::vector<CellOutcome>& outcomes) {
  json m = {{"spec_sha256", sha256_hex(spec.text)}, {"corpus_sha256", corpus_hash}};
  for (const auto& s : spec.scales) m["scales"].push_back(s.name);
  for (const auto& v : spec.variants) m["variants"].push_back(v.name);
  m["seeds"] = spec.seeds;
  m["analysis"] = {{"delta", spec.delta}, {"interpolate", spec.interpolate}};
  m["cells"] = json::array();
  for (const auto& o : outcomes) {
    json c = {{"scale", o.cell.scale},
              {"variant", o.cell.variant},
              {"seed", o.cell.seed},
              {"run_id", o.run_id},
              {"status", to_string(o.status)},
              {"log", (fs::path(o.cell.scale) / o.cell.variant / std::to_string(o.cell.seed) / "log.jsonl").generic_string()}};
    if (o.status == cell_status::failed) c["error"] = o.error;
    m["cells"].push_back(c);
  }
  return m;
}

struct SuiteOptions {
  std::size_t jobs = 1;
  std::function<void(const std::string&)> say;
};

/// Runs every missing cell. The manifest is rewritten after each finished
/// cell so an interrupted suite leaves an accurate record.
inline std::vector<CellOutcome> run_suite(const ExperimentSpec& spec, const SuiteOptions& opt = {}) {
  DataCache data(spec.corpus);
  const auto cells = suite_cells(spec);
  std::vector<CellOutcome> outcomes(cells.size());
  for (std::size_t i = 0; i < cells.size(); ++i) {
    outcomes[i].cell = cells[i];
    outcomes[i].run_id = make_run_id(cells[i].model, cells[i].train, data.corpus().hash());
    outcomes[i].status = cell_status::skipped;
  }
  fs::create_directories(spec.output);
  write_text_atomic(spec.output / "spec.json", spec.text + "\n");
  std::mutex mu;
  const auto publish = [&]() {
    write_text_atomic(spec.output / "manifest.json", manifest_json(spec, data.corpus().hash(), outcomes).dump(2) + "\n");
  };
  publish();
  std::atomic<std::size_t> next{0};
  const auto say = [&](const std::string& msg) {
    if (!opt.say) return;
    std::lock_guard<std::mutex> lock(mu);
    opt.say(msg);
  };
  const auto worker = [&]() {
    for (;;) {
      const std::size_t i = next.fetch_add(1);
      if (i >= cells.size()) return;
      CellOutcome o = run_cell(cells[i], data, spec.output, say);
      std::lock_guard<std::mutex> lock(mu);
      outcomes[i] = o;
      if (opt.say) {
        const std::string tag = o.cell.scale + "/" + o.cell.variant + "/" + std::to_string(o.cell.seed);
        opt.say(tag + ": " + to_string(o.status) + (o.reused ? " (existing log)" : "") +
                (o.error.empty() ? "" : " - " + o.error));
      }
      publish();
    }
  };
  const std::size_t jobs = std::max<std::size_t>(1, std::min(opt.jobs, cells.size()));
  std::vector<std::thread> pool;
  for (std::size_t t = 1; t < jobs; ++t) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();
  return outcomes;
}

struct AnalysisOutput {
  Report report;
  std::string markdown;
  std::string csv;
  std::string curves;
};

/// Reads the manifest under `out`, builds the report, writes report.md,
/// report.csv and loss_curves.csv next to it.
inline AnalysisOutput analyze_suite(const fs::path& out, std::optional<double> delta = std::nullopt,
                                    std::optional<bool> interpolate = std::nullopt) {
  const fs::path manifest_path = out / "manifest.json";
  if (!fs::exists(manifest_path)) throw analysis_error("no manifest.json in '" + out.string() + "'");
  json m;
  try {
    m = json::parse(read_text(manifest_path));
  } catch (const json::exception& e) {
    throw analysis_error(std::string("manifest: ") + e.what());
  }
  ReportOptions ro;
  ro.scale_order = m.at("scales").get<std::vector<std::string>>();
  ro.variant_order = m.at("variants").get<std::vector<std::string>>();
  ro.delta = delta.value_or(m.at("analysis").value("delta", default_delta));
  ro.interpolate = interpolate.value_or(m.at("analysis").value("interpolate", true));
  std::vector<RunLog> logs;
  std::map<std::string, std::size_t> params;
  for (const auto& c : m.at("cells")) {
    const std::string status = c.at("status");
    if (status != "complete" && status != "diverged") continue;
    RunLog log = read_run_log(out / c.at("log").get<std::string>());
    if (!log.model_config.empty())
      params[log.scale + "/" + log.variant] = param_count(model_config_from_json(log.model_config)).total;
    logs.push_back(std::move(log));
  }
  for (const auto& s : ro.scale_order) {
    const bool has = std::any_of(logs.begin(), logs.end(), [&](const RunLog& l) {
      return l.scale == s && l.variant == ro.baseline && !l.diverged();
    });
    if (!has) throw analysis_error("no completed baseline run at scale '" + s + "'");
  }
  AnalysisOutput res;
  res.report = build_report(logs, ro);
  res.markdown = report_markdown(res.report, params);
  res.csv = report_csv(res.report);
  std::vector<const RunLog*> ptrs;
  for (const auto& l : logs) ptrs.push_back(&l);
  res.curves = loss_curves_csv(ptrs, res.report);
  write_text_atomic(out / "report.md", res.markdown);
  write_text_atomic(out / "report.csv", res.csv);
  write_text_atomic(out / "loss_curves.csv", res.curves);
  return res;
}

}  // namespace ceglab
