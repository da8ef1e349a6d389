#pragma once

// Line-delimited run log: a header object followed by one record per eval.

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "ceglab/config.hpp"
#include "ceglab/errors.hpp"

namespace ceglab {

/// cost(steps) = active_params_per_token * tokens_per_step * steps.
struct CostModel {
  double active_params_per_token = 1.0;
  double tokens_per_step = 1.0;

  double cost(double steps) const { return active_params_per_token * tokens_per_step * steps; }
};

struct LogRecord {
  std::size_t step = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double cost = 0.0;
};

enum class run_status { complete, diverged };

struct RunLog {
  std::string run_id;
  std::string variant;
  std::string scale;
  std::uint64_t seed = 0;
  json model_config = json::object();
  json train_config = json::object();
  std::string corpus_hash;
  CostModel cost_model;
  std::size_t total_steps = 0;
  run_status status = run_status::complete;
  std::optional<std::size_t> diverged_at;
  std::vector<LogRecord> records;

  bool diverged() const { return status == run_status::diverged; }

  const LogRecord& final_record() const {
    if (records.empty()) throw analysis_error("run log '" + run_id + "' has no records");
    return records.back();
  }

  double min_val_loss() const {
    const auto& r = final_record();
    double best = r.val_loss;
    for (const auto& x : records) best = std::min(best, x.val_loss);
    return best;
  }
};

inline json header_json(const RunLog& log) {
  json h = {{"kind", "header"},
            {"run_id", log.run_id},
            {"variant", log.variant},
            {"scale", log.scale},
            {"seed", log.seed},
            {"status", log.diverged() ? "diverged" : "complete"}};
  if (log.diverged_at) h["diverged_at_step"] = *log.diverged_at;
  h["total_steps"] = log.total_steps;
  h["cost_model"] = {{"active_params_per_token", log.cost_model.active_params_per_token},
                     {"tokens_per_step", log.cost_model.tokens_per_step}};
  h["corpus_hash"] = log.corpus_hash;
  h["model_config"] = log.model_config;
  h["train_config"] = log.train_config;
  return h;
}

inline std::string serialize(const RunLog& log) {
  std::string out = header_json(log).dump() + "\n";
  for (const auto& r : log.records) {
    json j = {{"step", r.step}, {"train_loss", r.train_loss}, {"val_loss", r.val_loss}, {"cost", r.cost}};
    out += j.dump() + "\n";
  }
  return out;
}

/// Writes to a sibling temp file, then renames over the target.
inline void write_text_atomic(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw io_error("cannot write '" + tmp.string() + "'");
    out << text;
    out.flush();
    if (!out) throw io_error("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline void write_run_log(const RunLog& log, const std::filesystem::path& path) {
  write_text_atomic(path, serialize(log));
}

inline std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw io_error("cannot open '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

/// Parses the log format. The header may be absent or sparse (external logs);
/// the cost model then falls back to cost/step of the records.
inline RunLog parse_run_log(const std::string& text, const std::string& source = "<log>") {
  RunLog log;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  bool have_cost_model = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw io_error(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
    try {
      if (j.contains("kind") && j.at("kind") == "header") {
        log.run_id = j.value("run_id", "");
        log.variant = j.value("variant", "");
        log.scale = j.value("scale", "");
        log.seed = j.value("seed", std::uint64_t{0});
        log.corpus_hash = j.value("corpus_hash", "");
        log.total_steps = j.value("total_steps", std::size_t{0});
        if (j.value("status", "complete") == "diverged") log.status = run_status::diverged;
        if (j.contains("diverged_at_step")) log.diverged_at = j.at("diverged_at_step").get<std::size_t>();
        if (j.contains("cost_model")) {
          log.cost_model.active_params_per_token = j.at("cost_model").at("active_params_per_token").get<double>();
          log.cost_model.tokens_per_step = j.at("cost_model").at("tokens_per_step").get<double>();
          have_cost_model = true;
        }
        if (j.contains("model_config")) log.model_config = j.at("model_config");
        if (j.contains("train_config")) log.train_config = j.at("train_config");
        continue;
      }
      LogRecord r;
      r.step = j.at("step").get<std::size_t>();
      r.train_loss = j.at("train_loss").get<double>();
      r.val_loss = j.at("val_loss").get<double>();
      r.cost = j.at("cost").get<double>();
      if (!log.records.empty() && r.step <= log.records.back().step)
        throw io_error(source + ":" + std::to_string(line_no) + ": steps must increase strictly");
      log.records.push_back(r);
    } catch (const json::exception& e) {
      throw io_error(source + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (log.records.empty()) throw io_error(source + ": log has no records");
  if (!have_cost_model) {
    log.cost_model = {1.0, 1.0};
    for (const auto& r : log.records)
      if (r.step > 0) {
        log.cost_model.active_params_per_token = r.cost / static_cast<double>(r.step);
        break;
      }
  }
  if (log.total_steps == 0) log.total_steps = log.records.back().step;
  return log;
}

inline RunLog read_run_log(const std::filesystem::path& path) {
  return parse_run_log(read_text(path), path.string());
}

}  // namespace ceglab
