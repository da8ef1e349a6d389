#pragma once

// Training loop: fixed step budget, periodic evaluation on fixed batches,
// JSONL run log, final checkpoint.

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ceglab/checkpoint.hpp"
#include "ceglab/config.hpp"
#include "ceglab/data.hpp"
#include "ceglab/model.hpp"
#include "ceglab/optim.hpp"
#include "ceglab/run_log.hpp"

namespace ceglab {

/// Mean loss over `eval_batches` windows drawn from `stream` with `seed`.
/// The same (stream, seed) always yields the same windows. No tape is kept.
inline double evaluate(Model<float>& model, std::span<const std::int32_t> stream,
                       std::size_t eval_batches, std::size_t batch_size, std::uint64_t seed) {
  const std::size_t seq = model.config().context_len;
  const BatchSampler sampler(stream, seed, batch_size, seq);
  double total = 0.0;
  for (std::size_t b = 0; b < eval_batches; ++b) {
    const Batch batch = sampler.sample(b);
    Tape<float> quiet(grad_mode::no_grad);
    double mean = 0.0;
    model.loss(quiet, batch.inputs, batch.targets, batch.batch, batch.seq, &mean);
    total += mean;
  }
  return total / static_cast<double>(eval_batches);
}

inline std::string make_run_id(const ModelConfig& m, const TrainConfig& t, const std::string& corpus_hash) {
  return sha256_hex(canonical_text(m) + "\n" + to_json(t).dump() + "\n" + corpus_hash).substr(0, 16);
}

inline CostModel cost_model_for(const ModelConfig& m, const TrainConfig& t) {
  return {static_cast<double>(param_count(m).active_per_token),
          static_cast<double>(t.batch_size * m.context_len)};
}

struct TrainOptions {
  std::string variant = "custom";
  std::string scale = "custom";
  std::string corpus_hash;
  std::optional<std::filesystem::path> checkpoint_path;
  // Called after every eval record; for progress output only.
  std::function<void(const LogRecord&)> on_eval;
  // Receives wall-clock seconds spent in optimizer steps (evals excluded).
  double* step_seconds = nullptr;
};

/// Thrown when the loss stops being finite. Carries the partial log, already
/// marked diverged.
struct run_diverged : diverged_error {
  run_diverged(const std::string& what, std::size_t step, RunLog partial)
      : diverged_error(what, step), log(std::move(partial)) {}
  RunLog log;
};

inline RunLog train(const ModelConfig& model_config, const TrainConfig& train_config,
                    const SplitDataset& data, const TrainOptions& opts = {}) {
  model_config.validate();
  train_config.validate();
  const std::size_t seq = model_config.context_len;
  if (data.train.size() <= seq || data.val.size() <= seq)
    throw data_error("dataset regions are shorter than one window");

  RunLog log;
  log.run_id = make_run_id(model_config, train_config, opts.corpus_hash);
  log.variant = opts.variant;
  log.scale = opts.scale;
  log.seed = train_config.seed;
  log.model_config = to_json(model_config);
  log.train_config = to_json(train_config);
  log.corpus_hash = opts.corpus_hash;
  log.cost_model = cost_model_for(model_config, train_config);
  log.total_steps = train_config.total_steps;

  Model<float> model(model_config);
  const BatchSampler sampler(data.train, train_config.seed, train_config.batch_size, seq);
  const LrSchedule schedule = LrSchedule::from(train_config);
  const AdamWHyper hyper = AdamWHyper::from(train_config);
  AdamWState state;
  double step_seconds = 0.0;

  const auto record = [&](std::size_t step) {
    LogRecord r;
    r.step = step;
    r.train_loss = evaluate(model, data.train, train_config.eval_batches, train_config.batch_size,
                            train_config.eval_seed);
    r.val_loss = evaluate(model, data.val, train_config.eval_batches, train_config.batch_size,
                          train_config.eval_seed);
    r.cost = log.cost_model.cost(static_cast<double>(step));
    log.records.push_back(r);
    if (opts.on_eval) opts.on_eval(r);
  };
  const auto diverge = [&](std::size_t step, const std::string& why) {
    log.status = run_status::diverged;
    log.diverged_at = step;
    throw run_diverged("run diverged at step " + std::to_string(step) + ": " + why, step, log);
  };

  try {
    record(0);
  } catch (const non_finite_error& e) {
    diverge(0, e.what());
  }
  for (std::size_t step = 0; step < train_config.total_steps; ++step) {
    const auto t0 = std::chrono::steady_clock::now();
    try {
      const Batch batch = sampler.sample(step);
      Tape<float> tape;
      Tensor<float> loss = model.loss(tape, batch.inputs, batch.targets, batch.batch, batch.seq);
      backward(loss, tape);
      clip_grad_norm<float>(model.parameters(), train_config.grad_clip);
      adamw_step<float>(model.parameters(), state, step, schedule.at(step), hyper);
      model.zero_grad();
      for (const auto& p : model.parameters())
        if (!p.tensor.all_finite()) throw non_finite_error("parameter '" + p.name + "' became non-finite");
    } catch (const non_finite_error& e) {
      diverge(step + 1, e.what());
    }
    step_seconds += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if ((step + 1) % train_config.eval_interval == 0) {
      try {
        record(step + 1);
      } catch (const non_finite_error& e) {
        diverge(step + 1, e.what());
      }
    }
  }
  if (opts.step_seconds) *opts.step_seconds = step_seconds;
  if (opts.checkpoint_path) save_checkpoint(model, *opts.checkpoint_path);
  return log;
}

}  // namespace ceglab
