#pragma once

// Model and training configuration, their canonical JSON text, and the named
// variant toggles and scale presets.

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "ceglab/attention.hpp"
#include "ceglab/errors.hpp"

namespace ceglab {

using json = nlohmann::ordered_json;

enum class pos_scheme { learned_absolute, sinusoidal, rope };
enum class norm_scheme { none, layer_norm };
enum class attn_pattern { dense, strided_sparse };

struct ModelConfig {
  std::size_t n_layer = 4;
  std::size_t n_head = 4;
  std::size_t n_kv_head = 4;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t vocab_size = 256;
  std::size_t context_len = 128;
  pos_scheme pos = pos_scheme::learned_absolute;
  double theta_base = 10000.0;
  norm_scheme norm = norm_scheme::none;
  attn_pattern pattern = attn_pattern::dense;
  std::size_t stride = 0;  // strided_sparse only
  attention_kernel kernel;
  std::uint64_t seed = 0;

  std::size_t head_dim() const { return d_model / n_head; }

  void validate() const {
    const auto fail = [](const std::string& m) { throw config_error("model config: " + m); };
    if (n_head == 0 || n_kv_head == 0 || d_model == 0 || d_ff == 0 || vocab_size == 0 ||
        context_len == 0)
      fail("counts must be positive");
    if (d_model % n_head != 0) fail("d_model must be divisible by n_head");
    if (n_kv_head > n_head || n_head % n_kv_head != 0)
      fail("n_head must be divisible by n_kv_head (1 <= n_kv_head <= n_head)");
    if (pos == pos_scheme::rope && head_dim() % 2 != 0)
      fail("rope needs an even per-head dimension");
    if (pos == pos_scheme::rope && !(theta_base > 1.0)) fail("rope theta_base must exceed 1");
    if (pattern == attn_pattern::strided_sparse && (stride < 1 || stride > context_len))
      fail("strided_sparse needs 1 <= stride <= context_len");
    if (kernel.kind == attention_kernel_kind::blocked &&
        (kernel.block_rows == 0 || kernel.block_cols == 0))
      fail("blocked kernel needs block sizes >= 1");
  }
};

inline json to_json(const ModelConfig& c) {
  json pos;
  switch (c.pos) {
    case pos_scheme::learned_absolute: pos = {{"kind", "learned_absolute"}}; break;
    case pos_scheme::sinusoidal: pos = {{"kind", "sinusoidal"}}; break;
    case pos_scheme::rope: pos = {{"kind", "rope"}, {"theta_base", c.theta_base}}; break;
  }
  json pattern = c.pattern == attn_pattern::dense
                     ? json{{"kind", "dense"}}
                     : json{{"kind", "strided_sparse"}, {"stride", c.stride}};
  json kernel = c.kernel.kind == attention_kernel_kind::naive
                    ? json{{"kind", "naive"}}
                    : json{{"kind", "blocked"},
                           {"block_rows", c.kernel.block_rows},
                           {"block_cols", c.kernel.block_cols}};
  return json{{"n_layer", c.n_layer},
              {"n_head", c.n_head},
              {"n_kv_head", c.n_kv_head},
              {"d_model", c.d_model},
              {"d_ff", c.d_ff},
              {"vocab_size", c.vocab_size},
              {"context_len", c.context_len},
              {"pos_scheme", pos},
              {"norm_scheme", c.norm == norm_scheme::none ? "none" : "layer_norm"},
              {"attn_pattern", pattern},
              {"attn_kernel", kernel},
              {"seed", c.seed}};
}

namespace detail {

// Enum-like fields may be written as a bare string or as {"kind": ...}.
inline std::string kind_of(const json& j, const char* field) {
  if (j.is_string()) return j.get<std::string>();
  if (j.is_object() && j.contains("kind")) return j.at("kind").get<std::string>();
  throw config_error(std::string("model config: ") + field + " must be a string or {\"kind\": ...}");
}

template <class V>
V get_or(const json& j, const char* key, V fallback) {
  return j.is_object() && j.contains(key) ? j.at(key).get<V>() : fallback;
}

}  // namespace detail

inline ModelConfig model_config_from_json(const json& j) {
  static const std::vector<std::string> known = {
      "n_layer", "n_head", "n_kv_head", "d_model", "d_ff", "vocab_size", "context_len",
      "pos_scheme", "norm_scheme", "attn_pattern", "attn_kernel", "seed"};
  if (!j.is_object()) throw config_error("model config must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (std::find(known.begin(), known.end(), it.key()) == known.end())
      throw config_error("model config: unknown field '" + it.key() + "'");
  ModelConfig c;
  try {
    c.n_layer = detail::get_or(j, "n_layer", c.n_layer);
    c.n_head = detail::get_or(j, "n_head", c.n_head);
    c.n_kv_head = detail::get_or(j, "n_kv_head", c.n_head);
    c.d_model = detail::get_or(j, "d_model", c.d_model);
    c.d_ff = detail::get_or(j, "d_ff", 4 * c.d_model);
    c.vocab_size = detail::get_or(j, "vocab_size", c.vocab_size);
    c.context_len = detail::get_or(j, "context_len", c.context_len);
    c.seed = detail::get_or<std::uint64_t>(j, "seed", 0);
    if (j.contains("pos_scheme")) {
      const auto& p = j.at("pos_scheme");
      const std::string k = detail::kind_of(p, "pos_scheme");
      if (k == "learned_absolute") c.pos = pos_scheme::learned_absolute;
      else if (k == "sinusoidal") c.pos = pos_scheme::sinusoidal;
      else if (k == "rope") {
        c.pos = pos_scheme::rope;
        c.theta_base = detail::get_or(p, "theta_base", 10000.0);
      } else throw config_error("model config: unknown pos_scheme '" + k + "'");
    }
    if (j.contains("norm_scheme")) {
      const std::string k = detail::kind_of(j.at("norm_scheme"), "norm_scheme");
      if (k == "none") c.norm = norm_scheme::none;
      else if (k == "layer_norm") c.norm = norm_scheme::layer_norm;
      else throw config_error("model config: unknown norm_scheme '" + k + "'");
    }
    if (j.contains("attn_pattern")) {
      const auto& p = j.at("attn_pattern");
      const std::string k = detail::kind_of(p, "attn_pattern");
      if (k == "dense") c.pattern = attn_pattern::dense;
      else if (k == "strided_sparse") {
        c.pattern = attn_pattern::strided_sparse;
        c.stride = detail::get_or<std::size_t>(p, "stride", ceil_sqrt(c.context_len));
      } else throw config_error("model config: unknown attn_pattern '" + k + "'");
    }
    if (j.contains("attn_kernel")) {
      const auto& p = j.at("attn_kernel");
      const std::string k = detail::kind_of(p, "attn_kernel");
      if (k == "naive") c.kernel = attention_kernel::naive();
      else if (k == "blocked")
        c.kernel = attention_kernel::blocked(detail::get_or<std::size_t>(p, "block_rows", 64),
                                             detail::get_or<std::size_t>(p, "block_cols", 64));
      else throw config_error("model config: unknown attn_kernel '" + k + "'");
    }
  } catch (const json::exception& e) {
    throw config_error(std::string("model config: ") + e.what());
  }
  c.validate();
  return c;
}

/// Stable text form; equal configs give equal strings.
inline std::string canonical_text(const ModelConfig& c) { return to_json(c).dump(); }

// ---------------------------------------------------------------------------

struct TrainConfig {
  std::size_t total_steps = 2000;
  std::size_t batch_size = 16;
  std::size_t eval_interval = 100;
  std::size_t eval_batches = 8;
  double lr_max = 1e-3;
  double lr_min = 1e-4;
  std::size_t warmup_steps = 100;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-8;
  double weight_decay = 0.1;
  double grad_clip = 1.0;
  double val_fraction = 0.1;
  std::uint64_t seed = 0;
  // Seeds the fixed evaluation batches; kept apart from `seed` so every run at
  // a scale is scored on the same windows.
  std::uint64_t eval_seed = 1234;

  void validate() const {
    const auto fail = [](const std::string& m) { throw config_error("train config: " + m); };
    if (batch_size == 0 || eval_batches == 0 || eval_interval == 0)
      fail("batch_size, eval_batches and eval_interval must be positive");
    if (total_steps % eval_interval != 0) fail("eval_interval must divide total_steps");
    if (total_steps > 0 && warmup_steps >= total_steps) fail("warmup_steps must be < total_steps");
    if (!(lr_max > 0.0) || lr_min < 0.0 || lr_min > lr_max) fail("need 0 <= lr_min <= lr_max, lr_max > 0");
    if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) fail("betas must lie in [0, 1)");
    if (!(eps > 0.0) || weight_decay < 0.0 || !(grad_clip > 0.0)) fail("eps and grad_clip must be positive");
    if (val_fraction < 0.01 || val_fraction > 0.5) fail("val_fraction must lie in [0.01, 0.5]");
  }
};

inline json to_json(const TrainConfig& t) {
  return json{{"total_steps", t.total_steps},
              {"batch_size", t.batch_size},
              {"eval_interval", t.eval_interval},
              {"eval_batches", t.eval_batches},
              {"optimizer",
               {{"kind", "adamw"},
                {"lr_max", t.lr_max},
                {"lr_min", t.lr_min},
                {"warmup_steps", t.warmup_steps},
                {"betas", {t.beta1, t.beta2}},
                {"eps", t.eps},
                {"weight_decay", t.weight_decay}}},
              {"grad_clip", t.grad_clip},
              {"val_fraction", t.val_fraction},
              {"seed", t.seed},
              {"eval_seed", t.eval_seed}};
}

inline TrainConfig train_config_from_json(const json& j) {
  if (!j.is_object()) throw config_error("train config must be a JSON object");
  TrainConfig t;
  try {
    t.total_steps = detail::get_or(j, "total_steps", t.total_steps);
    t.batch_size = detail::get_or(j, "batch_size", t.batch_size);
    t.eval_interval = detail::get_or(j, "eval_interval", t.eval_interval);
    t.eval_batches = detail::get_or(j, "eval_batches", t.eval_batches);
    t.grad_clip = detail::get_or(j, "grad_clip", t.grad_clip);
    t.val_fraction = detail::get_or(j, "val_fraction", t.val_fraction);
    t.seed = detail::get_or(j, "seed", t.seed);
    t.eval_seed = detail::get_or(j, "eval_seed", t.eval_seed);
    if (j.contains("optimizer")) {
      const auto& o = j.at("optimizer");
      if (o.contains("kind") && o.at("kind") != "adamw")
        throw config_error("train config: only the adamw optimizer is supported");
      t.lr_max = detail::get_or(o, "lr_max", t.lr_max);
      t.lr_min = detail::get_or(o, "lr_min", t.lr_min);
      t.warmup_steps = detail::get_or(o, "warmup_steps", t.warmup_steps);
      if (o.contains("betas")) {
        t.beta1 = o.at("betas").at(0).get<double>();
        t.beta2 = o.at("betas").at(1).get<double>();
      }
      t.eps = detail::get_or(o, "eps", t.eps);
      t.weight_decay = detail::get_or(o, "weight_decay", t.weight_decay);
    }
  } catch (const json::exception& e) {
    throw config_error(std::string("train config: ") + e.what());
  }
  t.validate();
  return t;
}

// ---------------------------------------------------------------------------
// Named variants are toggle sets merged over a scale's baseline config.

inline const std::vector<std::string>& builtin_variant_names() {
  static const std::vector<std::string> names = {
      "baseline", "layer_norm", "rope", "blocked_attn", "sparse_attn", "mqa", "ln_rope_blocked"};
  return names;
}

inline constexpr std::size_t default_block = 64;

inline json builtin_variant_toggles(const std::string& name) {
  const json blocked = {{"kind", "blocked"}, {"block_rows", default_block}, {"block_cols", default_block}};
  if (name == "baseline") return json::object();
  if (name == "layer_norm") return {{"norm_scheme", "layer_norm"}};
  if (name == "rope") return {{"pos_scheme", {{"kind", "rope"}, {"theta_base", 10000.0}}}};
  if (name == "blocked_attn") return {{"attn_kernel", blocked}};
  // stride omitted: resolves to ceil(sqrt(context_len)) for the scale
  if (name == "sparse_attn") return {{"attn_pattern", {{"kind", "strided_sparse"}}}};
  if (name == "mqa") return {{"n_kv_head", 1}};
  if (name == "ln_rope_blocked")
    return {{"norm_scheme", "layer_norm"},
            {"pos_scheme", {{"kind", "rope"}, {"theta_base", 10000.0}}},
            {"attn_kernel", blocked}};
  throw config_error("unknown variant '" + name + "'");
}

/// Top-level keys of `toggles` replace those of the base config.
inline ModelConfig apply_toggles(const ModelConfig& base, const json& toggles) {
  json j = to_json(base);
  if (!toggles.is_object()) throw config_error("variant toggles must be a JSON object");
  for (auto it = toggles.begin(); it != toggles.end(); ++it) j[it.key()] = it.value();
  return model_config_from_json(j);
}

inline ModelConfig apply_variant(const ModelConfig& base, const std::string& name) {
  return apply_toggles(base, builtin_variant_toggles(name));
}

struct ScalePreset {
  ModelConfig model;
  TrainConfig train;
};

inline ScalePreset scale_preset(const std::string& name) {
  ScalePreset p;
  if (name == "micro") {
    p.model.n_layer = 4;
    p.model.n_head = p.model.n_kv_head = 4;
    p.model.d_model = 128;
    p.model.context_len = 128;
    p.train.total_steps = 2000;
    p.train.eval_interval = 100;
    p.train.lr_max = 1e-3;
    p.train.warmup_steps = 100;
  } else if (name == "mini") {
    p.model.n_layer = 6;
    p.model.n_head = p.model.n_kv_head = 6;
    p.model.d_model = 288;
    p.model.context_len = 256;
    p.train.total_steps = 4000;
    p.train.eval_interval = 200;
    p.train.lr_max = 6e-4;
    p.train.warmup_steps = 200;
  } else {
    throw config_error("unknown scale preset '" + name + "'");
  }
  p.model.d_ff = 4 * p.model.d_model;
  p.train.lr_min = p.train.lr_max / 10.0;
  p.model.validate();
  p.train.validate();
  return p;
}

}  // namespace ceglab
