#pragma once

// GPT-style decoder with toggleable position scheme, normalization,
// attention pattern, K/V sharing and attention kernel.

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "ceglab/attention.hpp"
#include "ceglab/autodiff.hpp"
#include "ceglab/config.hpp"
#include "ceglab/rope.hpp"
#include "ceglab/tensor.hpp"

namespace ceglab {

template <class T>
struct NamedTensor {
  std::string name;
  Tensor<T> tensor;
};

struct ParamCount {
  std::size_t total = 0;
  // Parameters touched per token. Nothing here routes conditionally, so this
  // equals total (embedding tables included).
  std::size_t active_per_token = 0;
};

/// Closed form; must agree with the tensors build_model creates.
inline ParamCount param_count(const ModelConfig& c) {
  c.validate();
  const std::size_t d = c.d_model, kv = c.n_kv_head * c.head_dim();
  std::size_t n = c.vocab_size * d * 2;  // token table + untied head
  if (c.pos == pos_scheme::learned_absolute) n += c.context_len * d;
  n += c.n_layer * (2 * d * d + 2 * d * kv + 2 * d * c.d_ff);
  if (c.norm == norm_scheme::layer_norm) n += (2 * c.n_layer + 1) * 2 * d;
  return {n, n};
}

template <class T>
struct QKV {
  Tensor<T> q;  // [n_head, n, head_dim]
  Tensor<T> k;  // [n_kv_head, n, head_dim]
  Tensor<T> v;
};

template <class T>
class Model {
 public:
  explicit Model(const ModelConfig& config) : config_(config) {
    config_.validate();
    const std::size_t d = config_.d_model, kv = config_.n_kv_head * config_.head_dim();
    std::mt19937_64 rng(config_.seed);
    const double resid_std =
        0.02 / std::sqrt(2.0 * static_cast<double>(std::max<std::size_t>(config_.n_layer, 1)));

    wte_ = add_normal("wte", {config_.vocab_size, d}, 0.02, rng);
    if (config_.pos == pos_scheme::learned_absolute)
      wpe_ = add_normal("wpe", {config_.context_len, d}, 0.02, rng);
    for (std::size_t l = 0; l < config_.n_layer; ++l) {
      const std::string p = "h." + std::to_string(l) + ".";
      Layer layer;
      if (has_norm()) {
        layer.ln1_g = add_const(p + "ln1.gain", {d}, 1);
        layer.ln1_b = add_const(p + "ln1.bias", {d}, 0);
      }
      layer.wq = add_normal(p + "attn.wq", {d, d}, 0.02, rng);
      layer.wk = add_normal(p + "attn.wk", {d, kv}, 0.02, rng);
      layer.wv = add_normal(p + "attn.wv", {d, kv}, 0.02, rng);
      layer.wo = add_normal(p + "attn.wo", {d, d}, resid_std, rng);
      if (has_norm()) {
        layer.ln2_g = add_const(p + "ln2.gain", {d}, 1);
        layer.ln2_b = add_const(p + "ln2.bias", {d}, 0);
      }
      layer.w1 = add_normal(p + "mlp.w1", {d, config_.d_ff}, 0.02, rng);
      layer.w2 = add_normal(p + "mlp.w2", {config_.d_ff, d}, resid_std, rng);
      layers_.push_back(layer);
    }
    if (has_norm()) {
      lnf_g_ = add_const("ln_f.gain", {d}, 1);
      lnf_b_ = add_const("ln_f.bias", {d}, 0);
    }
    head_ = add_normal("head", {d, config_.vocab_size}, 0.02, rng);
    if (config_.pos == pos_scheme::sinusoidal) sinusoid_ = sinusoid_table(config_.context_len, d);
  }

  const ModelConfig& config() const { return config_; }
  std::vector<NamedTensor<T>>& parameters() { return params_; }
  const std::vector<NamedTensor<T>>& parameters() const { return params_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.tensor.numel();
    return n;
  }

  Tensor<T>& param(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return p.tensor;
    throw contract_error("model has no parameter '" + name + "'");
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  /// Logits for row-major tokens [batch, seq], returned as [batch*seq, vocab].
  Tensor<T> logits(Tape<T>& tape, std::span<const std::int32_t> tokens, std::size_t batch,
                   std::size_t seq) {
    if (seq == 0 || batch == 0 || tokens.size() != batch * seq)
      throw dimension_error("forward: token count does not match batch x seq");
    if (seq > config_.context_len)
      throw contract_error("forward: sequence length " + std::to_string(seq) +
                           " exceeds context_len " + std::to_string(config_.context_len));
    prepare(seq);
    Tensor<T> x = ops::embedding(tape, params_[wte_].tensor, tokens);
    if (config_.pos == pos_scheme::learned_absolute)
      x = ops::add_periodic_rows(tape, x, params_[wpe_].tensor, seq);
    else if (config_.pos == pos_scheme::sinusoidal)
      x = ops::add_periodic_rows(tape, x, sinusoid_, seq);

    for (const Layer& layer : layers_) {
      Tensor<T> h = has_norm() ? norm(tape, x, layer.ln1_g, layer.ln1_b) : x;
      Tensor<T> a = attention_block(tape, layer, h, batch, seq);
      x = ops::add(tape, x, ops::matmul(tape, a, params_[layer.wo].tensor));
      Tensor<T> h2 = has_norm() ? norm(tape, x, layer.ln2_g, layer.ln2_b) : x;
      Tensor<T> f = ops::gelu(tape, ops::matmul(tape, h2, params_[layer.w1].tensor));
      x = ops::add(tape, x, ops::matmul(tape, f, params_[layer.w2].tensor));
    }
    if (has_norm()) x = norm(tape, x, lnf_g_, lnf_b_);
    return ops::matmul(tape, x, params_[head_].tensor);
  }

  /// Logits shaped [batch, seq, vocab].
  Tensor<T> forward(Tape<T>& tape, std::span<const std::int32_t> tokens, std::size_t batch,
                    std::size_t seq) {
    return ops::reshape(tape, logits(tape, tokens, batch, seq), {batch, seq, config_.vocab_size});
  }

  /// Mean next-token cross-entropy in nats.
  Tensor<T> loss(Tape<T>& tape, std::span<const std::int32_t> inputs,
                 std::span<const std::int32_t> targets, std::size_t batch, std::size_t seq,
                 double* mean_out = nullptr) {
    return ops::cross_entropy(tape, logits(tape, inputs, batch, seq), targets, mean_out);
  }

  /// Q/K/V projections of one layer for a single sequence x [n, d_model],
  /// after the position rotation when rope is on. K/V carry n_kv_head heads.
  QKV<T> project_qkv(std::size_t layer_index, const Tensor<T>& x) {
    if (x.rank() != 2 || x.dim(1) != config_.d_model)
      throw dimension_error("project_qkv expects [n, d_model]");
    const Layer& layer = layers_.at(layer_index);
    const std::size_t n = x.dim(0), dh = config_.head_dim();
    prepare(n);
    Tape<T> quiet(grad_mode::no_grad);
    Tensor<T> q = ops::matmul(quiet, x, params_[layer.wq].tensor);
    Tensor<T> k = ops::matmul(quiet, x, params_[layer.wk].tensor);
    Tensor<T> v = ops::matmul(quiet, x, params_[layer.wv].tensor);
    if (config_.pos == pos_scheme::rope) {
      q = ops::rope(quiet, q, n, dh, rope_);
      k = ops::rope(quiet, k, n, dh, rope_);
    }
    return {to_heads(q, config_.n_head, n, dh), to_heads(k, config_.n_kv_head, n, dh),
            to_heads(v, config_.n_kv_head, n, dh)};
  }

 private:
  struct Layer {
    std::size_t ln1_g = 0, ln1_b = 0, wq = 0, wk = 0, wv = 0, wo = 0, ln2_g = 0, ln2_b = 0,
                w1 = 0, w2 = 0;
  };

  bool has_norm() const { return config_.norm == norm_scheme::layer_norm; }

  std::size_t add_normal(const std::string& name, shape_t shape, double std_dev,
                         std::mt19937_64& rng) {
    Tensor<T> t(std::move(shape), true);
    std::normal_distribution<double> dist(0.0, std_dev);
    for (auto& v : t.data()) v = static_cast<T>(dist(rng));
    params_.push_back({name, t});
    return params_.size() - 1;
  }

  std::size_t add_const(const std::string& name, shape_t shape, int value) {
    params_.push_back({name, Tensor<T>::full(std::move(shape), static_cast<T>(value), true)});
    return params_.size() - 1;
  }

  static Tensor<T> sinusoid_table(std::size_t n, std::size_t d) {
    Tensor<T> t({n, d});
    for (std::size_t pos = 0; pos < n; ++pos)
      for (std::size_t i = 0; i < d; ++i) {
        const double freq = std::pow(10000.0, -static_cast<double>(i - i % 2) / static_cast<double>(d));
        const double a = static_cast<double>(pos) * freq;
        t[pos * d + i] = static_cast<T>(i % 2 == 0 ? std::sin(a) : std::cos(a));
      }
    return t;
  }

  static Tensor<T> to_heads(const Tensor<T>& x, std::size_t heads, std::size_t n, std::size_t dh) {
    Tensor<T> out({heads, n, dh});
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t c = 0; c < dh; ++c) out[(h * n + i) * dh + c] = x[i * heads * dh + h * dh + c];
    return out;
  }

  void prepare(std::size_t seq) {
    if (seq == prepared_seq_) return;
    if (config_.pattern == attn_pattern::strided_sparse)
      mask_ = std::make_shared<const AttentionMask>(strided_sparse_mask(seq, std::min(config_.stride, seq)));
    else
      mask_ = std::make_shared<const AttentionMask>(causal_mask(seq));
    if (config_.pos == pos_scheme::rope)
      rope_ = std::make_shared<const rope_table>(
          rope_table::sequential(seq, config_.head_dim(), config_.theta_base));
    prepared_seq_ = seq;
  }

  Tensor<T> norm(Tape<T>& tape, const Tensor<T>& x, std::size_t g, std::size_t b) {
    return ops::layer_norm(tape, x, params_[g].tensor, params_[b].tensor);
  }

  Tensor<T> attention_block(Tape<T>& tape, const Layer& layer, const Tensor<T>& h,
                            std::size_t batch, std::size_t seq) {
    const std::size_t dh = config_.head_dim();
    Tensor<T> q = ops::matmul(tape, h, params_[layer.wq].tensor);
    Tensor<T> k = ops::matmul(tape, h, params_[layer.wk].tensor);
    Tensor<T> v = ops::matmul(tape, h, params_[layer.wv].tensor);
    if (config_.pos == pos_scheme::rope) {
      q = ops::rope(tape, q, seq, dh, rope_);
      k = ops::rope(tape, k, seq, dh, rope_);
    }
    attention_layout layout;
    layout.batch = batch;
    layout.seq = seq;
    layout.n_head = config_.n_head;
    layout.n_kv_head = config_.n_kv_head;
    layout.head_dim = dh;
    return ops::attention(tape, q, k, v, layout, mask_, config_.kernel);
  }

  ModelConfig config_;
  std::vector<NamedTensor<T>> params_;
  std::vector<Layer> layers_;
  std::size_t wte_ = 0, wpe_ = 0, lnf_g_ = 0, lnf_b_ = 0, head_ = 0;
  Tensor<T> sinusoid_;
  std::size_t prepared_seq_ = 0;
  std::shared_ptr<const AttentionMask> mask_;
  std::shared_ptr<const rope_table> rope_;
};

template <class T = float>
Model<T> build_model(const ModelConfig& config) {
  return Model<T>(config);
}

/// Standalone Q/K/V projection of x [n, d_model] through a layer's weights.
template <class T>
QKV<T> mqa_project(Model<T>& model, std::size_t layer, const Tensor<T>& x) {
  return model.project_qkv(layer, x);
}

}  // namespace ceglab
