#pragma once

// Fast property battery: gradient checks, kernel equivalence, rope and mask
// properties, layer-norm statistics, causality probes and CEG oracles.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ceglab/attention.hpp"
#include "ceglab/ceg.hpp"
#include "ceglab/config.hpp"
#include "ceglab/grad_check.hpp"
#include "ceglab/model.hpp"
#include "ceglab/rope.hpp"

namespace ceglab {

struct PropertyResult {
  std::string name;
  bool pass = false;
  std::string measured;  // the observed value or a short explanation
  std::string bound;
};

namespace verify_detail {

inline std::string sci(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3e", v);
  return buf;
}

template <class T>
Tensor<T> randn(shape_t shape, std::mt19937_64& rng, double std_dev = 1.0) {
  Tensor<T> t(std::move(shape));
  std::normal_distribution<double> d(0.0, std_dev);
  for (auto& v : t.data()) v = static_cast<T>(d(rng));
  return t;
}

inline std::vector<std::int32_t> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::int32_t> d(0, static_cast<std::int32_t>(vocab) - 1);
  std::vector<std::int32_t> t(n);
  for (auto& x : t) x = d(rng);
  return t;
}

// Small enough for double-precision finite differences, large enough that
// blocked tiling and the sparse stride are exercised.
inline ModelConfig tiny_config(std::size_t n_layer = 2) {
  ModelConfig c;
  c.n_layer = n_layer;
  c.n_head = c.n_kv_head = 4;
  c.d_model = 16;
  c.d_ff = 64;
  c.vocab_size = 32;
  c.context_len = 16;
  return c;
}

inline ModelConfig tiny_variant(const std::string& name) {
  ModelConfig c = apply_variant(tiny_config(), name);
  if (c.kernel.kind == attention_kernel_kind::blocked) c.kernel = attention_kernel::blocked(4, 4);
  return c;
}

}  // namespace verify_detail

/// One rel-err figure per built-in variant on a 2-layer model in double.
inline std::vector<PropertyResult> check_model_gradients(double tol = 1e-4) {
  std::vector<PropertyResult> out;
  for (const auto& name : builtin_variant_names()) {
    ModelConfig cfg = verify_detail::tiny_variant(name);
    Model<double> model(cfg);
    std::mt19937_64 rng(11);
    const std::size_t batch = 2, seq = cfg.context_len;
    const auto inputs = verify_detail::random_tokens(batch * seq, cfg.vocab_size, rng);
    const auto targets = verify_detail::random_tokens(batch * seq, cfg.vocab_size, rng);
    // The training init (std 0.02) leaves query/key gradients near 1e-12,
    // where finite differences are pure rounding noise. Gradients are checked
    // at a fan-in scaled point instead.
    std::normal_distribution<double> nd(0.0, 1.0);
    std::vector<Tensor<double>> params;
    for (auto& p : model.parameters()) {
      const bool matrix = p.tensor.rank() == 2;
      const double sd = matrix ? 1.0 / std::sqrt(static_cast<double>(p.tensor.dim(0))) : 0.1;
      const double center = p.name.ends_with("gain") ? 1.0 : 0.0;
      for (auto& v : p.tensor.data()) v = center + sd * nd(rng);
      params.push_back(p.tensor);
    }
    const std::function<Tensor<double>(Tape<double>&)> loss = [&](Tape<double>& tape) {
      return model.loss(tape, inputs, targets, batch, seq);
    };
    const auto rep = grad_check<double>(loss, params, 120, 1e-4, 5);
    out.push_back({"grad check, 2-layer model, " + name, rep.max_rel_err < tol,
                   verify_detail::sci(rep.max_rel_err) + " over " + std::to_string(rep.checked) + " coords",
                   "< " + verify_detail::sci(tol)});
  }
  return out;
}

/// Forward output and all three input gradients, blocked vs naive.
inline std::vector<PropertyResult> check_blocked_equivalence(double tol = 1e-5) {
  std::vector<PropertyResult> out;
  const std::size_t n = 50, d = 8;
  std::mt19937_64 rng(3);
  for (const bool sparse : {false, true}) {
    const AttentionMask mask = sparse ? strided_sparse_mask(n, ceil_sqrt(n)) : causal_mask(n);
    for (const std::size_t kv_heads : {std::size_t{2}, std::size_t{1}}) {
      attention_layout L;
      L.batch = 2;
      L.seq = n;
      L.n_head = 2;
      L.n_kv_head = kv_heads;
      L.head_dim = d;
      auto q = verify_detail::randn<float>({L.q_numel()}, rng);
      auto k = verify_detail::randn<float>({L.kv_numel()}, rng);
      auto v = verify_detail::randn<float>({L.kv_numel()}, rng);
      auto dout = verify_detail::randn<float>({L.q_numel()}, rng);
      const auto run = [&](const attention_kernel& kern) {
        std::vector<float> o(L.q_numel()), dq(L.q_numel()), dk(L.kv_numel()), dv(L.kv_numel());
        attention_saved saved;
        attention_forward(L, mask, kern, q.data().data(), k.data().data(), v.data().data(), o.data(), &saved);
        attention_backward(L, mask, kern, q.data().data(), k.data().data(), v.data().data(),
                           dout.data().data(), saved, dq.data(), dk.data(), dv.data());
        return std::vector<std::vector<float>>{o, dq, dk, dv};
      };
      const auto ref = run(attention_kernel::naive());
      for (const std::size_t b : {std::size_t{1}, std::size_t{7}, std::size_t{16}, n}) {
        const auto got = run(attention_kernel::blocked(b, b));
        double worst = 0.0;
        for (std::size_t t = 0; t < ref.size(); ++t)
          for (std::size_t i = 0; i < ref[t].size(); ++i)
            worst = std::max(worst, std::abs(static_cast<double>(ref[t][i]) - got[t][i]));
        out.push_back({"blocked vs naive, block " + std::to_string(b) + (sparse ? ", strided mask" : ", causal mask") +
                           (kv_heads == 1 ? ", shared kv" : ""),
                       worst < tol, verify_detail::sci(worst), "< " + verify_detail::sci(tol)});
      }
    }
  }
  return out;
}

inline std::vector<PropertyResult> check_rope() {
  std::vector<PropertyResult> out;
  std::mt19937_64 rng(5);
  const std::size_t d = 32, n = 24;
  {
    const auto x = verify_detail::randn<double>({2, 1, d}, rng);
    const std::vector<std::size_t> pos = {0};
    const auto y = apply_rope(x, pos);
    double worst = 0.0;
    for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
    out.push_back({"rope position 0 is the identity", worst == 0.0, verify_detail::sci(worst), "== 0"});
  }
  {
    const auto x = verify_detail::randn<double>({2, n, d}, rng);
    std::vector<std::size_t> pos(n);
    for (std::size_t i = 0; i < n; ++i) pos[i] = i * 371;  // reaches large angles
    const auto y = apply_rope(x, pos);
    double worst = 0.0;
    for (std::size_t r = 0; r < 2 * n; ++r) {
      double a = 0.0, b = 0.0;
      for (std::size_t c = 0; c < d; ++c) {
        a += x[r * d + c] * x[r * d + c];
        b += y[r * d + c] * y[r * d + c];
      }
      worst = std::max(worst, std::abs(std::sqrt(a) - std::sqrt(b)) / std::sqrt(a));
    }
    out.push_back({"rope preserves vector norms", worst <= 1e-6, verify_detail::sci(worst), "<= 1e-06"});
  }
  {
    const auto q = verify_detail::randn<double>({1, n, d}, rng);
    const auto k = verify_detail::randn<double>({1, n, d}, rng);
    const auto scores = [&](std::size_t shift) {
      std::vector<std::size_t> pos(n);
      for (std::size_t i = 0; i < n; ++i) pos[i] = i + shift;
      const auto rq = apply_rope(q, pos), rk = apply_rope(k, pos);
      std::vector<double> s(n * n);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < d; ++c) acc += rq[i * d + c] * rk[j * d + c];
          s[i * n + j] = acc;
        }
      return s;
    };
    const auto s0 = scores(0);
    double worst = 0.0;
    for (const std::size_t shift : {std::size_t{1}, std::size_t{17}, std::size_t{1000}}) {
      const auto s1 = scores(shift);
      for (std::size_t i = 0; i < s0.size(); ++i) worst = std::max(worst, std::abs(s0[i] - s1[i]));
    }
    out.push_back({"rope scores invariant to a common shift", worst <= 1e-5, verify_detail::sci(worst), "<= 1e-05"});
  }
  return out;
}

inline std::vector<PropertyResult> check_sparse_masks() {
  std::vector<PropertyResult> out;
  for (const std::size_t n : {std::size_t{16}, std::size_t{64}, std::size_t{256}}) {
    const std::size_t l = ceil_sqrt(n);
    const auto m = strided_sparse_mask(n, l);
    bool causal = true, self = true, reach = true;
    for (std::size_t i = 0; i < n; ++i) {
      self = self && m.allowed(i, i);
      for (std::size_t j = i + 1; j < n; ++j) causal = causal && !m.allowed(i, j);
    }
    // (M or M^2) must cover the lower triangle
    for (std::size_t i = 0; i < n && reach; ++i)
      for (std::size_t j = 0; j < i && reach; ++j) {
        bool ok = m.allowed(i, j);
        for (std::size_t k = j; k <= i && !ok; ++k) ok = m.allowed(i, k) && m.allowed(k, j);
        reach = ok;
      }
    const std::size_t nnz = m.nonzeros(), bound = 2 * n * l;
    const std::string tag = "strided mask n=" + std::to_string(n) + ": ";
    out.push_back({tag + "causal", causal, causal ? "no future entries" : "future entry found", "none"});
    out.push_back({tag + "self-attending", self, self ? "diagonal set" : "diagonal hole", "all"});
    out.push_back({tag + "2-hop reachability", reach, reach ? "lower triangle covered" : "unreachable pair", "all pairs"});
    out.push_back({tag + "nonzero bound", nnz <= bound, std::to_string(nnz), "<= " + std::to_string(bound)});
  }
  return out;
}

inline std::vector<PropertyResult> check_layer_norm() {
  std::mt19937_64 rng(9);
  const std::size_t rows = 64, d = 48;
  Tensor<double> x({rows, d});
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::size_t r = 0; r < rows; ++r) {
    // spread of 1 to ~10; eps is negligible against these variances
    const double scale = 1.0 + 3.0 * std::abs(nd(rng)), shift = 10.0 * nd(rng);
    for (std::size_t c = 0; c < d; ++c) x[r * d + c] = shift + scale * nd(rng);
  }
  Tape<double> tape(grad_mode::no_grad);
  const auto y = ops::layer_norm(tape, x, Tensor<double>::full({d}, 1.0), Tensor<double>({d}));
  double worst_mean = 0.0, worst_var = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += y[r * d + c];
    mean /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) var += (y[r * d + c] - mean) * (y[r * d + c] - mean);
    var /= static_cast<double>(d);
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_var = std::max(worst_var, std::abs(var - 1.0));
  }
  return {{"layer norm pre-affine mean", worst_mean < 1e-6, verify_detail::sci(worst_mean), "< 1e-06"},
          {"layer norm pre-affine variance", worst_var <= 1e-4, verify_detail::sci(worst_var), "|var-1| <= 1e-04"}};
}

/// Changing token t must leave logits at every earlier position bit-identical.
inline std::vector<PropertyResult> check_causality(std::size_t* combos_out = nullptr) {
  std::vector<PropertyResult> out;
  std::size_t combos = 0, failures = 0;
  std::string first_failure;
  std::mt19937_64 rng(13);
  for (const auto pos : {pos_scheme::learned_absolute, pos_scheme::sinusoidal, pos_scheme::rope})
    for (const auto norm : {norm_scheme::none, norm_scheme::layer_norm})
      for (const auto pattern : {attn_pattern::dense, attn_pattern::strided_sparse})
        for (const bool blocked : {false, true})
          for (const std::size_t kv : {std::size_t{4}, std::size_t{1}}) {
            ModelConfig c = verify_detail::tiny_config();
            c.pos = pos;
            c.norm = norm;
            c.pattern = pattern;
            c.stride = ceil_sqrt(c.context_len);
            c.kernel = blocked ? attention_kernel::blocked(4, 4) : attention_kernel::naive();
            c.n_kv_head = kv;
            c.seed = combos;
            Model<float> model(c);
            const std::size_t n = c.context_len, V = c.vocab_size;
            auto tokens = verify_detail::random_tokens(n, V, rng);
            Tape<float> quiet(grad_mode::no_grad);
            const auto ref = model.logits(quiet, tokens, 1, n);
            bool ok = true;
            for (const std::size_t t : {std::size_t{1}, std::size_t{6}, n / 2, n - 1}) {
              auto probe = tokens;
              probe[t] = (probe[t] + 1 + static_cast<std::int32_t>(t)) % static_cast<std::int32_t>(V);
              const auto got = model.logits(quiet, probe, 1, n);
              for (std::size_t i = 0; i < t * V; ++i) ok = ok && ref[i] == got[i];
              // and the probed position itself must respond
              bool moved = false;
              for (std::size_t i = t * V; i < (t + 1) * V; ++i) moved = moved || ref[i] != got[i];
              ok = ok && moved;
            }
            ++combos;
            if (!ok && failures++ == 0) first_failure = canonical_text(c);
          }
  out.push_back({"causality probe, every variant combination", failures == 0,
                 failures ? std::to_string(failures) + " of " + std::to_string(combos) + " leak; first: " + first_failure
                          : std::to_string(combos) + " combinations, earlier logits unchanged",
                 "zero influence"});
  if (combos_out) *combos_out = combos;
  return out;
}

/// Synthetic curve: val_loss[i] at steps[i], cost = cost_per_step * step.
inline RunLog synthetic_log(const std::vector<std::size_t>& steps, const std::vector<double>& losses,
                            double params_per_token = 1.0, double tokens_per_step = 1.0,
                            const std::string& variant = "synthetic") {
  if (steps.size() != losses.size() || steps.empty()) throw contract_error("synthetic_log: bad curve");
  RunLog log;
  log.run_id = variant;
  log.variant = variant;
  log.scale = "synthetic";
  log.cost_model = {params_per_token, tokens_per_step};
  log.total_steps = steps.back();
  for (std::size_t i = 0; i < steps.size(); ++i)
    log.records.push_back({steps[i], losses[i], losses[i], log.cost_model.cost(static_cast<double>(steps[i]))});
  return log;
}

inline std::vector<PropertyResult> check_ceg_oracles() {
  std::vector<PropertyResult> out;
  const auto base = synthetic_log({0, 25000, 50000}, {6.0, 4.5, 4.0}, 1000.0, 64.0);
  {
    const auto r = primary_ceg(base, base);
    const bool ok = r.mode == ceg_mode::primary && r.value() && *r.value() == 1.0;
    out.push_back({"CEG of a run against itself", ok, r.value() ? verify_detail::sci(*r.value()) : "none", "== 1"});
  }
  {
    // reaches the baseline's final loss at step 25000 with equal per-step cost
    const auto alg = synthetic_log({0, 25000, 50000}, {6.0, 4.0, 3.8}, 1000.0, 64.0);
    const auto r = primary_ceg(base, alg);
    const double want = 50000.0 / 25000.0;
    const bool ok = r.mode == ceg_mode::primary && r.value() && std::abs(*r.value() - want) <= 1e-12;
    out.push_back({"two-point CEG equals the step ratio", ok, r.value() ? verify_detail::sci(*r.value()) : "none", "2"});
  }
  {
    const auto worse = synthetic_log({0, 25000, 50000}, {6.0, 4.8, 4.2}, 1000.0, 64.0);
    const auto r = primary_ceg(base, worse);
    out.push_back({"auxiliary mode when the final loss misses the target", r.mode != ceg_mode::primary,
                   to_string(r.mode), "auxiliary or incomparable"});
  }
  {
    struct Pair {
      const char* name;
      double small, large;
      classification want;
    };
    // published compact/full CEG pairs
    const Pair pairs[] = {{"layer norm", 1.836, 1.421, classification::independent},
                          {"rope", 1.870, 1.350, classification::independent},
                          {"mqa", 0.673, 0.931, classification::dependent},
                          {"sparse attention", 0.515, 0.964, classification::dependent}};
    for (const auto& p : pairs) {
      const auto got = classify(p.small, p.large);
      out.push_back({std::string("classify published pair, ") + p.name, got == p.want, to_string(got), to_string(p.want)});
    }
  }
  return out;
}

struct BatteryOutcome {
  std::vector<PropertyResult> results;
  double seconds = 0.0;
  bool pass() const {
    for (const auto& r : results)
      if (!r.pass) return false;
    return !results.empty();
  }
};

inline BatteryOutcome run_property_battery(const std::function<void(const PropertyResult&)>& on_result = {}) {
  BatteryOutcome b;
  const auto t0 = std::chrono::steady_clock::now();
  const std::vector<std::function<std::vector<PropertyResult>()>> groups = {
      [] { return check_model_gradients(); }, [] { return check_blocked_equivalence(); },
      [] { return check_rope(); },            [] { return check_sparse_masks(); },
      [] { return check_layer_norm(); },      [] { return check_causality(); },
      [] { return check_ceg_oracles(); }};
  for (const auto& g : groups) {
    for (auto& r : g()) {
      if (on_result) on_result(r);
      b.results.push_back(std::move(r));
    }
  }
  b.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return b;
}

}  // namespace ceglab
