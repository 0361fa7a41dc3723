#pragma once

// Toy decoder-only transformer: RMSNorm pre-normalisation, grouped-query
// causal attention with rotary embeddings, SiLU feed-forward, untied
// unembedding. All math runs through ad::Tape so the same code path serves
// training, log-prob scoring and sampling.

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "longact/autodiff.hpp"
#include "longact/errors.hpp"
#include "longact/tensor.hpp"

namespace longact {

enum class Projection { Q, K, V };

inline std::string to_string(Projection p) {
  switch (p) {
    case Projection::Q: return "q";
    case Projection::K: return "k";
    case Projection::V: return "v";
  }
  return "?";
}

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t heads_q = 4;
  std::size_t heads_kv = 2;
  std::size_t head_dim = 16;
  std::size_t mlp_hidden = 128;
  std::size_t vocab_size = 128;
  std::size_t max_seq = 512;
  double rope_base = 10000.0;

  std::size_t heads(Projection p) const { return p == Projection::Q ? heads_q : heads_kv; }

  void validate() const {
    if (d_model == 0 || n_layers == 0 || heads_q == 0 || heads_kv == 0 ||
        head_dim == 0 || mlp_hidden == 0 || vocab_size == 0 || max_seq == 0) {
      throw ConfigError("model config: all extents must be positive");
    }
    if (heads_q % heads_kv != 0) {
      throw ConfigError("model config: heads_q must be a multiple of heads_kv");
    }
    if (heads_q * head_dim != d_model) {
      throw ConfigError("model config: heads_q * head_dim must equal d_model");
    }
    if (head_dim % 2 != 0) throw ConfigError("model config: head_dim must be even");
    if (!(rope_base > 1.0)) throw ConfigError("model config: rope_base must exceed 1");
  }

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <typename T>
struct LayerParams {
  Tensor<T> attn_norm;
  Tensor<T> wq;  // [heads_q*D x d_model]
  Tensor<T> wk;  // [heads_kv*D x d_model]
  Tensor<T> wv;  // [heads_kv*D x d_model]
  Tensor<T> wo;  // [d_model x heads_q*D]
  Tensor<T> mlp_norm;
  Tensor<T> w_up;    // [mlp_hidden x d_model]
  Tensor<T> w_down;  // [d_model x mlp_hidden]

  Tensor<T>& projection(Projection p) {
    return p == Projection::Q ? wq : p == Projection::K ? wk : wv;
  }
  const Tensor<T>& projection(Projection p) const {
    return p == Projection::Q ? wq : p == Projection::K ? wk : wv;
  }
};

/// All learnable tensors. Copies are deep, so a copy doubles as a policy
/// snapshot (old / reference policy).
template <typename T>
struct ModelParams {
  ModelConfig config;
  Tensor<T> tok_emb;  // [vocab x d_model]
  std::vector<LayerParams<T>> layers;
  Tensor<T> final_norm;
  Tensor<T> unembed;  // [vocab x d_model]

  // Visits every tensor in a fixed order with a stable name.
  template <typename Fn>
  void for_each(Fn&& fn) {
    visit(*this, fn);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    visit(*this, fn);
  }

  std::size_t tensor_count() const { return 3 + 8 * layers.size(); }

  template <typename U>
  ModelParams<U> cast() const {
    ModelParams<U> out;
    out.config = config;
    out.tok_emb = tok_emb.template cast<U>();
    out.final_norm = final_norm.template cast<U>();
    out.unembed = unembed.template cast<U>();
    for (const auto& l : layers) {
      out.layers.push_back({l.attn_norm.template cast<U>(), l.wq.template cast<U>(),
                            l.wk.template cast<U>(), l.wv.template cast<U>(),
                            l.wo.template cast<U>(), l.mlp_norm.template cast<U>(),
                            l.w_up.template cast<U>(), l.w_down.template cast<U>()});
    }
    return out;
  }

  friend bool operator==(const ModelParams& a, const ModelParams& b) {
    if (!(a.config == b.config) || a.layers.size() != b.layers.size()) return false;
    bool same = true;
    std::vector<const Tensor<T>*> rhs;
    b.for_each([&](const std::string&, const Tensor<T>& t) { rhs.push_back(&t); });
    std::size_t i = 0;
    a.for_each([&](const std::string&, const Tensor<T>& t) {
      same = same && t == *rhs[i++];
    });
    return same;
  }

 private:
  template <typename Self, typename Fn>
  static void visit(Self& self, Fn& fn) {
    fn(std::string("tok_emb"), self.tok_emb);
    for (std::size_t i = 0; i < self.layers.size(); ++i) {
      auto& l = self.layers[i];
      const std::string p = "layers." + std::to_string(i) + ".";
      fn(p + "attn_norm", l.attn_norm);
      fn(p + "wq", l.wq);
      fn(p + "wk", l.wk);
      fn(p + "wv", l.wv);
      fn(p + "wo", l.wo);
      fn(p + "mlp_norm", l.mlp_norm);
      fn(p + "w_up", l.w_up);
      fn(p + "w_down", l.w_down);
    }
    fn(std::string("final_norm"), self.final_norm);
    fn(std::string("unembed"), self.unembed);
  }
};

inline constexpr double kInitStd = 0.02;

/// Deterministic initialisation: matrices ~ N(0, 0.02^2), norm gains = 1.
template <typename T>
ModelParams<T> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, kInitStd);
  auto matrix = [&](std::size_t rows, std::size_t cols) {
    Tensor<T> t({rows, cols});
    for (auto& v : t.values()) v = static_cast<T>(normal(rng));
    return t;
  };
  auto ones = [](std::size_t n) { return Tensor<T>({n}, T{1}); };
  const std::size_t d = cfg.d_model, wq = cfg.heads_q * cfg.head_dim,
                    wkv = cfg.heads_kv * cfg.head_dim;
  ModelParams<T> p;
  p.config = cfg;
  p.tok_emb = matrix(cfg.vocab_size, d);
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    LayerParams<T> l;
    l.attn_norm = ones(d);
    l.wq = matrix(wq, d);
    l.wk = matrix(wkv, d);
    l.wv = matrix(wkv, d);
    l.wo = matrix(d, wq);
    l.mlp_norm = ones(d);
    l.w_up = matrix(cfg.mlp_hidden, d);
    l.w_down = matrix(d, cfg.mlp_hidden);
    p.layers.push_back(std::move(l));
  }
  p.final_norm = ones(d);
  p.unembed = matrix(cfg.vocab_size, d);
  return p;
}

/// Per-layer Q/K/V activations of one sequence, each shaped [S x H x D].
template <typename T>
struct ActivationTrace {
  struct Layer {
    Tensor<T> q;
    Tensor<T> k;
    Tensor<T> v;

    const Tensor<T>& get(Projection p) const {
      return p == Projection::Q ? q : p == Projection::K ? k : v;
    }
  };
  std::vector<Layer> layers;
  bool post_rotary = false;
};

// Invoked on the pre-rotary projection output [S x H*D] of a layer; may
// rewrite values in place. Only allowed on no-grad tapes.
template <typename T>
using ProjectionHook = std::function<void(std::size_t layer, Projection, Tensor<T>&)>;

template <typename T>
struct ForwardOptions {
  bool need_logits = true;
  ActivationTrace<T>* trace = nullptr;
  bool trace_post_rotary = false;
  ProjectionHook<T> hook;
};

/// Parameters bound to a tape, in ModelParams::for_each order.
template <typename T>
struct BoundParams {
  const ModelParams<T>* params = nullptr;
  std::vector<ad::Var<T>> vars;

  ad::Var<T> tok_emb() const { return vars[0]; }
  ad::Var<T> layer(std::size_t l, std::size_t slot) const { return vars[1 + 8 * l + slot]; }
  ad::Var<T> final_norm() const { return vars[vars.size() - 2]; }
  ad::Var<T> unembed() const { return vars[vars.size() - 1]; }
};

template <typename T>
BoundParams<T> bind(ad::Tape<T>& tape, const ModelParams<T>& params) {
  BoundParams<T> b;
  b.params = &params;
  params.for_each([&](const std::string&, const Tensor<T>& t) {
    b.vars.push_back(tape.parameter(t));
  });
  return b;
}

/// Gradients of every bound parameter, in for_each order.
template <typename T>
std::vector<Tensor<T>> collect_grads(const ad::Tape<T>& tape, const BoundParams<T>& b) {
  std::vector<Tensor<T>> out;
  out.reserve(b.vars.size());
  for (auto v : b.vars) out.push_back(tape.grad(v));
  return out;
}

/// Post-rotary keys and values of every position processed so far.
template <typename T>
struct LayerKv {
  ad::Var<T> k;
  ad::Var<T> v;
};

template <typename T>
struct SegmentOutput {
  std::optional<ad::Var<T>> logits;  // [S x vocab] when requested
  std::vector<LayerKv<T>> kv;        // prefix + segment, per layer
};

namespace detail {

inline void check_tokens(std::span<const int> tokens, std::size_t vocab) {
  for (int t : tokens) {
    if (t < 0 || static_cast<std::size_t>(t) >= vocab) {
      throw IndexError("token id " + std::to_string(t) + " outside vocabulary of size " +
                       std::to_string(vocab));
    }
  }
}

template <typename T>
Tensor<T> as_heads(const Tensor<T>& x, std::size_t heads, std::size_t head_dim) {
  return x.reshaped({x.extent(0), heads, head_dim});
}

}  // namespace detail

/// Runs the decoder over `tokens` placed at absolute positions
/// start_pos..start_pos+S-1, attending to `prefix` (keys/values of positions
/// 0..start_pos-1). With need_logits = false the final layer stops once its
/// keys/values are produced.
template <typename T>
SegmentOutput<T> forward_segment(ad::Tape<T>& tape, const BoundParams<T>& bp,
                                 std::span<const int> tokens, std::size_t start_pos,
                                 std::span<const LayerKv<T>> prefix,
                                 const ForwardOptions<T>& opts = {}) {
  const ModelConfig& cfg = bp.params->config;
  const std::size_t S = tokens.size();
  if (S == 0) throw ArgumentError("forward: empty token segment");
  if (start_pos + S > cfg.max_seq) {
    throw LengthError("forward: sequence length " + std::to_string(start_pos + S) +
                      " exceeds max_seq " + std::to_string(cfg.max_seq));
  }
  detail::check_tokens(tokens, cfg.vocab_size);
  if (!prefix.empty() && prefix.size() != cfg.n_layers) {
    throw ContractError("forward: prefix cache must cover every layer");
  }
  if (opts.hook && tape.grad_enabled()) {
    throw ContractError("forward: projection hooks require a no-grad tape");
  }
  std::vector<int> positions(S);
  for (std::size_t i = 0; i < S; ++i) positions[i] = static_cast<int>(start_pos + i);
  if (opts.trace) {
    opts.trace->layers.clear();
    opts.trace->post_rotary = opts.trace_post_rotary;
  }

  const std::size_t Hq = cfg.heads_q, Hkv = cfg.heads_kv, D = cfg.head_dim;
  SegmentOutput<T> out;
  auto x = ad::embedding(bp.tok_emb(), tokens);
  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const bool last = l + 1 == cfg.n_layers;
    auto h = ad::rms_norm(x, bp.layer(l, 0));
    auto q = ad::linear(h, bp.layer(l, 1));
    auto k = ad::linear(h, bp.layer(l, 2));
    auto v = ad::linear(h, bp.layer(l, 3));
    if (opts.hook) {
      Tensor<T> qh = q.value(), kh = k.value();
      opts.hook(l, Projection::Q, qh);
      opts.hook(l, Projection::K, kh);
      q = tape.constant(std::move(qh));
      k = tape.constant(std::move(kh));
    }
    typename ActivationTrace<T>::Layer captured;
    if (opts.trace && !opts.trace_post_rotary) {
      captured.q = detail::as_heads(q.value(), Hq, D);
      captured.k = detail::as_heads(k.value(), Hkv, D);
    }
    q = ad::rope(q, positions, Hq, D, cfg.rope_base);
    k = ad::rope(k, positions, Hkv, D, cfg.rope_base);
    if (opts.trace) {
      if (opts.trace_post_rotary) {
        captured.q = detail::as_heads(q.value(), Hq, D);
        captured.k = detail::as_heads(k.value(), Hkv, D);
      }
      captured.v = detail::as_heads(v.value(), Hkv, D);
      opts.trace->layers.push_back(std::move(captured));
    }
    ad::Var<T> k_all = k, v_all = v;
    if (!prefix.empty()) {
      if (prefix[l].k.value().rows() != start_pos) {
        throw ContractError("forward: prefix length does not match start position");
      }
      k_all = ad::concat_rows(prefix[l].k, k);
      v_all = ad::concat_rows(prefix[l].v, v);
    } else if (start_pos != 0) {
      throw ContractError("forward: non-zero start position without a prefix");
    }
    out.kv.push_back({k_all, v_all});
    if (last && !opts.need_logits) return out;

    auto attn = ad::causal_attention(q, k_all, v_all, Hq, Hkv, D, start_pos);
    x = ad::add(x, ad::linear(attn, bp.layer(l, 4)));
    auto h2 = ad::rms_norm(x, bp.layer(l, 5));
    x = ad::add(x, ad::linear(ad::silu(ad::linear(h2, bp.layer(l, 6))), bp.layer(l, 7)));
  }
  out.logits = ad::linear(ad::rms_norm(x, bp.final_norm()), bp.unembed());
  return out;
}

template <typename T>
struct ForwardResult {
  Tensor<T> logits;                       // [B x S x vocab]
  std::vector<ActivationTrace<T>> traces;  // one per batch item when captured
};

/// Full forward over a batch of equal-length sequences.
template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params,
                         std::span<const std::vector<int>> batch, bool capture,
                         bool capture_post_rotary = false,
                         const ProjectionHook<T>& hook = {}) {
  if (batch.empty()) throw ArgumentError("forward: empty batch");
  const std::size_t S = batch[0].size();
  const std::size_t V = params.config.vocab_size;
  ForwardResult<T> res;
  res.logits = Tensor<T>({batch.size(), S, V});
  for (std::size_t b = 0; b < batch.size(); ++b) {
    if (batch[b].size() != S) throw DimensionError("forward: ragged batch");
    ad::Tape<T> tape(false);
    auto bp = bind(tape, params);
    ForwardOptions<T> opts;
    ActivationTrace<T> trace;
    if (capture) {
      opts.trace = &trace;
      opts.trace_post_rotary = capture_post_rotary;
    }
    opts.hook = hook;
    auto seg = forward_segment<T>(tape, bp, batch[b], 0, {}, opts);
    const auto& lv = seg.logits->value();
    std::copy(lv.values().begin(), lv.values().end(),
              res.logits.values().begin() + static_cast<std::ptrdiff_t>(b * S * V));
    if (capture) res.traces.push_back(std::move(trace));
  }
  return res;
}

template <typename T>
ForwardResult<T> forward(const ModelParams<T>& params, const std::vector<int>& tokens,
                         bool capture = false) {
  std::vector<std::vector<int>> batch{tokens};
  return forward(params, std::span<const std::vector<int>>(batch), capture);
}

/// Applies rotary embedding to plain per-head activations [S x H*D].
template <typename T>
Tensor<T> apply_rope(const Tensor<T>& x, std::span<const int> positions,
                     std::size_t heads, std::size_t head_dim, double base) {
  ad::Tape<T> tape(false);
  return ad::rope(tape.constant_ref(x), positions, heads, head_dim, base).value();
}

/// Shared-prompt scoring: keys/values of prompt[0..n-2] are computed once
/// and each response is scored as the segment [prompt.back(), response[..-1]].
template <typename T>
struct PromptPrefix {
  std::vector<LayerKv<T>> kv;  // empty when the prompt has a single token
  int last_token = 0;
  std::size_t start = 0;
};

template <typename T>
PromptPrefix<T> encode_prompt(ad::Tape<T>& tape, const BoundParams<T>& bp,
                              std::span<const int> prompt) {
  if (prompt.empty()) throw ArgumentError("prompt must contain at least one token");
  PromptPrefix<T> pre;
  pre.last_token = prompt.back();
  pre.start = prompt.size() - 1;
  if (pre.start > 0) {
    ForwardOptions<T> opts;
    opts.need_logits = false;
    pre.kv = forward_segment<T>(tape, bp, prompt.first(pre.start), 0, {}, opts).kv;
  }
  return pre;
}

/// log pi(response[t] | prompt, response[<t]) for every response token; [n].
template <typename T>
ad::Var<T> response_log_probs(ad::Tape<T>& tape, const BoundParams<T>& bp,
                              const PromptPrefix<T>& prefix,
                              std::span<const int> response) {
  const ModelConfig& cfg = bp.params->config;
  if (prefix.start + 1 + response.size() > cfg.max_seq) {
    throw LengthError("prompt + response exceeds max_seq");
  }
  std::vector<int> seg;
  seg.reserve(response.size());
  seg.push_back(prefix.last_token);
  seg.insert(seg.end(), response.begin(), response.end() - 1);
  auto out = forward_segment<T>(tape, bp, seg, prefix.start, prefix.kv);
  return ad::token_log_probs(*out.logits, response);
}

template <typename T>
std::vector<T> log_probs_of(const ModelParams<T>& params, std::span<const int> prompt,
                            std::span<const int> response) {
  if (response.empty()) return {};
  if (prompt.size() + response.size() > params.config.max_seq) {
    throw LengthError("prompt + response exceeds max_seq");
  }
  ad::Tape<T> tape(false);
  auto bp = bind(tape, params);
  auto pre = encode_prompt(tape, bp, prompt);
  const auto& v = response_log_probs(tape, bp, pre, response).value();
  return std::vector<T>(v.values().begin(), v.values().end());
}

/// Owned key/value cache for incremental decoding.
template <typename T>
struct KvCache {
  std::vector<Tensor<T>> k, v;
  std::size_t length = 0;
};

/// Feeds one token at position cache.length; returns next-token logits and
/// extends the cache.
template <typename T>
std::vector<T> decode_step(const ModelParams<T>& params, KvCache<T>& cache, int token,
                           const ProjectionHook<T>& hook = {}) {
  ad::Tape<T> tape(false);
  auto bp = bind(tape, params);
  std::vector<LayerKv<T>> prefix;
  if (cache.length > 0) {
    for (std::size_t l = 0; l < cache.k.size(); ++l) {
      prefix.push_back({tape.constant_ref(cache.k[l]), tape.constant_ref(cache.v[l])});
    }
  }
  ForwardOptions<T> opts;
  opts.hook = hook;
  const int tok[1] = {token};
  auto out = forward_segment<T>(tape, bp, tok, cache.length, prefix, opts);
  cache.k.resize(out.kv.size());
  cache.v.resize(out.kv.size());
  for (std::size_t l = 0; l < out.kv.size(); ++l) {
    cache.k[l] = out.kv[l].k.value();
    cache.v[l] = out.kv[l].v.value();
  }
  cache.length += 1;
  const auto& lv = out.logits->value();
  return std::vector<T>(lv.values().begin(), lv.values().end());
}

/// Cache holding prompt[0..n-2]; the last prompt token is fed by the first
/// decode step.
template <typename T>
KvCache<T> prefill(const ModelParams<T>& params, std::span<const int> prompt,
                   const ProjectionHook<T>& hook = {}) {
  if (prompt.empty()) throw ArgumentError("prompt must contain at least one token");
  KvCache<T> cache;
  if (prompt.size() == 1) return cache;
  ad::Tape<T> tape(false);
  auto bp = bind(tape, params);
  ForwardOptions<T> opts;
  opts.need_logits = false;
  opts.hook = hook;
  auto out = forward_segment<T>(tape, bp, prompt.first(prompt.size() - 1), 0, {}, opts);
  for (auto& kv : out.kv) {
    cache.k.push_back(kv.k.value());
    cache.v.push_back(kv.v.value());
  }
  cache.length = prompt.size() - 1;
  return cache;
}

struct SamplingOptions {
  std::size_t max_new = 64;
  double temperature = 1.0;
  bool greedy = false;
  int eos = -1;  // stop token (included in the output); -1 disables
};

/// Index of the largest value; ties resolve to the lowest index.
template <typename T>
int argmax(std::span<const T> v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return static_cast<int>(best);
}

template <typename T>
std::vector<double> softmax_with_temperature(std::span<const T> logits, double temperature) {
  std::vector<double> p(logits.size());
  double mx = -std::numeric_limits<double>::infinity();
  for (T v : logits) mx = std::max(mx, static_cast<double>(v));
  double z = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    p[i] = std::exp((static_cast<double>(logits[i]) - mx) / temperature);
    z += p[i];
  }
  for (auto& v : p) v /= z;
  return p;
}

/// Continues decoding from a prefilled cache.
template <typename T>
std::vector<int> sample_from_cache(const ModelParams<T>& params, KvCache<T> cache,
                                   int last_prompt_token, const SamplingOptions& opts,
                                   std::uint64_t seed, const ProjectionHook<T>& hook = {}) {
  if (!opts.greedy && !(opts.temperature > 0.0)) {
    throw ArgumentError("sampling temperature must be positive");
  }
  std::mt19937_64 rng(seed);
  std::vector<int> out;
  int token = last_prompt_token;
  while (out.size() < opts.max_new && cache.length < params.config.max_seq) {
    auto logits = decode_step(params, cache, token, hook);
    if (opts.greedy) {
      token = argmax<T>(logits);
    } else {
      auto probs = softmax_with_temperature<T>(logits, opts.temperature);
      std::discrete_distribution<int> dist(probs.begin(), probs.end());
      token = dist(rng);
    }
    out.push_back(token);
    if (token == opts.eos) break;
  }
  return out;
}

/// Autoregressive sampling; deterministic for a given seed, seed-independent
/// when greedy.
template <typename T>
std::vector<int> sample_sequence(const ModelParams<T>& params, std::span<const int> prompt,
                                 const SamplingOptions& opts, std::uint64_t seed,
                                 const ProjectionHook<T>& hook = {}) {
  auto cache = prefill(params, prompt, hook);
  return sample_from_cache(params, std::move(cache), prompt.back(), opts, seed, hook);
}

}  // namespace longact
