#pragma once

// Supervised cold start and group-relative policy optimisation with
// saliency-masked query/key updates.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "longact/autodiff.hpp"
#include "longact/errors.hpp"
#include "longact/model.hpp"
#include "longact/optimizer.hpp"
#include "longact/reward.hpp"
#include "longact/saliency.hpp"
#include "longact/tasks.hpp"

namespace longact {

enum class Algorithm { grpo, dapo, full_update };

inline std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::grpo: return "grpo";
    case Algorithm::dapo: return "dapo";
    case Algorithm::full_update: return "full";
  }
  return "?";
}

inline Algorithm parse_algorithm(const std::string& s) {
  if (s == "grpo") return Algorithm::grpo;
  if (s == "dapo") return Algorithm::dapo;
  if (s == "full" || s == "full_update") return Algorithm::full_update;
  throw ConfigError("unknown algorithm '" + s + "' (expected grpo, dapo or full)");
}

// grpo and dapo train with saliency masks; full_update is the unmasked
// baseline and otherwise follows dapo.
inline bool uses_masks(Algorithm a) { return a != Algorithm::full_update; }

struct TrainConfig {
  Algorithm algorithm = Algorithm::dapo;
  SelectionPolicy selection;
  std::size_t group_size = 8;
  std::size_t groups_per_step = 4;
  // Unset clip/KL values take the algorithm default (see resolved_*).
  std::optional<double> eps_low;
  std::optional<double> eps_high;
  std::optional<double> beta;
  double rl_lr = 1e-5;
  double sft_lr = 3e-4;
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global norm; 0 disables
  std::size_t sft_batch = 8;
  std::size_t sft_steps = 1000;
  std::size_t rl_steps = 300;
  std::size_t max_new_tokens = 64;
  double temperature = 1.0;
  std::size_t sync_interval = 1;
  bool token_level_loss = false;
  std::size_t calibration_size = 8;
  std::size_t mask_refresh_every = 0;  // 0 = masks computed once before RL
  std::uint64_t seed = 0;

  double resolved_eps_low() const { return eps_low.value_or(0.2); }
  double resolved_eps_high() const {
    return eps_high.value_or(algorithm == Algorithm::grpo ? 0.2 : 0.28);
  }
  double resolved_beta() const { return beta.value_or(algorithm == Algorithm::grpo ? 0.001 : 0.0); }
  bool filters_groups() const { return algorithm != Algorithm::grpo; }

  void validate() const {
    selection.validate();
    if (group_size < 2) throw ConfigError("group size must be at least 2");
    if (groups_per_step == 0) throw ConfigError("groups_per_step must be positive");
    if (!(resolved_eps_low() > 0 && resolved_eps_low() <= resolved_eps_high())) {
      throw ConfigError("clip bounds must satisfy 0 < eps_low <= eps_high");
    }
    if (resolved_eps_low() >= 1.0) throw ConfigError("eps_low must be below 1");
    if (resolved_beta() < 0) throw ConfigError("beta must be non-negative");
    if (!(temperature > 0)) throw ConfigError("temperature must be positive");
    if (sync_interval == 0) throw ConfigError("sync_interval must be positive");
    if (max_new_tokens == 0) throw ConfigError("max_new_tokens must be positive");
  }
};

// ---------------------------------------------------------------- advantages

inline constexpr double kAdvantageEps = 1e-6;

/// (r - mean) / (population std + 1e-6); constant groups map to zeros.
inline std::vector<double> compute_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw ContractError("advantages need a group of at least 2");
  const double n = static_cast<double>(rewards.size());
  double mean = 0;
  for (double r : rewards) mean += r;
  mean /= n;
  double var = 0;
  for (double r : rewards) var += (r - mean) * (r - mean);
  const double sd = std::sqrt(var / n);
  std::vector<double> out(rewards.size());
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    out[i] = sd == 0.0 ? 0.0 : (rewards[i] - mean) / (sd + kAdvantageEps);
  }
  return out;
}

template <typename T>
struct RolloutGroup {
  std::size_t instance = 0;  // index into the split it came from
  std::vector<int> prompt;
  std::string gold;
  std::vector<std::vector<int>> responses;
  std::vector<double> rewards;
  std::vector<double> advantages;
  // Per-token log-probs under the rollout policy. Empty when the rollout
  // policy equals the policy being updated; the objective then uses the
  // detached current log-probs.
  std::vector<std::vector<T>> old_log_probs;

  bool has_variance() const {
    return std::any_of(rewards.begin(), rewards.end(),
                       [&](double r) { return r != rewards.front(); });
  }
};

/// Drops groups whose rewards are all equal.
template <typename T>
std::vector<RolloutGroup<T>> dapo_filter(std::vector<RolloutGroup<T>> groups) {
  std::erase_if(groups, [](const RolloutGroup<T>& g) { return !g.has_variance(); });
  return groups;
}

// ----------------------------------------------------------------- objective

struct ObjectiveStats {
  double objective = 0;  // mean group surrogate (higher is better)
  std::size_t tokens = 0;
  std::size_t clipped_tokens = 0;

  double clip_fraction() const {
    return tokens ? static_cast<double>(clipped_tokens) / static_cast<double>(tokens) : 0.0;
  }
};

struct ObjectiveSettings {
  double eps_low = 0.2;
  double eps_high = 0.28;
  double beta = 0.0;
  bool token_level = false;

  static ObjectiveSettings from(const TrainConfig& c) {
    return {c.resolved_eps_low(), c.resolved_eps_high(), c.resolved_beta(), c.token_level_loss};
  }
};

/// Negated clipped surrogate (minus beta * KL) summed over groups.
///
/// `ref_log_probs[g][i]` holds reference-policy log-probs of response i of
/// group g; it may be empty when beta == 0.
template <typename T>
ad::Var<T> grpo_loss(ad::Tape<T>& tape, const BoundParams<T>& bp,
                     std::span<const RolloutGroup<T>> groups,
                     const std::vector<std::vector<std::vector<T>>>& ref_log_probs,
                     const ObjectiveSettings& s, ObjectiveStats* stats = nullptr) {
  if (groups.empty()) throw ContractError("grpo_loss: no groups");
  if (s.beta > 0 && ref_log_probs.size() != groups.size()) {
    throw ContractError("grpo_loss: reference log-probs required when beta > 0");
  }
  const T lo = static_cast<T>(1.0 - s.eps_low), hi = static_cast<T>(1.0 + s.eps_high);
  std::optional<ad::Var<T>> total;
  ObjectiveStats st;
  for (std::size_t gi = 0; gi < groups.size(); ++gi) {
    const auto& g = groups[gi];
    if (g.responses.size() != g.advantages.size()) {
      throw ContractError("grpo_loss: advantages do not match responses");
    }
    auto prefix = encode_prompt(tape, bp, g.prompt);
    std::optional<ad::Var<T>> group_sum;
    std::size_t group_tokens = 0;
    for (std::size_t i = 0; i < g.responses.size(); ++i) {
      const auto& y = g.responses[i];
      if (y.empty()) throw ContractError("grpo_loss: empty response");
      auto lp = response_log_probs(tape, bp, prefix, y);
      Tensor<T> old = g.old_log_probs.empty() ? lp.value() : Tensor<T>(Shape{y.size()}, g.old_log_probs[i]);
      auto ratio = ad::exp(ad::sub(lp, tape.constant(std::move(old))));
      const T adv = static_cast<T>(g.advantages[i]);
      auto unclipped = ad::affine(ratio, adv);
      auto clipped = ad::affine(ad::clamp(ratio, lo, hi), adv);
      auto per_token = ad::minimum(unclipped, clipped);
      if (s.beta > 0) {
        const auto& ref = ref_log_probs[gi].at(i);
        auto delta = ad::sub(tape.constant(Tensor<T>(Shape{y.size()}, ref)), lp);
        auto kl = ad::affine(ad::sub(ad::exp(delta), delta), T{1}, T{-1});
        per_token = ad::sub(per_token, ad::affine(kl, static_cast<T>(s.beta)));
      }
      for (T r : ratio.value().values()) {
        const bool binds = (adv > 0 && r > hi) || (adv < 0 && r < lo);
        st.clipped_tokens += binds ? 1 : 0;
      }
      st.tokens += y.size();
      group_tokens += y.size();
      // sequence-mean aggregation averages per response; token-level sums here
      // and divides by the group's token count below
      auto term = s.token_level ? ad::sum(per_token) : ad::mean(per_token);
      group_sum = group_sum ? ad::add(*group_sum, term) : term;
    }
    const double denom = s.token_level ? static_cast<double>(group_tokens)
                                       : static_cast<double>(g.responses.size());
    auto group_obj = ad::affine(*group_sum, static_cast<T>(1.0 / denom));
    st.objective += static_cast<double>(group_obj.value().item());
    total = total ? ad::add(*total, group_obj) : group_obj;
  }
  st.objective /= static_cast<double>(groups.size());
  if (stats) *stats = st;
  return ad::affine(*total, T{-1});
}

/// Reference-policy log-probs for every response of every group.
template <typename T>
std::vector<std::vector<std::vector<T>>> reference_log_probs(const ModelParams<T>& ref,
                                                             std::span<const RolloutGroup<T>> groups) {
  std::vector<std::vector<std::vector<T>>> out;
  for (const auto& g : groups) {
    ad::Tape<T> tape(false);
    auto bp = bind(tape, ref);
    auto prefix = encode_prompt(tape, bp, g.prompt);
    auto& per = out.emplace_back();
    for (const auto& y : g.responses) {
      const auto& v = response_log_probs(tape, bp, prefix, y).value();
      per.emplace_back(v.values().begin(), v.values().end());
    }
  }
  return out;
}

// ------------------------------------------------------------------------ SFT

struct SftExample {
  std::vector<int> prompt;
  std::vector<int> response;
};

inline SftExample sft_example(const TaskInstance& inst) {
  return {inst.prompt(), gold_response(inst)};
}

/// Mean negative log-likelihood over all response tokens of the batch.
template <typename T>
ad::Var<T> sft_loss(ad::Tape<T>& tape, const BoundParams<T>& bp, std::span<const SftExample> batch) {
  if (batch.empty()) throw ContractError("sft_loss: empty batch");
  std::optional<ad::Var<T>> total;
  std::size_t tokens = 0;
  for (const auto& ex : batch) {
    if (ex.response.empty()) throw ContractError("sft_loss: empty response");
    auto prefix = encode_prompt(tape, bp, ex.prompt);
    auto s = ad::sum(response_log_probs(tape, bp, prefix, ex.response));
    total = total ? ad::add(*total, s) : s;
    tokens += ex.response.size();
  }
  return ad::affine(*total, static_cast<T>(-1.0 / static_cast<double>(tokens)));
}

/// One full-parameter update; returns the pre-update loss.
template <typename T>
double sft_step(ModelParams<T>& params, Adam<T>& opt, std::span<const SftExample> batch,
                double grad_clip = 0.0) {
  ad::Tape<T> tape;
  auto bp = bind(tape, params);
  auto loss = sft_loss(tape, bp, batch);
  tape.backward(loss);
  auto grads = collect_grads(tape, bp);
  if (grad_clip > 0) {
    double sq = 0;
    for (const auto& g : grads)
      for (T v : g.values()) sq += static_cast<double>(v) * v;
    const double norm = std::sqrt(sq);
    if (norm > grad_clip) {
      const T scale = static_cast<T>(grad_clip / norm);
      for (auto& g : grads)
        for (auto& v : g.values()) v *= scale;
    }
  }
  opt.step(params, grads);
  return static_cast<double>(loss.value().item());
}

// ------------------------------------------------------------------- rollouts

inline std::uint64_t derive_seed(std::initializer_list<std::uint64_t> parts) {
  std::vector<std::uint32_t> words;
  for (auto p : parts) {
    words.push_back(static_cast<std::uint32_t>(p));
    words.push_back(static_cast<std::uint32_t>(p >> 32));
  }
  std::seed_seq seq(words.begin(), words.end());
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (std::uint64_t{out[0]} << 32) | out[1];
}

/// Samples G responses for one instance from the rollout policy and scores them.
template <typename T>
RolloutGroup<T> collect_group(const ModelParams<T>& policy, const TaskInstance& inst,
                              std::size_t instance_index, const TrainConfig& cfg,
                              std::uint64_t group_seed) {
  RolloutGroup<T> g;
  g.instance = instance_index;
  g.prompt = inst.prompt();
  g.gold = inst.answer;
  SamplingOptions opts;
  opts.max_new = cfg.max_new_tokens;
  opts.temperature = cfg.temperature;
  opts.eos = Vocab::kEos;
  auto cache = prefill(policy, g.prompt);
  for (std::size_t i = 0; i < cfg.group_size; ++i) {
    auto y = sample_from_cache(policy, cache, g.prompt.back(), opts, derive_seed({group_seed, i}));
    g.rewards.push_back(compute_reward(y, g.gold).total());
    g.responses.push_back(std::move(y));
  }
  g.advantages = compute_advantages(g.rewards);
  return g;
}

/// Fills old-policy log-probs (needed when the rollout policy lags behind).
template <typename T>
void attach_old_log_probs(const ModelParams<T>& old, RolloutGroup<T>& g) {
  std::vector<RolloutGroup<T>> one{g};
  one[0].old_log_probs.clear();
  auto lp = reference_log_probs(old, std::span<const RolloutGroup<T>>(one));
  g.old_log_probs = std::move(lp[0]);
}

// ------------------------------------------------------------------- RL step

struct StepMetrics {
  std::size_t step = 0;
  double mean_reward = 0;
  double objective = 0;
  double clip_frac = 0;
  double grad_norm_qk = 0;
  double grad_norm_other = 0;
  std::size_t groups_used = 0;
  std::optional<double> eval_acc;
};

template <typename T>
ModelParams<T> sync_old_policy(const ModelParams<T>& params) {
  return params;
}

/// One policy update from already-collected groups.
///
/// `masks` must be given exactly when the algorithm trains with masks; its
/// Q/K rows gate both gradients and optimizer state. `ref` is required when
/// the resolved beta is positive.
template <typename T>
StepMetrics rl_step(ModelParams<T>& params, Adam<T>& opt, const MaskSet* masks,
                    std::vector<RolloutGroup<T>> groups, const TrainConfig& cfg,
                    const ModelParams<T>* ref = nullptr) {
  if (uses_masks(cfg.algorithm) != (masks != nullptr)) {
    throw ContractError(std::string("rl_step: algorithm '") + to_string(cfg.algorithm) +
                        (masks ? "' does not take masks" : "' requires Q/K masks"));
  }
  const auto row_masks = row_masks_for(params, masks);
  StepMetrics m;
  double reward_sum = 0;
  std::size_t reward_count = 0;
  for (const auto& g : groups) {
    for (double r : g.rewards) reward_sum += r;
    reward_count += g.rewards.size();
  }
  m.mean_reward = reward_count ? reward_sum / static_cast<double>(reward_count) : 0.0;
  if (cfg.filters_groups()) groups = dapo_filter(std::move(groups));
  m.groups_used = groups.size();
  if (groups.empty()) return m;  // nothing carries signal; parameters untouched

  const auto settings = ObjectiveSettings::from(cfg);
  std::vector<std::vector<std::vector<T>>> ref_lp;
  if (settings.beta > 0) {
    if (!ref) throw ContractError("rl_step: beta > 0 requires a reference policy");
    ref_lp = reference_log_probs(*ref, std::span<const RolloutGroup<T>>(groups));
  }
  ad::Tape<T> tape;
  auto bp = bind(tape, params);
  ObjectiveStats stats;
  auto loss = grpo_loss(tape, bp, std::span<const RolloutGroup<T>>(groups), ref_lp, settings, &stats);
  tape.backward(loss);
  auto grads = collect_grads(tape, bp);

  double sq_qk = 0, sq_other = 0;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    if (row_masks.size() > i && row_masks[i]) {
      const auto& rows = *row_masks[i];
      const std::size_t cols = grads[i].cols();
      for (std::size_t r = 0; r < rows.size(); ++r) {
        if (!rows[r]) std::fill_n(grads[i].values().begin() + r * cols, cols, T{0});
      }
    }
    const bool qk = i >= 1 && i < 1 + 8 * params.layers.size() &&
                    ((i - 1) % 8 == 1 || (i - 1) % 8 == 2);
    double sq = 0;
    for (T v : grads[i].values()) sq += static_cast<double>(v) * v;
    (qk ? sq_qk : sq_other) += sq;
  }
  m.grad_norm_qk = std::sqrt(sq_qk);
  m.grad_norm_other = std::sqrt(sq_other);
  const double norm = std::sqrt(sq_qk + sq_other);
  if (cfg.grad_clip > 0 && norm > cfg.grad_clip) {
    const T scale = static_cast<T>(cfg.grad_clip / norm);
    for (auto& g : grads)
      for (auto& v : g.values()) v *= scale;
  }
  opt.step(params, grads, row_masks);
  m.objective = stats.objective;
  m.clip_frac = stats.clip_fraction();
  return m;
}

// ----------------------------------------------------------------- evaluation

struct EvalOptions {
  bool greedy = true;
  std::size_t max_new_tokens = 64;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t collapse_run = kCollapseRun;
};

struct EvalResult {
  double accuracy = 0;
  double mean_reward = 0;
  double collapse_rate = 0;
  std::size_t count = 0;
  std::vector<bool> correct;
  std::vector<std::vector<int>> outputs;
};

template <typename T>
EvalResult evaluate(const ModelParams<T>& params, std::span<const TaskInstance> eval_set,
                    const EvalOptions& opts = {}, const ProjectionHook<T>& hook = {}) {
  EvalResult res;
  SamplingOptions so;
  so.greedy = opts.greedy;
  so.max_new = opts.max_new_tokens;
  so.temperature = opts.temperature;
  so.eos = Vocab::kEos;
  std::size_t hits = 0, collapses = 0;
  double reward = 0;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const auto prompt = eval_set[i].prompt();
    auto out = sample_sequence(params, prompt, so, derive_seed({opts.seed, i}), hook);
    const auto r = compute_reward(out, eval_set[i].answer);
    hits += r.answer;
    reward += r.total();
    collapses += detect_collapse(out, opts.collapse_run).collapsed ? 1 : 0;
    res.correct.push_back(r.answer == 1);
    res.outputs.push_back(std::move(out));
  }
  res.count = eval_set.size();
  if (res.count) {
    const double n = static_cast<double>(res.count);
    res.accuracy = static_cast<double>(hits) / n;
    res.mean_reward = reward / n;
    res.collapse_rate = static_cast<double>(collapses) / n;
  }
  return res;
}

}  // namespace longact
