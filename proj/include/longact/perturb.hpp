#pragma once

// Clamping study: overwrite high- or low-magnitude query/key coordinates with
// the tensor's global mean during the forward pass and measure the damage.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <span>
#include <string>
#include <vector>

#include "longact/errors.hpp"
#include "longact/model.hpp"
#include "longact/reward.hpp"
#include "longact/saliency.hpp"
#include "longact/tasks.hpp"
#include "longact/training.hpp"

namespace longact {

enum class PerturbTarget { q, k, both };
enum class ClampSide { top, bottom };
enum class MeanScope { per_layer, joint };

inline std::string to_string(PerturbTarget t) {
  switch (t) {
    case PerturbTarget::q: return "q";
    case PerturbTarget::k: return "k";
    case PerturbTarget::both: return "both";
  }
  return "?";
}
inline std::string to_string(ClampSide s) { return s == ClampSide::top ? "top" : "bottom"; }
inline std::string to_string(MeanScope s) {
  return s == MeanScope::per_layer ? "per_layer" : "joint";
}

inline PerturbTarget parse_perturb_target(const std::string& s) {
  if (s == "q" || s == "Q") return PerturbTarget::q;
  if (s == "k" || s == "K") return PerturbTarget::k;
  if (s == "both") return PerturbTarget::both;
  throw ConfigError("unknown perturbation target '" + s + "' (q, k, both)");
}
inline ClampSide parse_clamp_side(const std::string& s) {
  if (s == "top") return ClampSide::top;
  if (s == "bottom") return ClampSide::bottom;
  throw ConfigError("unknown clamp side '" + s + "' (top, bottom)");
}
inline MeanScope parse_mean_scope(const std::string& s) {
  if (s == "per_layer") return MeanScope::per_layer;
  if (s == "joint") return MeanScope::joint;
  throw ConfigError("unknown mean scope '" + s + "' (per_layer, joint)");
}

struct PerturbSpec {
  PerturbTarget target = PerturbTarget::both;
  double fraction = 0.3;
  ClampSide side = ClampSide::top;
  std::vector<std::size_t> layers;  // empty means every layer
  MeanScope scope = MeanScope::per_layer;

  void validate() const {
    if (!(fraction >= 0.0 && fraction <= 1.0)) {
      throw ConfigError("clamp fraction must lie in [0, 1], got " + std::to_string(fraction));
    }
  }
  bool touches(Projection p) const {
    if (p == Projection::V) return false;
    return target == PerturbTarget::both || (target == PerturbTarget::q) == (p == Projection::Q);
  }
  bool covers_layer(std::size_t l) const {
    return layers.empty() || std::find(layers.begin(), layers.end(), l) != layers.end();
  }
  std::string label() const {
    std::ostringstream os;
    os << to_string(side) << '-' << std::lround(fraction * 100) << "% " << to_string(target);
    return os.str();
  }
};

/// Mean over every element of one projection in the given layers (all when empty).
template <typename T>
double global_mean(const ActivationTrace<T>& trace, Projection p,
                   std::span<const std::size_t> layers = {}) {
  if (trace.layers.empty()) throw ArgumentError("global_mean: empty trace");
  double sum = 0.0;
  std::size_t n = 0;
  auto add = [&](std::size_t l) {
    if (l >= trace.layers.size()) throw IndexError("global_mean: layer out of range");
    for (T v : trace.layers[l].get(p).values()) sum += static_cast<double>(v);
    n += trace.layers[l].get(p).size();
  };
  if (layers.empty()) {
    for (std::size_t l = 0; l < trace.layers.size(); ++l) add(l);
  } else {
    for (std::size_t l : layers) add(l);
  }
  if (n == 0) throw ArgumentError("global_mean: empty trace");
  return sum / static_cast<double>(n);
}

/// Coordinates to clamp and their replacement value for one layer/projection.
struct ClampSite {
  std::size_t layer = 0;
  Projection projection = Projection::Q;
  std::vector<bool> columns;  // [H*D], h-major
  double value = 0.0;
};

struct ClampPlan {
  std::vector<ClampSite> sites;

  bool empty() const {
    for (const auto& s : sites) {
      if (std::find(s.columns.begin(), s.columns.end(), true) != s.columns.end()) return false;
    }
    return true;
  }

  /// Clamps in place; tensors are [S x H*D] projection outputs.
  template <typename T>
  void apply(std::size_t layer, Projection p, Tensor<T>& x) const {
    for (const auto& site : sites) {
      if (site.layer != layer || site.projection != p) continue;
      if (x.rank() != 2 || x.cols() != site.columns.size()) {
        throw ContractError("clamp plan for layer " + std::to_string(layer) + " " + to_string(p) +
                            " expects " + std::to_string(site.columns.size()) +
                            " columns, activation is " + shape_str(x.shape()));
      }
      const T v = static_cast<T>(site.value);
      const std::size_t cols = x.cols();
      for (std::size_t r = 0; r < x.rows(); ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          if (site.columns[c]) x[r * cols + c] = v;
        }
      }
    }
  }

  template <typename T>
  ProjectionHook<T> hook() const {
    if (empty()) return {};
    return [plan = *this](std::size_t l, Projection p, Tensor<T>& x) { plan.apply(l, p, x); };
  }
};

/// Magnitude matrices of Q and K for every layer, from unperturbed traces.
struct MagnitudeSet {
  std::vector<MagnitudeMatrix> q;
  std::vector<MagnitudeMatrix> k;

  const MagnitudeMatrix& get(std::size_t layer, Projection p) const {
    if (p == Projection::V) throw ArgumentError("value projections are not clamped");
    return p == Projection::Q ? q.at(layer) : k.at(layer);
  }
};

template <typename T>
MagnitudeSet compute_magnitudes(std::span<const ActivationTrace<T>> traces) {
  if (traces.empty()) throw ArgumentError("compute_magnitudes: no traces");
  MagnitudeSet m;
  for (std::size_t l = 0; l < traces[0].layers.size(); ++l) {
    m.q.push_back(compute_magnitude(traces, l, Projection::Q));
    m.k.push_back(compute_magnitude(traces, l, Projection::K));
  }
  return m;
}

/// Selects the clamped coordinates from `mags` and takes replacement values
/// from `reference`, the unperturbed trace of the input being perturbed.
template <typename T>
ClampPlan make_clamp_plan(const ModelConfig& model, const PerturbSpec& spec,
                          const MagnitudeSet& mags, const ActivationTrace<T>& reference) {
  spec.validate();
  if (mags.q.size() != model.n_layers || mags.k.size() != model.n_layers ||
      reference.layers.size() != model.n_layers) {
    throw ContractError("clamp plan: magnitudes/trace cover a different number of layers");
  }
  for (std::size_t l : spec.layers) {
    if (l >= model.n_layers) throw ContractError("clamp plan: layer " + std::to_string(l) + " out of range");
  }
  ClampPlan plan;
  const SelectionPolicy policy{spec.side == ClampSide::top ? SelectionKind::massive
                                                           : SelectionKind::min,
                               spec.fraction, 0};
  for (Projection p : {Projection::Q, Projection::K}) {
    if (!spec.touches(p)) continue;
    const std::size_t H = p == Projection::Q ? model.heads_q : model.heads_kv;
    const std::size_t D = model.head_dim;
    std::vector<std::size_t> chosen;
    for (std::size_t l = 0; l < model.n_layers; ++l) {
      if (spec.covers_layer(l)) chosen.push_back(l);
    }
    const double joint = spec.scope == MeanScope::joint ? global_mean(reference, p, chosen) : 0.0;
    for (std::size_t l : chosen) {
      const auto& m = mags.get(l, p);
      if (m.heads() != H || m.head_dim() != D) {
        throw ContractError("clamp plan: magnitude matrix " + shape_str(m.values.shape()) +
                            " does not match layer " + std::to_string(l) + " " + to_string(p));
      }
      ClampSite site{l, p, std::vector<bool>(H * D, false),
                     spec.scope == MeanScope::joint
                         ? joint
                         : global_mean(reference, p, std::span<const std::size_t>(&l, 1))};
      const auto dims = select_dims(m, policy);
      for (std::size_t h = 0; h < H; ++h) {
        for (std::size_t d : dims[h]) site.columns[h * D + d] = true;
      }
      plan.sites.push_back(std::move(site));
    }
  }
  return plan;
}

/// KL(p || q) between the softmax distributions of two logit rows.
template <typename T>
double kl_from_logits(std::span<const T> p_logits, std::span<const T> q_logits) {
  auto log_softmax = [](std::span<const T> x) {
    double mx = -std::numeric_limits<double>::infinity();
    for (T v : x) mx = std::max(mx, static_cast<double>(v));
    double z = 0.0;
    for (T v : x) z += std::exp(static_cast<double>(v) - mx);
    const double lz = mx + std::log(z);
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = static_cast<double>(x[i]) - lz;
    return out;
  };
  const auto lp = log_softmax(p_logits);
  const auto lq = log_softmax(q_logits);
  double kl = 0.0;
  for (std::size_t i = 0; i < lp.size(); ++i) kl += std::exp(lp[i]) * (lp[i] - lq[i]);
  return std::max(kl, 0.0);
}

struct PerturbResult {
  PerturbSpec spec;
  double accuracy = 0;
  double collapse_rate = 0;
  double divergence = 0;  // mean over prompts of the per-position KL(baseline || perturbed)
  std::size_t count = 0;
  std::size_t correct = 0;
  std::vector<double> prompt_divergence;
  std::vector<std::vector<int>> outputs;
};

/// Greedy evaluation with clamping. Each prompt's clamp value comes from its
/// own unperturbed trace; the clamped coordinates come from `mags`.
template <typename T>
PerturbResult perturb_eval(const ModelParams<T>& params, std::span<const TaskInstance> eval_set,
                           const PerturbSpec& spec, const MagnitudeSet& mags,
                           const EvalOptions& opts = {}) {
  spec.validate();
  PerturbResult res;
  res.spec = spec;
  SamplingOptions so;
  so.greedy = opts.greedy;
  so.max_new = opts.max_new_tokens;
  so.temperature = opts.temperature;
  so.eos = Vocab::kEos;
  const std::size_t V = params.config.vocab_size;
  std::size_t collapses = 0;
  double div_sum = 0.0;
  for (std::size_t i = 0; i < eval_set.size(); ++i) {
    const std::vector<std::vector<int>> batch{eval_set[i].prompt()};
    const std::span<const std::vector<int>> one(batch);
    auto base = forward(params, one, true);
    const auto plan = make_clamp_plan(params.config, spec, mags, base.traces.front());
    const auto hook = plan.template hook<T>();

    double div = 0.0;
    if (hook) {
      auto pert = forward(params, one, false, false, hook);
      const std::size_t S = batch[0].size();
      const auto& a = base.logits.values();
      const auto& b = pert.logits.values();
      for (std::size_t s = 0; s < S; ++s) {
        div += kl_from_logits<T>(std::span<const T>(a.data() + s * V, V),
                                 std::span<const T>(b.data() + s * V, V));
      }
      div /= static_cast<double>(S);
    }
    res.prompt_divergence.push_back(div);
    div_sum += div;

    auto out = sample_sequence(params, std::span<const int>(batch[0]), so,
                               derive_seed({opts.seed, i}), hook);
    res.correct += compute_reward(out, eval_set[i].answer).answer;
    collapses += detect_collapse(out, opts.collapse_run).collapsed ? 1 : 0;
    res.outputs.push_back(std::move(out));
  }
  res.count = eval_set.size();
  if (res.count) {
    const double n = static_cast<double>(res.count);
    res.accuracy = static_cast<double>(res.correct) / n;
    res.collapse_rate = static_cast<double>(collapses) / n;
    res.divergence = div_sum / n;
  }
  return res;
}

/// Fixed-width table: one row per setting.
inline void write_perturb_report(std::span<const PerturbResult> rows,
                                 const std::filesystem::path& path) {
  ensure_parent_dir(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << std::left << std::setw(24) << "setting" << std::right << std::setw(10) << "correct"
     << std::setw(10) << "accuracy" << std::setw(10) << "collapse" << std::setw(14)
     << "divergence" << '\n';
  for (const auto& r : rows) {
    std::ostringstream correct;
    correct << r.correct << '/' << r.count;
    os << std::left << std::setw(24) << (r.spec.fraction == 0.0 ? "baseline" : r.spec.label())
       << std::right << std::setw(10) << correct.str() << std::fixed << std::setprecision(4)
       << std::setw(10) << r.accuracy << std::setw(10) << r.collapse_rate << std::setw(14)
       << std::setprecision(6) << r.divergence << '\n';
    os.unsetf(std::ios::fixed);
  }
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace longact
