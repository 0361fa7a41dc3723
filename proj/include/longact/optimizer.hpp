#pragma once

// Adam with optional per-row freezing.

#include <cmath>
#include <cstdint>
#include <optional>
#include <vector>

#include "longact/errors.hpp"
#include "longact/model.hpp"
#include "longact/saliency.hpp"
#include "longact/tensor.hpp"

namespace longact {

struct AdamConfig {
  double lr = 1e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;  // decoupled; never applied to query/key weights
};

/// Row flags per parameter tensor (for_each order); nullopt means all rows train.
using RowMasks = std::vector<std::optional<std::vector<bool>>>;

/// Expands a Q/K mask set to per-tensor row flags.
template <typename T>
RowMasks row_masks_for(const ModelParams<T>& params, const MaskSet* masks) {
  RowMasks out(params.tensor_count());
  if (!masks) return out;
  if (masks->q.size() != params.layers.size() || masks->k.size() != params.layers.size()) {
    throw ContractError("mask set covers " + std::to_string(masks->q.size()) + " layers, model has " +
                        std::to_string(params.layers.size()));
  }
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const auto& q = masks->q[l];
    const auto& k = masks->k[l];
    if (q.row_flags.size() != params.layers[l].wq.rows() ||
        k.row_flags.size() != params.layers[l].wk.rows()) {
      throw ContractError("mask rows do not match projection rows in layer " + std::to_string(l));
    }
    out[1 + 8 * l + 1] = q.row_flags;
    out[1 + 8 * l + 2] = k.row_flags;
  }
  return out;
}

template <typename T>
class Adam {
 public:
  Adam(const ModelParams<T>& params, AdamConfig cfg) : cfg_(cfg) {
    params.for_each([&](const std::string& name, const Tensor<T>& t) {
      m_.emplace_back(t.shape());
      v_.emplace_back(t.shape());
      decays_.push_back(!is_query_key(name) && t.rank() == 2);
    });
  }

  const AdamConfig& config() const { return cfg_; }
  void set_lr(double lr) { cfg_.lr = lr; }
  std::uint64_t steps() const { return t_; }
  const Tensor<T>& first_moment(std::size_t i) const { return m_.at(i); }
  const Tensor<T>& second_moment(std::size_t i) const { return v_.at(i); }

  /// One update. Rows flagged false in `masks` keep parameter, moments and
  /// decay untouched.
  void step(ModelParams<T>& params, const std::vector<Tensor<T>>& grads,
            const RowMasks& masks = {}) {
    if (grads.size() != m_.size()) throw ContractError("Adam: gradient count mismatch");
    if (!masks.empty() && masks.size() != m_.size()) throw ContractError("Adam: mask count mismatch");
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(cfg_.beta1), b2 = static_cast<T>(cfg_.beta2);
    const T step_size = static_cast<T>(cfg_.lr / bc1);
    const T inv_bc2 = static_cast<T>(1.0 / bc2);
    const T eps = static_cast<T>(cfg_.eps);
    const T decay = static_cast<T>(cfg_.lr * cfg_.weight_decay);
    std::size_t i = 0;
    params.for_each([&](const std::string&, Tensor<T>& p) {
      const auto& g = grads[i];
      require_same_shape(p, g, "Adam::step");
      auto& m = m_[i];
      auto& v = v_[i];
      const std::vector<bool>* rows = (!masks.empty() && masks[i]) ? &*masks[i] : nullptr;
      const std::size_t cols = p.rank() == 2 ? p.cols() : p.size();
      const bool use_decay = decays_[i] && decay != T{0};
      for (std::size_t j = 0; j < p.size(); ++j) {
        if (rows && !(*rows)[j / cols]) continue;
        m[j] = b1 * m[j] + (T{1} - b1) * g[j];
        v[j] = b2 * v[j] + (T{1} - b2) * g[j] * g[j];
        const T denom = std::sqrt(v[j] * inv_bc2) + eps;
        if (use_decay) p[j] -= decay * p[j];
        p[j] -= step_size * m[j] / denom;
      }
      ++i;
    });
  }

 private:
  static bool is_query_key(const std::string& name) {
    return name.ends_with(".wq") || name.ends_with(".wk");
  }

  AdamConfig cfg_;
  std::vector<Tensor<T>> m_;
  std::vector<Tensor<T>> v_;
  std::vector<bool> decays_;
  std::uint64_t t_ = 0;
};

}  // namespace longact
