#pragma once

// Tape-based reverse-mode differentiation over dense tensors.
//
// A Tape records every primitive in creation order, so creation order is a
// topological order and backward simply walks the node list in reverse.
// Parameters are bound by reference (no copy); the caller keeps them alive
// and unchanged for the lifetime of the tape.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "longact/errors.hpp"
#include "longact/tensor.hpp"

namespace longact::ad {

template <typename T>
class Tape;

template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  // Called with the gradient w.r.t. the node output and the output value.
  using BackwardFn =
      std::function<void(Tape&, const Tensor<T>&, const Tensor<T>&)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  // Leaf bound to an external tensor that receives gradients.
  Var<T> parameter(const Tensor<T>& value) {
    return push_leaf(nullptr, &value, grad_enabled_);
  }
  // Owned leaf that receives gradients.
  Var<T> variable(Tensor<T> value) {
    return push_leaf(std::make_unique<Tensor<T>>(std::move(value)), nullptr,
                     grad_enabled_);
  }
  Var<T> constant(Tensor<T> value) {
    return push_leaf(std::make_unique<Tensor<T>>(std::move(value)), nullptr, false);
  }
  Var<T> constant_ref(const Tensor<T>& value) {
    return push_leaf(nullptr, &value, false);
  }

  const Tensor<T>& value(Var<T> v) const { return node(v).value(); }
  bool requires_grad(Var<T> v) const { return node(v).requires_grad; }

  // Accumulated gradient of a leaf; zeros when nothing flowed into it.
  Tensor<T> grad(Var<T> v) const {
    const Node& n = node(v);
    if (n.grad.size() == 0) return Tensor<T>(n.value().shape());
    return n.grad;
  }

  // Used by backward functions: mutable gradient buffer of an input, or
  // nullptr when that input does not require gradients.
  Tensor<T>* grad_slot(std::size_t id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.size() != n.value().size()) n.grad = Tensor<T>(n.value().shape());
    return &n.grad;
  }

  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> inputs,
                std::string_view op, BackwardFn fn) {
    require_finite(value, op);
    bool needs = false;
    if (grad_enabled_) {
      for (const auto& in : inputs) {
        check_owner(in);
        needs = needs || node(in).requires_grad;
      }
    }
    Node n;
    n.owned = std::make_unique<Tensor<T>>(std::move(value));
    n.requires_grad = needs;
    if (needs) n.backward = std::move(fn);
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  // Accumulates d(loss)/d(leaf) into every reachable leaf gradient.
  // Repeated calls add to existing leaf gradients.
  void backward(Var<T> loss) {
    check_owner(loss);
    if (value(loss).size() != 1 || value(loss).rank() > 1) {
      throw ContractError("backward requires a scalar loss, got shape " +
                          shape_str(value(loss).shape()));
    }
    if (!grad_enabled_) throw ContractError("backward on a no-grad tape");
    for (auto& n : nodes_) {
      if (!n.leaf) n.grad = Tensor<T>();
    }
    Node& root = nodes_[loss.id];
    if (!root.requires_grad) return;
    if (root.grad.size() != 1) root.grad = Tensor<T>(root.value().shape());
    root.grad[0] += T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.leaf || !n.backward || n.grad.size() == 0) continue;
      n.backward(*this, n.grad, n.value());
      n.grad = Tensor<T>();
    }
  }

  void zero_grad() {
    for (auto& n : nodes_) n.grad = Tensor<T>();
  }

 private:
  struct Node {
    std::unique_ptr<Tensor<T>> owned;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    bool requires_grad = false;
    bool leaf = false;
    BackwardFn backward;

    const Tensor<T>& value() const { return external ? *external : *owned; }
  };

  Var<T> push_leaf(std::unique_ptr<Tensor<T>> owned, const Tensor<T>* external,
                   bool requires_grad) {
    Node n;
    n.owned = std::move(owned);
    n.external = external;
    n.leaf = true;
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return {this, nodes_.size() - 1};
  }

  void check_owner(Var<T> v) const {
    if (v.tape != this || v.id >= nodes_.size()) {
      throw ContractError("variable does not belong to this tape");
    }
  }

  const Node& node(Var<T> v) const {
    check_owner(v);
    return nodes_[v.id];
  }

  bool grad_enabled_;
  std::vector<Node> nodes_;
};

namespace kernel {

// c[n x m] += a[n x k] * b[k x m]; every output element accumulates over k in
// index order regardless of n, so row subsets reproduce bit-identical rows.
template <typename T>
void gemm_acc(const T* __restrict a, const T* __restrict b, T* __restrict c,
              std::size_t n, std::size_t k, std::size_t m) {
  for (std::size_t i = 0; i < n; ++i) {
    T* ci = c + i * m;
    const T* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const T s = ai[p];
      const T* bp = b + p * m;
      for (std::size_t j = 0; j < m; ++j) ci[j] += s * bp[j];
    }
  }
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
  std::vector<T> out(rows * cols);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = a[r * cols + c];
  }
  return out;
}

}  // namespace kernel

namespace detail {

template <typename T>
void require_rank2(const Tensor<T>& t, std::string_view op) {
  if (t.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a matrix, got shape " +
                         shape_str(t.shape()));
  }
}

template <typename T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractError("operands live on different tapes");
  return *a.tape;
}

}  // namespace detail

/// Matrix product a[n x k] * b[k x m].
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av, "matmul");
  detail::require_rank2(bv, "matmul");
  const std::size_t n = av.extent(0), k = av.extent(1), m = bv.extent(1);
  if (bv.extent(0) != k) {
    throw DimensionError("matmul: inner extents differ " + shape_str(av.shape()) +
                         " x " + shape_str(bv.shape()));
  }
  Tensor<T> out({n, m});
  kernel::gemm_acc(av.data().data(), bv.data().data(), out.data().data(), n, k, m);
  return tape.record(std::move(out), {a, b}, "matmul",
                     [a, b, n, k, m](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                       const auto& av = t.value(a);
                       const auto& bv = t.value(b);
                       if (auto* ga = t.grad_slot(a.id)) {
                         auto bt = kernel::transpose(bv.data().data(), k, m);
                         kernel::gemm_acc(g.data().data(), bt.data(),
                                          ga->data().data(), n, m, k);
                       }
                       if (auto* gb = t.grad_slot(b.id)) {
                         auto at = kernel::transpose(av.data().data(), n, k);
                         kernel::gemm_acc(at.data(), g.data().data(),
                                          gb->data().data(), k, n, m);
                       }
                     });
}

/// x[n x in] times the transpose of w[out x in]; the layout of every
/// projection weight (one row per output feature).
template <typename T>
Var<T> linear(Var<T> x, Var<T> w) {
  auto& tape = detail::same_tape(x, w);
  const auto& xv = x.value();
  const auto& wv = w.value();
  detail::require_rank2(xv, "linear");
  detail::require_rank2(wv, "linear");
  const std::size_t n = xv.extent(0), in = xv.extent(1), out_f = wv.extent(0);
  if (wv.extent(1) != in) {
    throw DimensionError("linear: input width " + std::to_string(in) +
                         " vs weight " + shape_str(wv.shape()));
  }
  auto wt = kernel::transpose(wv.data().data(), out_f, in);
  Tensor<T> out({n, out_f});
  kernel::gemm_acc(xv.data().data(), wt.data(), out.data().data(), n, in, out_f);
  return tape.record(std::move(out), {x, w}, "linear",
                     [x, w, n, in, out_f](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                       if (auto* gx = t.grad_slot(x.id)) {
                         kernel::gemm_acc(g.data().data(), t.value(w).data().data(),
                                          gx->data().data(), n, out_f, in);
                       }
                       if (auto* gw = t.grad_slot(w.id)) {
                         auto gt = kernel::transpose(g.data().data(), n, out_f);
                         kernel::gemm_acc(gt.data(), t.value(x).data().data(),
                                          gw->data().data(), out_f, n, in);
                       }
                     });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  return tape.record(std::move(out), {a, b}, "add",
                     [a, b](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                       for (auto id : {a.id, b.id}) {
                         if (auto* gi = t.grad_slot(id)) {
                           for (std::size_t i = 0; i < g.size(); ++i) (*gi)[i] += g[i];
                         }
                       }
                     });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "sub");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return tape.record(std::move(out), {a, b}, "sub",
                     [a, b](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                       if (auto* ga = t.grad_slot(a.id)) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                       }
                       if (auto* gb = t.grad_slot(b.id)) {
                         for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] -= g[i];
                       }
                     });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return tape.record(std::move(out), {a, b}, "mul",
                     [a, b](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                       if (auto* ga = t.grad_slot(a.id)) {
                         const auto& bv = t.value(b);
                         for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * bv[i];
                       }
                       if (auto* gb = t.grad_slot(b.id)) {
                         const auto& av = t.value(a);
                         for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * av[i];
                       }
                     });
}

/// scale * a + shift, elementwise.
template <typename T>
Var<T> affine(Var<T> a, T scale, T shift = T{0}) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = scale * v + shift;
  return a.tape->record(std::move(out), {a}, "affine",
                        [a, scale](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                          if (auto* ga = t.grad_slot(a.id)) {
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*ga)[i] += scale * g[i];
                          }
                        });
}

template <typename T>
Var<T> exp(Var<T> a) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::exp(v);
  return a.tape->record(std::move(out), {a}, "exp",
                        [a](Tape<T>& t, const Tensor<T>& g, const Tensor<T>& y) {
                          if (auto* ga = t.grad_slot(a.id)) {
                            for (std::size_t i = 0; i < g.size(); ++i)
                              (*ga)[i] += g[i] * y[i];
                          }
                        });
}

/// Elementwise clamp to [lo, hi]; gradient flows only inside the interval.
template <typename T>
Var<T> clamp(Var<T> a, T lo, T hi) {
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::min(std::max(v, lo), hi);
  return a.tape->record(std::move(out), {a}, "clamp",
                        [a, lo, hi](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                          if (auto* ga = t.grad_slot(a.id)) {
                            const auto& av = t.value(a);
                            for (std::size_t i = 0; i < g.size(); ++i) {
                              if (av[i] >= lo && av[i] <= hi) (*ga)[i] += g[i];
                            }
                          }
                        });
}

/// Elementwise minimum; ties route the gradient to the first operand.
template <typename T>
Var<T> minimum(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  require_same_shape(a.value(), b.value(), "minimum");
  Tensor<T> out = a.value();
  const auto& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::min(out[i], bv[i]);
  return tape.record(std::move(out), {a, b}, "minimum",
                     [a, b](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                       const auto& av = t.value(a);
                       const auto& bv = t.value(b);
                       auto* ga = t.grad_slot(a.id);
                       auto* gb = t.grad_slot(b.id);
                       for (std::size_t i = 0; i < g.size(); ++i) {
                         if (av[i] <= bv[i]) {
                           if (ga) (*ga)[i] += g[i];
                         } else if (gb) {
                           (*gb)[i] += g[i];
                         }
                       }
                     });
}

template <typename T>
Var<T> sum(Var<T> a) {
  T s{0};
  for (T v : a.value().values()) s += v;
  return a.tape->record(Tensor<T>(Shape{}, std::vector<T>{s}), {a}, "sum",
                        [a](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                          if (auto* ga = t.grad_slot(a.id)) {
                            for (auto& v : ga->values()) v += g[0];
                          }
                        });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ContractError("mean of an empty tensor");
  return affine(sum(a), T{1} / static_cast<T>(n));
}

/// Softmax over the last axis, computed with max subtraction.
template <typename T>
Var<T> softmax_rows(Var<T> x) {
  const auto& xv = x.value();
  if (xv.cols() == 0) throw DimensionError("softmax_rows: empty last axis");
  Tensor<T> out = xv;
  const std::size_t rows = out.rows(), cols = out.cols();
  for (std::size_t r = 0; r < rows; ++r) {
    auto row = out.row(r);
    const T mx = *std::max_element(row.begin(), row.end());
    T z{0};
    for (auto& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (auto& v : row) v /= z;
  }
  return x.tape->record(std::move(out), {x}, "softmax_rows",
                        [x, rows, cols](Tape<T>& t, const Tensor<T>& g,
                                        const Tensor<T>& y) {
                          auto* gx = t.grad_slot(x.id);
                          if (!gx) return;
                          const auto& yv = y;
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T* yr = yv.data().data() + r * cols;
                            const T* gr = g.data().data() + r * cols;
                            T dot{0};
                            for (std::size_t c = 0; c < cols; ++c) dot += yr[c] * gr[c];
                            T* out = gx->data().data() + r * cols;
                            for (std::size_t c = 0; c < cols; ++c)
                              out[c] += yr[c] * (gr[c] - dot);
                          }
                        });
}

inline constexpr double kRmsEps = 1e-6;

/// Each last-axis slice divided by sqrt(mean(x^2) + eps), times gain.
template <typename T>
Var<T> rms_norm(Var<T> x, Var<T> gain) {
  auto& tape = detail::same_tape(x, gain);
  const auto& xv = x.value();
  const auto& gv = gain.value();
  const std::size_t cols = xv.cols(), rows = xv.rows();
  if (gv.size() != cols) {
    throw DimensionError("rms_norm: gain extent " + std::to_string(gv.size()) +
                         " vs last axis " + std::to_string(cols));
  }
  const T eps = static_cast<T>(kRmsEps);
  Tensor<T> out(xv.shape());
  std::vector<T> inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* xr = xv.data().data() + r * cols;
    T ss{0};
    for (std::size_t c = 0; c < cols; ++c) ss += xr[c] * xr[c];
    inv[r] = T{1} / std::sqrt(ss / static_cast<T>(cols) + eps);
    T* o = out.data().data() + r * cols;
    for (std::size_t c = 0; c < cols; ++c) o[c] = xr[c] * inv[r] * gv[c];
  }
  return tape.record(
      std::move(out), {x, gain}, "rms_norm",
      [x, gain, rows, cols, inv = std::move(inv)](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
        const auto& xv = t.value(x);
        const auto& gv = t.value(gain);
        auto* gx = t.grad_slot(x.id);
        auto* gg = t.grad_slot(gain.id);
        for (std::size_t r = 0; r < rows; ++r) {
          const T* xr = xv.data().data() + r * cols;
          const T* gr = g.data().data() + r * cols;
          if (gg) {
            for (std::size_t c = 0; c < cols; ++c) (*gg)[c] += gr[c] * xr[c] * inv[r];
          }
          if (gx) {
            T dot{0};
            for (std::size_t c = 0; c < cols; ++c) dot += gr[c] * gv[c] * xr[c];
            const T coef = inv[r] * inv[r] * inv[r] * dot / static_cast<T>(cols);
            T* o = gx->data().data() + r * cols;
            for (std::size_t c = 0; c < cols; ++c)
              o[c] += inv[r] * gr[c] * gv[c] - coef * xr[c];
          }
        }
      });
}

/// x * sigmoid(x).
template <typename T>
Var<T> silu(Var<T> x) {
  Tensor<T> out = x.value();
  for (auto& v : out.values()) v = v / (T{1} + std::exp(-v));
  return x.tape->record(std::move(out), {x}, "silu",
                        [x](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                          auto* gx = t.grad_slot(x.id);
                          if (!gx) return;
                          const auto& xv = t.value(x);
                          for (std::size_t i = 0; i < g.size(); ++i) {
                            const T s = T{1} / (T{1} + std::exp(-xv[i]));
                            (*gx)[i] += g[i] * s * (T{1} + xv[i] * (T{1} - s));
                          }
                        });
}

/// Rows of table[vocab x d] selected by ids.
template <typename T>
Var<T> embedding(Var<T> table, std::span<const int> ids) {
  const auto& tv = table.value();
  detail::require_rank2(tv, "embedding");
  const std::size_t vocab = tv.extent(0), d = tv.extent(1);
  Tensor<T> out({ids.size(), d});
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw IndexError("token id " + std::to_string(ids[i]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
    std::copy_n(tv.data().data() + static_cast<std::size_t>(ids[i]) * d, d,
                out.data().data() + i * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return table.tape->record(std::move(out), {table}, "embedding",
                            [table, d, saved = std::move(saved)](Tape<T>& t,
                                                                 const Tensor<T>& g,
                                                                 const Tensor<T>&) {
                              auto* gt = t.grad_slot(table.id);
                              if (!gt) return;
                              for (std::size_t i = 0; i < saved.size(); ++i) {
                                T* dst = gt->data().data() +
                                         static_cast<std::size_t>(saved[i]) * d;
                                const T* src = g.data().data() + i * d;
                                for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                              }
                            });
}

namespace detail {

// Rotates adjacent pairs (2p, 2p+1) of every head by pos * base^(-2p/D);
// sign = -1 applies the inverse rotation.
template <typename T>
void rotate_pairs(T* data, std::span<const int> positions, std::size_t heads,
                  std::size_t head_dim, double base, double sign) {
  const std::size_t width = heads * head_dim;
  const std::size_t half = head_dim / 2;
  std::vector<double> inv_freq(half);
  for (std::size_t p = 0; p < half; ++p) {
    inv_freq[p] = std::pow(base, -2.0 * static_cast<double>(p) /
                                     static_cast<double>(head_dim));
  }
  for (std::size_t i = 0; i < positions.size(); ++i) {
    T* row = data + i * width;
    for (std::size_t p = 0; p < half; ++p) {
      const double angle = sign * static_cast<double>(positions[i]) * inv_freq[p];
      const T c = static_cast<T>(std::cos(angle));
      const T s = static_cast<T>(std::sin(angle));
      for (std::size_t h = 0; h < heads; ++h) {
        T* x = row + h * head_dim + 2 * p;
        const T x0 = x[0], x1 = x[1];
        x[0] = x0 * c - x1 * s;
        x[1] = x0 * s + x1 * c;
      }
    }
  }
}

}  // namespace detail

/// Rotary position embedding on x[n x heads*head_dim], one position per row.
template <typename T>
Var<T> rope(Var<T> x, std::span<const int> positions, std::size_t heads,
            std::size_t head_dim, double base) {
  if (head_dim % 2 != 0) {
    throw ConfigError("rope: head dimension must be even, got " +
                      std::to_string(head_dim));
  }
  const auto& xv = x.value();
  if (xv.rank() != 2 || xv.extent(1) != heads * head_dim ||
      xv.extent(0) != positions.size()) {
    throw DimensionError("rope: activation shape " + shape_str(xv.shape()) +
                         " does not match positions/heads");
  }
  Tensor<T> out = xv;
  detail::rotate_pairs(out.data().data(), positions, heads, head_dim, base, 1.0);
  std::vector<int> pos(positions.begin(), positions.end());
  return x.tape->record(
      std::move(out), {x}, "rope",
      [x, heads, head_dim, base, pos = std::move(pos)](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
        auto* gx = t.grad_slot(x.id);
        if (!gx) return;
        Tensor<T> back = g;
        detail::rotate_pairs(back.data().data(), std::span<const int>(pos), heads,
                             head_dim, base, -1.0);
        for (std::size_t i = 0; i < back.size(); ++i) (*gx)[i] += back[i];
      });
}

template <typename T>
Var<T> concat_rows(Var<T> a, Var<T> b) {
  auto& tape = detail::same_tape(a, b);
  const auto& av = a.value();
  const auto& bv = b.value();
  detail::require_rank2(av, "concat_rows");
  detail::require_rank2(bv, "concat_rows");
  if (av.extent(1) != bv.extent(1)) {
    throw DimensionError("concat_rows: column mismatch " + shape_str(av.shape()) +
                         " vs " + shape_str(bv.shape()));
  }
  std::vector<T> data;
  data.reserve(av.size() + bv.size());
  data.insert(data.end(), av.values().begin(), av.values().end());
  data.insert(data.end(), bv.values().begin(), bv.values().end());
  const std::size_t split = av.size();
  return tape.record(Tensor<T>({av.extent(0) + bv.extent(0), av.extent(1)},
                               std::move(data)),
                     {a, b}, "concat_rows",
                     [a, b, split](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
                       if (auto* ga = t.grad_slot(a.id)) {
                         for (std::size_t i = 0; i < split; ++i) (*ga)[i] += g[i];
                       }
                       if (auto* gb = t.grad_slot(b.id)) {
                         for (std::size_t i = split; i < g.size(); ++i)
                           (*gb)[i - split] += g[i];
                       }
                     });
}

/// Causal scaled dot-product attention with grouped-query sharing.
///
/// q is [sq x heads_q*D]; k and v are [sk x heads_kv*D] with
/// sk == q_offset + sq, so query row i sits at absolute position q_offset + i
/// and sees keys 0..q_offset+i. Query head h reads kv head h / (heads_q/heads_kv).
template <typename T>
Var<T> causal_attention(Var<T> q, Var<T> k, Var<T> v, std::size_t heads_q,
                        std::size_t heads_kv, std::size_t head_dim,
                        std::size_t q_offset) {
  auto& tape = detail::same_tape(q, k);
  detail::same_tape(q, v);
  const auto& qv = q.value();
  const auto& kv = k.value();
  const auto& vv = v.value();
  if (heads_kv == 0 || heads_q % heads_kv != 0) {
    throw ConfigError("attention: query heads must be a multiple of kv heads");
  }
  const std::size_t sq = qv.rows(), sk = kv.rows();
  const std::size_t wq = heads_q * head_dim, wkv = heads_kv * head_dim;
  if (qv.cols() != wq || kv.cols() != wkv || vv.cols() != wkv || vv.rows() != sk ||
      sk != q_offset + sq) {
    throw DimensionError("attention: inconsistent q/k/v shapes " +
                         shape_str(qv.shape()) + " " + shape_str(kv.shape()) + " " +
                         shape_str(vv.shape()));
  }
  const std::size_t group = heads_q / heads_kv;
  const T scale = T{1} / std::sqrt(static_cast<T>(head_dim));
  // per kv-head transposed keys: [heads_kv][D][sk]
  std::vector<T> kt(heads_kv * head_dim * sk);
  for (std::size_t j = 0; j < sk; ++j) {
    for (std::size_t c = 0; c < wkv; ++c) kt[c * sk + j] = kv[j * wkv + c];
  }
  auto probs = std::make_shared<std::vector<T>>(heads_q * sq * sk, T{0});
  Tensor<T> out({sq, wq});
  std::vector<T> qs(head_dim);
  for (std::size_t h = 0; h < heads_q; ++h) {
    const std::size_t kvh = h / group;
    for (std::size_t i = 0; i < sq; ++i) {
      const std::size_t n = q_offset + i + 1;
      T* s = probs->data() + (h * sq + i) * sk;
      const T* qi = qv.data().data() + i * wq + h * head_dim;
      for (std::size_t d = 0; d < head_dim; ++d) {
        const T qd = qi[d] * scale;
        const T* krow = kt.data() + (kvh * head_dim + d) * sk;
        for (std::size_t j = 0; j < n; ++j) s[j] += qd * krow[j];
      }
      T mx = s[0];
      for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, s[j]);
      T z{0};
      for (std::size_t j = 0; j < n; ++j) {
        s[j] = std::exp(s[j] - mx);
        z += s[j];
      }
      const T inv = T{1} / z;
      for (std::size_t j = 0; j < n; ++j) s[j] *= inv;
      T* o = out.data().data() + i * wq + h * head_dim;
      for (std::size_t j = 0; j < n; ++j) {
        const T p = s[j];
        const T* vr = vv.data().data() + j * wkv + kvh * head_dim;
        for (std::size_t d = 0; d < head_dim; ++d) o[d] += p * vr[d];
      }
    }
  }
  return tape.record(
      std::move(out), {q, k, v}, "causal_attention",
      [q, k, v, probs, heads_q, head_dim, group, sq, sk, wq, wkv, q_offset,
       scale](Tape<T>& t, const Tensor<T>& g,
                         const Tensor<T>&) {
        const auto& qv = t.value(q);
        const auto& kv = t.value(k);
        const auto& vv = t.value(v);
        auto* gq = t.grad_slot(q.id);
        auto* gk = t.grad_slot(k.id);
        auto* gv = t.grad_slot(v.id);
        std::vector<T> vt(wkv * sk);
        for (std::size_t j = 0; j < sk; ++j) {
          for (std::size_t c = 0; c < wkv; ++c) vt[c * sk + j] = vv[j * wkv + c];
        }
        std::vector<T> dp(sk), tmp(head_dim);
        for (std::size_t h = 0; h < heads_q; ++h) {
          const std::size_t kvh = h / group;
          for (std::size_t i = 0; i < sq; ++i) {
            const std::size_t n = q_offset + i + 1;
            const T* p = probs->data() + (h * sq + i) * sk;
            const T* go = g.data().data() + i * wq + h * head_dim;
            std::fill(dp.begin(), dp.begin() + n, T{0});
            for (std::size_t d = 0; d < head_dim; ++d) {
              const T gd = go[d];
              const T* vrow = vt.data() + (kvh * head_dim + d) * sk;
              for (std::size_t j = 0; j < n; ++j) dp[j] += gd * vrow[j];
            }
            if (gv) {
              for (std::size_t j = 0; j < n; ++j) {
                T* dst = gv->data().data() + j * wkv + kvh * head_dim;
                for (std::size_t d = 0; d < head_dim; ++d) dst[d] += p[j] * go[d];
              }
            }
            T dot{0};
            for (std::size_t j = 0; j < n; ++j) dot += p[j] * dp[j];
            for (std::size_t j = 0; j < n; ++j) dp[j] = p[j] * (dp[j] - dot) * scale;
            if (gq) {
              std::fill(tmp.begin(), tmp.end(), T{0});
              for (std::size_t j = 0; j < n; ++j) {
                const T* kr = kv.data().data() + j * wkv + kvh * head_dim;
                for (std::size_t d = 0; d < head_dim; ++d) tmp[d] += dp[j] * kr[d];
              }
              T* dst = gq->data().data() + i * wq + h * head_dim;
              for (std::size_t d = 0; d < head_dim; ++d) dst[d] += tmp[d];
            }
            if (gk) {
              const T* qi = qv.data().data() + i * wq + h * head_dim;
              for (std::size_t j = 0; j < n; ++j) {
                T* dst = gk->data().data() + j * wkv + kvh * head_dim;
                for (std::size_t d = 0; d < head_dim; ++d) dst[d] += dp[j] * qi[d];
              }
            }
          }
        }
      });
}

namespace detail {

template <typename T>
void check_targets(std::span<const int> targets, std::size_t rows, std::size_t vocab,
                   std::string_view op) {
  if (targets.size() != rows) {
    throw DimensionError(std::string(op) + ": " + std::to_string(targets.size()) +
                         " targets for " + std::to_string(rows) + " positions");
  }
  for (int tgt : targets) {
    if (tgt < 0 || static_cast<std::size_t>(tgt) >= vocab) {
      throw IndexError(std::string(op) + ": target " + std::to_string(tgt) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
}

template <typename T>
T log_sum_exp(const T* row, std::size_t n) {
  T mx = row[0];
  for (std::size_t c = 1; c < n; ++c) mx = std::max(mx, row[c]);
  T z{0};
  for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
  return mx + std::log(z);
}

}  // namespace detail

/// log softmax(logits[i])[targets[i]] for every row; shape [n].
template <typename T>
Var<T> token_log_probs(Var<T> logits, std::span<const int> targets) {
  const auto& lv = logits.value();
  detail::require_rank2(lv, "token_log_probs");
  const std::size_t rows = lv.extent(0), vocab = lv.extent(1);
  detail::check_targets<T>(targets, rows, vocab, "token_log_probs");
  Tensor<T> out({rows});
  std::vector<T> lse(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* row = lv.data().data() + r * vocab;
    lse[r] = detail::log_sum_exp(row, vocab);
    out[r] = row[targets[r]] - lse[r];
  }
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape->record(
      std::move(out), {logits}, "token_log_probs",
      [logits, vocab, tg = std::move(tg), lse = std::move(lse)](Tape<T>& t,
                                                               const Tensor<T>& g,
                                                               const Tensor<T>&) {
        auto* gl = t.grad_slot(logits.id);
        if (!gl) return;
        const auto& lv = t.value(logits);
        for (std::size_t r = 0; r < tg.size(); ++r) {
          const T* row = lv.data().data() + r * vocab;
          T* dst = gl->data().data() + r * vocab;
          for (std::size_t c = 0; c < vocab; ++c)
            dst[c] -= g[r] * std::exp(row[c] - lse[r]);
          dst[tg[r]] += g[r];
        }
      });
}

/// Mean negative log-likelihood of targets over positions where mask is true.
template <typename T>
Var<T> cross_entropy(Var<T> logits, std::span<const int> targets,
                     const std::vector<bool>& mask) {
  const auto& lv = logits.value();
  detail::require_rank2(lv, "cross_entropy");
  const std::size_t rows = lv.extent(0), vocab = lv.extent(1);
  if (mask.size() != rows) {
    throw DimensionError("cross_entropy: mask length " + std::to_string(mask.size()) +
                         " vs " + std::to_string(rows) + " positions");
  }
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets.size() != rows) break;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab) {
      throw IndexError("cross_entropy: target " + std::to_string(targets[r]) +
                       " outside vocabulary of size " + std::to_string(vocab));
    }
  }
  if (targets.size() != rows) {
    throw DimensionError("cross_entropy: one target per position required");
  }
  if (count == 0) throw ContractError("cross_entropy: no unmasked positions");
  T total{0};
  std::vector<T> lse(rows, T{0});
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* row = lv.data().data() + r * vocab;
    lse[r] = detail::log_sum_exp(row, vocab);
    total += lse[r] - row[targets[r]];
  }
  const T inv_count = T{1} / static_cast<T>(count);
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape->record(
      Tensor<T>(Shape{}, std::vector<T>{total * inv_count}), {logits}, "cross_entropy",
      [logits, vocab, mask, inv_count, tg = std::move(tg), lse = std::move(lse)](
          Tape<T>& t, const Tensor<T>& g, const Tensor<T>&) {
        auto* gl = t.grad_slot(logits.id);
        if (!gl) return;
        const auto& lv = t.value(logits);
        const T scale = g[0] * inv_count;
        for (std::size_t r = 0; r < tg.size(); ++r) {
          if (!mask[r]) continue;
          const T* row = lv.data().data() + r * vocab;
          T* dst = gl->data().data() + r * vocab;
          for (std::size_t c = 0; c < vocab; ++c)
            dst[c] += scale * std::exp(row[c] - lse[r]);
          dst[tg[r]] -= scale;
        }
      });
}

}  // namespace longact::ad
