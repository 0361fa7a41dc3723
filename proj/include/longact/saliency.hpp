#pragma once

// Activation magnitudes, per-head dimension selection and row masks for the
// query/key projections.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "longact/errors.hpp"
#include "longact/log.hpp"
#include "longact/model.hpp"
#include "longact/tensor.hpp"

namespace longact {

/// Mean over calibration items of the sequence-axis l2 norm, shaped [H x D].
struct MagnitudeMatrix {
  std::size_t layer = 0;
  Projection projection = Projection::Q;
  Tensor<double> values;
  std::size_t batch_count = 0;

  std::size_t heads() const { return values.extent(0); }
  std::size_t head_dim() const { return values.extent(1); }
  double at(std::size_t h, std::size_t d) const { return values.at(h, d); }
};

enum class SelectionKind { massive, min, random };

inline std::string to_string(SelectionKind k) {
  switch (k) {
    case SelectionKind::massive: return "massive";
    case SelectionKind::min: return "min";
    case SelectionKind::random: return "random";
  }
  return "?";
}

inline SelectionKind parse_selection_kind(const std::string& s) {
  if (s == "massive") return SelectionKind::massive;
  if (s == "min") return SelectionKind::min;
  if (s == "random") return SelectionKind::random;
  throw ConfigError("unknown selection policy '" + s + "' (expected massive, min or random)");
}

struct SelectionPolicy {
  SelectionKind kind = SelectionKind::massive;
  double ratio = 0.3;  // fraction of each head's dimensions kept trainable
  std::uint64_t seed = 0;

  void validate() const {
    if (!(ratio >= 0.0 && ratio <= 1.0)) {
      throw ConfigError("sparsity ratio must lie in [0, 1], got " + std::to_string(ratio));
    }
  }
};

/// Dimensions kept per head: floor(ratio * D).
inline std::size_t dims_per_head(double ratio, std::size_t head_dim) {
  // the small slack keeps e.g. 0.7 * 10 from flooring to 6
  return static_cast<std::size_t>(std::floor(ratio * static_cast<double>(head_dim) + 1e-9));
}

inline std::size_t row_index(std::size_t head, std::size_t dim, std::size_t head_dim,
                             std::size_t heads = std::numeric_limits<std::size_t>::max()) {
  if (dim >= head_dim || head >= heads) {
    throw IndexError("row_index: (head " + std::to_string(head) + ", dim " + std::to_string(dim) +
                     ") outside " + std::to_string(heads) + " x " + std::to_string(head_dim));
  }
  return head * head_dim + dim;
}

/// Binary row flags over a projection weight of shape [H*D x d_model].
struct GradientMask {
  std::size_t layer = 0;
  Projection projection = Projection::Q;
  std::size_t head_dim = 0;
  std::vector<bool> row_flags;
  std::vector<std::vector<std::size_t>> selected;  // per head, ascending

  std::size_t count() const {
    return static_cast<std::size_t>(std::count(row_flags.begin(), row_flags.end(), true));
  }

  static GradientMask all(std::size_t layer, Projection p, std::size_t heads,
                          std::size_t head_dim, bool value) {
    GradientMask m{layer, p, head_dim, std::vector<bool>(heads * head_dim, value), {}};
    m.selected.resize(heads);
    if (value) {
      for (auto& s : m.selected) {
        s.resize(head_dim);
        std::iota(s.begin(), s.end(), std::size_t{0});
      }
    }
    return m;
  }
};

template <typename T>
MagnitudeMatrix compute_magnitude(std::span<const ActivationTrace<T>> traces, std::size_t layer,
                                  Projection projection) {
  if (traces.empty()) throw ArgumentError("compute_magnitude: no traces");
  if (layer >= traces[0].layers.size()) {
    throw IndexError("compute_magnitude: layer " + std::to_string(layer) + " out of range");
  }
  const auto& first = traces[0].layers[layer].get(projection);
  const std::size_t H = first.extent(1), D = first.extent(2);
  MagnitudeMatrix m{layer, projection, Tensor<double>({H, D}), traces.size()};
  std::vector<double> sq(H * D);
  for (const auto& tr : traces) {
    if (layer >= tr.layers.size()) throw DimensionError("compute_magnitude: ragged traces");
    const auto& x = tr.layers[layer].get(projection);
    if (x.rank() != 3 || x.extent(1) != H || x.extent(2) != D) {
      throw DimensionError("compute_magnitude: trace shape " + shape_str(x.shape()) +
                           " inconsistent with [S x " + std::to_string(H) + " x " +
                           std::to_string(D) + "]");
    }
    std::fill(sq.begin(), sq.end(), 0.0);
    const std::size_t S = x.extent(0);
    for (std::size_t s = 0; s < S; ++s) {
      for (std::size_t j = 0; j < H * D; ++j) {
        const double v = static_cast<double>(x[s * H * D + j]);
        sq[j] += v * v;
      }
    }
    for (std::size_t j = 0; j < H * D; ++j) m.values[j] += std::sqrt(sq[j]);
  }
  for (auto& v : m.values.values()) v /= static_cast<double>(traces.size());
  return m;
}

namespace detail {

// Deterministic per-(layer, projection) stream for the random policy.
inline std::uint64_t selection_stream_seed(std::uint64_t seed, std::size_t layer,
                                           Projection p) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(layer), static_cast<std::uint32_t>(p)};
  std::uint32_t words[2];
  seq.generate(words, words + 2);
  return (std::uint64_t{words[0]} << 32) | words[1];
}

}  // namespace detail

/// Per-head trainable dimension sets, each sorted ascending.
inline std::vector<std::vector<std::size_t>> select_dims(const MagnitudeMatrix& m,
                                                         const SelectionPolicy& policy) {
  policy.validate();
  const std::size_t H = m.heads(), D = m.head_dim();
  const std::size_t k = dims_per_head(policy.ratio, D);
  std::vector<std::vector<std::size_t>> out(H);
  std::mt19937_64 rng(detail::selection_stream_seed(policy.seed, m.layer, m.projection));
  for (std::size_t h = 0; h < H; ++h) {
    std::vector<std::size_t> idx(D);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    switch (policy.kind) {
      case SelectionKind::massive:
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return m.at(h, a) > m.at(h, b); });
        break;
      case SelectionKind::min:
        std::stable_sort(idx.begin(), idx.end(),
                         [&](std::size_t a, std::size_t b) { return m.at(h, a) < m.at(h, b); });
        break;
      case SelectionKind::random:
        // partial Fisher-Yates: the first k slots become a uniform k-subset
        for (std::size_t i = 0; i < k; ++i) {
          std::uniform_int_distribution<std::size_t> pick(i, D - 1);
          std::swap(idx[i], idx[pick(rng)]);
        }
        break;
    }
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    out[h] = std::move(idx);
  }
  return out;
}

inline GradientMask build_mask(const MagnitudeMatrix& m, const SelectionPolicy& policy) {
  const std::size_t H = m.heads(), D = m.head_dim();
  if (dims_per_head(policy.ratio, D) == 0) {
    warn("sparsity ratio " + std::to_string(policy.ratio) + " keeps no dimensions; layer " +
         std::to_string(m.layer) + " " + to_string(m.projection) + " projection is frozen");
  }
  GradientMask mask{m.layer, m.projection, D, std::vector<bool>(H * D, false),
                    select_dims(m, policy)};
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t d : mask.selected[h]) mask.row_flags[row_index(h, d, D, H)] = true;
  }
  return mask;
}

/// Zeroes gradient rows whose flag is false; kept rows are untouched.
template <typename T>
void apply_mask_inplace(Tensor<T>& grad, const GradientMask& mask) {
  if (grad.rank() != 2 || grad.rows() != mask.row_flags.size()) {
    throw DimensionError("apply_mask: gradient " + shape_str(grad.shape()) + " vs mask of " +
                         std::to_string(mask.row_flags.size()) + " rows");
  }
  const std::size_t cols = grad.cols();
  for (std::size_t r = 0; r < grad.rows(); ++r) {
    if (!mask.row_flags[r]) std::fill_n(grad.values().begin() + r * cols, cols, T{0});
  }
}

template <typename T>
Tensor<T> apply_mask(Tensor<T> grad, const GradientMask& mask) {
  apply_mask_inplace(grad, mask);
  return grad;
}

/// Q and K masks for every layer.
struct MaskSet {
  std::vector<GradientMask> q;
  std::vector<GradientMask> k;

  const GradientMask& get(std::size_t layer, Projection p) const {
    if (p == Projection::V) throw ArgumentError("value projections are never masked");
    return p == Projection::Q ? q.at(layer) : k.at(layer);
  }
  std::size_t trainable_rows() const {
    std::size_t n = 0;
    for (const auto& m : q) n += m.count();
    for (const auto& m : k) n += m.count();
    return n;
  }
};

template <typename T>
std::vector<ActivationTrace<T>> capture_traces(const ModelParams<T>& params,
                                               std::span<const std::vector<int>> sequences,
                                               bool post_rotary = false) {
  std::vector<ActivationTrace<T>> traces;
  traces.reserve(sequences.size());
  for (const auto& seq : sequences) {
    std::vector<std::vector<int>> one{seq};
    auto r = forward(params, std::span<const std::vector<int>>(one), true, post_rotary);
    traces.push_back(std::move(r.traces.front()));
  }
  return traces;
}

/// Builds Q/K masks for all layers from calibration traces.
template <typename T>
MaskSet build_masks(std::span<const ActivationTrace<T>> traces, const SelectionPolicy& policy) {
  if (traces.empty()) throw ArgumentError("build_masks: no calibration traces");
  MaskSet set;
  for (std::size_t l = 0; l < traces[0].layers.size(); ++l) {
    set.q.push_back(build_mask(compute_magnitude(traces, l, Projection::Q), policy));
    set.k.push_back(build_mask(compute_magnitude(traces, l, Projection::K), policy));
  }
  return set;
}

enum class SaliencyAxis { head_dim, sequence };

namespace detail {

inline void write_grid(const std::filesystem::path& path, const std::string& column_prefix,
                       const Tensor<double>& grid) {
  ensure_parent_dir(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os.precision(std::numeric_limits<double>::max_digits10);
  os << "head";
  for (std::size_t c = 0; c < grid.cols(); ++c) os << ',' << column_prefix << c;
  os << '\n';
  for (std::size_t r = 0; r < grid.rows(); ++r) {
    os << r;
    for (std::size_t c = 0; c < grid.cols(); ++c) os << ',' << grid.at(r, c);
    os << '\n';
  }
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace detail

/// Writes the [H x D] magnitude grid as CSV (header row of dims, head index first).
inline void dump_saliency(const MagnitudeMatrix& m, const std::filesystem::path& path) {
  detail::write_grid(path, "d", m.values);
}

/// Per-position l2 norms of one traced sequence: [H x S], norm taken over each
/// head's D features.
template <typename T>
Tensor<double> sequence_norms(const ActivationTrace<T>& trace, std::size_t layer, Projection p) {
  const auto& x = trace.layers.at(layer).get(p);
  const std::size_t S = x.extent(0), H = x.extent(1), D = x.extent(2);
  Tensor<double> out({H, S});
  for (std::size_t s = 0; s < S; ++s) {
    for (std::size_t h = 0; h < H; ++h) {
      double acc = 0;
      for (std::size_t d = 0; d < D; ++d) {
        const double v = static_cast<double>(x[(s * H + h) * D + d]);
        acc += v * v;
      }
      out.at(h, s) = std::sqrt(acc);
    }
  }
  return out;
}

template <typename T>
void dump_saliency(const ActivationTrace<T>& trace, std::size_t layer, Projection p,
                   SaliencyAxis axis, const std::filesystem::path& path) {
  if (axis == SaliencyAxis::sequence) {
    detail::write_grid(path, "s", sequence_norms(trace, layer, p));
  } else {
    std::vector<ActivationTrace<T>> one{trace};
    dump_saliency(compute_magnitude(std::span<const ActivationTrace<T>>(one), layer, p), path);
  }
}

/// Reads a grid written by dump_saliency back as [rows x cols].
inline Tensor<double> load_saliency_csv(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open " + path.string());
  std::string line;
  if (!std::getline(is, line)) throw IoError("empty saliency file " + path.string());
  const std::size_t cols = static_cast<std::size_t>(std::count(line.begin(), line.end(), ','));
  std::vector<double> values;
  std::size_t rows = 0;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::stringstream ss(line);
    std::string cell;
    std::getline(ss, cell, ',');  // head index
    std::size_t n = 0;
    while (std::getline(ss, cell, ',')) {
      try {
        values.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError("bad value '" + cell + "' in " + path.string());
      }
      ++n;
    }
    if (n != cols) throw IoError("ragged row in " + path.string());
    ++rows;
  }
  return Tensor<double>({rows, cols}, std::move(values));
}

}  // namespace longact
