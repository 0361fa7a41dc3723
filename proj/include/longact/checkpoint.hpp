#pragma once

// Binary checkpoint container.
//
//   magic    "LACTCKPT"                      8 bytes
//   version  u32 (kCheckpointVersion)
//   dtype    u32 (4 = float32, 8 = float64)
//   config   u64 x 8 (d_model n_layers heads_q heads_kv head_dim mlp_hidden
//            vocab_size max_seq), f64 rope_base
//   count    u32
//   tensors  count x { u32 name_len, name, u32 rank, u64 x rank extents,
//                      raw little-endian values }
//
// Values are written verbatim, so save -> load is bit-exact.

#include <array>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <string>
#include <type_traits>
#include <vector>

#include "longact/errors.hpp"
#include "longact/model.hpp"

namespace longact {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::array<char, 8> kCheckpointMagic = {'L', 'A', 'C', 'T',
                                                          'C', 'K', 'P', 'T'};

namespace detail {

template <typename V>
void write_pod(std::ostream& os, const V& v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::istream& is) {
  V v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!is) throw IoError("checkpoint: unexpected end of file");
  return v;
}

}  // namespace detail

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::filesystem::path& path) {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  ensure_parent_dir(path);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open checkpoint for writing: " + path.string());
  os.write(kCheckpointMagic.data(), kCheckpointMagic.size());
  detail::write_pod(os, kCheckpointVersion);
  detail::write_pod(os, static_cast<std::uint32_t>(sizeof(T)));
  const auto& c = params.config;
  for (std::size_t v : {c.d_model, c.n_layers, c.heads_q, c.heads_kv, c.head_dim,
                        c.mlp_hidden, c.vocab_size, c.max_seq}) {
    detail::write_pod(os, static_cast<std::uint64_t>(v));
  }
  detail::write_pod(os, c.rope_base);
  detail::write_pod(os, static_cast<std::uint32_t>(params.tensor_count()));
  params.for_each([&](const std::string& name, const Tensor<T>& t) {
    detail::write_pod(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    detail::write_pod(os, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) detail::write_pod(os, static_cast<std::uint64_t>(e));
    os.write(reinterpret_cast<const char*>(t.data().data()),
             static_cast<std::streamsize>(t.size() * sizeof(T)));
  });
  if (!os) throw IoError("failed writing checkpoint: " + path.string());
}

/// Loads a checkpoint, converting the stored precision to T if needed.
template <typename T>
ModelParams<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint: " + path.string());
  std::array<char, 8> magic{};
  is.read(magic.data(), magic.size());
  if (!is || magic != kCheckpointMagic) throw IoError("not a checkpoint file: " + path.string());
  const auto version = detail::read_pod<std::uint32_t>(is);
  if (version != kCheckpointVersion) {
    throw IoError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto width = detail::read_pod<std::uint32_t>(is);
  if (width != 4 && width != 8) throw IoError("checkpoint: unknown value width");
  ModelConfig c;
  std::size_t* fields[] = {&c.d_model,  &c.n_layers,   &c.heads_q,    &c.heads_kv,
                           &c.head_dim, &c.mlp_hidden, &c.vocab_size, &c.max_seq};
  for (auto* f : fields) *f = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
  c.rope_base = detail::read_pod<double>(is);
  c.validate();

  ModelParams<T> params = init_params<T>(c, 0);
  const auto count = detail::read_pod<std::uint32_t>(is);
  if (count != params.tensor_count()) throw IoError("checkpoint: tensor count mismatch");
  params.for_each([&](const std::string& name, Tensor<T>& t) {
    const auto len = detail::read_pod<std::uint32_t>(is);
    std::string stored(len, '\0');
    is.read(stored.data(), len);
    if (!is || stored != name) {
      throw IoError("checkpoint: expected tensor '" + name + "', found '" + stored + "'");
    }
    const auto rank = detail::read_pod<std::uint32_t>(is);
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(detail::read_pod<std::uint64_t>(is));
    if (shape != t.shape()) {
      throw IoError("checkpoint: tensor '" + name + "' has shape " + shape_str(shape) +
                    ", config expects " + shape_str(t.shape()));
    }
    if (width == sizeof(T)) {
      is.read(reinterpret_cast<char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(T)));
    } else if (width == 4) {
      std::vector<float> raw(t.size());
      is.read(reinterpret_cast<char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(float)));
      std::copy(raw.begin(), raw.end(), t.values().begin());
    } else {
      std::vector<double> raw(t.size());
      is.read(reinterpret_cast<char*>(raw.data()),
              static_cast<std::streamsize>(raw.size() * sizeof(double)));
      for (std::size_t i = 0; i < raw.size(); ++i) t[i] = static_cast<T>(raw[i]);
    }
    if (!is) throw IoError("checkpoint: truncated tensor '" + name + "'");
  });
  return params;
}

}  // namespace longact
