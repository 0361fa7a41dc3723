#pragma once

// Run configuration: flat `dotted.key = value` text, resolved in the order
// defaults < environment < file < command-line overrides.

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "longact/errors.hpp"
#include "longact/model.hpp"
#include "longact/perturb.hpp"
#include "longact/tasks.hpp"
#include "longact/training.hpp"

namespace longact {

inline constexpr const char* kOutEnv = "LONGACT_OUT";

struct EvalSettings {
  std::size_t max_new_tokens = 64;
  std::size_t every = 0;  // steps between evaluations; 0 = final only
};

// Optional early stop for SFT: every `check_every` steps, greedy accuracy on
// the dev split is measured and training ends once it reaches `target`.
struct SftStop {
  double target = 0.0;  // 0 disables
  std::size_t check_every = 10;
  SeedRange dev{950000, 100};
};

struct PerturbSettings {
  PerturbSpec spec;
  std::size_t calibration_size = 16;
  std::size_t max_new_tokens = 64;
};

struct RunConfig {
  ModelConfig model;
  TrainConfig train;
  TaskConfig task;
  TaskMix mix;
  SplitSeeds splits;
  EvalSettings eval;
  PerturbSettings perturb;
  SftStop sft_stop;
  std::string out_root = "runs";
  std::string run_name;         // empty: derived from the command
  std::string init_checkpoint;  // starting weights for rl/eval/saliency/perturb
  std::string data_dir;         // read splits from here instead of regenerating
  std::size_t checkpoint_every = 0;
  std::uint64_t seed = 0;

  void validate() const {
    model.validate();
    train.validate();
    mix.validate();
    perturb.spec.validate();
    const SeedRange* ranges[] = {&splits.sft, &splits.rl, &splits.eval, &sft_stop.dev};
    for (std::size_t i = 0; i < 4; ++i) {
      for (std::size_t j = i + 1; j < 4; ++j) {
        if (ranges[i]->overlaps(*ranges[j])) throw ConfigError("split seed ranges overlap");
      }
    }
    if (!(sft_stop.target >= 0.0 && sft_stop.target <= 1.0)) {
      throw ConfigError("sft.stop_accuracy must lie in [0, 1]");
    }
    if (sft_stop.target > 0 && (sft_stop.check_every == 0 || sft_stop.dev.count == 0)) {
      throw ConfigError("SFT early stop needs a positive check interval and a non-empty dev split");
    }
    if (out_root.empty()) throw ConfigError("output root must not be empty");
  }
};

namespace detail {

inline std::string trim_copy(std::string_view s) {
  auto ws = [](char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; };
  while (!s.empty() && ws(s.front())) s.remove_prefix(1);
  while (!s.empty() && ws(s.back())) s.remove_suffix(1);
  return std::string(s);
}

template <typename I>
I parse_integer(const std::string& key, const std::string& s) {
  I v{};
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + s + "'");
  }
  return v;
}

inline double parse_real(const std::string& key, const std::string& s) {
  double v = 0;
  auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || !std::isfinite(v)) {
    throw ConfigError(key + ": expected a finite number, got '" + s + "'");
  }
  return v;
}

inline bool parse_bool(const std::string& key, const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError(key + ": expected true or false, got '" + s + "'");
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

template <typename I, typename Member>
Field integer_field(const std::string& key, Member member) {
  return {[member](const RunConfig& c) { return std::to_string(member(c)); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_integer<I>(key, v); }};
}

template <typename Member>
Field real_field(const std::string& key, Member member) {
  return {[member](const RunConfig& c) { return format_real(member(c)); },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_real(key, v); }};
}

template <typename Member>
Field optional_real_field(const std::string& key, Member member) {
  return {[member](const RunConfig& c) {
            const auto& o = member(c);
            return o ? format_real(*o) : std::string("auto");
          },
          [member, key](RunConfig& c, const std::string& v) {
            if (v == "auto") {
              member(c).reset();
            } else {
              member(c) = parse_real(key, v);
            }
          }};
}

template <typename Member>
Field bool_field(const std::string& key, Member member) {
  return {[member](const RunConfig& c) {
            return std::string(member(c) ? "true" : "false");
          },
          [member, key](RunConfig& c, const std::string& v) { member(c) = parse_bool(key, v); }};
}

template <typename Member>
Field string_field(Member member) {
  return {[member](const RunConfig& c) { return member(c); },
          [member](RunConfig& c, const std::string& v) { member(c) = v; }};
}

inline std::string join_layers(const std::vector<std::size_t>& layers) {
  if (layers.empty()) return "all";
  std::string out;
  for (std::size_t i = 0; i < layers.size(); ++i) out += (i ? "," : "") + std::to_string(layers[i]);
  return out;
}

inline std::vector<std::size_t> parse_layers(const std::string& key, const std::string& s) {
  std::vector<std::size_t> out;
  if (s == "all") return out;
  std::istringstream is(s);
  for (std::string part; std::getline(is, part, ',');) {
    out.push_back(parse_integer<std::size_t>(key, trim_copy(part)));
  }
  if (out.empty()) throw ConfigError(key + ": expected 'all' or a comma-separated layer list");
  return out;
}

#define LONGACT_MEMBER(expr) [](auto& c) -> auto& { return c.expr; }

// Keys in the order they are written to resolved config files.
inline const std::vector<std::pair<std::string, Field>>& fields() {
  using Z = std::size_t;
  using U = std::uint64_t;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"run.seed", integer_field<U>("run.seed", LONGACT_MEMBER(seed))},
      {"run.out", string_field(LONGACT_MEMBER(out_root))},
      {"run.name", string_field(LONGACT_MEMBER(run_name))},
      {"run.init", string_field(LONGACT_MEMBER(init_checkpoint))},
      {"run.data_dir", string_field(LONGACT_MEMBER(data_dir))},
      {"run.checkpoint_every", integer_field<Z>("run.checkpoint_every", LONGACT_MEMBER(checkpoint_every))},

      {"model.d_model", integer_field<Z>("model.d_model", LONGACT_MEMBER(model.d_model))},
      {"model.n_layers", integer_field<Z>("model.n_layers", LONGACT_MEMBER(model.n_layers))},
      {"model.heads_q", integer_field<Z>("model.heads_q", LONGACT_MEMBER(model.heads_q))},
      {"model.heads_kv", integer_field<Z>("model.heads_kv", LONGACT_MEMBER(model.heads_kv))},
      {"model.head_dim", integer_field<Z>("model.head_dim", LONGACT_MEMBER(model.head_dim))},
      {"model.mlp_hidden", integer_field<Z>("model.mlp_hidden", LONGACT_MEMBER(model.mlp_hidden))},
      {"model.vocab_size", integer_field<Z>("model.vocab_size", LONGACT_MEMBER(model.vocab_size))},
      {"model.max_seq", integer_field<Z>("model.max_seq", LONGACT_MEMBER(model.max_seq))},
      {"model.rope_base", real_field("model.rope_base", LONGACT_MEMBER(model.rope_base))},

      {"task.context_len", integer_field<Z>("task.context_len", LONGACT_MEMBER(task.context_len))},
      {"task.n_distractors", integer_field<Z>("task.n_distractors", LONGACT_MEMBER(task.n_distractors))},
      {"task.n_common", integer_field<Z>("task.n_common", LONGACT_MEMBER(task.n_common))},
      {"task.chain_len", integer_field<Z>("task.chain_len", LONGACT_MEMBER(task.chain_len))},
      {"task.mix.niah", real_field("task.mix.niah", LONGACT_MEMBER(mix.niah))},
      {"task.mix.common_words", real_field("task.mix.common_words", LONGACT_MEMBER(mix.common_words))},
      {"task.mix.var_tracking", real_field("task.mix.var_tracking", LONGACT_MEMBER(mix.var_tracking))},

      {"split.sft.begin", integer_field<U>("split.sft.begin", LONGACT_MEMBER(splits.sft.begin))},
      {"split.sft.count", integer_field<Z>("split.sft.count", LONGACT_MEMBER(splits.sft.count))},
      {"split.rl.begin", integer_field<U>("split.rl.begin", LONGACT_MEMBER(splits.rl.begin))},
      {"split.rl.count", integer_field<Z>("split.rl.count", LONGACT_MEMBER(splits.rl.count))},
      {"split.eval.begin", integer_field<U>("split.eval.begin", LONGACT_MEMBER(splits.eval.begin))},
      {"split.eval.count", integer_field<Z>("split.eval.count", LONGACT_MEMBER(splits.eval.count))},
      {"split.dev.begin", integer_field<U>("split.dev.begin", LONGACT_MEMBER(sft_stop.dev.begin))},
      {"split.dev.count", integer_field<Z>("split.dev.count", LONGACT_MEMBER(sft_stop.dev.count))},
      {"sft.stop_accuracy", real_field("sft.stop_accuracy", LONGACT_MEMBER(sft_stop.target))},
      {"sft.check_every", integer_field<Z>("sft.check_every", LONGACT_MEMBER(sft_stop.check_every))},

      {"train.algo",
       {[](const RunConfig& c) { return to_string(c.train.algorithm); },
        [](RunConfig& c, const std::string& v) { c.train.algorithm = parse_algorithm(v); }}},
      {"train.policy",
       {[](const RunConfig& c) { return to_string(c.train.selection.kind); },
        [](RunConfig& c, const std::string& v) { c.train.selection.kind = parse_selection_kind(v); }}},
      {"train.lambda", real_field("train.lambda", LONGACT_MEMBER(train.selection.ratio))},
      {"train.group_size", integer_field<Z>("train.group_size", LONGACT_MEMBER(train.group_size))},
      {"train.groups_per_step", integer_field<Z>("train.groups_per_step", LONGACT_MEMBER(train.groups_per_step))},
      {"train.eps_low", optional_real_field("train.eps_low", LONGACT_MEMBER(train.eps_low))},
      {"train.eps_high", optional_real_field("train.eps_high", LONGACT_MEMBER(train.eps_high))},
      {"train.beta", optional_real_field("train.beta", LONGACT_MEMBER(train.beta))},
      {"train.rl_lr", real_field("train.rl_lr", LONGACT_MEMBER(train.rl_lr))},
      {"train.sft_lr", real_field("train.sft_lr", LONGACT_MEMBER(train.sft_lr))},
      {"train.weight_decay", real_field("train.weight_decay", LONGACT_MEMBER(train.weight_decay))},
      {"train.grad_clip", real_field("train.grad_clip", LONGACT_MEMBER(train.grad_clip))},
      {"train.sft_batch", integer_field<Z>("train.sft_batch", LONGACT_MEMBER(train.sft_batch))},
      {"train.sft_steps", integer_field<Z>("train.sft_steps", LONGACT_MEMBER(train.sft_steps))},
      {"train.rl_steps", integer_field<Z>("train.rl_steps", LONGACT_MEMBER(train.rl_steps))},
      {"train.max_new_tokens", integer_field<Z>("train.max_new_tokens", LONGACT_MEMBER(train.max_new_tokens))},
      {"train.temperature", real_field("train.temperature", LONGACT_MEMBER(train.temperature))},
      {"train.sync_interval", integer_field<Z>("train.sync_interval", LONGACT_MEMBER(train.sync_interval))},
      {"train.token_level_loss", bool_field("train.token_level_loss", LONGACT_MEMBER(train.token_level_loss))},
      {"train.calibration_size", integer_field<Z>("train.calibration_size", LONGACT_MEMBER(train.calibration_size))},
      {"train.mask_refresh_every", integer_field<Z>("train.mask_refresh_every", LONGACT_MEMBER(train.mask_refresh_every))},

      {"eval.max_new_tokens", integer_field<Z>("eval.max_new_tokens", LONGACT_MEMBER(eval.max_new_tokens))},
      {"eval.every", integer_field<Z>("eval.every", LONGACT_MEMBER(eval.every))},

      {"perturb.target",
       {[](const RunConfig& c) { return to_string(c.perturb.spec.target); },
        [](RunConfig& c, const std::string& v) { c.perturb.spec.target = parse_perturb_target(v); }}},
      {"perturb.fraction", real_field("perturb.fraction", LONGACT_MEMBER(perturb.spec.fraction))},
      {"perturb.layers",
       {[](const RunConfig& c) { return join_layers(c.perturb.spec.layers); },
        [](RunConfig& c, const std::string& v) { c.perturb.spec.layers = parse_layers("perturb.layers", v); }}},
      {"perturb.mean_scope",
       {[](const RunConfig& c) { return to_string(c.perturb.spec.scope); },
        [](RunConfig& c, const std::string& v) { c.perturb.spec.scope = parse_mean_scope(v); }}},
      {"perturb.calibration_size", integer_field<Z>("perturb.calibration_size", LONGACT_MEMBER(perturb.calibration_size))},
      {"perturb.max_new_tokens", integer_field<Z>("perturb.max_new_tokens", LONGACT_MEMBER(perturb.max_new_tokens))},
  };
  return table;
}

#undef LONGACT_MEMBER

inline const Field& field(const std::string& key) {
  for (const auto& [k, f] : fields()) {
    if (k == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace detail

inline std::vector<std::string> config_keys() {
  std::vector<std::string> out;
  for (const auto& [k, f] : detail::fields()) out.push_back(k);
  return out;
}

inline void set_value(RunConfig& cfg, const std::string& key, const std::string& value) {
  detail::field(key).set(cfg, value);
}

inline std::string get_value(const RunConfig& cfg, const std::string& key) {
  return detail::field(key).get(cfg);
}

/// Applies `key = value` lines; '#' starts a comment.
inline void apply_config_text(RunConfig& cfg, std::istream& is, const std::string& source) {
  std::string line;
  for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    const auto text = detail::trim_copy(line);
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    const auto key = detail::trim_copy(std::string_view(text).substr(0, eq));
    const auto value = detail::trim_copy(std::string_view(text).substr(eq + 1));
    try {
      set_value(cfg, key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

inline void apply_config_file(RunConfig& cfg, const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config file " + path.string());
  apply_config_text(cfg, is, path.string());
}

inline std::string render_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [k, f] : detail::fields()) out += k + " = " + f.get(cfg) + "\n";
  return out;
}

inline void write_resolved_config(const RunConfig& cfg, const std::filesystem::path& path) {
  ensure_parent_dir(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  os << render_config(cfg);
  if (!os) throw IoError("write failed: " + path.string());
}

using Overrides = std::vector<std::pair<std::string, std::string>>;

/// Defaults, then LONGACT_OUT, then the optional file, then overrides.
inline RunConfig resolve_config(const std::optional<std::filesystem::path>& file,
                                const Overrides& overrides) {
  RunConfig cfg;
  if (const char* env = std::getenv(kOutEnv); env && *env) cfg.out_root = env;
  if (file) apply_config_file(cfg, *file);
  for (const auto& [k, v] : overrides) set_value(cfg, k, v);
  cfg.validate();
  return cfg;
}

}  // namespace longact
