#pragma once

// Configured commands: gen, sft, rl, eval, saliency, perturb. Each writes
// <out>/<run-name>/{config.resolved, metrics.jsonl, checkpoints/, reports/}.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "longact/checkpoint.hpp"
#include "longact/config.hpp"
#include "longact/errors.hpp"
#include "longact/optimizer.hpp"
#include "longact/perturb.hpp"
#include "longact/saliency.hpp"
#include "longact/tasks.hpp"
#include "longact/training.hpp"

namespace longact {

using Real = float;  // parameter precision of pipeline runs

struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.resolved"; }
  std::filesystem::path metrics() const { return root / "metrics.jsonl"; }
  std::filesystem::path checkpoints() const { return root / "checkpoints"; }
  std::filesystem::path final_checkpoint() const { return checkpoints() / "final.ckpt"; }
  std::filesystem::path reports() const { return root / "reports"; }
  std::filesystem::path data() const { return root / "data"; }
};

inline std::string default_run_name(const std::string& command, const RunConfig& cfg) {
  if (command != "rl") return command;
  std::ostringstream os;
  os << "rl-" << to_string(cfg.train.algorithm);
  if (uses_masks(cfg.train.algorithm)) {
    os << '-' << to_string(cfg.train.selection.kind) << '-' << cfg.train.selection.ratio;
  }
  os << "-s" << cfg.seed;
  return os.str();
}

/// Creates the run directory and writes the resolved config.
inline RunPaths begin_run(RunConfig& cfg, const std::string& command) {
  cfg.validate();
  if (cfg.run_name.empty()) cfg.run_name = default_run_name(command, cfg);
  RunPaths paths{std::filesystem::path(cfg.out_root) / cfg.run_name};
  std::error_code ec;
  std::filesystem::create_directories(paths.checkpoints(), ec);
  if (!ec) std::filesystem::create_directories(paths.reports(), ec);
  if (ec) throw IoError("cannot create run directory " + paths.root.string() + ": " + ec.message());
  write_resolved_config(cfg, paths.config());
  return paths;
}

/// Truncates on open; one JSON object per line.
class MetricsLog {
 public:
  explicit MetricsLog(const std::filesystem::path& path) : path_(path), os_(path, std::ios::trunc) {
    if (!os_) throw IoError("cannot write " + path.string());
  }
  void write(const nlohmann::ordered_json& row) {
    os_ << row.dump() << '\n';
    os_.flush();
    if (!os_) throw IoError("write failed: " + path_.string());
  }

 private:
  std::filesystem::path path_;
  std::ofstream os_;
};

inline nlohmann::ordered_json to_json(const StepMetrics& m) {
  nlohmann::ordered_json j;
  j["step"] = m.step;
  j["mean_reward"] = m.mean_reward;
  j["objective"] = m.objective;
  j["clip_frac"] = m.clip_frac;
  j["grad_norm_qk"] = m.grad_norm_qk;
  j["grad_norm_other"] = m.grad_norm_other;
  if (m.eval_acc) j["eval_acc"] = *m.eval_acc;
  return j;
}

inline nlohmann::ordered_json to_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["accuracy"] = r.accuracy;
  j["mean_reward"] = r.mean_reward;
  j["collapse_rate"] = r.collapse_rate;
  j["count"] = r.count;
  j["correct"] = static_cast<std::size_t>(std::count(r.correct.begin(), r.correct.end(), true));
  return j;
}

inline Datasets load_datasets(const RunConfig& cfg) {
  if (cfg.data_dir.empty()) return make_splits(cfg.splits, cfg.mix, cfg.task);
  const std::filesystem::path dir(cfg.data_dir);
  return {read_dataset(dir / "sft.jsonl"), read_dataset(dir / "rl.jsonl"),
          read_dataset(dir / "eval.jsonl")};
}

inline ModelParams<Real> load_init(const RunConfig& cfg, const std::string& command) {
  if (cfg.init_checkpoint.empty()) {
    throw ConfigError(command + " needs a starting checkpoint (run.init)");
  }
  auto params = load_checkpoint<Real>(cfg.init_checkpoint);
  if (!(params.config == cfg.model)) {
    throw ConfigError("checkpoint " + cfg.init_checkpoint + " does not match the configured model");
  }
  return params;
}

inline EvalOptions eval_options(const RunConfig& cfg) {
  EvalOptions o;
  o.max_new_tokens = cfg.eval.max_new_tokens;
  o.seed = cfg.seed;
  return o;
}

inline void write_eval_report(const EvalResult& r, std::span<const TaskInstance> set,
                              const std::filesystem::path& dir) {
  {
    std::ofstream os(dir / "eval.json");
    os << to_json(r).dump(2) << '\n';
    if (!os) throw IoError("cannot write " + (dir / "eval.json").string());
  }
  std::ofstream os(dir / "eval_outputs.jsonl");
  const auto& v = Vocab::standard();
  for (std::size_t i = 0; i < r.outputs.size(); ++i) {
    nlohmann::ordered_json j;
    j["seed"] = set[i].seed;
    j["answer"] = set[i].answer;
    j["output"] = v.decode(r.outputs[i]);
    j["correct"] = static_cast<bool>(r.correct[i]);
    os << j.dump() << '\n';
  }
  if (!os) throw IoError("cannot write " + (dir / "eval_outputs.jsonl").string());
}

inline void require_finite(double v, const std::string& what, std::size_t step) {
  if (!std::isfinite(v)) {
    throw NumericError(what + " became non-finite at step " + std::to_string(step));
  }
}

// ------------------------------------------------------------------- commands

struct GenResult {
  RunPaths paths;
  Datasets data;
};

inline GenResult cmd_gen(RunConfig cfg) {
  auto paths = begin_run(cfg, "gen");
  auto data = make_splits(cfg.splits, cfg.mix, cfg.task);
  write_dataset(data.sft, paths.data() / "sft.jsonl", true);
  write_dataset(data.rl, paths.data() / "rl.jsonl", false);
  write_dataset(data.eval, paths.data() / "eval.jsonl", false);
  return {paths, std::move(data)};
}

struct TrainResult {
  RunPaths paths;
  EvalResult eval;
  std::vector<StepMetrics> steps;
};

struct SftResult {
  RunPaths paths;
  EvalResult eval;
  std::size_t steps = 0;  // steps actually taken
  std::optional<double> dev_accuracy;  // at the stop point, when early stop is on
};

inline SftResult cmd_sft(RunConfig cfg) {
  auto paths = begin_run(cfg, "sft");
  const auto data = load_datasets(cfg);
  if (data.sft.empty()) throw ConfigError("SFT split is empty");
  if (cfg.train.sft_batch == 0) throw ConfigError("train.sft_batch must be positive");
  std::vector<TaskInstance> dev;
  if (cfg.sft_stop.target > 0) dev = make_split(cfg.sft_stop.dev, cfg.mix, cfg.task);
  auto params = init_params<Real>(cfg.model, cfg.seed);
  Adam<Real> opt(params, AdamConfig{cfg.train.sft_lr, 0.9, 0.999, 1e-8, cfg.train.weight_decay});
  MetricsLog log(paths.metrics());

  SftResult result{paths, {}, 0, std::nullopt};
  std::vector<std::size_t> order(data.sft.size());
  std::size_t cursor = order.size(), epoch = 0;
  std::vector<SftExample> batch;
  for (std::size_t step = 1; step <= cfg.train.sft_steps; ++step) {
    batch.clear();
    while (batch.size() < cfg.train.sft_batch) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 rng(derive_seed({cfg.seed, 0x5f7ULL, epoch++}));
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(sft_example(data.sft[order[cursor++]]));
    }
    const double loss = sft_step(params, opt, std::span<const SftExample>(batch), cfg.train.grad_clip);
    require_finite(loss, "SFT loss", step);
    result.steps = step;
    nlohmann::ordered_json row;
    row["step"] = step;
    row["loss"] = loss;
    bool stop = false;
    if (!dev.empty() && step % cfg.sft_stop.check_every == 0) {
      const double acc = evaluate(params, std::span<const TaskInstance>(dev), eval_options(cfg)).accuracy;
      row["dev_acc"] = acc;
      result.dev_accuracy = acc;
      stop = acc >= cfg.sft_stop.target;
    }
    if (cfg.eval.every && step % cfg.eval.every == 0 && step != cfg.train.sft_steps && !stop) {
      row["eval_acc"] = evaluate(params, std::span<const TaskInstance>(data.eval), eval_options(cfg)).accuracy;
    }
    log.write(row);
    if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0) {
      save_checkpoint(params, paths.checkpoints() / ("step_" + std::to_string(step) + ".ckpt"));
    }
    if (stop) break;
  }
  save_checkpoint(params, paths.final_checkpoint());
  result.eval = evaluate(params, std::span<const TaskInstance>(data.eval), eval_options(cfg));
  write_eval_report(result.eval, data.eval, paths.reports());
  return result;
}

/// Masks from the current weights on the first calibration_size RL prompts.
inline MaskSet calibrate_masks(const ModelParams<Real>& params, std::span<const TaskInstance> rl,
                               const TrainConfig& train, std::uint64_t seed) {
  const std::size_t n = std::min(train.calibration_size, rl.size());
  if (n == 0) throw ConfigError("mask calibration needs at least one RL instance");
  std::vector<std::vector<int>> prompts;
  for (std::size_t i = 0; i < n; ++i) prompts.push_back(rl[i].prompt());
  auto traces = capture_traces(params, std::span<const std::vector<int>>(prompts));
  SelectionPolicy policy = train.selection;
  policy.seed = seed;
  return build_masks(std::span<const ActivationTrace<Real>>(traces), policy);
}

inline TrainResult cmd_rl(RunConfig cfg) {
  auto paths = begin_run(cfg, "rl");
  const auto data = load_datasets(cfg);
  if (data.rl.empty()) throw ConfigError("RL split is empty");
  const TrainConfig& tc = cfg.train;
  auto params = load_init(cfg, "rl");
  std::optional<ModelParams<Real>> ref;
  if (tc.resolved_beta() > 0) ref = params;
  std::optional<MaskSet> masks;
  if (uses_masks(tc.algorithm)) masks = calibrate_masks(params, data.rl, tc, cfg.seed);
  if (masks) {
    std::ofstream os(paths.reports() / "masks.json");
    nlohmann::ordered_json j;
    for (const auto* set : {&masks->q, &masks->k}) {
      for (const auto& m : *set) {
        std::vector<std::size_t> rows;
        for (std::size_t r = 0; r < m.row_flags.size(); ++r) {
          if (m.row_flags[r]) rows.push_back(r);
        }
        j[std::to_string(m.layer) + "." + to_string(m.projection)] = rows;
      }
    }
    os << j.dump() << '\n';
  }

  Adam<Real> opt(params, AdamConfig{tc.rl_lr, 0.9, 0.999, 1e-8, tc.weight_decay});
  std::optional<ModelParams<Real>> old;  // lagging rollout policy when sync_interval > 1
  if (tc.sync_interval > 1) old = sync_old_policy(params);
  MetricsLog log(paths.metrics());

  std::vector<std::size_t> order(data.rl.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  {
    std::mt19937_64 rng(derive_seed({cfg.seed, 0x71ULL}));
    std::shuffle(order.begin(), order.end(), rng);
  }
  std::size_t cursor = 0;
  TrainResult result{paths, {}, {}};
  for (std::size_t step = 1; step <= tc.rl_steps; ++step) {
    if (masks && tc.mask_refresh_every && step > 1 && (step - 1) % tc.mask_refresh_every == 0) {
      masks = calibrate_masks(params, data.rl, tc, cfg.seed);
    }
    const auto& rollout_policy = old ? *old : params;
    std::vector<RolloutGroup<Real>> groups;
    for (std::size_t g = 0; g < tc.groups_per_step; ++g) {
      const std::size_t idx = order[cursor++ % order.size()];
      auto group = collect_group(rollout_policy, data.rl[idx], idx, tc,
                                 derive_seed({cfg.seed, step, g}));
      if (old) attach_old_log_probs(*old, group);
      groups.push_back(std::move(group));
    }
    auto m = rl_step(params, opt, masks ? &*masks : nullptr, std::move(groups), tc,
                     ref ? &*ref : nullptr);
    m.step = step;
    require_finite(m.objective, "RL objective", step);
    require_finite(m.grad_norm_qk + m.grad_norm_other, "gradient norm", step);
    if (old && step % tc.sync_interval == 0) old = sync_old_policy(params);
    if (cfg.eval.every && step % cfg.eval.every == 0 && step != tc.rl_steps) {
      m.eval_acc = evaluate(params, std::span<const TaskInstance>(data.eval), eval_options(cfg)).accuracy;
    }
    if (cfg.checkpoint_every && step % cfg.checkpoint_every == 0) {
      save_checkpoint(params, paths.checkpoints() / ("step_" + std::to_string(step) + ".ckpt"));
    }
    if (step == tc.rl_steps) {
      result.eval = evaluate(params, std::span<const TaskInstance>(data.eval), eval_options(cfg));
      m.eval_acc = result.eval.accuracy;
    }
    log.write(to_json(m));
    result.steps.push_back(m);
  }
  save_checkpoint(params, paths.final_checkpoint());
  if (tc.rl_steps == 0) {
    result.eval = evaluate(params, std::span<const TaskInstance>(data.eval), eval_options(cfg));
  }
  write_eval_report(result.eval, data.eval, paths.reports());
  return result;
}

inline TrainResult cmd_eval(RunConfig cfg) {
  auto paths = begin_run(cfg, "eval");
  const auto data = load_datasets(cfg);
  const auto params = load_init(cfg, "eval");
  auto result = evaluate(params, std::span<const TaskInstance>(data.eval), eval_options(cfg));
  write_eval_report(result, data.eval, paths.reports());
  MetricsLog(paths.metrics()).write(to_json(result));
  return {paths, std::move(result), {}};
}

/// Parses "a,b,c;d,e,f" into an [H x D] magnitude matrix.
inline MagnitudeMatrix parse_magnitude_matrix(const std::string& text) {
  std::vector<std::vector<double>> rows;
  std::istringstream rs(text);
  for (std::string row; std::getline(rs, row, ';');) {
    std::vector<double> vals;
    std::istringstream cs(row);
    for (std::string cell; std::getline(cs, cell, ',');) {
      vals.push_back(detail::parse_real("matrix", detail::trim_copy(cell)));
    }
    if (vals.empty()) throw ConfigError("matrix: empty row");
    if (!rows.empty() && vals.size() != rows[0].size()) throw ConfigError("matrix: ragged rows");
    rows.push_back(std::move(vals));
  }
  if (rows.empty()) throw ConfigError("matrix: no rows");
  MagnitudeMatrix m{0, Projection::Q, Tensor<double>({rows.size(), rows[0].size()}), 1};
  for (std::size_t h = 0; h < rows.size(); ++h) {
    for (std::size_t d = 0; d < rows[h].size(); ++d) m.values[h * rows[0].size() + d] = rows[h][d];
  }
  return m;
}

struct SaliencyResult {
  RunPaths paths;
  std::vector<std::filesystem::path> files;
};

/// With `matrix`, dumps that matrix and its mask; otherwise dumps the
/// calibration magnitudes (or per-position norms) of every Q/K projection.
inline SaliencyResult cmd_saliency(RunConfig cfg, SaliencyAxis axis,
                                   const std::optional<std::string>& matrix = std::nullopt) {
  auto paths = begin_run(cfg, "saliency");
  SaliencyResult res{paths, {}};
  const auto dir = paths.reports() / "saliency";
  if (matrix) {
    const auto m = parse_magnitude_matrix(*matrix);
    res.files.push_back(dir / "matrix.csv");
    dump_saliency(m, res.files.back());
    SelectionPolicy policy = cfg.train.selection;
    policy.seed = cfg.seed;
    const auto mask = build_mask(m, policy);
    res.files.push_back(dir / "mask_rows.txt");
    std::ofstream os(res.files.back());
    for (std::size_t r = 0; r < mask.row_flags.size(); ++r) {
      if (mask.row_flags[r]) os << r << '\n';
    }
    if (!os) throw IoError("cannot write " + res.files.back().string());
    return res;
  }
  const auto data = load_datasets(cfg);
  const auto params = load_init(cfg, "saliency");
  const std::size_t n = std::min(cfg.train.calibration_size, data.rl.size());
  if (n == 0) throw ConfigError("saliency needs at least one RL instance");
  std::vector<std::vector<int>> prompts;
  for (std::size_t i = 0; i < n; ++i) prompts.push_back(data.rl[i].prompt());
  const auto traces = capture_traces(params, std::span<const std::vector<int>>(prompts));
  for (std::size_t l = 0; l < cfg.model.n_layers; ++l) {
    for (Projection p : {Projection::Q, Projection::K}) {
      const std::string stem = "layer" + std::to_string(l) + "_" + to_string(p);
      if (axis == SaliencyAxis::head_dim) {
        res.files.push_back(dir / (stem + ".csv"));
        dump_saliency(compute_magnitude(std::span<const ActivationTrace<Real>>(traces), l, p),
                      res.files.back());
      } else {
        res.files.push_back(dir / (stem + "_sequence.csv"));
        dump_saliency(traces.front(), l, p, SaliencyAxis::sequence, res.files.back());
      }
    }
  }
  return res;
}

struct PerturbRunResult {
  RunPaths paths;
  std::vector<PerturbResult> rows;  // baseline, top, bottom
};

/// Magnitudes from the first calibration_size RL prompts of the unperturbed model.
inline MagnitudeSet perturb_magnitudes(const ModelParams<Real>& params,
                                       std::span<const TaskInstance> rl, std::size_t count) {
  const std::size_t n = std::min(count, rl.size());
  if (n == 0) throw ConfigError("perturbation needs at least one calibration instance");
  std::vector<std::vector<int>> prompts;
  for (std::size_t i = 0; i < n; ++i) prompts.push_back(rl[i].prompt());
  const auto traces = capture_traces(params, std::span<const std::vector<int>>(prompts));
  return compute_magnitudes(std::span<const ActivationTrace<Real>>(traces));
}

inline PerturbRunResult cmd_perturb(RunConfig cfg) {
  auto paths = begin_run(cfg, "perturb");
  const auto data = load_datasets(cfg);
  const auto params = load_init(cfg, "perturb");
  const auto mags = perturb_magnitudes(params, data.rl, cfg.perturb.calibration_size);
  EvalOptions opts = eval_options(cfg);
  opts.max_new_tokens = cfg.perturb.max_new_tokens;

  PerturbRunResult res{paths, {}};
  PerturbSpec baseline = cfg.perturb.spec;
  baseline.fraction = 0.0;
  PerturbSpec top = cfg.perturb.spec, bottom = cfg.perturb.spec;
  top.side = ClampSide::top;
  bottom.side = ClampSide::bottom;
  MetricsLog log(paths.metrics());
  for (const auto& spec : {baseline, top, bottom}) {
    res.rows.push_back(perturb_eval(params, std::span<const TaskInstance>(data.eval), spec, mags, opts));
    const auto& r = res.rows.back();
    nlohmann::ordered_json j;
    j["setting"] = spec.fraction == 0.0 ? std::string("baseline") : spec.label();
    j["accuracy"] = r.accuracy;
    j["collapse_rate"] = r.collapse_rate;
    j["divergence"] = r.divergence;
    log.write(j);
  }
  write_perturb_report(res.rows, paths.reports() / "perturb.txt");
  return res;
}

}  // namespace longact
