#pragma once

// Synthetic long-context tasks: needle retrieval, common-word extraction and
// variable tracking, plus split construction and the dataset file format.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "longact/errors.hpp"
#include "longact/vocab.hpp"

namespace longact {

enum class TaskKind { niah, common_words, var_tracking };

inline std::string to_string(TaskKind k) {
  switch (k) {
    case TaskKind::niah: return "niah";
    case TaskKind::common_words: return "common_words";
    case TaskKind::var_tracking: return "var_tracking";
  }
  return "?";
}

inline TaskKind parse_task_kind(const std::string& s) {
  if (s == "niah") return TaskKind::niah;
  if (s == "common_words") return TaskKind::common_words;
  if (s == "var_tracking") return TaskKind::var_tracking;
  throw ConfigError("unknown task kind '" + s + "'");
}

struct TaskInstance {
  TaskKind kind = TaskKind::niah;
  std::uint64_t seed = 0;
  std::vector<int> context;
  std::vector<int> question;
  std::string answer;  // space-separated answer tokens

  std::vector<int> prompt() const {
    std::vector<int> p = context;
    p.insert(p.end(), question.begin(), question.end());
    return p;
  }

  bool operator==(const TaskInstance&) const = default;
};

struct TaskConfig {
  std::size_t context_len = 256;
  std::size_t n_distractors = 6;
  std::size_t n_common = 2;
  std::size_t chain_len = 2;
};

namespace detail {

inline std::mt19937_64 task_rng(std::uint64_t seed, TaskKind kind) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(kind) + 1000u};
  return std::mt19937_64(seq);
}

inline int uniform_int(std::mt19937_64& rng, int lo, int hi) {
  return std::uniform_int_distribution<int>(lo, hi)(rng);
}

// k distinct ids drawn from [base, base + n).
inline std::vector<int> distinct(std::mt19937_64& rng, int base, int n, std::size_t k) {
  std::vector<int> pool(static_cast<std::size_t>(n));
  std::iota(pool.begin(), pool.end(), base);
  for (std::size_t i = 0; i < k; ++i) {
    std::swap(pool[i], pool[static_cast<std::size_t>(uniform_int(rng, static_cast<int>(i), n - 1))]);
  }
  pool.resize(k);
  return pool;
}

// Lays `blocks` (in order) into filler text of total length `len`, at
// uniformly chosen gaps.
inline std::vector<int> interleave(std::mt19937_64& rng, const std::vector<std::vector<int>>& blocks,
                                   std::size_t len) {
  std::size_t used = 0;
  for (const auto& b : blocks) used += b.size();
  const std::size_t fillers = len - used;
  std::vector<std::size_t> gaps(blocks.size());
  for (auto& g : gaps) g = static_cast<std::size_t>(uniform_int(rng, 0, static_cast<int>(fillers)));
  std::sort(gaps.begin(), gaps.end());
  std::vector<int> out;
  out.reserve(len);
  std::size_t placed = 0;
  for (std::size_t b = 0; b <= blocks.size(); ++b) {
    const std::size_t until = b < blocks.size() ? gaps[b] : fillers;
    for (; placed < until; ++placed) {
      out.push_back(Vocab::filler(uniform_int(rng, 0, Vocab::kFillerCount - 1)));
    }
    if (b < blocks.size()) out.insert(out.end(), blocks[b].begin(), blocks[b].end());
  }
  return out;
}

}  // namespace detail

/// One target key/value pair plus decoys in filler text.
inline TaskInstance gen_niah(std::uint64_t seed, std::size_t context_len,
                             std::size_t n_distractors) {
  const std::size_t pairs = n_distractors + 1;
  if (pairs > static_cast<std::size_t>(Vocab::kKeyCount) || context_len < 4 * pairs) {
    throw ConfigError("niah: " + std::to_string(n_distractors) + " distractors do not fit in " +
                      std::to_string(context_len) + " tokens");
  }
  auto rng = detail::task_rng(seed, TaskKind::niah);
  auto keys = detail::distinct(rng, Vocab::kKeyBase, Vocab::kKeyCount, pairs);
  auto values = detail::distinct(rng, Vocab::kValueBase, Vocab::kValueCount, pairs);
  std::vector<std::vector<int>> blocks;
  for (std::size_t i = 0; i < pairs; ++i) {
    blocks.push_back({keys[i], Vocab::kEquals, values[i], Vocab::kSemicolon});
  }
  const auto target = static_cast<std::size_t>(detail::uniform_int(rng, 0, static_cast<int>(pairs) - 1));
  TaskInstance inst;
  inst.kind = TaskKind::niah;
  inst.seed = seed;
  inst.context = detail::interleave(rng, blocks, context_len);
  inst.question = {Vocab::kFind, keys[target], Vocab::kQuery};
  inst.answer = Vocab::standard().token(values[target]);
  return inst;
}

/// A few filler words planted far more often than the rest.
inline TaskInstance gen_common_words(std::uint64_t seed, std::size_t context_len,
                                     std::size_t n_common) {
  if (n_common == 0 || n_common > 9 || n_common * 2 > static_cast<std::size_t>(Vocab::kFillerCount)) {
    throw ConfigError("common_words: n_common must be in [1, 9]");
  }
  const std::size_t reps = std::max<std::size_t>(6, context_len / (4 * n_common));
  if (context_len < n_common * reps) {
    throw ConfigError("common_words: context of " + std::to_string(context_len) +
                      " tokens too short");
  }
  auto rng = detail::task_rng(seed, TaskKind::common_words);
  auto words = detail::distinct(rng, Vocab::kFillerBase, Vocab::kFillerCount, Vocab::kFillerCount);
  std::vector<int> common(words.begin(), words.begin() + static_cast<std::ptrdiff_t>(n_common));
  std::vector<int> rare(words.begin() + static_cast<std::ptrdiff_t>(n_common), words.end());
  const std::size_t rare_slots = context_len - n_common * reps;
  // every rare word stays strictly below the common frequency
  if (rare_slots > rare.size() * (reps - 1)) {
    throw ConfigError("common_words: too few rare words for context length");
  }
  std::map<int, std::size_t> rare_count;
  std::vector<int> ctx;
  ctx.reserve(context_len);
  for (int w : common) ctx.insert(ctx.end(), reps, w);
  while (ctx.size() < context_len) {
    const int w = rare[static_cast<std::size_t>(detail::uniform_int(rng, 0, static_cast<int>(rare.size()) - 1))];
    if (rare_count[w] + 1 >= reps) continue;
    ++rare_count[w];
    ctx.push_back(w);
  }
  std::shuffle(ctx.begin(), ctx.end(), rng);
  std::sort(common.begin(), common.end());
  TaskInstance inst;
  inst.kind = TaskKind::common_words;
  inst.seed = seed;
  inst.context = std::move(ctx);
  inst.question = {Vocab::kMost, Vocab::kCommon, Vocab::digit(static_cast<int>(n_common)),
                   Vocab::kQuery};
  inst.answer = Vocab::standard().decode(common);
  return inst;
}

/// Assignment chain X1 = V ; X2 = X1 ; ... in filler text; asks for the last variable.
inline TaskInstance gen_var_tracking(std::uint64_t seed, std::size_t context_len,
                                     std::size_t chain_len) {
  if (chain_len == 0 || chain_len > static_cast<std::size_t>(Vocab::kKeyCount)) {
    throw ConfigError("var_tracking: chain_len must be in [1, 24]");
  }
  if (context_len < 4 * chain_len) {
    throw ConfigError("var_tracking: chain does not fit in context");
  }
  auto rng = detail::task_rng(seed, TaskKind::var_tracking);
  auto vars = detail::distinct(rng, Vocab::kKeyBase, Vocab::kKeyCount, chain_len);
  const int value = Vocab::value(detail::uniform_int(rng, 0, Vocab::kValueCount - 1));
  std::vector<std::vector<int>> blocks;
  for (std::size_t i = 0; i < chain_len; ++i) {
    blocks.push_back({vars[i], Vocab::kEquals, i == 0 ? value : vars[i - 1], Vocab::kSemicolon});
  }
  TaskInstance inst;
  inst.kind = TaskKind::var_tracking;
  inst.seed = seed;
  inst.context = detail::interleave(rng, blocks, context_len);
  inst.question = {Vocab::kVar, vars.back(), Vocab::kQuery};
  inst.answer = Vocab::standard().token(value);
  return inst;
}

inline TaskInstance generate(TaskKind kind, std::uint64_t seed, const TaskConfig& cfg) {
  switch (kind) {
    case TaskKind::niah: return gen_niah(seed, cfg.context_len, cfg.n_distractors);
    case TaskKind::common_words: return gen_common_words(seed, cfg.context_len, cfg.n_common);
    case TaskKind::var_tracking: return gen_var_tracking(seed, cfg.context_len, cfg.chain_len);
  }
  throw ConfigError("unknown task kind");
}

/// Gold response: <think> short trace </think> <answer> answer </answer> <eos>.
inline std::vector<int> gold_response(const TaskInstance& inst) {
  const auto& vocab = Vocab::standard();
  const auto answer = vocab.encode(inst.answer);
  std::vector<int> out{Vocab::kThink};
  switch (inst.kind) {
    case TaskKind::niah:
      out.insert(out.end(), {Vocab::kLocate, inst.question.at(1)});
      break;
    case TaskKind::common_words:
      out.push_back(Vocab::kCount);
      break;
    case TaskKind::var_tracking:
      out.insert(out.end(), {Vocab::kFollow, inst.question.at(1), Vocab::kRead});
      out.insert(out.end(), answer.begin(), answer.end());
      break;
  }
  out.push_back(Vocab::kThinkEnd);
  out.push_back(Vocab::kAnswer);
  out.insert(out.end(), answer.begin(), answer.end());
  out.push_back(Vocab::kAnswerEnd);
  out.push_back(Vocab::kEos);
  return out;
}

struct SeedRange {
  std::uint64_t begin = 0;
  std::size_t count = 0;

  std::uint64_t end() const { return begin + count; }
  bool overlaps(const SeedRange& o) const {
    return count && o.count && begin < o.end() && o.begin < end();
  }
};

struct TaskMix {
  double niah = 1.0;
  double common_words = 0.0;
  double var_tracking = 0.0;

  void validate() const {
    if (niah < 0 || common_words < 0 || var_tracking < 0 ||
        std::abs(niah + common_words + var_tracking - 1.0) > 1e-9) {
      throw ConfigError("task mix proportions must be non-negative and sum to 1");
    }
  }

  // Kind for one seed, drawn from the mix by a seed-keyed uniform.
  TaskKind pick(std::uint64_t seed) const {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 77u};
    std::mt19937_64 rng(seq);
    const double u = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
    if (u < niah) return TaskKind::niah;
    if (u < niah + common_words) return TaskKind::common_words;
    return var_tracking > 0 ? TaskKind::var_tracking
                            : (common_words > 0 ? TaskKind::common_words : TaskKind::niah);
  }
};

struct SplitSeeds {
  SeedRange sft{0, 2000};
  SeedRange rl{100000, 2000};
  SeedRange eval{900000, 200};
};

struct Datasets {
  std::vector<TaskInstance> sft;
  std::vector<TaskInstance> rl;
  std::vector<TaskInstance> eval;
};

inline std::vector<TaskInstance> make_split(const SeedRange& range, const TaskMix& mix,
                                            const TaskConfig& cfg) {
  std::vector<TaskInstance> out;
  out.reserve(range.count);
  for (std::uint64_t s = range.begin; s < range.end(); ++s) out.push_back(generate(mix.pick(s), s, cfg));
  return out;
}

inline Datasets make_splits(const SplitSeeds& seeds, const TaskMix& mix, const TaskConfig& cfg) {
  mix.validate();
  if (seeds.sft.overlaps(seeds.rl) || seeds.sft.overlaps(seeds.eval) || seeds.rl.overlaps(seeds.eval)) {
    throw ConfigError("split seed ranges overlap");
  }
  return Datasets{make_split(seeds.sft, mix, cfg), make_split(seeds.rl, mix, cfg),
                  make_split(seeds.eval, mix, cfg)};
}

// Dataset file: one JSON object per line with fields in fixed order
// kind, seed, context, question, answer[, response].

inline nlohmann::ordered_json to_json(const TaskInstance& inst, bool with_response) {
  const auto& v = Vocab::standard();
  nlohmann::ordered_json j;
  j["kind"] = to_string(inst.kind);
  j["seed"] = inst.seed;
  j["context"] = v.decode(inst.context);
  j["question"] = v.decode(inst.question);
  j["answer"] = inst.answer;
  if (with_response) j["response"] = v.decode(gold_response(inst));
  return j;
}

inline TaskInstance instance_from_json(const nlohmann::json& j) {
  const auto& v = Vocab::standard();
  try {
    TaskInstance inst;
    inst.kind = parse_task_kind(j.at("kind").get<std::string>());
    inst.seed = j.at("seed").get<std::uint64_t>();
    inst.context = v.encode(j.at("context").get<std::string>());
    inst.question = v.encode(j.at("question").get<std::string>());
    inst.answer = j.at("answer").get<std::string>();
    return inst;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(std::string("malformed dataset record: ") + e.what());
  }
}

inline void write_dataset(const std::vector<TaskInstance>& items, const std::filesystem::path& path,
                          bool with_responses = false) {
  ensure_parent_dir(path);
  std::ofstream os(path);
  if (!os) throw IoError("cannot write " + path.string());
  for (const auto& inst : items) os << to_json(inst, with_responses).dump() << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

inline std::vector<TaskInstance> read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open dataset " + path.string());
  std::vector<TaskInstance> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    out.push_back(instance_from_json(j));
  }
  return out;
}

}  // namespace longact
