#include <gtest/gtest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include "longact/pipeline.hpp"

using namespace longact;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), {}};
}

class TempDir {
 public:
  TempDir() {
    path_ = fs::temp_directory_path() /
            ("longact_pipeline_" + std::to_string(::testing::UnitTest::GetInstance()->random_seed()) + "_" +
             ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(path_);
    fs::create_directories(path_);
  }
  ~TempDir() { fs::remove_all(path_); }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const fs::path& path() const { return path_; }

 private:
  fs::path path_;
};

// Small enough that gen -> sft -> rl finishes in a few seconds.
Overrides tiny_overrides(const fs::path& out) {
  return {{"run.out", out.string()},
          {"model.d_model", "16"},
          {"model.n_layers", "1"},
          {"model.heads_q", "2"},
          {"model.heads_kv", "1"},
          {"model.head_dim", "8"},
          {"model.mlp_hidden", "32"},
          {"model.max_seq", "96"},
          {"task.context_len", "32"},
          {"task.n_distractors", "0"},
          {"split.sft.count", "32"},
          {"split.rl.count", "16"},
          {"split.eval.count", "8"},
          {"train.sft_steps", "6"},
          {"train.sft_batch", "4"},
          {"train.rl_steps", "3"},
          {"train.group_size", "4"},
          {"train.groups_per_step", "2"},
          {"train.max_new_tokens", "8"},
          {"train.calibration_size", "4"},
          {"eval.max_new_tokens", "8"},
          {"run.checkpoint_every", "2"}};
}

class EnvGuard {
 public:
  explicit EnvGuard(const char* name) : name_(name) {
    if (const char* v = std::getenv(name)) old_ = v;
  }
  ~EnvGuard() {
    if (old_) {
      ::setenv(name_, old_->c_str(), 1);
    } else {
      ::unsetenv(name_);
    }
  }

 private:
  const char* name_;
  std::optional<std::string> old_;
};

}  // namespace

TEST(Config, RenderParsesBackToSameConfig) {
  RunConfig a;
  set_value(a, "train.lambda", "0.125");
  set_value(a, "train.policy", "min");
  set_value(a, "train.beta", "0.01");
  set_value(a, "perturb.layers", "0,1");
  set_value(a, "task.mix.niah", "0.5");
  set_value(a, "task.mix.var_tracking", "0.5");
  RunConfig b;
  std::istringstream is(render_config(a));
  apply_config_text(b, is, "rendered");
  EXPECT_EQ(render_config(a), render_config(b));
  for (const auto& k : config_keys()) EXPECT_EQ(get_value(a, k), get_value(b, k)) << k;
  EXPECT_EQ(get_value(b, "train.beta"), "0.01");
  EXPECT_EQ(get_value(RunConfig{}, "train.beta"), "auto");
}

TEST(Config, CommentsAndBlankLinesIgnored) {
  RunConfig c;
  std::istringstream is("# header\n\n  train.rl_steps = 17   # trailing\n");
  apply_config_text(c, is, "t");
  EXPECT_EQ(c.train.rl_steps, 17u);
}

TEST(Config, ErrorsCarrySourceAndLine) {
  RunConfig c;
  std::istringstream unknown("train.rl_steps = 1\nno.such.key = 3\n");
  try {
    apply_config_text(c, unknown, "f.conf");
    FAIL() << "expected ConfigError";
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("f.conf:2"), std::string::npos) << e.what();
  }
  std::istringstream bad_value("train.rl_steps = many\n");
  EXPECT_THROW(apply_config_text(c, bad_value, "f"), ConfigError);
  std::istringstream no_eq("train.rl_steps 5\n");
  EXPECT_THROW(apply_config_text(c, no_eq, "f"), ConfigError);
  EXPECT_THROW(set_value(c, "train.policy", "largest"), ConfigError);
  EXPECT_THROW(set_value(c, "train.lambda", "nan"), ConfigError);
}

TEST(Config, MissingFileIsIoError) {
  EXPECT_THROW(resolve_config(fs::path("/nonexistent/longact.conf"), {}), IoError);
}

TEST(Config, PrecedenceDefaultsEnvFileOverrides) {
  TempDir tmp;
  EnvGuard guard(kOutEnv);
  ::unsetenv(kOutEnv);
  EXPECT_EQ(resolve_config(std::nullopt, {}).out_root, "runs");

  ::setenv(kOutEnv, "from-env", 1);
  EXPECT_EQ(resolve_config(std::nullopt, {}).out_root, "from-env");

  const auto file = tmp.path() / "c.conf";
  std::ofstream(file) << "run.out = from-file\ntrain.rl_steps = 5\n";
  auto c = resolve_config(file, {});
  EXPECT_EQ(c.out_root, "from-file");
  EXPECT_EQ(c.train.rl_steps, 5u);

  c = resolve_config(file, {{"run.out", "from-flag"}, {"train.rl_steps", "9"}});
  EXPECT_EQ(c.out_root, "from-flag");
  EXPECT_EQ(c.train.rl_steps, 9u);
}

TEST(Config, OverlappingSplitsRejected) {
  EXPECT_THROW(resolve_config(std::nullopt, {{"split.rl.begin", "10"}}), ConfigError);
  EXPECT_THROW(resolve_config(std::nullopt, {{"split.dev.begin", "900100"}}), ConfigError);
}

TEST(Config, ShippedDeskConfigResolves) {
  const auto c = resolve_config(fs::path(LONGACT_SOURCE_DIR) / "configs" / "niah_desk.conf", {});
  EXPECT_EQ(c.task.n_distractors, 0u);
  EXPECT_DOUBLE_EQ(c.sft_stop.target, 0.6);
}

TEST(Pipeline, RunNames) {
  RunConfig c;
  c.seed = 3;
  EXPECT_EQ(default_run_name("sft", c), "sft");
  c.train.algorithm = Algorithm::full_update;
  EXPECT_EQ(default_run_name("rl", c), "rl-full-s3");
  c.train.algorithm = Algorithm::dapo;
  c.train.selection.kind = SelectionKind::min;
  c.train.selection.ratio = 0.3;
  EXPECT_EQ(default_run_name("rl", c), "rl-dapo-min-0.3-s3");
}

TEST(Pipeline, MissingInitCheckpointIsConfigError) {
  TempDir tmp;
  auto cfg = resolve_config(std::nullopt, tiny_overrides(tmp.path()));
  EXPECT_THROW(cmd_rl(cfg), ConfigError);
  EXPECT_THROW(cmd_eval(cfg), ConfigError);
}

TEST(Pipeline, CheckpointForOtherModelIsRejected) {
  TempDir tmp;
  auto o = tiny_overrides(tmp.path());
  auto sft = cmd_sft(resolve_config(std::nullopt, o));
  o.emplace_back("model.mlp_hidden", "24");
  o.emplace_back("run.init", sft.paths.final_checkpoint().string());
  EXPECT_THROW(cmd_eval(resolve_config(std::nullopt, o)), ConfigError);
}

TEST(Pipeline, SaliencyMatrixWritesCsvAndMaskRows) {
  TempDir tmp;
  auto cfg = resolve_config(std::nullopt, {{"run.out", tmp.path().string()}, {"train.lambda", "0.3"}});
  const auto r = cmd_saliency(cfg, SaliencyAxis::head_dim, std::string("0.8,0.2,0.9,0.5;0.3,0.7,0.6,0.4"));
  ASSERT_EQ(r.files.size(), 2u);
  EXPECT_EQ(slurp(r.files[1]), "2\n5\n");
  EXPECT_NE(slurp(r.files[0]).find("0.9"), std::string::npos);
}

TEST(Pipeline, SaliencyMatrixParseErrors) {
  EXPECT_THROW(parse_magnitude_matrix("1,2;3"), ConfigError);
  EXPECT_THROW(parse_magnitude_matrix(""), ConfigError);
  EXPECT_THROW(parse_magnitude_matrix("1,x"), ConfigError);
}

TEST(Pipeline, EndToEndIsDeterministic) {
  TempDir tmp;
  auto run_all = [&](const fs::path& out) {
    auto o = tiny_overrides(out);
    auto gen = cmd_gen(resolve_config(std::nullopt, o));
    o.emplace_back("run.data_dir", gen.paths.data().string());
    auto sft = cmd_sft(resolve_config(std::nullopt, o));
    o.emplace_back("run.init", sft.paths.final_checkpoint().string());
    o.emplace_back("run.seed", "4");
    auto rl = cmd_rl(resolve_config(std::nullopt, o));
    return std::pair{sft.paths, rl.paths};
  };
  const auto [sft_a, rl_a] = run_all(tmp.path() / "a");
  const auto [sft_b, rl_b] = run_all(tmp.path() / "b");

  for (const auto& name : {"final.ckpt", "step_2.ckpt"}) {
    EXPECT_EQ(slurp(sft_a.checkpoints() / name), slurp(sft_b.checkpoints() / name)) << name;
    EXPECT_EQ(slurp(rl_a.checkpoints() / name), slurp(rl_b.checkpoints() / name)) << name;
  }
  EXPECT_EQ(slurp(sft_a.metrics()), slurp(sft_b.metrics()));
  EXPECT_EQ(slurp(rl_a.metrics()), slurp(rl_b.metrics()));
  EXPECT_EQ(slurp(rl_a.reports() / "masks.json"), slurp(rl_b.reports() / "masks.json"));

  // One metrics line per step, with eval accuracy on the last.
  std::ifstream is(rl_a.metrics());
  std::string line, last;
  std::size_t n = 0;
  while (std::getline(is, line)) {
    last = line;
    ++n;
  }
  EXPECT_EQ(n, 3u);
  const auto j = nlohmann::json::parse(last);
  EXPECT_EQ(j.at("step"), 3);
  EXPECT_TRUE(j.contains("eval_acc"));
  EXPECT_TRUE(fs::exists(rl_a.reports() / "eval.json"));
  EXPECT_TRUE(fs::exists(rl_a.config()));
}

TEST(Pipeline, EvalMatchesDirectEvaluation) {
  TempDir tmp;
  auto o = tiny_overrides(tmp.path());
  auto sft = cmd_sft(resolve_config(std::nullopt, o));
  o.emplace_back("run.init", sft.paths.final_checkpoint().string());
  const auto cfg = resolve_config(std::nullopt, o);
  const auto r = cmd_eval(cfg);

  const auto params = load_checkpoint<Real>(sft.paths.final_checkpoint());
  const auto data = make_splits(cfg.splits, cfg.mix, cfg.task);
  const auto direct = evaluate(params, std::span<const TaskInstance>(data.eval), eval_options(cfg));
  EXPECT_EQ(r.eval.accuracy, direct.accuracy);
  EXPECT_EQ(r.eval.correct, direct.correct);
  EXPECT_EQ(r.eval.accuracy, sft.eval.accuracy);
  const auto report = nlohmann::json::parse(slurp(r.paths.reports() / "eval.json"));
  EXPECT_EQ(report.at("count"), data.eval.size());
}

TEST(Pipeline, PerturbWritesThreeRows) {
  TempDir tmp;
  auto o = tiny_overrides(tmp.path());
  auto sft = cmd_sft(resolve_config(std::nullopt, o));
  o.emplace_back("run.init", sft.paths.final_checkpoint().string());
  o.emplace_back("perturb.max_new_tokens", "8");
  const auto r = cmd_perturb(resolve_config(std::nullopt, o));
  ASSERT_EQ(r.rows.size(), 3u);
  EXPECT_EQ(r.rows[0].divergence, 0.0);
  EXPECT_GT(r.rows[1].divergence, 0.0);
  EXPECT_GT(r.rows[2].divergence, 0.0);
  EXPECT_TRUE(fs::exists(r.paths.reports() / "perturb.txt"));
}
