#include <gtest/gtest.h>

#include <cmath>
#include <random>
#include <vector>

#include "longact/grad_check.hpp"
#include "longact/training.hpp"

using namespace longact;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.d_model = 8;
  c.n_layers = 1;
  c.heads_q = 2;
  c.heads_kv = 1;
  c.head_dim = 4;
  c.mlp_hidden = 12;
  c.vocab_size = 13;
  c.max_seq = 32;
  return c;
}

ModelConfig small_config() {
  ModelConfig c;
  c.d_model = 16;
  c.n_layers = 1;
  c.heads_q = 2;
  c.heads_kv = 1;
  c.head_dim = 8;
  c.mlp_hidden = 32;
  c.max_seq = 64;
  return c;
}

std::vector<int> random_tokens(std::size_t n, std::size_t vocab, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, static_cast<int>(vocab) - 1);
  std::vector<int> t(n);
  for (auto& v : t) v = d(rng);
  return t;
}

template <typename T>
RolloutGroup<T> synthetic_group(std::mt19937_64& rng, std::size_t vocab,
                                std::vector<double> rewards, std::size_t prompt_len = 6) {
  RolloutGroup<T> g;
  g.prompt = random_tokens(prompt_len, vocab, rng);
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    g.responses.push_back(random_tokens(2 + i % 3, vocab, rng));
  }
  g.rewards = std::move(rewards);
  g.advantages = compute_advantages(g.rewards);
  return g;
}

std::vector<Tensor<double>> flatten(const ModelParams<double>& p) {
  std::vector<Tensor<double>> out;
  p.for_each([&](const std::string&, const Tensor<double>& t) { out.push_back(t); });
  return out;
}

void scale_matrices(ModelParams<double>& p, double s) {
  p.for_each([&](const std::string&, Tensor<double>& t) {
    if (t.rank() == 2) for (auto& v : t.values()) v *= s;
  });
}

}  // namespace

// ------------------------------------------------------------------- reward

TEST(Reward, WorkedExamples) {
  auto r = compute_reward(std::string_view("<think>t</think><answer>B</answer>"), "B");
  EXPECT_EQ(r.format, 1);
  EXPECT_EQ(r.answer, 1);
  EXPECT_EQ(r.total(), 2);
  EXPECT_EQ(compute_reward(std::string_view("<think>t</think><answer>C</answer>"), "B").total(), 1);
  EXPECT_EQ(compute_reward(std::string_view("B"), "B").total(), 0);
}

TEST(Reward, AnswerSpanIsTrimmedAndUsesFirstOpeningTag) {
  EXPECT_EQ(compute_reward(std::string_view("<answer>  B \n</answer>"), "B").answer, 1);
  EXPECT_EQ(compute_reward(std::string_view("<answer>B<answer>C</answer>"), "B").answer, 0);
  EXPECT_EQ(compute_reward(std::string_view("</answer>B<answer>"), "B").answer, 0);
}

TEST(Reward, TokenResponsesRenderThroughVocabulary) {
  auto inst = gen_niah(1, 64, 2);
  EXPECT_EQ(compute_reward(gold_response(inst), inst.answer).total(), 2);
  const std::vector<int> junk{-3, 999, Vocab::kAnswer};
  EXPECT_EQ(compute_reward(junk, inst.answer).total(), 0);
}

TEST(Reward, GoldResponsesOfEveryKindScoreTwo) {
  auto d = make_splits(SplitSeeds{{0, 200}, {1000, 1}, {2000, 1}}, TaskMix{0.4, 0.3, 0.3},
                       TaskConfig{});
  for (const auto& inst : d.sft) EXPECT_EQ(compute_reward(gold_response(inst), inst.answer).total(), 2);
}

TEST(Collapse, RunsAndThreshold) {
  std::vector<int> run(25, 3);
  auto r = detect_collapse(run);
  EXPECT_TRUE(r.collapsed);
  EXPECT_EQ(r.longest_run, 25u);
  std::vector<int> alt;
  for (int i = 0; i < 40; ++i) alt.push_back(i % 2);
  r = detect_collapse(alt);
  EXPECT_FALSE(r.collapsed);
  EXPECT_EQ(r.longest_run, 1u);
  EXPECT_FALSE(detect_collapse(std::vector<int>(19, 7)).collapsed);
}

TEST(Collapse, MonotoneUnderAppend) {
  std::mt19937_64 rng(2);
  std::vector<int> seq;
  std::size_t prev = 0;
  for (int i = 0; i < 300; ++i) {
    seq.push_back(static_cast<int>(rng() % 3));
    const auto now = detect_collapse(seq).longest_run;
    EXPECT_GE(now, prev);
    prev = now;
  }
}

TEST(Collapse, RandomSequencesRarelyCollapse) {
  // P(run >= 20 in 64 draws over 128 tokens) <= 45 * 128^-19, far below 1e-6
  const double bound = 45.0 * std::pow(128.0, -19.0);
  EXPECT_LT(bound, 1e-6);
  std::mt19937_64 rng(3);
  int collapsed = 0;
  for (int i = 0; i < 20000; ++i) {
    collapsed += detect_collapse(random_tokens(64, 128, rng)).collapsed;
  }
  EXPECT_EQ(collapsed, 0);
}

// --------------------------------------------------------------- advantages

TEST(Advantages, WorkedExamples) {
  auto a = compute_advantages(std::vector<double>{2, 0, 0, 2});
  const std::vector<double> expected{1, -1, -1, 1};
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(a[i], expected[i], 1e-5);
  for (double v : compute_advantages(std::vector<double>{1, 1, 1, 1})) EXPECT_EQ(v, 0.0);
  EXPECT_THROW(compute_advantages(std::vector<double>{1}), ContractError);
}

TEST(Advantages, MatchMeanStdOracle) {
  std::mt19937_64 rng(4);
  std::uniform_real_distribution<double> u(-3, 3);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> r(2 + trial % 9);
    for (auto& v : r) v = u(rng);
    long double mean = 0, var = 0;
    for (double v : r) mean += v;
    mean /= r.size();
    for (double v : r) var += (v - mean) * (v - mean);
    const long double sd = std::sqrt(var / r.size());
    auto a = compute_advantages(r);
    for (std::size_t i = 0; i < r.size(); ++i) {
      EXPECT_NEAR(a[i], static_cast<double>((r[i] - mean) / (sd + 1e-6)), 1e-9);
    }
  }
}

TEST(DapoFilter, DropsConstantGroups) {
  std::mt19937_64 rng(5);
  std::vector<RolloutGroup<float>> groups{synthetic_group<float>(rng, 13, {2, 2, 2, 2}),
                                          synthetic_group<float>(rng, 13, {2, 0, 2, 0})};
  auto kept = dapo_filter(groups);
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].rewards, (std::vector<double>{2, 0, 2, 0}));
  EXPECT_EQ(kept[0].prompt, groups[1].prompt);
}

TEST(DapoFilter, RetainedFractionMatchesVarianceCount) {
  std::mt19937_64 rng(6);
  std::uniform_int_distribution<int> r(0, 2), coin(0, 3);
  for (int batch = 0; batch < 50; ++batch) {
    std::vector<RolloutGroup<float>> groups;
    std::size_t variable = 0;
    for (int g = 0; g < 16; ++g) {
      std::vector<double> rewards(4);
      const bool constant = coin(rng) == 0;
      for (auto& v : rewards) v = constant ? 1.0 : r(rng);
      bool differs = false;
      for (double v : rewards) differs = differs || v != rewards[0];
      variable += differs;
      RolloutGroup<float> grp;
      grp.rewards = rewards;
      groups.push_back(grp);
    }
    EXPECT_EQ(dapo_filter(groups).size(), variable);
  }
}

// ---------------------------------------------------------------- objective

TEST(GrpoLoss, UnitRatioGivesMeanAdvantageAndNoClipping) {
  std::mt19937_64 rng(7);
  auto p = init_params<double>(tiny_config(), 1);
  std::vector<RolloutGroup<double>> groups{synthetic_group<double>(rng, 13, {2, 0, 1, 0}),
                                           synthetic_group<double>(rng, 13, {0, 2, 2, 1})};
  ad::Tape<double> tape;
  auto bp = bind(tape, p);
  ObjectiveStats st;
  auto loss = grpo_loss(tape, bp, std::span<const RolloutGroup<double>>(groups), {},
                        ObjectiveSettings{}, &st);
  double expected = 0;
  for (const auto& g : groups) {
    double m = 0;
    for (double a : g.advantages) m += a;
    expected += m / g.advantages.size();
  }
  EXPECT_NEAR(loss.value().item(), -expected, 1e-12);
  EXPECT_EQ(st.clip_fraction(), 0.0);
}

TEST(GrpoLoss, ZeroAdvantagesWithoutKlGiveZeroGradient) {
  std::mt19937_64 rng(8);
  auto p = init_params<double>(tiny_config(), 2);
  std::vector<RolloutGroup<double>> groups{synthetic_group<double>(rng, 13, {1, 1, 1})};
  ad::Tape<double> tape;
  auto bp = bind(tape, p);
  tape.backward(grpo_loss(tape, bp, std::span<const RolloutGroup<double>>(groups), {},
                          ObjectiveSettings{}));
  for (const auto& g : collect_grads(tape, bp)) {
    for (double v : g.values()) EXPECT_EQ(v, 0.0);
  }
}

TEST(GrpoLoss, PassesFiniteDifferenceWithAndWithoutKl) {
  std::mt19937_64 rng(9);
  auto p = init_params<double>(tiny_config(), 3);
  scale_matrices(p, 15.0);
  auto old = p;
  auto ref = p;
  // lagging policies so ratios and KL terms are non-trivial
  std::normal_distribution<double> n(0, 0.02);
  old.for_each([&](const std::string&, Tensor<double>& t) { for (auto& v : t.values()) v += n(rng); });
  ref.for_each([&](const std::string&, Tensor<double>& t) { for (auto& v : t.values()) v += n(rng); });
  std::vector<RolloutGroup<double>> groups{synthetic_group<double>(rng, 13, {2, 0, 1, 0}),
                                           synthetic_group<double>(rng, 13, {0, 2, 2, 1, 0})};
  for (auto& g : groups) {
    attach_old_log_probs(old, g);
  }
  auto ref_lp = reference_log_probs(ref, std::span<const RolloutGroup<double>>(groups));
  for (double beta : {0.0, 0.001}) {
    ObjectiveSettings s{0.2, 0.28, beta, false};
    auto tensors = flatten(p);
    auto res = finite_diff_check(
        [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& vars) {
          BoundParams<double> bp{&p, vars};
          return grpo_loss(tape, bp, std::span<const RolloutGroup<double>>(groups), ref_lp, s);
        },
        tensors);
    EXPECT_LE(res.max_rel_error, 1e-4) << "beta " << beta;
  }
}

TEST(SftLoss, PassesFiniteDifference) {
  std::mt19937_64 rng(10);
  auto p = init_params<double>(tiny_config(), 4);
  scale_matrices(p, 15.0);
  std::vector<SftExample> batch{{random_tokens(7, 13, rng), random_tokens(4, 13, rng)},
                                {random_tokens(3, 13, rng), random_tokens(6, 13, rng)}};
  auto tensors = flatten(p);
  auto res = finite_diff_check(
      [&](ad::Tape<double>& tape, const std::vector<ad::Var<double>>& vars) {
        BoundParams<double> bp{&p, vars};
        return sft_loss(tape, bp, std::span<const SftExample>(batch));
      },
      tensors);
  EXPECT_LE(res.max_rel_error, 1e-4);
}

TEST(SftStep, RepeatedStepsOnOneBatchReduceLoss) {
  auto p = init_params<float>(small_config(), 5);
  Adam<float> opt(p, AdamConfig{1e-3});
  std::vector<SftExample> batch;
  for (std::uint64_t s = 0; s < 4; ++s) batch.push_back(sft_example(gen_niah(s, 40, 1)));
  double prev = 1e9, first = 0;
  for (int step = 0; step < 50; ++step) {
    const double loss = sft_step(p, opt, std::span<const SftExample>(batch));
    if (step == 0) first = loss;
    EXPECT_LE(loss, prev + 1e-6) << "step " << step;
    prev = loss;
  }
  EXPECT_LT(prev, first - 1.0);
}

// ------------------------------------------------------------------ RL step

class RlStepTest : public ::testing::Test {
 protected:
  void SetUp() override {
    params = init_params<float>(ModelConfig{}, 11);
    std::mt19937_64 rng(12);
    for (int g = 0; g < 3; ++g) {
      groups.push_back(synthetic_group<float>(rng, 128, {2, 0, 1, 0, 2, 1}, 30));
    }
    groups.push_back(synthetic_group<float>(rng, 128, {1, 1, 1, 1, 1, 1}, 30));
    std::vector<std::vector<int>> calib;
    for (const auto& g : groups) calib.push_back(g.prompt);
    auto traces = capture_traces(params, calib);
    masks = build_masks<float>(traces, SelectionPolicy{SelectionKind::massive, 0.3, 0});
    cfg.algorithm = Algorithm::dapo;
    cfg.rl_lr = 1e-3;
  }

  ModelParams<float> params;
  std::vector<RolloutGroup<float>> groups;
  MaskSet masks;
  TrainConfig cfg;
};

TEST_F(RlStepTest, MaskFalseRowsStayBitIdentical) {
  const auto before = params;
  Adam<float> opt(params, AdamConfig{cfg.rl_lr});
  for (int step = 0; step < 3; ++step) rl_step(params, opt, &masks, groups, cfg);
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    for (auto p : {Projection::Q, Projection::K}) {
      const auto& w = params.layers[l].projection(p);
      const auto& w0 = before.layers[l].projection(p);
      const auto& flags = masks.get(l, p).row_flags;
      std::size_t changed_true = 0, true_rows = 0;
      for (std::size_t r = 0; r < w.rows(); ++r) {
        bool same = true;
        for (std::size_t c = 0; c < w.cols(); ++c) same = same && w.at(r, c) == w0.at(r, c);
        if (!flags[r]) {
          EXPECT_TRUE(same) << "layer " << l << " row " << r;
        }
        if (flags[r]) {
          ++true_rows;
          changed_true += !same;
        }
      }
      EXPECT_EQ(changed_true, true_rows);
    }
    EXPECT_FALSE(params.layers[l].wv == before.layers[l].wv);
    EXPECT_FALSE(params.layers[l].wo == before.layers[l].wo);
    EXPECT_FALSE(params.layers[l].w_up == before.layers[l].w_up);
    EXPECT_FALSE(params.layers[l].w_down == before.layers[l].w_down);
  }
  // optimizer state of frozen rows never leaves zero
  const auto& m = opt.first_moment(2);  // layers.0.wq
  const auto& flags = masks.q[0].row_flags;
  for (std::size_t r = 0; r < flags.size(); ++r) {
    if (flags[r]) continue;
    for (std::size_t c = 0; c < m.cols(); ++c) ASSERT_EQ(m.at(r, c), 0.0f);
  }
}

TEST_F(RlStepTest, AllTrueMasksMatchFullUpdateBitForBit) {
  MaskSet all;
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    all.q.push_back(GradientMask::all(l, Projection::Q, 4, 16, true));
    all.k.push_back(GradientMask::all(l, Projection::K, 2, 16, true));
  }
  auto a = params, b = params;
  Adam<float> oa(a, AdamConfig{cfg.rl_lr}), ob(b, AdamConfig{cfg.rl_lr});
  TrainConfig full = cfg;
  full.algorithm = Algorithm::full_update;
  for (int step = 0; step < 2; ++step) {
    auto ma = rl_step(a, oa, &all, groups, cfg);
    auto mb = rl_step(b, ob, nullptr, groups, full);
    EXPECT_EQ(ma.objective, mb.objective);
    EXPECT_EQ(ma.grad_norm_qk, mb.grad_norm_qk);
  }
  EXPECT_TRUE(a == b);
}

TEST_F(RlStepTest, MaskPresenceMustMatchAlgorithm) {
  Adam<float> opt(params, AdamConfig{cfg.rl_lr});
  EXPECT_THROW(rl_step(params, opt, nullptr, groups, cfg), ContractError);
  TrainConfig full = cfg;
  full.algorithm = Algorithm::full_update;
  EXPECT_THROW(rl_step(params, opt, &masks, groups, full), ContractError);
  MaskSet short_set = masks;
  short_set.q.pop_back();
  EXPECT_THROW(rl_step(params, opt, &short_set, groups, cfg), ContractError);
}

TEST_F(RlStepTest, MetricsReportFilteringAndNorms) {
  Adam<float> opt(params, AdamConfig{cfg.rl_lr});
  auto m = rl_step(params, opt, &masks, groups, cfg);
  EXPECT_EQ(m.groups_used, 3u);
  EXPECT_NEAR(m.mean_reward, (3 * 1.0 + 1.0) / 4, 1e-12);
  EXPECT_GT(m.grad_norm_qk, 0.0);
  EXPECT_GT(m.grad_norm_other, 0.0);
  EXPECT_EQ(m.clip_frac, 0.0);
}

TEST_F(RlStepTest, GrpoUsesKlAgainstReference) {
  TrainConfig grpo = cfg;
  grpo.algorithm = Algorithm::grpo;
  Adam<float> opt(params, AdamConfig{cfg.rl_lr});
  EXPECT_THROW(rl_step(params, opt, &masks, groups, grpo), ContractError);
  const auto ref = params;
  auto m = rl_step(params, opt, &masks, groups, grpo, &ref);
  EXPECT_EQ(m.groups_used, 4u);  // no filtering in grpo mode
}

TEST(SyncOldPolicy, SnapshotIsIndependent) {
  auto p = init_params<float>(ModelConfig{}, 13);
  std::mt19937_64 rng(1);
  auto prompt = random_tokens(20, 128, rng), resp = random_tokens(5, 128, rng);
  auto old = sync_old_policy(p);
  auto a = log_probs_of(p, prompt, resp), b = log_probs_of(old, prompt, resp);
  for (std::size_t i = 0; i < a.size(); ++i) EXPECT_EQ(std::exp(a[i] - b[i]), 1.0f);
  EXPECT_EQ(forward(p, prompt).logits, forward(old, prompt).logits);
  p.layers[0].wv[3] += 0.5f;
  EXPECT_NE(forward(p, prompt).logits, forward(old, prompt).logits);
}

// --------------------------------------------------------------- evaluation

TEST(Evaluate, UntrainedModelIsAtChance) {
  auto p = init_params<float>(ModelConfig{}, 14);
  std::vector<TaskInstance> eval;
  for (std::uint64_t s = 0; s < 20; ++s) eval.push_back(gen_niah(s, 64, 2));
  auto r = evaluate(p, std::span<const TaskInstance>(eval), EvalOptions{true, 16});
  // chance of emitting the exact tagged answer is below 128^-3 per attempt
  EXPECT_EQ(r.accuracy, 0.0);
  auto again = evaluate(p, std::span<const TaskInstance>(eval), EvalOptions{true, 16});
  EXPECT_EQ(r.outputs, again.outputs);
}

TEST(Evaluate, MemorisedGoldTemplateScoresFullAccuracy) {
  auto p = init_params<float>(small_config(), 15);
  std::vector<TaskInstance> eval{gen_niah(3, 24, 1), gen_niah(4, 24, 1)};
  std::vector<SftExample> batch{sft_example(eval[0]), sft_example(eval[1])};
  Adam<float> opt(p, AdamConfig{3e-3});
  for (int i = 0; i < 300; ++i) sft_step(p, opt, std::span<const SftExample>(batch));
  auto r = evaluate(p, std::span<const TaskInstance>(eval), EvalOptions{true, 16});
  EXPECT_EQ(r.accuracy, 1.0);
  EXPECT_EQ(r.mean_reward, 2.0);
  EXPECT_EQ(r.outputs[0], gold_response(eval[0]));
}
