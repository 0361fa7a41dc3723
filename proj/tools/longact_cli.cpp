// longact: gen | sft | rl | eval | saliency | perturb

#include <cstdio>
#include <exception>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "longact/pipeline.hpp"

namespace {

using namespace longact;

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<double> lambda;
  std::optional<std::string> policy;
  std::optional<std::string> algo;
  std::optional<std::size_t> steps;
  std::optional<std::string> out;
  std::optional<std::string> init;
  std::vector<std::string> sets;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "config file (dotted key = value lines)");
  cmd->add_option("--seed", f.seed, "global seed");
  cmd->add_option("--lambda", f.lambda, "sparsity ratio for Q/K masks");
  cmd->add_option("--policy", f.policy, "selection policy")
      ->check(CLI::IsMember({"massive", "min", "random"}));
  cmd->add_option("--algo", f.algo, "RL algorithm")->check(CLI::IsMember({"grpo", "dapo", "full"}));
  cmd->add_option("--steps", f.steps, "training steps (SFT or RL)");
  cmd->add_option("--out", f.out, "output root (overrides $LONGACT_OUT)");
  cmd->add_option("--init", f.init, "starting checkpoint");
  cmd->add_option("--set", f.sets, "extra override, key=value (repeatable)");
}

RunConfig resolve(const CommonFlags& f, const std::string& command) {
  Overrides o;
  auto real = [](double v) {
    std::ostringstream os;
    os.precision(17);
    os << v;
    return os.str();
  };
  if (f.seed) o.emplace_back("run.seed", std::to_string(*f.seed));
  if (f.lambda) o.emplace_back("train.lambda", real(*f.lambda));
  if (f.policy) o.emplace_back("train.policy", *f.policy);
  if (f.algo) o.emplace_back("train.algo", *f.algo);
  if (f.steps) o.emplace_back(command == "sft" ? "train.sft_steps" : "train.rl_steps", std::to_string(*f.steps));
  if (f.out) o.emplace_back("run.out", *f.out);
  if (f.init) o.emplace_back("run.init", *f.init);
  for (const auto& s : f.sets) {
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
    o.emplace_back(s.substr(0, eq), s.substr(eq + 1));
  }
  std::optional<std::filesystem::path> file;
  if (!f.config.empty()) file = f.config;
  return resolve_config(file, o);
}

void print_eval(const EvalResult& r) {
  std::printf("accuracy %.4f  mean_reward %.4f  collapse_rate %.4f  (%zu prompts)\n", r.accuracy,
              r.mean_reward, r.collapse_rate, r.count);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"LongAct: saliency-guided sparse updates for RL fine-tuning of a toy transformer"};
  app.require_subcommand(1);

  CommonFlags gen_f, sft_f, rl_f, eval_f, sal_f, pert_f;
  auto* gen = app.add_subcommand("gen", "generate sft/rl/eval datasets");
  auto* sft = app.add_subcommand("sft", "supervised cold start from random init");
  auto* rl = app.add_subcommand("rl", "RL fine-tuning from a checkpoint");
  auto* eval = app.add_subcommand("eval", "greedy evaluation of a checkpoint");
  auto* sal = app.add_subcommand("saliency", "dump Q/K magnitude grids as CSV");
  auto* pert = app.add_subcommand("perturb", "clamp top/bottom Q/K coordinates and measure");
  add_common(gen, gen_f);
  add_common(sft, sft_f);
  add_common(rl, rl_f);
  add_common(eval, eval_f);
  add_common(sal, sal_f);
  add_common(pert, pert_f);

  std::string axis = "head_dim";
  std::optional<std::string> matrix;
  sal->add_option("--axis", axis, "grid axis")->check(CLI::IsMember({"head_dim", "sequence"}));
  sal->add_option("--matrix", matrix, "dump this matrix instead, rows separated by ';'");

  std::optional<std::string> target, layers;
  std::optional<double> fraction;
  pert->add_option("--target", target, "projection")->check(CLI::IsMember({"q", "k", "both"}));
  pert->add_option("--fraction", fraction, "clamped fraction of each head");
  pert->add_option("--layers", layers, "'all' or comma-separated layer ids");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      auto r = cmd_gen(resolve(gen_f, "gen"));
      std::printf("wrote %zu/%zu/%zu instances to %s\n", r.data.sft.size(), r.data.rl.size(),
                  r.data.eval.size(), r.paths.data().string().c_str());
    } else if (*sft) {
      auto r = cmd_sft(resolve(sft_f, "sft"));
      std::printf("sft: %zu steps, checkpoint %s\n", r.steps, r.paths.final_checkpoint().string().c_str());
      print_eval(r.eval);
    } else if (*rl) {
      auto r = cmd_rl(resolve(rl_f, "rl"));
      std::printf("rl: %zu steps, checkpoint %s\n", r.steps.size(),
                  r.paths.final_checkpoint().string().c_str());
      print_eval(r.eval);
    } else if (*eval) {
      auto r = cmd_eval(resolve(eval_f, "eval"));
      print_eval(r.eval);
      std::printf("report %s\n", (r.paths.reports() / "eval.json").string().c_str());
    } else if (*sal) {
      auto r = cmd_saliency(resolve(sal_f, "saliency"),
                            axis == "sequence" ? SaliencyAxis::sequence : SaliencyAxis::head_dim,
                            matrix);
      for (const auto& f : r.files) std::printf("%s\n", f.string().c_str());
    } else if (*pert) {
      auto& f = pert_f;
      if (target) f.sets.push_back("perturb.target=" + *target);
      if (fraction) f.sets.push_back("perturb.fraction=" + std::to_string(*fraction));
      if (layers) f.sets.push_back("perturb.layers=" + *layers);
      auto r = cmd_perturb(resolve(f, "perturb"));
      std::ifstream is(r.paths.reports() / "perturb.txt");
      std::cout << is.rdbuf();
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "longact: error: %s\n", e.what());
    return 1;
  }
  return 0;
}
