// mergerl: command line front end for the double-merge learning stack.

#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mergerl/cli.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::optional<int> rounds;
  std::optional<int> episodes;
  std::optional<std::string> checkpoint;
  std::string scene;
  bool flip_sign = false;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "Run configuration file")->check(CLI::ExistingFile);
  cmd->add_option("--seed", f.seed, "Master seed");
  cmd->add_option("--out", f.out, "Output directory");
}

mergerl::cli::RunConfig build_config(const Flags& f) {
  mergerl::cli::RunConfig c =
      f.config.empty() ? mergerl::cli::RunConfig{} : mergerl::cli::load_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (f.out) c.out_dir = *f.out;
  if (f.rounds) c.train.rounds = *f.rounds;
  if (f.episodes) {
    c.train.episodes_per_round = *f.episodes;
    c.eval_episodes = *f.episodes;
  }
  c.train.seed = c.seed;
  c.validate();
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Desires policy learning with a safe trajectory planner"};
  app.require_subcommand(1);
  Flags f;

  auto* verify = app.add_subcommand("verify", "Run the estimator, network and planner identity checks");
  add_common(verify, f);
  verify->add_flag("--flip-gradient-sign", f.flip_sign)->group("");  // test hook

  auto* imitate = app.add_subcommand("imitate", "Fit the policy to the scripted expert");
  add_common(imitate, f);

  auto* train = app.add_subcommand("train", "Self-play training from a checkpoint or fresh imitation");
  add_common(train, f);
  train->add_option("--rounds", f.rounds, "Self-play rounds");
  train->add_option("--episodes", f.episodes, "Episodes per round");
  train->add_option("--checkpoint", f.checkpoint, "Initial policy")->check(CLI::ExistingFile);

  auto* evaluate = app.add_subcommand("evaluate", "Merge, wrong-side and accident rates");
  add_common(evaluate, f);
  evaluate->add_option("--episodes", f.episodes, "Episodes to evaluate");
  evaluate->add_option("--checkpoint", f.checkpoint, "Policy; scripted expert when omitted")
      ->check(CLI::ExistingFile);

  auto* rollout = app.add_subcommand("rollout", "Write one episode as JSON Lines");
  add_common(rollout, f);
  rollout->add_option("--checkpoint", f.checkpoint, "Policy; scripted expert when omitted")
      ->check(CLI::ExistingFile);

  auto* plan = app.add_subcommand("plan", "Plan once for a scene file");
  add_common(plan, f);
  plan->add_option("scene", f.scene, "Scene file")->required()->check(CLI::ExistingFile);

  auto* defaults = app.add_subcommand("defaults", "Print the bundled configuration or option graph");
  bool graph_only = false;
  defaults->add_flag("--graph", graph_only, "Print the option graph instead");

  CLI11_PARSE(app, argc, argv);

  if (defaults->parsed()) {
    std::cout << (graph_only ? mergerl::options::default_graph_text()
                             : mergerl::cli::default_config_text());
    return 0;
  }

  namespace cli = mergerl::cli;
  const cli::Logger log(std::cerr, cli::log_level_from_env());
  try {
    const cli::RunConfig config = build_config(f);
    if (verify->parsed()) {
      const auto results = cli::cmd_verify(config, log, {f.flip_sign});
      int failed = 0;
      for (const auto& r : results) {
        std::cout << (r.pass ? "PASS " : "FAIL ") << r.name << " error=" << r.error
                  << " tol=" << r.tolerance << '\n';
        failed += r.pass ? 0 : 1;
      }
      return failed == 0 ? 0 : 1;
    }
    if (imitate->parsed()) {
      const auto s = cli::cmd_imitate(config, log);
      std::cout << "held-out agreement " << s.agreement << " nll " << s.nll << '\n';
    } else if (train->parsed()) {
      cli::cmd_train(config, log, f.checkpoint);
    } else if (evaluate->parsed()) {
      const auto m = cli::cmd_evaluate(config, log, f.checkpoint);
      std::cout << "merge_rate " << m.merge_rate << " wrong_side_rate " << m.wrong_side_rate
                << " accidents " << m.accidents << '\n';
    } else if (rollout->parsed()) {
      std::cout << cli::cmd_rollout(config, log, f.checkpoint) << '\n';
    } else if (plan->parsed()) {
      std::cout << cli::cmd_plan(config, log, f.scene) << '\n';
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}
