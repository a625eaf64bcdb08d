#pragma once

// Operator workflows behind the mergerl binary: run-config loading and one
// function per subcommand. Every command writes only under RunConfig::out_dir.

#include <cstdint>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "mergerl/training.hpp"

namespace mergerl::cli {

struct RunConfig {
  std::uint64_t seed = 1;
  std::string out_dir = "out";
  std::string graph_path;  // empty: bundled graph
  learn::Environment env;
  learn::ImitationConfig imitation;
  learn::TrainConfig train;
  int eval_episodes = 100;
  std::string source = "<defaults>";

  // Runs every module's validation; ContractError names the offending key.
  void validate() const;
};

// Parses the text format; unknown sections or keys and invalid values raise
// ParseError pointing at the offending line.
RunConfig parse_config(std::string_view text, const std::string& source);
RunConfig load_config(const std::string& path);

// Text of the bundled default configuration.
std::string default_config_text();

// Ego state, desires and sensed vehicles for the standalone planner.
struct PlanScene {
  AgnosticState state;
  Desires desires;
};

PlanScene parse_scene(std::string_view text, const std::string& source);
PlanScene load_scene(const std::string& path);

// ---- logging ------------------------------------------------------------------

enum class LogLevel { Quiet, Info, Debug };

// Reads MERGERL_LOG (quiet, info, debug); info when unset.
LogLevel log_level_from_env();

class Logger {
 public:
  Logger(std::ostream& sink, LogLevel level) : sink_(sink), level_(level) {}
  void info(const std::string& msg) const;
  void debug(const std::string& msg) const;

 private:
  std::ostream& sink_;
  LogLevel level_;
};

// ---- commands -----------------------------------------------------------------

struct CheckResult {
  std::string name;
  double error = 0.0;
  double tolerance = 0.0;
  bool pass = false;
  std::string detail;
};

struct VerifyOptions {
  bool flip_gradient_sign = false;  // mutation hook for the unbiasedness check
};

// Runs the estimator, network and planner identity checks, writes
// <out>/verify.json and returns the results (one per check).
std::vector<CheckResult> cmd_verify(const RunConfig& config, const Logger& log,
                                    const VerifyOptions& options = {});

// Collects demos, fits the policy, writes <out>/imitation.ckpt and
// <out>/imitation.json.
learn::ImitationStats cmd_imitate(const RunConfig& config, const Logger& log);

// Self-play from a checkpoint (or from a fresh imitation run when none is
// given); writes <out>/metrics.csv, <out>/round_<k>.ckpt, <out>/final.ckpt.
learn::TrainResult cmd_train(const RunConfig& config, const Logger& log,
                             const std::optional<std::string>& checkpoint);

// Stochastic-policy evaluation; no checkpoint means the scripted expert.
// Writes <out>/evaluate.json.
learn::EvalMetrics cmd_evaluate(const RunConfig& config, const Logger& log,
                                const std::optional<std::string>& checkpoint);

// Episode index 0 as JSON Lines in <out>/rollout.jsonl, one record per agent
// and step; returns the path.
std::string cmd_rollout(const RunConfig& config, const Logger& log,
                        const std::optional<std::string>& checkpoint);

// Plans once for a scene file. The report (plan points and weighted cost
// terms) uses the scene file's section format; written to <out>/plan.ini and
// returned.
std::string cmd_plan(const RunConfig& config, const Logger& log,
                     const std::string& scene_path);

std::string plan_report_text(const planner::PlanResult& result, std::size_t violations);

}  // namespace mergerl::cli
