#pragma once

// Episode rollouts in the double-merge simulator, gradient estimation over
// recorded traversals, imitation initialization and A/B self-play.

#include <array>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "mergerl/learner.hpp"
#include "mergerl/options.hpp"
#include "mergerl/planner.hpp"
#include "mergerl/simulator.hpp"

namespace mergerl::learn {

// Everything that stays fixed across episodes.
struct Environment {
  options::OptionGraph graph = options::OptionGraph::default_graph();
  sim::SceneConfig scene;
  planner::PlannerConfig planner;
  options::GatingSchedule gating;
  sim::ExpertConfig expert;

  void validate() const;
};

// ---- episodes -----------------------------------------------------------------

struct StepRecord {
  int step = 0;
  options::TraversalTrace trace;
  double reward = 0.0;
  double speed = 0.0;              // baseline inputs, taken before acting
  double distance_to_merge = 0.0;
};

struct EpisodeTrace {
  int agent = -1;
  std::vector<StepRecord> steps;
  double total_return = 0.0;
  double discount = 1.0;
  sim::Outcome outcome = sim::Outcome::Running;

  double recompute_return() const;
};

struct AgentStepInfo {
  int id = -1;
  Desires desires;
  planner::PlanResult plan;
  options::TraversalTrace trace;  // without tapes
};

// Called after every simulator step with the new world, what each running
// agent asked for and received, and the step rewards.
using StepObserver = std::function<void(const sim::WorldState&,
                                        const std::vector<AgentStepInfo>&,
                                        const std::vector<double>&)>;

// Per-agent policy: null params selects the scripted expert.
struct AgentAssignment {
  std::vector<const options::PolicyParams*> params;
  std::vector<bool> record;
};

struct EpisodeSummary {
  std::vector<sim::Outcome> outcomes;
  std::vector<double> returns;
  int length = 0;
  std::size_t fallbacks = 0;
  std::vector<EpisodeTrace> traces;  // recorded agents only
};

// Scene and policy randomness both derive from (seed, index).
EpisodeSummary run_episode(const Environment& env, std::uint64_t seed,
                           std::uint64_t index, const AgentAssignment& agents,
                           const StepObserver& observer = {});

// Builds an assignment giving every agent the same policy.
AgentAssignment uniform_assignment(const Environment& env,
                                   const options::PolicyParams* params,
                                   bool record = false);

// ---- gradient estimation ------------------------------------------------------

enum class BaselineMode { None, Online };

struct CreditConfig {
  int high_window = -1;  // reward steps credited to high-level decisions
  int low_window = 25;   // to speed and label decisions; -1 = whole episode
  double discount = 1.0;
};

CreditConfig credit_from(const options::GatingSchedule& gating, double discount);

inline constexpr std::size_t kBaselineFeatures = 4;  // 1, t/T, v/vmax, d/300

struct BaselineSample {
  std::size_t group = 0;  // parameter set
  std::array<double, kBaselineFeatures> phi{};
  double target = 0.0;
};

// Sum of discounted rewards in [t, t + window) clipped to the episode.
double window_return(const EpisodeTrace& trace, std::size_t t, int window,
                     double discount);

// Averages per-trace gradients sum_t (R_window - b) grad log pi and tracks
// their spread per parameter set.
class GradientAccumulator {
 public:
  explicit GradientAccumulator(const options::PolicyParams& params);

  void add(const options::OptionGraph& graph, const options::PolicyParams& params,
           const EpisodeTrace& trace, const CreditConfig& credit,
           const OnlineBaseline* baseline, const sim::SceneConfig& scene,
           std::vector<BaselineSample>* samples = nullptr);

  std::size_t traces() const { return count_; }
  std::vector<net::GradVector> mean() const;
  // Trace of the per-set covariance of the per-trace gradients.
  std::vector<double> variance_by_set() const;

 private:
  std::vector<net::GradVector> sum_;
  std::vector<double> sq_norm_sum_;
  std::size_t count_ = 0;
};

struct GradientEstimate {
  std::vector<net::GradVector> gradient;
  std::vector<double> variance_by_set;
};

GradientEstimate estimate_gradient(const options::OptionGraph& graph,
                                   const options::PolicyParams& params,
                                   const std::vector<EpisodeTrace>& traces,
                                   const CreditConfig& credit,
                                   const OnlineBaseline* baseline,
                                   const sim::SceneConfig& scene);

std::array<double, kBaselineFeatures> baseline_features(const StepRecord& s,
                                                        const sim::SceneConfig& scene);

// ---- imitation ----------------------------------------------------------------

struct Demo {
  AgnosticState state;
  sim::ExpertDecision decision;     // labels replaced by inferred ones
  options::TraversalTrace previous; // expert path one step earlier, no tapes
};

struct ImitationConfig {
  int demo_episodes = 16;
  int heldout_episodes = 4;
  int epochs = 4;
  int batch_size = 32;
  double learning_rate = 0.05;
  int label_horizon = 25;          // steps looked ahead when inferring labels
  double separation_lanes = 0.9;   // never closer than this -> offset label

  void validate() const;
};

// Label implied by what happened next: offset when the two vehicles never
// shared a lane band in the window, take-way when the ego ended up ahead,
// give-way otherwise.
Label infer_label(std::span<const double> ego_s, std::span<const double> ego_lane,
                  std::span<const double> other_s, std::span<const double> other_lane,
                  double separation_lanes);

std::vector<Demo> collect_demos(const Environment& env, std::uint64_t seed,
                                std::uint64_t first_index, int episodes,
                                const ImitationConfig& config);

struct ImitationStats {
  double nll = 0.0;        // mean negative log-likelihood per decision
  double agreement = 0.0;  // fraction of decisions where argmax == expert
  std::size_t decisions = 0;
};

ImitationStats imitation_stats(const options::OptionGraph& graph,
                               const options::PolicyParams& params,
                               const std::vector<Demo>& demos);

// Minimises per-node cross-entropy against the expert's choices by SGD.
options::PolicyParams imitation_init(const std::vector<Demo>& demos,
                                     const options::OptionGraph& graph,
                                     const options::PolicyParams& params,
                                     const ImitationConfig& config, Rng& rng);

// ---- self-play ----------------------------------------------------------------

struct TrainConfig {
  int rounds = 4;
  int episodes_per_round = 200;
  int batch_episodes = 10;        // episodes per parameter update
  double learning_rate = 0.1;
  bool decay = true;              // learning_rate / sqrt(round)
  double clip_norm = 1.0;         // per parameter set; 0 disables
  BaselineMode baseline = BaselineMode::Online;
  bool full_return = false;       // credit every decision with the episode return
  std::uint64_t seed = 1;

  void validate() const;
};

struct RoundMetrics {
  int round = 0;
  int episodes = 0;
  double merge_rate = 0.0;
  double wrong_side_rate = 0.0;
  int accidents = 0;
  double mean_return = 0.0;
  std::vector<std::pair<std::string, double>> grad_variance;  // per set
  bool aborted = false;
};

struct TrainResult {
  options::PolicyParams params;
  std::vector<RoundMetrics> history;
};

using RoundCallback =
    std::function<void(const RoundMetrics&, const options::PolicyParams&)>;

// Agents with even id form set A, odd id set B. In odd rounds B learns while
// A drives with the parameters frozen at the start of the round; in even
// rounds the roles swap.
TrainResult self_play_train(const Environment& env, const TrainConfig& config,
                            const options::PolicyParams& init,
                            const RoundCallback& on_round = {});

void write_metrics_csv(std::ostream& out, const std::vector<RoundMetrics>& rows);

// ---- evaluation ---------------------------------------------------------------

struct EvalMetrics {
  int episodes = 0;
  int agents = 0;
  double merge_rate = 0.0;
  double wrong_side_rate = 0.0;
  int accidents = 0;
  double mean_return = 0.0;
  double mean_length = 0.0;
  std::size_t fallbacks = 0;
};

// params null: scripted expert. Episodes use indices first..first+episodes-1.
EvalMetrics evaluate(const Environment& env, const options::PolicyParams* params,
                     std::uint64_t seed, int episodes, std::uint64_t first = 0);

}  // namespace mergerl::learn
