#pragma once

// Policy-gradient estimators without a Markov assumption, baselines, and the
// exact oracles (enumerable toy environment) used to check them.

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mergerl/net.hpp"

namespace mergerl::learn {

// ---- toy environment ----------------------------------------------------------

struct ToyTrajectory {
  std::vector<int> states;   // s_1..s_T
  std::vector<int> actions;  // a_1..a_T

  friend bool operator==(const ToyTrajectory&, const ToyTrajectory&) = default;
};

// Finite environment whose next-state law depends on the whole history and
// whose reward is a table over complete trajectories. Small enough to sum
// over every trajectory exactly.
class ToyEnv {
 public:
  ToyEnv(std::uint64_t seed, int states = 2, int actions = 2, int horizon = 3);

  int states() const { return states_; }
  int actions() const { return actions_; }
  int horizon() const { return horizon_; }
  std::uint64_t seed() const { return seed_; }

  // P[s_t = next | s_1, a_1, ..., s_{t-1}, a_{t-1}]; prefix.states has t-1
  // entries (empty for the initial state).
  double transition(const ToyTrajectory& prefix, int next) const;
  double reward(const ToyTrajectory& full) const;  // in [-1, 1]

  std::size_t trajectory_count() const;

 private:
  std::uint64_t seed_;
  int states_, actions_, horizon_;
};

// Policy input for the toy env: one-hot of the current state.
std::vector<double> toy_input(const ToyEnv& env, int state);

struct WeightedTrajectory {
  ToyTrajectory trajectory;
  double probability = 0.0;
};

// Every trajectory with its probability under the policy.
std::vector<WeightedTrajectory> enumerate(const ToyEnv& env,
                                          const net::NetParams& policy);

double expected_return(const ToyEnv& env, const net::NetParams& policy);

// Per-step gradients grad log pi(a_t | s_t), one flat vector per step.
std::vector<std::vector<double>> step_grads(const ToyEnv& env,
                                            const net::NetParams& policy,
                                            const ToyTrajectory& traj);

// Baseline b_{t,i}: t is 0-based, i a flat parameter coordinate. A valid
// baseline reads only states[0..t] and actions[0..t-1] of the trajectory.
using ToyBaseline =
    std::function<double(const ToyTrajectory&, int t, std::size_t coord)>;

enum class ReturnTerm { Total, QValue };

// Exact E[sum_t (X_t - b_{t,i}) grad_i log pi(a_t|s_t)], X_t = R or Q(s_1:t).
std::vector<double> expected_estimator(const ToyEnv& env,
                                       const net::NetParams& policy,
                                       ReturnTerm term = ReturnTerm::Total,
                                       const ToyBaseline& baseline = {},
                                       double sign = 1.0);

// Central five-point finite difference of expected_return.
std::vector<double> finite_difference_gradient(const ToyEnv& env,
                                               const net::NetParams& policy,
                                               double h = 1e-3);

// Exact max_i |E[sum_t b_{t,i} grad_i log pi(a_t|s_t)]|.
double baseline_zero_check(const ToyEnv& env, const net::NetParams& policy,
                           const ToyBaseline& baseline);

// prefix holds s_1..s_t and a_1..a_t.
double q_value(const ToyEnv& env, const net::NetParams& policy,
               const ToyTrajectory& prefix);
// prefix holds s_1..s_{t-1}, a_1..a_{t-1}; s_t given separately.
double v_value(const ToyEnv& env, const net::NetParams& policy,
               const ToyTrajectory& prefix, int s_t);
// Q(s_1:t) - V(s_1:t-1, s_t) for a prefix with actions up to a_t.
double advantage(const ToyEnv& env, const net::NetParams& policy,
                 const ToyTrajectory& prefix);

ToyTrajectory sample_trajectory(const ToyEnv& env, const net::NetParams& policy,
                                Rng& rng);

// ---- optimal constant baseline ------------------------------------------------

// One sampled trajectory reduced to what the baseline solve needs.
struct GradSample {
  double ret = 0.0;
  std::vector<std::vector<double>> grads;  // [t][coord]
};

struct BaselineSolve {
  std::vector<std::vector<double>> X;  // T x T
  std::vector<double> y;
  std::vector<double> b;
  bool degenerate = false;
};

inline constexpr double kBaselineRidge = 1e-6;

// Solves (X + lambda I) b = y for one coordinate, with
// X_{tau,t} = mean g_tau g_t and y_tau = mean R g_tau sum_t g_t.
BaselineSolve solve_optimal_baseline(std::span<const GradSample> samples,
                                     std::size_t coord,
                                     double ridge = kBaselineRidge);
BaselineSolve solve_linear(std::vector<std::vector<double>> X,
                           std::vector<double> y, double ridge = kBaselineRidge);

// Per-coordinate variance of sum_t (R - b_{t,i}) g_{t,i} over samples; b may be
// empty (no baseline) or hold one vector of length T per coordinate.
std::vector<double> estimator_variance(std::span<const GradSample> samples,
                                       const std::vector<std::vector<double>>& b);

// ---- online regression baseline -----------------------------------------------

// Running least squares, one regressor per group (parameter set).
class OnlineBaseline {
 public:
  OnlineBaseline() = default;
  OnlineBaseline(std::size_t groups, std::size_t features, double ridge = kBaselineRidge);

  void add(std::size_t group, std::span<const double> phi, double target);
  double predict(std::size_t group, std::span<const double> phi) const;
  std::size_t count(std::size_t group) const;
  std::size_t groups() const { return stats_.size(); }
  std::size_t features() const { return features_; }

 private:
  struct Stats {
    std::vector<double> A;  // features x features
    std::vector<double> c;
    std::vector<double> w;  // cached solution
    std::size_t n = 0;
  };
  void refresh(Stats& s) const;

  std::size_t features_ = 0;
  double ridge_ = kBaselineRidge;
  std::vector<Stats> stats_;
};

// Batch least-squares solution for the same features (oracle).
std::vector<double> batch_least_squares(const std::vector<std::vector<double>>& phi,
                                        const std::vector<double>& target,
                                        double ridge = kBaselineRidge);

// ---- safety variance ----------------------------------------------------------

// p r^2 - (p r + (1 - p))^2
double safety_bound(double p, double r);

// Variance of the return that is -r with probability p and `other` otherwise.
double two_point_variance(double p, double r, double other);

struct SafetyDiagnostics {
  double p = 0.0;
  double r = 0.0;
  double bound = 0.0;
  double return_variance = 0.0;
  std::vector<double> grad_variance;  // per parameter set
};

SafetyDiagnostics safety_diagnostics(std::span<const double> returns, double r,
                                     std::vector<double> grad_variance = {});

}  // namespace mergerl::learn
