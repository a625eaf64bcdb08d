#pragma once

// Non-learned trajectory layer: turns Desires into a cost over k-point
// trajectories and returns the cheapest candidate that satisfies the hard
// constraints. Nothing in here is trained.

#include <optional>
#include <string>
#include <vector>

#include "mergerl/types.hpp"

namespace mergerl::planner {

// Constant-velocity extrapolation of one sensed vehicle, ego frame.
struct PredictedTrajectory {
  int id = -1;
  std::array<Point, kPlanPoints> points{};
  double vx = 0.0;
  double vy = 0.0;
};

std::vector<PredictedTrajectory> predict_others(const AgnosticState& state);

struct CostWeights {
  double speed = 1.0;
  double lateral = 1.0;
  double give_way = 10.0;
  double take_way = 10.0;
  double offset = 5.0;
  double smoothness = 0.1;

  void validate() const;
};

struct HardConstraintConfig {
  double min_separation_m = 2.5;
  int index_window = 2;           // w in the |i - j| <= w proximity test
  double time_margin_s = 0.5;     // arrival margin used by give/take-way
  // Extra clearance demanded at the first plan point, covering how far
  // another vehicle can deviate from its constant-velocity prediction in one
  // step.
  double first_step_slack_m = 0.8;
  // Longitudinal gap between vehicles sharing a lane band must let the one
  // behind stop in time if the one in front brakes.
  bool following_gap = true;
  double lateral_overlap_m = 2.5;
  double response_time_s = 0.1;
  double max_accel = 3.0;
  double max_brake = 3.0;

  void validate() const;
};

struct Lattice {
  std::vector<double> accelerations{-3.0, -1.0, 0.0, 1.0, 3.0};  // m/s^2
  std::vector<double> lateral_velocities{-1.0, 0.0, 1.0};        // lanes/s
  int stages = 2;                 // each held for k / stages points
  double fallback_accel = -3.0;   // in-lane braking when nothing is feasible

  std::size_t candidate_count() const;
  void validate() const;
};

struct PlannerConfig {
  CostWeights weights;
  HardConstraintConfig constraints;
  Lattice lattice;
  double intersection_threshold_m = 3.0;
  double offset_margin_m = 5.0;

  void validate() const;
};

// ---- cost terms -----------------------------------------------------------

// sum_{i=2..k} (v - |p_i - p_{i-1}| / tau)^2
double cost_speed(const TrajectoryPlan& plan, double target_speed);

// sum_{i=1..k} dist(p_i, l), dist = |x_i - x(l)| in lane units.
double cost_lateral(const TrajectoryPlan& plan, double lane,
                    const AgnosticState& frame);

// Sum of squared second differences of consecutive plan points.
double cost_smoothness(const TrajectoryPlan& plan);

struct Intersection {
  int i = 0;  // 1-based index into the ego plan
  int j = 0;  // 1-based index into the other trajectory

  friend bool operator==(const Intersection&, const Intersection&) = default;
};

// Earliest i for which some j has |p_i - q_j| < threshold; for that i the
// smallest such j. nullopt encodes i = infinity.
std::optional<Intersection> intersection_indices(
    const TrajectoryPlan& plan, const PredictedTrajectory& other,
    double threshold);

// [tau (j - i) + margin]_+ ; 0 without an intersection.
double cost_giveway(std::optional<Intersection> hit, double time_margin_s = 0.5);
// [tau (i - j) + margin]_+ ; 0 without an intersection.
double cost_takeway(std::optional<Intersection> hit, double time_margin_s = 0.5);
// max(0, margin - min_{i,j} |p_i - q_j|) when the trajectories intersect.
double cost_offset(const TrajectoryPlan& plan, const PredictedTrajectory& other,
                   double threshold, double margin_m);

// Weighted contribution of every term; total is their sum.
struct CostBreakdown {
  double speed = 0.0;
  double lateral = 0.0;
  double give_way = 0.0;
  double take_way = 0.0;
  double offset = 0.0;
  double smoothness = 0.0;
  double total = 0.0;
};

CostBreakdown cost_breakdown(const TrajectoryPlan& plan, const Desires& desires,
                             const AgnosticState& frame,
                             const std::vector<PredictedTrajectory>& predictions,
                             const PlannerConfig& config);

double total_cost(const TrajectoryPlan& plan, const Desires& desires,
                  const AgnosticState& frame,
                  const std::vector<PredictedTrajectory>& predictions,
                  const PlannerConfig& config);

// ---- hard constraints -----------------------------------------------------

enum class ViolationKind { OffRoad, Separation, FollowingGap };
std::string to_string(ViolationKind k);

struct Violation {
  ViolationKind kind = ViolationKind::OffRoad;
  int plan_index = 0;   // 1-based
  int other_id = -1;    // sensed vehicle id, -1 for road violations
  int other_index = 0;  // 1-based point of the other trajectory
  double value = 0.0;   // offending distance (m) or lane position
};

struct FeasibilityReport {
  bool feasible = true;
  std::vector<Violation> violations;
};

FeasibilityReport feasible(const TrajectoryPlan& plan,
                           const std::vector<PredictedTrajectory>& predictions,
                           const AgnosticState& frame,
                           const HardConstraintConfig& constraints);

// ---- lattice --------------------------------------------------------------

// One candidate: an (acceleration, lateral velocity) index pair per stage.
using LatticeChoice = std::vector<std::pair<std::size_t, std::size_t>>;

TrajectoryPlan rollout_lattice(const AgnosticState& state,
                               const Lattice& lattice,
                               const LatticeChoice& choice);

struct PlanResult {
  TrajectoryPlan plan;
  CostBreakdown cost;
  bool fallback = false;
  std::size_t candidates_evaluated = 0;
};

// Minimum-cost feasible lattice trajectory. Stages are expanded in order with
// the stage-additive terms (speed, lateral, smoothness) as a lower bound;
// prefixes that already violate a hard constraint or whose bound exceeds the
// incumbent are not extended, so the result equals the exhaustive minimum.
PlanResult plan(const Desires& desires, const AgnosticState& state,
                const PlannerConfig& config);

}  // namespace mergerl::planner
