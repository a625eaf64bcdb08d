#pragma once

// Deterministic kinematic model of the double-merge scene.
//
// Two approach roads (the left road carries lanes 1..n, the right road lanes
// n+1..2n) run side by side separated by a barrier, open into a shared merge
// area where lateral moves across the barrier line are allowed, and split
// again at the merge-area end. Each vehicle must leave the merge area on its
// assigned target side.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "mergerl/types.hpp"

namespace mergerl::sim {

struct RoadGeometry {
  double origin_m = 0.0;  // longitudinal coordinate where the approach starts
  double approach_length_m = 300.0;
  double merge_length_m = 100.0;
  int lanes_per_side = 2;
  double lane_width_m = 3.5;
  double v_max = 25.0;
  double sensing_range_m = 100.0;
  double assignment_range_m = 300.0;  // target side revealed within this
  double edge_margin_lanes = 0.25;

  double merge_start() const { return origin_m + approach_length_m; }
  double merge_end() const { return merge_start() + merge_length_m; }
  double barrier_lane() const { return lanes_per_side + 0.5; }
  Side side_of(double lane) const {
    return lane < barrier_lane() ? Side::Left : Side::Right;
  }
  void validate() const;
  friend bool operator==(const RoadGeometry&, const RoadGeometry&) = default;
};

enum class Outcome { Running, MergedOk, WrongSide, Accident };
std::string to_string(Outcome o);

struct VehicleState {
  int id = 0;
  double s = 0.0;        // longitudinal position, m
  double lateral = 1.0;  // lane units
  double speed = 0.0;    // m/s, >= 0
  double heading = 0.0;  // rad, 0 = along the road
  Side origin_side = Side::Left;
  Side target_side = Side::Left;
  double accel = 0.0;             // longitudinal acceleration of last step
  double lateral_velocity = 0.0;  // m/s, last step

  double longitudinal_speed() const;

  friend bool operator==(const VehicleState&, const VehicleState&) = default;
};

struct RewardConfig {
  double accident_penalty = 100.0;  // r; accident reward is -r
  double merge_reward = 1.0;
  double wrong_side_penalty = -0.5;
  // Largest total comfort penalty over an episode; spread over the horizon.
  double comfort_budget = 0.5;
  double jerk_weight = 1.0;    // longitudinal acceleration change term
  double lateral_weight = 1.0; // lateral velocity change term
  double jerk_ref = 6.0;       // m/s^2 change that saturates the penalty
  double discount = 1.0;       // gamma in (0, 1]

  void validate() const;
  friend bool operator==(const RewardConfig&, const RewardConfig&) = default;
};

struct SceneConfig {
  RoadGeometry geometry;
  int agents_per_side = 4;
  int horizon_steps = 350;
  double collision_distance_m = 2.5;
  double spawn_back_m = 45.0;   // spawn zone [origin - back, origin + front]
  double spawn_front_m = 5.0;
  double min_spawn_gap_m = 30.0;
  double spawn_speed_min = 15.0;
  double spawn_speed_max = 17.0;
  double cross_probability = 0.5;  // chance the target side is the other road
  RewardConfig reward;

  void validate() const;
  friend bool operator==(const SceneConfig&, const SceneConfig&) = default;
};

struct WorldState {
  SceneConfig config;
  std::vector<VehicleState> vehicles;  // index == id
  std::vector<Outcome> outcomes;
  int step = 0;

  double time() const { return step * kTau; }
  bool running(int id) const;
  bool all_terminal() const;
  std::vector<int> running_agents() const;

  friend bool operator==(const WorldState&, const WorldState&) = default;
};

// Places 2 * agents_per_side vehicles without overlap; deterministic in seed.
WorldState init_scene(std::uint64_t seed, const SceneConfig& config);
WorldState init_scene(std::uint64_t seed, int agents_per_side,
                      const RoadGeometry& geometry);

// Ego-frame snapshot for one running agent.
AgnosticState sense(const WorldState& world, int agent);

struct StepResult {
  WorldState world;
  std::vector<double> rewards;  // per vehicle id; 0 for already-terminal ones
};

// Advances every running agent to the first point of its plan (tau seconds),
// then evaluates collisions, merge-area exits and the horizon. plans is
// indexed by vehicle id; entries for terminal agents are ignored.
StepResult step(const WorldState& world,
                std::span<const std::optional<TrajectoryPlan>> plans);

// Sum_t gamma^t r_t with t counted from 0.
double discounted_return(std::span<const double> rewards, double discount);

// Time-gap keeping cruise controller with a simple merge rule. Produces the
// semantic choices the option graph can express, so that its decisions can be
// used directly as imitation targets.
struct ExpertConfig {
  double cruise_speed = 16.0;
  double time_gap_s = 1.5;
  double gap_ahead_m = 10.0;   // free space needed ahead in the target lane
  double gap_behind_m = 12.0;  // and behind
  double label_lateral_lanes = 1.5;  // beyond this lateral separation -> 'o'
};

enum class RootChoice { Prepare, Merge };
enum class LateralChoice { Left, Stay, Right };
enum class CommitChoice { Go, Stay, Push };
enum class SpeedChoice { Accelerate, Same, Decelerate };

struct ExpertDecision {
  RootChoice root = RootChoice::Prepare;
  LateralChoice lateral = LateralChoice::Stay;
  std::optional<CommitChoice> commitment;  // only after Left/Right
  SpeedChoice speed = SpeedChoice::Same;
  std::vector<Label> labels;               // one per sensed vehicle
};

ExpertDecision expert_decide(const AgnosticState& state,
                             const ExpertConfig& config = {});

}  // namespace mergerl::sim
