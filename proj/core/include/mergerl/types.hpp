#pragma once

// Domain types shared by the simulator, the option graph and the planner.
//
// Ego frame: road-aligned axes centred on the ego vehicle. x is lateral in
// meters (positive towards higher lane numbers), y is longitudinal in meters
// (positive ahead). Lateral lane positions use lane units: lane centres at
// whole numbers 1..2n (n lanes per side), boundaries at half units.

#include <array>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

namespace mergerl {

inline constexpr double kTau = 0.1;           // seconds between plan points
inline constexpr std::size_t kPlanPoints = 10;  // k
inline constexpr std::size_t kMaxSensed = 8;    // vehicle-count cap

enum class Side { Left, Right };

inline constexpr Side other_side(Side s) {
  return s == Side::Left ? Side::Right : Side::Left;
}
std::string_view to_string(Side s);

struct Point {
  double x = 0.0;  // lateral, m
  double y = 0.0;  // longitudinal, m

  friend bool operator==(const Point&, const Point&) = default;
};

inline double distance_sq(const Point& a, const Point& b) {
  const double dx = a.x - b.x, dy = a.y - b.y;
  return dx * dx + dy * dy;
}
inline double distance(const Point& a, const Point& b) {
  return std::sqrt(distance_sq(a, b));
}

// k points at tau spacing in the ego frame; point i is the position at time
// tau * i (i = 1..k). The ego's current position is the implicit origin.
struct TrajectoryPlan {
  std::array<Point, kPlanPoints> points{};
  bool fallback = false;  // set when no lattice candidate was feasible

  bool all_finite() const;
  friend bool operator==(const TrajectoryPlan&, const TrajectoryPlan&) = default;
};

enum class Label { GiveWay, TakeWay, Offset };
char to_char(Label l);

struct Desires {
  double speed = 0.0;    // target speed, m/s, in [0, v_max]
  double lateral = 1.0;  // lane units, in L = {1, 1.5, ..., 2n}
  std::vector<Label> labels;  // one per sensed vehicle, chain order

  friend bool operator==(const Desires&, const Desires&) = default;
};

struct LaneGeometry {
  double lane_width_m = 3.5;
  int lanes_per_side = 2;
  double merge_start_ahead_m = 0.0;  // negative once the ego is past it
  double merge_end_ahead_m = 0.0;
  double edge_margin_lanes = 0.25;   // drivable band is [1 - m, 2n + m]

  double barrier_lane() const { return lanes_per_side + 0.5; }
  double min_lane() const { return 1.0; }
  double max_lane() const { return 2.0 * lanes_per_side; }
  Side side_of(double lane) const {
    return lane < barrier_lane() ? Side::Left : Side::Right;
  }
  // The barrier between the two roads exists outside the merge area.
  bool barrier_at(double y_ahead_m) const {
    return y_ahead_m < merge_start_ahead_m || y_ahead_m >= merge_end_ahead_m;
  }

  friend bool operator==(const LaneGeometry&, const LaneGeometry&) = default;
};

struct SensedVehicle {
  int id = -1;
  double x = 0.0;   // relative lateral position, m
  double y = 0.0;   // relative longitudinal position, m
  double vx = 0.0;  // lateral velocity, m/s
  double vy = 0.0;  // longitudinal velocity, m/s
  double heading = 0.0;

  friend bool operator==(const SensedVehicle&, const SensedVehicle&) = default;
};

// Per-agent sensing snapshot. Contains only ego-relative quantities so that a
// rigid longitudinal translation of the whole scene leaves it unchanged.
struct AgnosticState {
  double ego_speed = 0.0;
  double ego_heading = 0.0;
  double ego_lateral_velocity = 0.0;  // m/s
  double ego_lane = 1.0;              // lateral position in lane units
  double distance_to_merge_m = 0.0;   // to merge-area start; < 0 inside/past
  double v_max = 25.0;
  LaneGeometry lanes;
  Side origin_side = Side::Left;
  std::optional<Side> target_side;    // only within assignment range
  std::vector<SensedVehicle> others;  // within sensing range, chain order

  double longitudinal_speed() const;
  double lateral_of(double lane) const {  // ego-frame x of a lane position
    return (lane - ego_lane) * lanes.lane_width_m;
  }

  friend bool operator==(const AgnosticState&, const AgnosticState&) = default;
};

}  // namespace mergerl
