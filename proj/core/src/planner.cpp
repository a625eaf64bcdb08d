#include "mergerl/planner.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "mergerl/error.hpp"

namespace mergerl::planner {

void CostWeights::validate() const {
  require(speed >= 0, "weights.speed must be >= 0");
  require(lateral >= 0, "weights.lateral must be >= 0");
  require(give_way >= 0, "weights.give_way must be >= 0");
  require(take_way >= 0, "weights.take_way must be >= 0");
  require(offset >= 0, "weights.offset must be >= 0");
  require(smoothness >= 0, "weights.smoothness must be >= 0");
}

void HardConstraintConfig::validate() const {
  require(min_separation_m > 0, "constraints.min_separation_m must be > 0");
  require(index_window >= 0, "constraints.index_window must be >= 0");
  require(time_margin_s >= 0, "constraints.time_margin_s must be >= 0");
  require(first_step_slack_m >= 0, "constraints.first_step_slack_m must be >= 0");
  require(lateral_overlap_m > 0, "constraints.lateral_overlap_m must be > 0");
  require(response_time_s >= 0, "constraints.response_time_s must be >= 0");
  require(max_accel >= 0, "constraints.max_accel must be >= 0");
  require(max_brake > 0, "constraints.max_brake must be > 0");
}

std::size_t Lattice::candidate_count() const {
  std::size_t per_stage = accelerations.size() * lateral_velocities.size();
  std::size_t n = 1;
  for (int s = 0; s < stages; ++s) n *= per_stage;
  return n;
}

void Lattice::validate() const {
  require(!accelerations.empty() && !lateral_velocities.empty(),
          "lattice.accelerations and lattice.lateral_velocities must be non-empty");
  require(stages >= 1 && kPlanPoints % static_cast<std::size_t>(stages) == 0,
          "lattice.stages must divide the plan length");
  require(fallback_accel <= 0, "lattice.fallback_accel must be <= 0");
}

void PlannerConfig::validate() const {
  weights.validate();
  constraints.validate();
  lattice.validate();
  require(intersection_threshold_m > 0,
          "planner.intersection_threshold_m must be > 0");
  require(offset_margin_m >= 0, "planner.offset_margin_m must be >= 0");
}

std::string to_string(ViolationKind k) {
  switch (k) {
    case ViolationKind::OffRoad: return "off_road";
    case ViolationKind::Separation: return "separation";
    case ViolationKind::FollowingGap: return "following_gap";
  }
  return "unknown";
}

std::vector<PredictedTrajectory> predict_others(const AgnosticState& state) {
  std::vector<PredictedTrajectory> out;
  out.reserve(state.others.size());
  for (const SensedVehicle& o : state.others) {
    PredictedTrajectory p;
    p.id = o.id;
    p.vx = o.vx;
    p.vy = o.vy;
    for (std::size_t j = 0; j < kPlanPoints; ++j) {
      const double t = kTau * static_cast<double>(j + 1);
      p.points[j] = {o.x + o.vx * t, o.y + o.vy * t};
    }
    out.push_back(p);
  }
  return out;
}

// ---- cost terms -----------------------------------------------------------

double cost_speed(const TrajectoryPlan& plan, double target_speed) {
  double c = 0.0;
  for (std::size_t i = 1; i < kPlanPoints; ++i) {
    const double d = target_speed - distance(plan.points[i], plan.points[i - 1]) / kTau;
    c += d * d;
  }
  return c;
}

double cost_lateral(const TrajectoryPlan& plan, double lane,
                    const AgnosticState& frame) {
  const double target_x = frame.lateral_of(lane);
  double c = 0.0;
  for (const Point& p : plan.points)
    c += std::abs(p.x - target_x) / frame.lanes.lane_width_m;
  return c;
}

namespace {

double second_diff_sq(const Point& a, const Point& b, const Point& c) {
  const double dx = c.x - 2.0 * b.x + a.x;
  const double dy = c.y - 2.0 * b.y + a.y;
  return dx * dx + dy * dy;
}

}  // namespace

double cost_smoothness(const TrajectoryPlan& plan) {
  double c = 0.0;
  for (std::size_t i = 1; i + 1 < kPlanPoints; ++i)
    c += second_diff_sq(plan.points[i - 1], plan.points[i], plan.points[i + 1]);
  return c;
}

std::optional<Intersection> intersection_indices(
    const TrajectoryPlan& plan, const PredictedTrajectory& other,
    double threshold) {
  require(threshold > 0, "intersection threshold must be > 0");
  const double t2 = threshold * threshold;
  for (std::size_t i = 0; i < kPlanPoints; ++i)
    for (std::size_t j = 0; j < kPlanPoints; ++j)
      if (distance_sq(plan.points[i], other.points[j]) < t2)
        return Intersection{static_cast<int>(i + 1), static_cast<int>(j + 1)};
  return std::nullopt;
}

double cost_giveway(std::optional<Intersection> hit, double time_margin_s) {
  if (!hit) return 0.0;
  return std::max(0.0, kTau * (hit->j - hit->i) + time_margin_s);
}

double cost_takeway(std::optional<Intersection> hit, double time_margin_s) {
  if (!hit) return 0.0;
  return std::max(0.0, kTau * (hit->i - hit->j) + time_margin_s);
}

double cost_offset(const TrajectoryPlan& plan, const PredictedTrajectory& other,
                   double threshold, double margin_m) {
  if (!intersection_indices(plan, other, threshold)) return 0.0;
  double min_d2 = std::numeric_limits<double>::infinity();
  for (const Point& p : plan.points)
    for (const Point& q : other.points) min_d2 = std::min(min_d2, distance_sq(p, q));
  return std::max(0.0, margin_m - std::sqrt(min_d2));
}

CostBreakdown cost_breakdown(const TrajectoryPlan& plan, const Desires& desires,
                             const AgnosticState& frame,
                             const std::vector<PredictedTrajectory>& predictions,
                             const PlannerConfig& config) {
  require(desires.labels.size() == predictions.size(),
          "one label per predicted vehicle is required");
  const CostWeights& w = config.weights;
  CostBreakdown b;
  b.speed = w.speed * cost_speed(plan, desires.speed);
  b.lateral = w.lateral * cost_lateral(plan, desires.lateral, frame);
  const double margin = config.constraints.time_margin_s;
  for (std::size_t m = 0; m < predictions.size(); ++m) {
    const auto& other = predictions[m];
    switch (desires.labels[m]) {
      case Label::GiveWay:
        b.give_way += w.give_way *
            cost_giveway(intersection_indices(plan, other,
                                              config.intersection_threshold_m),
                         margin);
        break;
      case Label::TakeWay:
        b.take_way += w.take_way *
            cost_takeway(intersection_indices(plan, other,
                                              config.intersection_threshold_m),
                         margin);
        break;
      case Label::Offset:
        b.offset += w.offset * cost_offset(plan, other,
                                           config.intersection_threshold_m,
                                           config.offset_margin_m);
        break;
    }
  }
  b.smoothness = w.smoothness * cost_smoothness(plan);
  b.total = b.speed + b.lateral + b.give_way + b.take_way + b.offset +
            b.smoothness;
  return b;
}

double total_cost(const TrajectoryPlan& plan, const Desires& desires,
                  const AgnosticState& frame,
                  const std::vector<PredictedTrajectory>& predictions,
                  const PlannerConfig& config) {
  return cost_breakdown(plan, desires, frame, predictions, config).total;
}

// ---- hard constraints -----------------------------------------------------

namespace {

// Longitudinal gap the rear vehicle needs to stop behind the front one when
// the front one brakes at full strength after one response interval.
double following_distance(double v_rear, double v_front,
                          const HardConstraintConfig& c) {
  const double rho = c.response_time_s;
  const double v_after = v_rear + rho * c.max_accel;
  const double d = v_rear * rho + 0.5 * c.max_accel * rho * rho +
                   v_after * v_after / (2.0 * c.max_brake) -
                   v_front * v_front / (2.0 * c.max_brake);
  return std::max(0.0, d);
}

// Checks every constraint that involves ego point m (0-based) and reports
// violations through sink; returns false as soon as sink returns false.
template <class Sink>
bool check_point(std::size_t m, const std::array<Point, kPlanPoints>& pts,
                 const std::vector<PredictedTrajectory>& predictions,
                 const AgnosticState& frame, const HardConstraintConfig& c,
                 Sink&& sink) {
  const LaneGeometry& lanes = frame.lanes;
  const double lw = lanes.lane_width_m;
  const Point prev = m == 0 ? Point{} : pts[m - 1];
  const Point p = pts[m];
  const int idx = static_cast<int>(m + 1);

  // Road: inside the outer edges; outside the merge area no straddling of and
  // no crossing over the barrier line.
  const double lane = frame.ego_lane + p.x / lw;
  const double lane_prev = frame.ego_lane + prev.x / lw;
  const double margin = lanes.edge_margin_lanes;
  bool off = lane < lanes.min_lane() - margin || lane > lanes.max_lane() + margin;
  if (!off && lanes.barrier_at(p.y)) {
    if (std::abs(lane - lanes.barrier_lane()) < margin) off = true;
    if (lanes.barrier_at(prev.y) &&
        lanes.side_of(lane) != lanes.side_of(lane_prev))
      off = true;
  }
  if (off && !sink(Violation{ViolationKind::OffRoad, idx, -1, 0, lane}))
    return false;

  const double ego_v = (p.y - prev.y) / kTau;
  for (const PredictedTrajectory& o : predictions) {
    // Minimum separation at nearby time indices.
    const int w = c.index_window;
    for (int j = std::max(1, idx - w);
         j <= std::min(static_cast<int>(kPlanPoints), idx + w); ++j) {
      const double need =
          c.min_separation_m + (idx == 1 && j == 1 ? c.first_step_slack_m : 0.0);
      const double d2 = distance_sq(p, o.points[static_cast<std::size_t>(j - 1)]);
      if (d2 < need * need &&
          !sink(Violation{ViolationKind::Separation, idx, o.id, j, std::sqrt(d2)}))
        return false;
    }
    if (!c.following_gap) continue;
    const Point& q = o.points[m];
    if (std::abs(p.x - q.x) >= c.lateral_overlap_m) continue;
    const double gap = std::abs(p.y - q.y);
    const bool ego_behind = p.y < q.y;
    const double need =
        c.min_separation_m +
        (ego_behind ? following_distance(ego_v, o.vy, c)
                    : following_distance(o.vy, ego_v, c));
    if (gap < need &&
        !sink(Violation{ViolationKind::FollowingGap, idx, o.id, idx, gap}))
      return false;
  }
  return true;
}

}  // namespace

FeasibilityReport feasible(const TrajectoryPlan& plan,
                           const std::vector<PredictedTrajectory>& predictions,
                           const AgnosticState& frame,
                           const HardConstraintConfig& constraints) {
  FeasibilityReport report;
  for (std::size_t m = 0; m < kPlanPoints; ++m) {
    check_point(m, plan.points, predictions, frame, constraints,
                [&](const Violation& v) {
                  report.violations.push_back(v);
                  return true;
                });
  }
  report.feasible = report.violations.empty();
  return report;
}

// ---- lattice search -------------------------------------------------------

namespace {

struct Kinematics {
  Point pos;
  double v = 0.0;
};

Kinematics extend(Kinematics k, double accel, double lat_vel_lanes,
                  double lane_width, double v_max, std::size_t count,
                  Point* out) {
  for (std::size_t n = 0; n < count; ++n) {
    k.v = std::clamp(k.v + accel * kTau, 0.0, v_max);
    k.pos.y += k.v * kTau;
    k.pos.x += lat_vel_lanes * lane_width * kTau;
    out[n] = k.pos;
  }
  return k;
}

// Stage-additive part of the cost for ego points [from, to) given all points
// before `to` are filled in.
double additive_cost(const std::array<Point, kPlanPoints>& pts, std::size_t from,
                     std::size_t to, const Desires& desires,
                     const AgnosticState& frame, const CostWeights& w) {
  double c = 0.0;
  const double target_x = frame.lateral_of(desires.lateral);
  for (std::size_t m = from; m < to; ++m) {
    if (m >= 1) {
      const double d = desires.speed - distance(pts[m], pts[m - 1]) / kTau;
      c += w.speed * d * d;
    }
    c += w.lateral * std::abs(pts[m].x - target_x) / frame.lanes.lane_width_m;
    if (m >= 2) c += w.smoothness * second_diff_sq(pts[m - 2], pts[m - 1], pts[m]);
  }
  return c;
}

struct Search {
  const Desires& desires;
  const AgnosticState& state;
  const PlannerConfig& config;
  const std::vector<PredictedTrajectory>& predictions;
  std::size_t per_stage = 0;
  double best = std::numeric_limits<double>::infinity();
  std::array<Point, kPlanPoints> best_points{};
  bool found = false;
  std::size_t evaluated = 0;

  void expand(int stage, Kinematics k, std::array<Point, kPlanPoints>& pts,
              double bound) {
    const Lattice& lat = config.lattice;
    const std::size_t from = static_cast<std::size_t>(stage) * per_stage;
    const std::size_t to = from + per_stage;
    for (double a : lat.accelerations) {
      for (double lv : lat.lateral_velocities) {
        const Kinematics next =
            extend(k, a, lv, state.lanes.lane_width_m, state.v_max, per_stage,
                   pts.data() + from);
        bool ok = true;
        for (std::size_t m = from; m < to && ok; ++m)
          ok = check_point(m, pts, predictions, state, config.constraints,
                           [](const Violation&) { return false; });
        if (!ok) continue;
        const double b =
            bound + additive_cost(pts, from, to, desires, state, config.weights);
        // The remaining terms are non-negative; the slack keeps ties from
        // being pruned by summation-order rounding.
        if (b > best * (1.0 + 1e-12) + 1e-12) continue;
        if (to == kPlanPoints) {
          ++evaluated;
          TrajectoryPlan candidate;
          candidate.points = pts;
          const double c =
              total_cost(candidate, desires, state, predictions, config);
          if (c < best) {
            best = c;
            best_points = pts;
            found = true;
          }
        } else {
          expand(stage + 1, next, pts, b);
        }
      }
    }
  }
};

}  // namespace

TrajectoryPlan rollout_lattice(const AgnosticState& state,
                               const Lattice& lattice,
                               const LatticeChoice& choice) {
  require(choice.size() == static_cast<std::size_t>(lattice.stages),
          "one lattice choice per stage is required");
  const std::size_t per_stage = kPlanPoints / static_cast<std::size_t>(lattice.stages);
  TrajectoryPlan plan;
  Kinematics k{{}, state.longitudinal_speed()};
  for (std::size_t s = 0; s < choice.size(); ++s) {
    const auto [ai, li] = choice[s];
    require(ai < lattice.accelerations.size() &&
                li < lattice.lateral_velocities.size(),
            "lattice choice index out of range");
    k = extend(k, lattice.accelerations[ai], lattice.lateral_velocities[li],
               state.lanes.lane_width_m, state.v_max, per_stage,
               plan.points.data() + s * per_stage);
  }
  return plan;
}

PlanResult plan(const Desires& desires, const AgnosticState& state,
                const PlannerConfig& config) {
  const auto predictions = predict_others(state);
  require(desires.labels.size() == predictions.size(),
          "desires must carry one label per sensed vehicle");
  Search search{desires, state, config, predictions};
  search.per_stage = kPlanPoints / static_cast<std::size_t>(config.lattice.stages);
  std::array<Point, kPlanPoints> scratch{};
  search.expand(0, Kinematics{{}, state.longitudinal_speed()}, scratch, 0.0);

  PlanResult result;
  result.candidates_evaluated = search.evaluated;
  if (search.found) {
    result.plan.points = search.best_points;
  } else {
    extend(Kinematics{{}, state.longitudinal_speed()},
           config.lattice.fallback_accel, 0.0, state.lanes.lane_width_m,
           state.v_max, kPlanPoints, result.plan.points.data());
    result.plan.fallback = true;
    result.fallback = true;
  }
  result.cost = cost_breakdown(result.plan, desires, state, predictions, config);
  return result;
}

}  // namespace mergerl::planner
