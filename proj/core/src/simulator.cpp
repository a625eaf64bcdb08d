#include "mergerl/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "mergerl/error.hpp"
#include "mergerl/rng.hpp"

namespace mergerl::sim {

std::string to_string(Outcome o) {
  switch (o) {
    case Outcome::Running: return "running";
    case Outcome::MergedOk: return "merged_ok";
    case Outcome::WrongSide: return "wrong_side";
    case Outcome::Accident: return "accident";
  }
  return "unknown";
}

void RoadGeometry::validate() const {
  require(approach_length_m > 0.0, "geometry.approach_length_m must be > 0");
  require(merge_length_m > 0.0, "geometry.merge_length_m must be > 0");
  require(lanes_per_side >= 1, "geometry.lanes_per_side must be >= 1");
  require(lane_width_m > 0.0, "geometry.lane_width_m must be > 0");
  require(v_max > 0.0, "geometry.v_max must be > 0");
  require(sensing_range_m > 0.0, "geometry.sensing_range_m must be > 0");
  require(assignment_range_m > 0.0, "geometry.assignment_range_m must be > 0");
  require(edge_margin_lanes >= 0.0 && edge_margin_lanes < 0.5,
          "geometry.edge_margin_lanes must be in [0, 0.5)");
}

void RewardConfig::validate() const {
  require(accident_penalty > 0.0, "reward.accident_penalty must be > 0");
  require(discount > 0.0 && discount <= 1.0, "reward.discount must be in (0, 1]");
  require(comfort_budget >= 0.0, "reward.comfort_budget must be >= 0");
  require(jerk_weight >= 0.0 && lateral_weight >= 0.0 && jerk_ref > 0.0,
          "reward.jerk_weight and reward.lateral_weight must be >= 0, reward.jerk_ref > 0");
  // Keeps every accident-free return inside [-1, 1].
  require(merge_reward <= 1.0 && merge_reward - comfort_budget >= -1.0,
          "reward.merge_reward must keep non-accident returns in [-1, 1]");
  require(wrong_side_penalty - comfort_budget >= -1.0 &&
              wrong_side_penalty <= 1.0,
          "reward.wrong_side_penalty - reward.comfort_budget must be >= -1");
}

void SceneConfig::validate() const {
  geometry.validate();
  reward.validate();
  require(agents_per_side >= 1, "scene.agents_per_side must be >= 1");
  require(horizon_steps >= 1, "scene.horizon_steps must be >= 1");
  require(collision_distance_m > 0.0, "scene.collision_distance_m must be > 0");
  require(spawn_back_m + spawn_front_m >= 0.0, "scene.spawn_back_m + scene.spawn_front_m must be >= 0");
  require(min_spawn_gap_m > collision_distance_m,
          "scene.min_spawn_gap_m must exceed the collision distance");
  require(spawn_speed_min >= 0.0 && spawn_speed_max >= spawn_speed_min &&
              spawn_speed_max <= geometry.v_max,
          "scene.spawn_speed_min and scene.spawn_speed_max must satisfy 0 <= min <= max <= v_max");
  require(cross_probability >= 0.0 && cross_probability <= 1.0,
          "scene.cross_probability must be in [0, 1]");
  require(spawn_front_m < geometry.approach_length_m,
          "scene.spawn_front_m must lie before the merge area");
}

double VehicleState::longitudinal_speed() const {
  return speed * std::cos(heading);
}

bool WorldState::running(int id) const {
  return id >= 0 && static_cast<std::size_t>(id) < outcomes.size() &&
         outcomes[static_cast<std::size_t>(id)] == Outcome::Running;
}

bool WorldState::all_terminal() const {
  return std::none_of(outcomes.begin(), outcomes.end(),
                      [](Outcome o) { return o == Outcome::Running; });
}

std::vector<int> WorldState::running_agents() const {
  std::vector<int> ids;
  for (std::size_t i = 0; i < outcomes.size(); ++i)
    if (outcomes[i] == Outcome::Running) ids.push_back(static_cast<int>(i));
  return ids;
}

WorldState init_scene(std::uint64_t seed, const SceneConfig& config) {
  config.validate();
  const RoadGeometry& g = config.geometry;
  const int per_lane_max =
      (config.agents_per_side + g.lanes_per_side - 1) / g.lanes_per_side;
  const double span = config.spawn_back_m + config.spawn_front_m;
  if ((per_lane_max - 1) * config.min_spawn_gap_m > span)
    throw ContractError("spawn zone of " + std::to_string(span) +
                        " m is too short for " + std::to_string(per_lane_max) +
                        " vehicles per lane");

  Rng rng = Rng::stream(seed, "scene");
  WorldState world;
  world.config = config;
  for (Side side : {Side::Left, Side::Right}) {
    const int first_lane = side == Side::Left ? 1 : g.lanes_per_side + 1;
    for (int lane_idx = 0; lane_idx < g.lanes_per_side; ++lane_idx) {
      int count = 0;
      for (int j = 0; j < config.agents_per_side; ++j)
        if (j % g.lanes_per_side == lane_idx) ++count;
      if (count == 0) continue;
      // Spread the slack beyond the minimum gaps randomly between vehicles.
      const double slack = span - (count - 1) * config.min_spawn_gap_m;
      std::vector<double> w(static_cast<std::size_t>(count) + 1);
      for (double& x : w) x = rng.uniform(0.05, 1.0);
      const double total = std::accumulate(w.begin(), w.end(), 0.0);
      double s = g.origin_m + config.spawn_front_m - slack * w[0] / total;
      for (int k = 0; k < count; ++k) {
        VehicleState v;
        v.id = static_cast<int>(world.vehicles.size());
        v.s = s;
        v.lateral = first_lane + lane_idx;
        v.speed = rng.uniform(config.spawn_speed_min, config.spawn_speed_max);
        v.heading = 0.0;
        v.origin_side = side;
        v.target_side =
            rng.bernoulli(config.cross_probability) ? other_side(side) : side;
        world.vehicles.push_back(v);
        s -= config.min_spawn_gap_m +
             slack * w[static_cast<std::size_t>(k) + 1] / total;
      }
    }
  }
  world.outcomes.assign(world.vehicles.size(), Outcome::Running);
  return world;
}

WorldState init_scene(std::uint64_t seed, int agents_per_side,
                      const RoadGeometry& geometry) {
  SceneConfig config;
  config.agents_per_side = agents_per_side;
  config.geometry = geometry;
  return init_scene(seed, config);
}

AgnosticState sense(const WorldState& world, int agent) {
  if (agent < 0 || static_cast<std::size_t>(agent) >= world.vehicles.size())
    throw ContractError("unknown agent " + std::to_string(agent));
  if (!world.running(agent))
    throw ContractError("agent " + std::to_string(agent) + " is not running");
  const RoadGeometry& g = world.config.geometry;
  const VehicleState& ego = world.vehicles[static_cast<std::size_t>(agent)];

  AgnosticState st;
  st.ego_speed = ego.speed;
  st.ego_heading = ego.heading;
  st.ego_lateral_velocity = ego.lateral_velocity;
  st.ego_lane = ego.lateral;
  st.distance_to_merge_m = g.merge_start() - ego.s;
  st.v_max = g.v_max;
  st.lanes.lane_width_m = g.lane_width_m;
  st.lanes.lanes_per_side = g.lanes_per_side;
  st.lanes.merge_start_ahead_m = g.merge_start() - ego.s;
  st.lanes.merge_end_ahead_m = g.merge_end() - ego.s;
  st.lanes.edge_margin_lanes = g.edge_margin_lanes;
  st.origin_side = ego.origin_side;
  if (st.distance_to_merge_m <= g.assignment_range_m)
    st.target_side = ego.target_side;

  for (const VehicleState& o : world.vehicles) {
    if (o.id == agent || !world.running(o.id)) continue;
    SensedVehicle sv;
    sv.id = o.id;
    sv.x = (o.lateral - ego.lateral) * g.lane_width_m;
    sv.y = o.s - ego.s;
    if (std::hypot(sv.x, sv.y) > g.sensing_range_m) continue;
    sv.vx = o.speed * std::sin(o.heading);
    sv.vy = o.speed * std::cos(o.heading);
    sv.heading = o.heading;
    st.others.push_back(sv);
  }
  // Chain order: nearest longitudinally first.
  std::sort(st.others.begin(), st.others.end(),
            [](const SensedVehicle& a, const SensedVehicle& b) {
              const double da = std::abs(a.y), db = std::abs(b.y);
              if (da != db) return da < db;
              if (a.x != b.x) return a.x < b.x;
              return a.id < b.id;
            });
  if (st.others.size() > kMaxSensed) st.others.resize(kMaxSensed);
  return st;
}

StepResult step(const WorldState& world,
                std::span<const std::optional<TrajectoryPlan>> plans) {
  const SceneConfig& cfg = world.config;
  const RoadGeometry& g = cfg.geometry;
  require(plans.size() == world.vehicles.size(),
          "one plan slot per vehicle is required");
  StepResult result{world, std::vector<double>(world.vehicles.size(), 0.0)};
  WorldState& next = result.world;
  auto& rewards = result.rewards;
  const double step_budget =
      cfg.reward.comfort_budget / static_cast<double>(cfg.horizon_steps);

  const auto running = world.running_agents();
  for (int id : running) {
    const auto& plan = plans[static_cast<std::size_t>(id)];
    if (!plan)
      throw ContractError("running agent " + std::to_string(id) +
                          " has no plan");
    if (!plan->all_finite())
      throw ContractError("plan for agent " + std::to_string(id) +
                          " has non-finite coordinates");
    const Point p = plan->points[0];
    const VehicleState& before = world.vehicles[static_cast<std::size_t>(id)];
    VehicleState& v = next.vehicles[static_cast<std::size_t>(id)];
    v.s = before.s + p.y;
    v.lateral = before.lateral + p.x / g.lane_width_m;
    v.speed = std::hypot(p.x, p.y) / kTau;
    v.heading = (p.x == 0.0 && p.y == 0.0) ? 0.0 : std::atan2(p.x, p.y);
    const double vlong = p.y / kTau;
    v.accel = (vlong - before.longitudinal_speed()) / kTau;
    v.lateral_velocity = p.x / kTau;

    const double da = (v.accel - before.accel) / cfg.reward.jerk_ref;
    const double dl =
        (v.lateral_velocity - before.lateral_velocity) / g.lane_width_m;
    const double discomfort = std::min(
        1.0, cfg.reward.jerk_weight * da * da + cfg.reward.lateral_weight * dl * dl);
    rewards[static_cast<std::size_t>(id)] = -step_budget * discomfort;
  }
  next.step = world.step + 1;

  // Collisions among vehicles that moved this step.
  std::vector<bool> crashed(world.vehicles.size(), false);
  for (std::size_t a = 0; a < running.size(); ++a) {
    for (std::size_t b = a + 1; b < running.size(); ++b) {
      const VehicleState& va = next.vehicles[static_cast<std::size_t>(running[a])];
      const VehicleState& vb = next.vehicles[static_cast<std::size_t>(running[b])];
      const double dx = (va.lateral - vb.lateral) * g.lane_width_m;
      const double dy = va.s - vb.s;
      if (std::hypot(dx, dy) < cfg.collision_distance_m) {
        crashed[static_cast<std::size_t>(running[a])] = true;
        crashed[static_cast<std::size_t>(running[b])] = true;
      }
    }
  }
  for (int id : running) {
    const auto i = static_cast<std::size_t>(id);
    VehicleState& v = next.vehicles[i];
    if (crashed[i]) {
      next.outcomes[i] = Outcome::Accident;
      rewards[i] = -cfg.reward.accident_penalty;
    } else if (v.s >= g.merge_end()) {
      const bool ok = g.side_of(v.lateral) == v.target_side;
      next.outcomes[i] = ok ? Outcome::MergedOk : Outcome::WrongSide;
      rewards[i] += ok ? cfg.reward.merge_reward : cfg.reward.wrong_side_penalty;
    } else if (next.step >= cfg.horizon_steps) {
      next.outcomes[i] = Outcome::WrongSide;
      rewards[i] += cfg.reward.wrong_side_penalty;
    }
  }
  return result;
}

double discounted_return(std::span<const double> rewards, double discount) {
  double total = 0.0;
  double w = 1.0;
  for (double r : rewards) {
    total += w * r;
    w *= discount;
  }
  return total;
}

// ---- scripted expert ------------------------------------------------------

namespace {

double lane_of(const AgnosticState& st, const SensedVehicle& o) {
  return st.ego_lane + o.x / st.lanes.lane_width_m;
}

bool gap_free(const AgnosticState& st, double lane, const ExpertConfig& cfg) {
  for (const SensedVehicle& o : st.others) {
    if (std::abs(lane_of(st, o) - lane) >= 0.75) continue;
    const double closing = std::max(0.0, o.vy - st.longitudinal_speed());
    if (o.y > -cfg.gap_behind_m - closing && o.y < cfg.gap_ahead_m)
      return false;
  }
  return true;
}

bool ahead_of_blockers(const AgnosticState& st, double lane) {
  bool any = false;
  for (const SensedVehicle& o : st.others) {
    if (std::abs(lane_of(st, o) - lane) >= 0.75) continue;
    if (std::abs(o.y) > 15.0) continue;
    any = true;
    if (o.y > -4.0) return false;
  }
  return any;
}

}  // namespace

ExpertDecision expert_decide(const AgnosticState& st, const ExpertConfig& cfg) {
  ExpertDecision d;
  const LaneGeometry& lanes = st.lanes;
  const bool in_merge =
      st.lanes.merge_start_ahead_m <= 0.0 && st.lanes.merge_end_ahead_m > 0.0;
  d.root = in_merge ? RootChoice::Merge : RootChoice::Prepare;
  const double cur_lane =
      std::clamp(std::round(st.ego_lane), lanes.min_lane(), lanes.max_lane());
  const Side side = lanes.side_of(st.ego_lane);

  bool waiting_for_gap = false;
  if (st.target_side && *st.target_side != side) {
    const double dir = *st.target_side == Side::Right ? 1.0 : -1.0;
    const double next_lane = cur_lane + dir;
    d.lateral = dir > 0 ? LateralChoice::Right : LateralChoice::Left;
    const bool crossing = lanes.side_of(next_lane) != side;
    if (crossing && !in_merge) {
      d.commitment = CommitChoice::Stay;
    } else if (gap_free(st, next_lane, cfg)) {
      d.commitment = CommitChoice::Go;
    } else if (ahead_of_blockers(st, next_lane)) {
      d.commitment = CommitChoice::Push;
    } else {
      d.commitment = CommitChoice::Stay;
      waiting_for_gap = in_merge;
    }
  }

  // Speed: keep a time gap to the lead vehicle in the ego lane.
  double lead_gap = 1e9;
  for (const SensedVehicle& o : st.others) {
    if (o.y > 0.0 && std::abs(lane_of(st, o) - st.ego_lane) < 0.75)
      lead_gap = std::min(lead_gap, o.y);
  }
  const double v = st.longitudinal_speed();
  double target_v = cfg.cruise_speed;
  if (waiting_for_gap && st.lanes.merge_end_ahead_m < 60.0) target_v -= 4.0;
  if (lead_gap < 8.0 || lead_gap / std::max(v, 1.0) < cfg.time_gap_s) {
    d.speed = SpeedChoice::Decelerate;
  } else if (v < target_v - 1.0) {
    d.speed = SpeedChoice::Accelerate;
  } else if (v > target_v + 1.0) {
    d.speed = SpeedChoice::Decelerate;
  } else {
    d.speed = SpeedChoice::Same;
  }

  d.labels.reserve(st.others.size());
  for (const SensedVehicle& o : st.others) {
    if (std::abs(lane_of(st, o) - st.ego_lane) > cfg.label_lateral_lanes)
      d.labels.push_back(Label::Offset);
    else
      d.labels.push_back(o.y > 0.0 ? Label::GiveWay : Label::TakeWay);
  }
  return d;
}

}  // namespace mergerl::sim
