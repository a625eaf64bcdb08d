#include <doctest.h>

#include <cmath>
#include <limits>

#include "mergerl/error.hpp"
#include "mergerl/planner.hpp"
#include "mergerl/rng.hpp"

using namespace mergerl;
using namespace mergerl::planner;

namespace {

AgnosticState road_state(double lane = 2.0, double speed = 16.0, double merge_ahead = -10.0) {
  AgnosticState st;
  st.ego_speed = speed;
  st.ego_lane = lane;
  st.distance_to_merge_m = merge_ahead;
  st.lanes.merge_start_ahead_m = merge_ahead;
  st.lanes.merge_end_ahead_m = merge_ahead + 100.0;
  return st;
}

TrajectoryPlan straight(double v, double x = 0.0) {
  TrajectoryPlan p;
  for (std::size_t i = 0; i < kPlanPoints; ++i) p.points[i] = {x, v * kTau * static_cast<double>(i + 1)};
  return p;
}

PredictedTrajectory moving(double x, double y, double vx, double vy) {
  PredictedTrajectory t;
  t.vx = vx;
  t.vy = vy;
  for (std::size_t j = 0; j < kPlanPoints; ++j) {
    const double s = kTau * static_cast<double>(j + 1);
    t.points[j] = {x + vx * s, y + vy * s};
  }
  return t;
}

AgnosticState random_state(Rng& rng) {
  AgnosticState st = road_state(1.0 + static_cast<double>(rng.index(4)), rng.uniform(3.0, 24.0),
                                rng.uniform(-90.0, 150.0));
  const std::size_t n = rng.index(6);
  for (std::size_t i = 0; i < n; ++i) {
    SensedVehicle v;
    v.id = static_cast<int>(i + 10);
    v.x = 3.5 * (static_cast<double>(rng.index(5)) - 2.0) + rng.uniform(-0.5, 0.5);
    v.y = rng.uniform(-45.0, 45.0);
    if (std::hypot(v.x, v.y) < 6.0) v.y += 12.0;
    v.vx = rng.uniform(-0.8, 0.8);
    v.vy = rng.uniform(8.0, 22.0);
    st.others.push_back(v);
  }
  return st;
}

Desires random_desires(Rng& rng, const AgnosticState& st) {
  Desires d;
  d.speed = rng.uniform(0.0, st.v_max);
  d.lateral = 1.0 + 0.5 * static_cast<double>(rng.index(7));
  for (std::size_t i = 0; i < st.others.size(); ++i) d.labels.push_back(static_cast<Label>(rng.index(3)));
  return d;
}

struct Exhaustive {
  double best = std::numeric_limits<double>::infinity();
  bool any = false;
  std::size_t count = 0;
};

// Every candidate of the lattice, scored independently of the search.
Exhaustive brute_force(const Desires& d, const AgnosticState& st, const PlannerConfig& cfg) {
  Exhaustive ex;
  const auto preds = predict_others(st);
  const std::size_t per = cfg.lattice.accelerations.size() * cfg.lattice.lateral_velocities.size();
  std::size_t total = 1;
  for (int s = 0; s < cfg.lattice.stages; ++s) total *= per;
  for (std::size_t code = 0; code < total; ++code) {
    LatticeChoice choice;
    std::size_t c = code;
    for (int s = 0; s < cfg.lattice.stages; ++s) {
      const std::size_t k = c % per;
      c /= per;
      choice.emplace_back(k / cfg.lattice.lateral_velocities.size(), k % cfg.lattice.lateral_velocities.size());
    }
    const TrajectoryPlan p = rollout_lattice(st, cfg.lattice, choice);
    ++ex.count;
    if (!feasible(p, preds, st, cfg.constraints).feasible) continue;
    ex.any = true;
    ex.best = std::min(ex.best, total_cost(p, d, st, preds, cfg));
  }
  return ex;
}

// Direct double loop: earliest i, then smallest j.
std::optional<Intersection> scan(const TrajectoryPlan& p, const PredictedTrajectory& o, double thr) {
  for (int i = 1; i <= 10; ++i)
    for (int j = 1; j <= 10; ++j) {
      const double dx = p.points[i - 1].x - o.points[j - 1].x, dy = p.points[i - 1].y - o.points[j - 1].y;
      if (std::sqrt(dx * dx + dy * dy) < thr) return Intersection{i, j};
    }
  return std::nullopt;
}

}  // namespace

TEST_SUITE("planner") {
  TEST_CASE("constant-velocity prediction") {
    AgnosticState st = road_state();
    st.others.push_back({1, 0.0, 20.0, 0.0, 10.0, 0.0});
    st.others.push_back({2, 3.5, -5.0, 0.0, 0.0, 0.0});
    const auto p = predict_others(st);
    REQUIRE(p.size() == 2);
    for (std::size_t j = 0; j < kPlanPoints; ++j) {
      CHECK(p[0].points[j].x == 0.0);
      CHECK(p[0].points[j].y == doctest::Approx(20.0 + 10.0 * 0.1 * static_cast<double>(j + 1)));
      CHECK(p[1].points[j] == p[1].points[0]);
    }
    Rng rng(1);
    for (int k = 0; k < 50; ++k) {
      const AgnosticState r = random_state(rng);
      const auto q = predict_others(r);
      for (std::size_t m = 0; m < q.size(); ++m)
        for (std::size_t j = 1; j < kPlanPoints; ++j) {
          CHECK(std::abs(q[m].points[j].x - q[m].points[j - 1].x - r.others[m].vx * kTau) < 1e-12);
          CHECK(std::abs(q[m].points[j].y - q[m].points[j - 1].y - r.others[m].vy * kTau) < 1e-12);
        }
    }
  }

  TEST_CASE("speed cost") {
    CHECK(cost_speed(straight(16.0), 16.0) < 1e-20);
    CHECK(cost_speed(straight(15.0), 16.0) == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(cost_speed(TrajectoryPlan{}, 0.0) == 0.0);
  }

  TEST_CASE("lateral cost") {
    const AgnosticState st = road_state(2.0);
    CHECK(cost_lateral(straight(16.0), 2.0, st) == 0.0);
    CHECK(cost_lateral(straight(16.0, 0.2 * 3.5), 2.0, st) == doctest::Approx(2.0).epsilon(1e-12));
    const double here = cost_lateral(straight(16.0), 2.0, st);
    CHECK(cost_lateral(straight(16.0), 3.0, st) - here == doctest::Approx(10.0).epsilon(1e-12));
    CHECK(cost_lateral(straight(16.0), 2.5, st) == doctest::Approx(5.0).epsilon(1e-12));
  }

  TEST_CASE("smoothness cost is zero for straight constant-speed motion") {
    CHECK(cost_smoothness(straight(16.0)) < 1e-20);
    TrajectoryPlan kink = straight(16.0);
    kink.points[4].x = 1.0;
    CHECK(cost_smoothness(kink) == doctest::Approx(1.0 + 4.0 + 1.0));
  }

  TEST_CASE("intersection indices") {
    CHECK_FALSE(intersection_indices(straight(16.0), moving(50.0, 0.0, 0.0, 16.0), 2.5));
    const auto same = intersection_indices(straight(16.0), moving(0.0, 0.0, 0.0, 16.0), 2.5);
    REQUIRE(same);
    CHECK(*same == Intersection{1, 1});
    CHECK_THROWS_AS(intersection_indices(straight(16.0), moving(0, 0, 0, 0), 0.0), ContractError);

    Rng rng(2);
    int hits = 0;
    for (int k = 0; k < 2000; ++k) {
      TrajectoryPlan p;
      const double vx = rng.uniform(-4, 4), vy = rng.uniform(0, 20);
      for (std::size_t i = 0; i < kPlanPoints; ++i)
        p.points[i] = {vx * kTau * static_cast<double>(i + 1), vy * kTau * static_cast<double>(i + 1)};
      const auto o = moving(rng.uniform(-8, 8), rng.uniform(-10, 20), rng.uniform(-5, 5), rng.uniform(0, 20));
      const double thr = rng.uniform(0.5, 4.0);
      const auto got = intersection_indices(p, o, thr);
      CHECK(got == scan(p, o, thr));
      hits += got ? 1 : 0;
    }
    CHECK(hits > 100);
  }

  TEST_CASE("give-way, take-way and offset terms") {
    CHECK(cost_giveway(Intersection{5, 5}) == doctest::Approx(0.5));
    CHECK(cost_giveway(Intersection{11, 1}) == 0.0);
    CHECK(cost_giveway(Intersection{3, 6}) == doctest::Approx(0.8));
    CHECK(cost_takeway(Intersection{5, 5}) == doctest::Approx(0.5));
    CHECK(cost_takeway(Intersection{1, 11}) == 0.0);
    CHECK(cost_takeway(Intersection{6, 3}) == doctest::Approx(0.8));
    CHECK(cost_giveway(std::nullopt) == 0.0);
    CHECK(cost_takeway(std::nullopt) == 0.0);
    for (int i = 1; i <= 10; ++i)
      for (int j = 1; j <= 10; ++j) {
        CHECK(cost_giveway(Intersection{i, j}) == doctest::Approx(std::max(0.0, 0.1 * (j - i) + 0.5)));
        CHECK(cost_takeway(Intersection{i, j}) == doctest::Approx(std::max(0.0, 0.1 * (i - j) + 0.5)));
      }

    CHECK(cost_offset(straight(16.0), moving(50.0, 0, 0, 16), 3.0, 5.0) == 0.0);
    CHECK(cost_offset(straight(16.0), moving(0.0, 0, 0, 16), 3.0, 5.0) == doctest::Approx(5.0));
    const double near = cost_offset(straight(16.0), moving(1.0, 0, 0, 16), 3.0, 5.0);
    const double far = cost_offset(straight(16.0), moving(2.0, 0, 0, 16), 3.0, 5.0);
    CHECK(near == doctest::Approx(4.0));
    CHECK(far == doctest::Approx(3.0));
  }

  TEST_CASE("weighted total equals an independent term recomputation") {
    Rng rng(3);
    const PlannerConfig cfg;
    for (int k = 0; k < 200; ++k) {
      const AgnosticState st = random_state(rng);
      const Desires d = random_desires(rng, st);
      const auto preds = predict_others(st);
      TrajectoryPlan p;
      for (std::size_t i = 0; i < kPlanPoints; ++i)
        p.points[i] = {rng.uniform(-1, 1) * static_cast<double>(i), rng.uniform(1, 2.5) * static_cast<double>(i + 1)};

      double expect = 0.0;
      for (std::size_t i = 1; i < kPlanPoints; ++i) {
        const double s = std::hypot(p.points[i].x - p.points[i - 1].x, p.points[i].y - p.points[i - 1].y) / 0.1;
        expect += (d.speed - s) * (d.speed - s);
      }
      for (const Point& q : p.points) expect += std::abs(q.x / 3.5 + st.ego_lane - d.lateral);
      for (std::size_t m = 0; m < preds.size(); ++m) {
        const auto hit = scan(p, preds[m], 3.0);
        if (!hit) continue;
        if (d.labels[m] == Label::GiveWay) expect += 10.0 * std::max(0.0, 0.1 * (hit->j - hit->i) + 0.5);
        if (d.labels[m] == Label::TakeWay) expect += 10.0 * std::max(0.0, 0.1 * (hit->i - hit->j) + 0.5);
        if (d.labels[m] == Label::Offset) {
          double md = 1e300;
          for (const Point& a : p.points)
            for (const Point& b : preds[m].points) md = std::min(md, std::hypot(a.x - b.x, a.y - b.y));
          expect += 5.0 * std::max(0.0, 5.0 - md);
        }
      }
      for (std::size_t i = 1; i + 1 < kPlanPoints; ++i) {
        const double ax = p.points[i + 1].x - 2 * p.points[i].x + p.points[i - 1].x;
        const double ay = p.points[i + 1].y - 2 * p.points[i].y + p.points[i - 1].y;
        expect += 0.1 * (ax * ax + ay * ay);
      }
      const CostBreakdown b = cost_breakdown(p, d, st, preds, cfg);
      CHECK(std::abs(b.total - expect) <= 1e-12 * std::max(1.0, expect));
      CHECK(b.total == b.speed + b.lateral + b.give_way + b.take_way + b.offset + b.smoothness);
      for (double t : {b.speed, b.lateral, b.give_way, b.take_way, b.offset, b.smoothness}) CHECK(t >= 0.0);

      PlannerConfig zero = cfg;
      zero.weights = {0, 0, 0, 0, 0, 0};
      CHECK(total_cost(p, d, st, preds, zero) == 0.0);
      PlannerConfig twice = cfg;
      twice.weights = {2, 2, 20, 20, 10, 0.2};
      CHECK(total_cost(p, d, st, preds, twice) == doctest::Approx(2.0 * b.total).epsilon(1e-12));
    }
  }

  TEST_CASE("feasibility") {
    const HardConstraintConfig c;
    const AgnosticState st = road_state(2.0);
    CHECK(feasible(straight(16.0), {}, st, c).feasible);

    TrajectoryPlan off = straight(16.0);
    off.points[6].x = -5.0;  // beyond the left edge
    const auto r = feasible(off, {}, st, c);
    CHECK_FALSE(r.feasible);
    REQUIRE(r.violations.size() == 1);
    CHECK(r.violations[0].kind == ViolationKind::OffRoad);
    CHECK(r.violations[0].plan_index == 7);

    // Other vehicle passes 1 m to the side at the same time index.
    HardConstraintConfig sep = c;
    sep.following_gap = false;
    const auto other = moving(1.0, 0.0, 0.0, 16.0);
    const auto r2 = feasible(straight(16.0), {other}, st, sep);
    CHECK_FALSE(r2.feasible);
    std::size_t expected = 0;
    for (int i = 1; i <= 10; ++i)
      for (int j = std::max(1, i - 2); j <= std::min(10, i + 2); ++j) {
        const double need = 2.5 + (i == 1 && j == 1 ? sep.first_step_slack_m : 0.0);
        if (distance(straight(16.0).points[i - 1], other.points[j - 1]) < need) ++expected;
      }
    CHECK(r2.violations.size() == expected);
    for (const auto& v : r2.violations) {
      CHECK(v.kind == ViolationKind::Separation);
      CHECK(std::abs(v.plan_index - v.other_index) <= 2);
    }

    // Barrier outside the merge area.
    const AgnosticState approach = road_state(2.0, 16.0, 200.0);
    CHECK_FALSE(feasible(straight(16.0, 3.5), {}, approach, c).feasible);
    CHECK(feasible(straight(16.0, 3.5), {}, road_state(2.0, 16.0, -10.0), c).feasible);
  }

  TEST_CASE("empty road with current speed and lane gives the straight plan") {
    const AgnosticState st = road_state(2.0, 16.0);
    const Desires d{16.0, 2.0, {}};
    const PlannerConfig cfg;
    const PlanResult r = plan(d, st, cfg);
    CHECK_FALSE(r.fallback);
    for (std::size_t i = 0; i < kPlanPoints; ++i) {
      CHECK(r.plan.points[i].x == 0.0);
      CHECK(r.plan.points[i].y == doctest::Approx(1.6 * static_cast<double>(i + 1)));
    }
    for (std::size_t lv : {0u, 2u}) {
      const auto lane_change = rollout_lattice(st, cfg.lattice, {{2, lv}, {2, 1}});
      CHECK(r.cost.total < total_cost(lane_change, d, st, {}, cfg));
    }
  }

  TEST_CASE("lattice search equals exhaustive enumeration") {
    Rng rng(4);
    PlannerConfig coarse;
    coarse.lattice.accelerations = {-3.0, 0.0, 3.0};
    for (const PlannerConfig& cfg : {coarse, PlannerConfig{}}) {
      int fallbacks = 0;
      for (int k = 0; k < 150; ++k) {
        const AgnosticState st = random_state(rng);
        const Desires d = random_desires(rng, st);
        const PlanResult r = plan(d, st, cfg);
        const Exhaustive ex = brute_force(d, st, cfg);
        CHECK(ex.count == cfg.lattice.candidate_count());
        CHECK(r.fallback == !ex.any);
        if (ex.any) CHECK(r.cost.total == ex.best);
        else ++fallbacks;
        CHECK(r.candidates_evaluated <= ex.count);
      }
      CHECK(fallbacks < 150);
    }
  }

  TEST_CASE("a give-way label keeps the ego from cutting in ahead") {
    // Slower vehicle just behind in lane 3; the ego wants to move over from lane 2.
    AgnosticState st = road_state(2.0, 16.0);
    st.others.push_back({1, 3.5, -3.0, 0.0, 14.0, 0.0});
    const Desires d{16.0, 3.0, {Label::GiveWay}};
    const auto other = predict_others(st)[0];

    PlannerConfig ignore;
    ignore.weights.give_way = 0.0;
    const auto cut = intersection_indices(plan(d, st, ignore).plan, other, ignore.intersection_threshold_m);
    REQUIRE(cut);
    CHECK(kTau * (cut->i - cut->j) < 0.5);

    const PlannerConfig cfg;
    const PlanResult r = plan(d, st, cfg);
    CHECK_FALSE(r.fallback);
    const auto hit = intersection_indices(r.plan, other, cfg.intersection_threshold_m);
    if (hit) CHECK(kTau * (hit->i - hit->j) >= 0.5 - 1e-12);
    CHECK(r.cost.give_way == 0.0);
  }

  TEST_CASE("raising the give-way weight never raises the chosen plan's give-way cost") {
    Rng rng(5);
    for (int k = 0; k < 60; ++k) {
      const AgnosticState st = random_state(rng);
      Desires d = random_desires(rng, st);
      for (auto& l : d.labels) l = Label::GiveWay;
      double previous = std::numeric_limits<double>::infinity();
      for (double w : {0.0, 1.0, 5.0, 10.0, 50.0, 200.0}) {
        PlannerConfig cfg;
        cfg.weights.give_way = w;
        const PlanResult r = plan(d, st, cfg);
        const auto preds = predict_others(st);
        double raw = 0.0;
        for (const auto& o : preds) raw += cost_giveway(intersection_indices(r.plan, o, 3.0));
        CHECK(raw <= previous + 1e-12);
        previous = raw;
      }
    }
  }

  TEST_CASE("with nothing feasible the planner brakes in lane and says so") {
    AgnosticState st = road_state(2.0, 16.0);
    st.others.push_back({1, 0.0, 1.0, 0.0, 16.0, 0.0});  // on top of the ego
    const Desires d{16.0, 2.0, {Label::GiveWay}};
    const PlanResult r = plan(d, st, PlannerConfig{});
    CHECK(r.fallback);
    CHECK(r.plan.fallback);
    for (std::size_t i = 0; i < kPlanPoints; ++i) CHECK(r.plan.points[i].x == 0.0);
    for (std::size_t i = 1; i < kPlanPoints; ++i)
      CHECK(r.plan.points[i].y - r.plan.points[i - 1].y < r.plan.points[0].y + 1e-12);
  }

  TEST_CASE("mismatched labels and invalid configs are rejected") {
    AgnosticState st = road_state();
    st.others.push_back({1, 3.5, 20.0, 0.0, 16.0, 0.0});
    CHECK_THROWS_AS(plan(Desires{16.0, 2.0, {}}, st, PlannerConfig{}), ContractError);
    PlannerConfig bad;
    bad.weights.offset = -1.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = {};
    bad.constraints.min_separation_m = 0.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = {};
    bad.constraints.index_window = -1;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = {};
    bad.lattice.stages = 3;  // k must split evenly
    CHECK_THROWS_AS(bad.validate(), ContractError);
  }
}
