#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <limits>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mergerl/cli.hpp"
#include "mergerl/error.hpp"
#include "mergerl/learner.hpp"
#include "mergerl/planner.hpp"

namespace mergerl::cli {

namespace {

using learn::ToyEnv;
using learn::ToyTrajectory;

net::NetParams toy_policy(const ToyEnv& env, std::uint64_t seed, std::size_t index,
                          std::size_t hidden = 3) {
  Rng rng = Rng::stream(seed, "verify-policy", index);
  return net::NetParams::random(
      net::Dims{static_cast<std::size_t>(env.states()), {hidden},
                static_cast<std::size_t>(env.actions())},
      rng);
}

CheckResult make(std::string name, double error, double tol, bool pass,
                 std::string detail = {}) {
  return CheckResult{std::move(name), error, tol, pass, std::move(detail)};
}

CheckResult check_unbiased(std::uint64_t seed, double sign) {
  double worst = 0.0;
  for (std::size_t k = 0; k < 3; ++k) {
    const ToyEnv env(seed * 1000 + 11 + k);
    const net::NetParams pol = toy_policy(env, seed, k);
    const auto est = learn::expected_estimator(env, pol, learn::ReturnTerm::Total, {}, sign);
    const auto fd = learn::finite_difference_gradient(env, pol);
    for (std::size_t i = 0; i < est.size(); ++i)
      worst = std::max(worst, std::abs(est[i] - fd[i]) / std::max(std::abs(fd[i]), 1e-6));
  }
  return make("unbiased_gradient", worst, 1e-6, worst < 1e-6,
              "3 history-dependent toy envs, T=3, componentwise relative error");
}

// Prefix hash that reads states up to t and actions before t only.
double history_feature(const ToyTrajectory& tr, int t) {
  std::uint64_t h = 0x51ed;
  for (int u = 0; u <= t; ++u) h = mix64(h ^ static_cast<std::uint64_t>(tr.states[u] + 7));
  for (int u = 0; u < t; ++u) h = mix64(h ^ static_cast<std::uint64_t>(tr.actions[u] + 101));
  return static_cast<double>(h >> 11) * 0x1.0p-53 - 0.5;
}

std::vector<CheckResult> check_baselines(std::uint64_t seed) {
  const ToyEnv env(seed * 1000 + 21);
  const net::NetParams pol = toy_policy(env, seed, 10);
  const std::vector<std::pair<std::string, learn::ToyBaseline>> valid = {
      {"constant", [](const ToyTrajectory&, int, std::size_t) { return 0.7; }},
      {"time", [](const ToyTrajectory&, int t, std::size_t) { return 0.3 * t - 0.5; }},
      {"coordinate",
       [](const ToyTrajectory&, int t, std::size_t i) {
         return std::sin(static_cast<double>(i) + t);
       }},
      {"history", [](const ToyTrajectory& tr, int t, std::size_t) { return history_feature(tr, t); }},
      {"state_value",
       [&](const ToyTrajectory& tr, int t, std::size_t) {
         const ToyTrajectory before{{tr.states.begin(), tr.states.begin() + t},
                                    {tr.actions.begin(), tr.actions.begin() + t}};
         return learn::v_value(env, pol, before, tr.states[t]);
       }},
  };
  double worst = 0.0;
  std::string names;
  for (const auto& [name, b] : valid) {
    worst = std::max(worst, learn::baseline_zero_check(env, pol, b));
    names += (names.empty() ? "" : ",") + name;
  }
  const double invalid = learn::baseline_zero_check(
      env, pol, [](const ToyTrajectory& tr, int t, std::size_t) {
        return tr.actions[t] == 0 ? 1.0 : -0.25;
      });
  return {make("baseline_zero_mean", worst, 1e-10, worst < 1e-10, names),
          make("baseline_action_dependent_nonzero", invalid, 1e-6, invalid > 1e-6,
               "pass when the value exceeds the tolerance")};
}

std::vector<CheckResult> check_q_v_a(std::uint64_t seed) {
  const ToyEnv env(seed * 1000 + 31);
  const net::NetParams pol = toy_policy(env, seed, 20);
  const auto er = learn::expected_estimator(env, pol, learn::ReturnTerm::Total);
  const auto eq = learn::expected_estimator(env, pol, learn::ReturnTerm::QValue);
  double dq = 0.0;
  for (std::size_t i = 0; i < er.size(); ++i) dq = std::max(dq, std::abs(er[i] - eq[i]));

  const double dv = learn::baseline_zero_check(
      env, pol, [&](const ToyTrajectory& tr, int t, std::size_t) {
        const ToyTrajectory before{{tr.states.begin(), tr.states.begin() + t},
                                   {tr.actions.begin(), tr.actions.begin() + t}};
        return learn::v_value(env, pol, before, tr.states[t]);
      });

  const ToyEnv single(seed * 1000 + 32, 3, 1, 3);
  const net::NetParams one = toy_policy(single, seed, 21);
  double da = 0.0;
  for (const auto& w : learn::enumerate(single, one)) {
    const ToyTrajectory& tr = w.trajectory;
    for (std::size_t t = 1; t <= tr.states.size(); ++t) {
      const ToyTrajectory prefix{{tr.states.begin(), tr.states.begin() + static_cast<long>(t)},
                                 {tr.actions.begin(), tr.actions.begin() + static_cast<long>(t)}};
      da = std::max(da, std::abs(learn::advantage(single, one, prefix)));
    }
  }
  return {make("q_estimator_matches_return", dq, 1e-10, dq < 1e-10),
          make("state_value_is_baseline", dv, 1e-10, dv < 1e-10),
          make("single_action_advantage_zero", da, 0.0, da == 0.0)};
}

CheckResult check_safety_bound() {
  const double exact = learn::safety_bound(0.01, 1000.0);
  double err = std::abs(exact - 9879.2199);
  bool ok = err < 1e-9;
  double worst_gap = 0.0;  // how far variance falls below the bound
  for (double p : {1e-1, 1e-2, 1e-3, 1e-4})
    for (double r : {1.0 / p, 1e2, 1e4, 1e6}) {
      const double var = learn::two_point_variance(p, r, 1.0);
      worst_gap = std::max(worst_gap, learn::safety_bound(p, r) - var);
    }
  ok = ok && worst_gap <= 0.0;
  double ratio_lo = 1.0, ratio_hi = 0.0, two_point_hi = 0.0;
  for (double p : {1e-2, 1e-3, 1e-4})
    for (double r : {1.0 / p, 1e4, 1e6}) {
      if (r < 1.0 / p) continue;
      const double q = learn::safety_bound(p, r) / (p * r * r);
      ratio_lo = std::min(ratio_lo, q);
      ratio_hi = std::max(ratio_hi, q);
      two_point_hi = std::max(two_point_hi, learn::two_point_variance(p, r, 1.0) / (p * r * r));
    }
  ok = ok && ratio_lo >= 0.9 && ratio_hi <= 1.0;
  std::ostringstream d;
  d.precision(10);
  d << "bound(0.01,1000)=" << exact << "; max(bound-var)=" << worst_gap
    << "; bound/(p r^2) in [" << ratio_lo << ", " << ratio_hi
    << "]; two-point var/(p r^2) max " << two_point_hi;
  return make("return_variance_bound", err, 1e-9, ok, d.str());
}

CheckResult check_score_identity(std::uint64_t seed) {
  double worst = 0.0;
  Rng rng = Rng::stream(seed, "verify-score");
  for (int k = 0; k < 100; ++k) {
    const net::Dims dims{2 + rng.index(5), {1 + rng.index(6), 1 + rng.index(6)}, 2 + rng.index(4)};
    const net::NetParams p = net::NetParams::random(dims, rng);
    std::vector<double> x(dims.input);
    for (double& v : x) v = rng.uniform(-2.0, 2.0);
    const net::Forward f = net::forward(p, x);
    std::vector<double> acc(p.parameter_count(), 0.0);
    for (std::size_t a = 0; a < dims.output; ++a)
      net::accumulate_logprob_grad(p, f.tape, a, f.probs[a], acc);
    for (double v : acc) worst = std::max(worst, std::abs(v));
  }
  return make("score_function_zero_mean", worst, 1e-10, worst < 1e-10, "100 random nets");
}

CheckResult check_gradcheck(std::uint64_t seed) {
  double worst = 0.0;
  Rng rng = Rng::stream(seed, "verify-gradcheck");
  for (int k = 0; k < 100; ++k) {
    const net::Dims dims{1 + rng.index(5), {1 + rng.index(5), 1 + rng.index(5)}, 2 + rng.index(3)};
    const net::NetParams p = net::NetParams::random(dims, rng);
    std::vector<double> x(dims.input);
    for (double& v : x) v = rng.uniform(-1.5, 1.5);
    const std::size_t a = rng.index(dims.output);
    const auto g = net::logprob_grad(p, net::forward(p, x).tape, a).values;
    const std::vector<double> theta = p.flatten();
    double num = 0.0, den = 0.0;
    const double h = 1e-5;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      auto lp = [&](double delta) {
        std::vector<double> t = theta;
        t[i] += delta;
        return net::forward(net::NetParams::unflatten(dims, t), x).tape.log_probs[a];
      };
      const double fd = (lp(h) - lp(-h)) / (2 * h);
      num += (fd - g[i]) * (fd - g[i]);
      den += fd * fd + g[i] * g[i];
    }
    worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-12));
  }
  return make("net_gradient_check", worst, 1e-4, worst < 1e-4,
              "100 random (net, input, action) triples, relative L2 error");
}

CheckResult check_optimal_baseline(std::uint64_t seed) {
  const ToyEnv env(seed * 1000 + 41);
  const net::NetParams pol = toy_policy(env, seed, 30, 4);
  Rng rng = Rng::stream(seed, "verify-baseline");
  std::vector<learn::GradSample> samples;
  samples.reserve(10000);
  for (int k = 0; k < 10000; ++k) {
    const ToyTrajectory tr = learn::sample_trajectory(env, pol, rng);
    samples.push_back({env.reward(tr), learn::step_grads(env, pol, tr)});
  }
  const std::size_t n = pol.parameter_count();
  std::vector<std::vector<double>> b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = learn::solve_optimal_baseline(samples, i).b;
  const auto with = learn::estimator_variance(samples, b);
  const auto without = learn::estimator_variance(samples, {});
  double worst = 0.0;
  std::size_t strict = 0;
  for (std::size_t i = 0; i < n; ++i) {
    worst = std::max(worst, with[i] - without[i]);
    if (with[i] < without[i]) ++strict;
  }
  const double frac = static_cast<double>(strict) / static_cast<double>(n);
  std::ostringstream d;
  d << strict << "/" << n << " coordinates strictly reduced";
  return make("optimal_baseline_reduces_variance", std::max(worst, 0.0), 0.0,
              worst <= 0.0 && frac >= 0.9, d.str());
}

// Scenes sampled along expert episodes, paired with random desires.
std::vector<std::pair<AgnosticState, Desires>> planner_cases(const learn::Environment& env,
                                                             std::uint64_t seed,
                                                             std::size_t count) {
  std::vector<AgnosticState> pool;
  const auto experts = learn::uniform_assignment(env, nullptr);
  for (std::uint64_t e = 0; pool.size() < 8 * count && e < 64; ++e) {
    learn::run_episode(env, seed, 900000 + e, experts,
                       [&](const sim::WorldState& w, const auto&, const auto&) {
                         if (w.step % 3 != 0) return;
                         for (int id : w.running_agents()) pool.push_back(sim::sense(w, id));
                       });
  }
  require(!pool.empty(), "no planner states collected");
  Rng rng = Rng::stream(seed, "verify-planner");
  std::vector<std::pair<AgnosticState, Desires>> out;
  for (std::size_t k = 0; k < count; ++k) {
    const AgnosticState& st = pool[rng.index(pool.size())];
    Desires d;
    d.speed = rng.uniform(0.0, st.v_max);
    const int slots = 2 * (2 * st.lanes.lanes_per_side - 1) + 1;
    d.lateral = st.lanes.min_lane() + 0.5 * static_cast<double>(rng.index(static_cast<std::size_t>(slots)));
    for (std::size_t i = 0; i < st.others.size(); ++i)
      d.labels.push_back(static_cast<Label>(rng.index(3)));
    out.emplace_back(st, std::move(d));
  }
  return out;
}

// Exhaustive lattice minimum; cost is infinite when nothing is feasible.
double brute_force_cost(const AgnosticState& st, const Desires& d,
                        const planner::PlannerConfig& cfg) {
  const auto pred = planner::predict_others(st);
  const std::size_t na = cfg.lattice.accelerations.size();
  const std::size_t nl = cfg.lattice.lateral_velocities.size();
  const std::size_t per = na * nl;
  const auto stages = static_cast<std::size_t>(cfg.lattice.stages);
  std::size_t total = 1;
  for (std::size_t s = 0; s < stages; ++s) total *= per;
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t code = 0; code < total; ++code) {
    planner::LatticeChoice c(stages);
    std::size_t rest = code;
    for (std::size_t s = 0; s < stages; ++s) {
      c[s] = {(rest % per) / nl, rest % nl};
      rest /= per;
    }
    const TrajectoryPlan p = planner::rollout_lattice(st, cfg.lattice, c);
    if (!planner::feasible(p, pred, st, cfg.constraints).feasible) continue;
    best = std::min(best, planner::total_cost(p, d, st, pred, cfg));
  }
  return best;
}

// Returned plans must be feasible; the flagged fallback is allowed only when
// no lattice candidate is.
CheckResult check_planner_safety(const learn::Environment& env, std::uint64_t seed,
                                 std::size_t count) {
  std::size_t violations = 0, fallbacks = 0, spurious = 0;
  for (const auto& [st, d] : planner_cases(env, seed, count)) {
    const auto res = planner::plan(d, st, env.planner);
    if (res.fallback) {
      ++fallbacks;
      if (!std::isinf(brute_force_cost(st, d, env.planner))) ++spurious;
      continue;
    }
    const auto rep = planner::feasible(res.plan, planner::predict_others(st), st,
                                       env.planner.constraints);
    violations += rep.violations.size();
  }
  std::ostringstream d;
  d << count << " (state, desires) pairs; " << fallbacks
    << " flagged fallbacks where no candidate is feasible; " << spurious
    << " fallbacks despite a feasible candidate";
  return make("planner_hard_constraints", static_cast<double>(violations + spurious), 0.0,
              violations + spurious == 0, d.str());
}

CheckResult check_planner_optimal(const learn::Environment& env, std::uint64_t seed,
                                  std::size_t count) {
  double worst = 0.0;
  std::size_t mismatched = 0;
  for (const auto& [st, d] : planner_cases(env, seed + 1, count)) {
    const double bf = brute_force_cost(st, d, env.planner);
    const auto res = planner::plan(d, st, env.planner);
    if (std::isinf(bf)) {
      if (!res.fallback) ++mismatched;
      continue;
    }
    if (res.fallback || res.cost.total != bf) ++mismatched;
    if (!res.fallback) worst = std::max(worst, std::abs(res.cost.total - bf));
  }
  std::ostringstream det;
  det << count << " cases, " << mismatched << " mismatched";
  return make("planner_matches_brute_force", worst, 0.0, mismatched == 0, det.str());
}

CheckResult check_giveway_examples() {
  struct Case {
    int i, j;
    double give, take;
  };
  // tau = 0.1, margin 0.5
  const Case cases[] = {{3, 7, 0.9, 0.1}, {7, 3, 0.1, 0.9}, {8, 2, 0.0, 1.1},
                        {2, 8, 1.1, 0.0}, {5, 5, 0.5, 0.5}};
  double worst = 0.0;
  for (const Case& c : cases) {
    const planner::Intersection hit{c.i, c.j};
    worst = std::max(worst, std::abs(planner::cost_giveway(hit) - c.give));
    worst = std::max(worst, std::abs(planner::cost_takeway(hit) - c.take));
  }
  worst = std::max(worst, planner::cost_giveway(std::nullopt) + planner::cost_takeway(std::nullopt));
  return make("give_take_way_examples", worst, 1e-12, worst < 1e-12);
}

}  // namespace

std::vector<CheckResult> cmd_verify(const RunConfig& config, const Logger& log,
                                    const VerifyOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const std::uint64_t seed = config.seed;
  std::vector<CheckResult> out;
  auto push = [&](CheckResult r) {
    log.info(std::string(r.pass ? "PASS " : "FAIL ") + r.name);
    out.push_back(std::move(r));
  };
  auto push_all = [&](std::vector<CheckResult> rs) {
    for (auto& r : rs) push(std::move(r));
  };
  push(check_unbiased(seed, options.flip_gradient_sign ? -1.0 : 1.0));
  push_all(check_baselines(seed));
  push_all(check_q_v_a(seed));
  push(check_safety_bound());
  push(check_score_identity(seed));
  push(check_gradcheck(seed));
  push(check_optimal_baseline(seed));
  push(check_giveway_examples());
  push(check_planner_optimal(config.env, seed, 50));
  push(check_planner_safety(config.env, seed, 200));

  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  log.debug("verify took " + std::to_string(secs) + " s");

  nlohmann::json report;
  report["seed"] = seed;
  report["checks"] = nlohmann::json::array();
  bool all = true;
  for (const CheckResult& r : out) {
    all = all && r.pass;
    report["checks"].push_back({{"name", r.name},
                                {"error", r.error},
                                {"tolerance", r.tolerance},
                                {"pass", r.pass},
                                {"detail", r.detail}});
  }
  report["pass"] = all;
  std::filesystem::create_directories(config.out_dir);
  std::ofstream f(std::filesystem::path(config.out_dir) / "verify.json");
  if (!f) throw std::runtime_error("cannot write verify.json in " + config.out_dir);
  f << report.dump(2) << '\n';
  return out;
}

}  // namespace mergerl::cli
