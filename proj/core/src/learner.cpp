#include "mergerl/learner.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "mergerl/error.hpp"

namespace mergerl::learn {

// ---- toy environment ----------------------------------------------------------

namespace {

double unit_from(std::uint64_t h) {
  return static_cast<double>(h >> 11) * 0x1.0p-53;
}

std::uint64_t hash_prefix(std::uint64_t seed, const ToyTrajectory& t,
                          std::uint64_t salt) {
  std::uint64_t h = mix64(seed ^ salt);
  for (std::size_t k = 0; k < t.states.size(); ++k) {
    h = mix64(h ^ (static_cast<std::uint64_t>(t.states[k]) + 1) * 0x100000001b3ULL);
    if (k < t.actions.size())
      h = mix64(h ^ (static_cast<std::uint64_t>(t.actions[k]) + 7) * 0xcbf29ce484222325ULL);
  }
  return mix64(h ^ t.states.size());
}

// Cached per-state forward passes: probabilities and grad log pi per action.
struct PolicyTable {
  std::vector<std::vector<double>> probs;                // [s][a]
  std::vector<std::vector<std::vector<double>>> grads;  // [s][a][coord]

  PolicyTable(const ToyEnv& env, const net::NetParams& policy) {
    require(policy.dims().input == static_cast<std::size_t>(env.states()) &&
                policy.dims().output == static_cast<std::size_t>(env.actions()),
            "toy policy must map a state one-hot to the action set");
    for (int s = 0; s < env.states(); ++s) {
      const auto in = toy_input(env, s);
      const net::Forward f = net::forward(policy, in);
      probs.push_back(f.probs);
      grads.emplace_back();
      for (int a = 0; a < env.actions(); ++a)
        grads.back().push_back(
            net::logprob_grad(policy, f.tape, static_cast<std::size_t>(a)).values);
    }
  }
};

void enumerate_rec(const ToyEnv& env, const PolicyTable& pt, ToyTrajectory& cur,
                   double prob, std::vector<WeightedTrajectory>& out) {
  if (static_cast<int>(cur.states.size()) == env.horizon()) {
    out.push_back({cur, prob});
    return;
  }
  for (int s = 0; s < env.states(); ++s) {
    const double ps = env.transition(cur, s);
    cur.states.push_back(s);
    for (int a = 0; a < env.actions(); ++a) {
      cur.actions.push_back(a);
      enumerate_rec(env, pt, cur, prob * ps * pt.probs[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)], out);
      cur.actions.pop_back();
    }
    cur.states.pop_back();
  }
}

double q_rec(const ToyEnv& env, const PolicyTable& pt, ToyTrajectory& cur) {
  if (static_cast<int>(cur.states.size()) == env.horizon()) return env.reward(cur);
  double q = 0.0;
  for (int s = 0; s < env.states(); ++s) {
    const double ps = env.transition(cur, s);
    cur.states.push_back(s);
    for (int a = 0; a < env.actions(); ++a) {
      cur.actions.push_back(a);
      q += ps * pt.probs[static_cast<std::size_t>(s)][static_cast<std::size_t>(a)] *
           q_rec(env, pt, cur);
      cur.actions.pop_back();
    }
    cur.states.pop_back();
  }
  return q;
}

void check_prefix(const ToyEnv& env, const ToyTrajectory& p) {
  require(p.states.size() <= static_cast<std::size_t>(env.horizon()),
          "prefix longer than the horizon");
  for (int s : p.states) require(s >= 0 && s < env.states(), "state out of range");
  for (int a : p.actions) require(a >= 0 && a < env.actions(), "action out of range");
}

}  // namespace

ToyEnv::ToyEnv(std::uint64_t seed, int states, int actions, int horizon)
    : seed_(seed), states_(states), actions_(actions), horizon_(horizon) {
  require(states >= 1 && actions >= 1 && horizon >= 1 && horizon <= 4,
          "toy env needs >= 1 state and action and a horizon in [1, 4]");
  require(trajectory_count() <= 10000, "toy env must stay enumerable");
}

double ToyEnv::transition(const ToyTrajectory& prefix, int next) const {
  require(next >= 0 && next < states_, "state out of range");
  const std::uint64_t h = hash_prefix(seed_, prefix, 0x7472616e73ULL);
  double total = 0.0, mine = 0.0;
  for (int s = 0; s < states_; ++s) {
    const double w = 0.1 + unit_from(mix64(h + static_cast<std::uint64_t>(s)));
    total += w;
    if (s == next) mine = w;
  }
  return mine / total;
}

double ToyEnv::reward(const ToyTrajectory& full) const {
  require(static_cast<int>(full.states.size()) == horizon_ &&
              static_cast<int>(full.actions.size()) == horizon_,
          "reward needs a complete trajectory");
  return 2.0 * unit_from(hash_prefix(seed_, full, 0x726577617264ULL)) - 1.0;
}

std::size_t ToyEnv::trajectory_count() const {
  std::size_t n = 1;
  for (int t = 0; t < horizon_; ++t) n *= static_cast<std::size_t>(states_ * actions_);
  return n;
}

std::vector<double> toy_input(const ToyEnv& env, int state) {
  std::vector<double> in(static_cast<std::size_t>(env.states()), 0.0);
  in[static_cast<std::size_t>(state)] = 1.0;
  return in;
}

std::vector<WeightedTrajectory> enumerate(const ToyEnv& env,
                                          const net::NetParams& policy) {
  const PolicyTable pt(env, policy);
  std::vector<WeightedTrajectory> out;
  ToyTrajectory cur;
  enumerate_rec(env, pt, cur, 1.0, out);
  return out;
}

double expected_return(const ToyEnv& env, const net::NetParams& policy) {
  double e = 0.0;
  for (const auto& w : enumerate(env, policy)) e += w.probability * env.reward(w.trajectory);
  return e;
}

std::vector<std::vector<double>> step_grads(const ToyEnv& env,
                                            const net::NetParams& policy,
                                            const ToyTrajectory& traj) {
  check_prefix(env, traj);
  std::vector<std::vector<double>> out;
  for (std::size_t t = 0; t < traj.actions.size(); ++t) {
    const net::Forward f = net::forward(policy, toy_input(env, traj.states[t]));
    out.push_back(
        net::logprob_grad(policy, f.tape, static_cast<std::size_t>(traj.actions[t])).values);
  }
  return out;
}

std::vector<double> expected_estimator(const ToyEnv& env,
                                       const net::NetParams& policy,
                                       ReturnTerm term, const ToyBaseline& baseline,
                                       double sign) {
  const PolicyTable pt(env, policy);
  const std::size_t n = policy.parameter_count();
  std::vector<double> out(n, 0.0);
  std::vector<WeightedTrajectory> all;
  ToyTrajectory cur;
  enumerate_rec(env, pt, cur, 1.0, all);
  for (const auto& w : all) {
    const ToyTrajectory& tr = w.trajectory;
    const double R = env.reward(tr);
    for (int t = 0; t < env.horizon(); ++t) {
      double x = R;
      if (term == ReturnTerm::QValue) {
        ToyTrajectory prefix{{tr.states.begin(), tr.states.begin() + t + 1},
                             {tr.actions.begin(), tr.actions.begin() + t + 1}};
        x = q_rec(env, pt, prefix);
      }
      const auto& g = pt.grads[static_cast<std::size_t>(tr.states[static_cast<std::size_t>(t)])]
                              [static_cast<std::size_t>(tr.actions[static_cast<std::size_t>(t)])];
      for (std::size_t i = 0; i < n; ++i) {
        const double b = baseline ? baseline(tr, t, i) : 0.0;
        out[i] += w.probability * (x - b) * g[i];
      }
    }
  }
  for (double& v : out) v *= sign;
  return out;
}

std::vector<double> finite_difference_gradient(const ToyEnv& env,
                                               const net::NetParams& policy,
                                               double h) {
  require(h > 0, "finite-difference step must be > 0");
  std::vector<double> theta = policy.flatten();
  std::vector<double> out(theta.size());
  auto f = [&](std::size_t i, double delta) {
    std::vector<double> t = theta;
    t[i] += delta;
    return expected_return(env, net::NetParams::unflatten(policy.dims(), t));
  };
  for (std::size_t i = 0; i < theta.size(); ++i)
    out[i] = (-f(i, 2 * h) + 8 * f(i, h) - 8 * f(i, -h) + f(i, -2 * h)) / (12 * h);
  return out;
}

double baseline_zero_check(const ToyEnv& env, const net::NetParams& policy,
                           const ToyBaseline& baseline) {
  const PolicyTable pt(env, policy);
  const std::size_t n = policy.parameter_count();
  std::vector<double> acc(n, 0.0);
  std::vector<WeightedTrajectory> all;
  ToyTrajectory cur;
  enumerate_rec(env, pt, cur, 1.0, all);
  for (const auto& w : all) {
    const ToyTrajectory& tr = w.trajectory;
    for (int t = 0; t < env.horizon(); ++t) {
      const auto& g = pt.grads[static_cast<std::size_t>(tr.states[static_cast<std::size_t>(t)])]
                              [static_cast<std::size_t>(tr.actions[static_cast<std::size_t>(t)])];
      for (std::size_t i = 0; i < n; ++i)
        acc[i] += w.probability * (baseline ? baseline(tr, t, i) : 0.0) * g[i];
    }
  }
  double worst = 0.0;
  for (double v : acc) worst = std::max(worst, std::abs(v));
  return worst;
}

double q_value(const ToyEnv& env, const net::NetParams& policy,
               const ToyTrajectory& prefix) {
  check_prefix(env, prefix);
  require(prefix.actions.size() == prefix.states.size(),
          "Q needs a prefix ending with an action");
  const PolicyTable pt(env, policy);
  ToyTrajectory cur = prefix;
  return q_rec(env, pt, cur);
}

double v_value(const ToyEnv& env, const net::NetParams& policy,
               const ToyTrajectory& prefix, int s_t) {
  check_prefix(env, prefix);
  require(prefix.actions.size() == prefix.states.size() &&
              static_cast<int>(prefix.states.size()) < env.horizon(),
          "V needs a complete prefix shorter than the horizon");
  require(s_t >= 0 && s_t < env.states(), "state out of range");
  const PolicyTable pt(env, policy);
  ToyTrajectory cur = prefix;
  cur.states.push_back(s_t);
  double v = 0.0;
  for (int a = 0; a < env.actions(); ++a) {
    cur.actions.push_back(a);
    v += pt.probs[static_cast<std::size_t>(s_t)][static_cast<std::size_t>(a)] * q_rec(env, pt, cur);
    cur.actions.pop_back();
  }
  return v;
}

double advantage(const ToyEnv& env, const net::NetParams& policy,
                 const ToyTrajectory& prefix) {
  require(!prefix.states.empty(), "advantage needs at least one step");
  ToyTrajectory before{{prefix.states.begin(), prefix.states.end() - 1},
                       {prefix.actions.begin(), prefix.actions.end() - 1}};
  return q_value(env, policy, prefix) - v_value(env, policy, before, prefix.states.back());
}

ToyTrajectory sample_trajectory(const ToyEnv& env, const net::NetParams& policy,
                                Rng& rng) {
  ToyTrajectory tr;
  std::vector<double> ps(static_cast<std::size_t>(env.states()));
  for (int t = 0; t < env.horizon(); ++t) {
    for (int s = 0; s < env.states(); ++s)
      ps[static_cast<std::size_t>(s)] = env.transition(tr, s);
    const int s = static_cast<int>(rng.categorical(ps));
    tr.states.push_back(s);
    const auto probs = net::policy(policy, toy_input(env, s));
    tr.actions.push_back(static_cast<int>(rng.categorical(probs)));
  }
  return tr;
}

// ---- optimal constant baseline ------------------------------------------------

BaselineSolve solve_linear(std::vector<std::vector<double>> X, std::vector<double> y,
                           double ridge) {
  const std::size_t T = y.size();
  require(X.size() == T, "X must be square and match y");
  Eigen::MatrixXd M(T, T);
  Eigen::VectorXd v(T);
  double scale = 0.0;
  for (std::size_t r = 0; r < T; ++r) {
    require(X[r].size() == T, "X must be square");
    for (std::size_t c = 0; c < T; ++c) {
      M(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = X[r][c];
      scale = std::max(scale, std::abs(X[r][c]));
    }
    v(static_cast<Eigen::Index>(r)) = y[r];
  }
  BaselineSolve out;
  out.X = std::move(X);
  out.y = std::move(y);
  if (scale == 0.0) {
    out.degenerate = true;
    out.b.assign(T, 0.0);
    return out;
  }
  M += ridge * Eigen::MatrixXd::Identity(static_cast<Eigen::Index>(T),
                                         static_cast<Eigen::Index>(T));
  const Eigen::VectorXd b = M.ldlt().solve(v);
  out.b.assign(b.data(), b.data() + b.size());
  return out;
}

BaselineSolve solve_optimal_baseline(std::span<const GradSample> samples,
                                     std::size_t coord, double ridge) {
  require(!samples.empty(), "baseline solve needs samples");
  const std::size_t T = samples.front().grads.size();
  std::vector<std::vector<double>> X(T, std::vector<double>(T, 0.0));
  std::vector<double> y(T, 0.0);
  for (const GradSample& s : samples) {
    require(s.grads.size() == T, "samples must share a horizon");
    double sum = 0.0;
    for (const auto& g : s.grads) {
      require(coord < g.size(), "coordinate out of range");
      sum += g[coord];
    }
    for (std::size_t a = 0; a < T; ++a) {
      const double ga = s.grads[a][coord];
      y[a] += s.ret * ga * sum;
      for (std::size_t b = 0; b < T; ++b) X[a][b] += ga * s.grads[b][coord];
    }
  }
  const double inv = 1.0 / static_cast<double>(samples.size());
  for (auto& row : X)
    for (double& x : row) x *= inv;
  for (double& v : y) v *= inv;
  return solve_linear(std::move(X), std::move(y), ridge);
}

std::vector<double> estimator_variance(std::span<const GradSample> samples,
                                       const std::vector<std::vector<double>>& b) {
  require(!samples.empty(), "variance needs samples");
  const std::size_t T = samples.front().grads.size();
  const std::size_t n = T ? samples.front().grads.front().size() : 0;
  require(b.empty() || b.size() == n, "one baseline vector per coordinate");
  std::vector<double> mean(n, 0.0), sq(n, 0.0);
  for (const GradSample& s : samples) {
    for (std::size_t i = 0; i < n; ++i) {
      double v = 0.0;
      for (std::size_t t = 0; t < T; ++t)
        v += (s.ret - (b.empty() ? 0.0 : b[i][t])) * s.grads[t][i];
      mean[i] += v;
      sq[i] += v * v;
    }
  }
  const double m = static_cast<double>(samples.size());
  std::vector<double> var(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double mu = mean[i] / m;
    var[i] = std::max(0.0, sq[i] / m - mu * mu);
  }
  return var;
}

// ---- online regression baseline -----------------------------------------------

OnlineBaseline::OnlineBaseline(std::size_t groups, std::size_t features, double ridge)
    : features_(features), ridge_(ridge), stats_(groups) {
  require(features >= 1, "online baseline needs features");
  for (Stats& s : stats_) {
    s.A.assign(features * features, 0.0);
    s.c.assign(features, 0.0);
    s.w.assign(features, 0.0);
  }
}

void OnlineBaseline::add(std::size_t group, std::span<const double> phi, double target) {
  require(group < stats_.size(), "baseline group out of range");
  require(phi.size() == features_, "baseline feature size mismatch");
  if (!std::isfinite(target)) throw ContractError("non-finite baseline target");
  Stats& s = stats_[group];
  for (std::size_t r = 0; r < features_; ++r) {
    s.c[r] += phi[r] * target;
    for (std::size_t c = 0; c < features_; ++c) s.A[r * features_ + c] += phi[r] * phi[c];
  }
  ++s.n;
  refresh(s);
}

void OnlineBaseline::refresh(Stats& s) const {
  const auto f = static_cast<Eigen::Index>(features_);
  Eigen::MatrixXd A(f, f);
  Eigen::VectorXd c(f);
  const double inv = 1.0 / static_cast<double>(s.n);
  for (Eigen::Index r = 0; r < f; ++r) {
    c(r) = s.c[static_cast<std::size_t>(r)] * inv;
    for (Eigen::Index k = 0; k < f; ++k)
      A(r, k) = s.A[static_cast<std::size_t>(r * f + k)] * inv;
  }
  A += ridge_ * Eigen::MatrixXd::Identity(f, f);
  const Eigen::VectorXd w = A.ldlt().solve(c);
  s.w.assign(w.data(), w.data() + w.size());
}

double OnlineBaseline::predict(std::size_t group, std::span<const double> phi) const {
  require(group < stats_.size(), "baseline group out of range");
  require(phi.size() == features_, "baseline feature size mismatch");
  const Stats& s = stats_[group];
  double v = 0.0;
  for (std::size_t i = 0; i < features_; ++i) v += s.w[i] * phi[i];
  return v;
}

std::size_t OnlineBaseline::count(std::size_t group) const {
  require(group < stats_.size(), "baseline group out of range");
  return stats_[group].n;
}

std::vector<double> batch_least_squares(const std::vector<std::vector<double>>& phi,
                                        const std::vector<double>& target,
                                        double ridge) {
  require(!phi.empty() && phi.size() == target.size(),
          "least squares needs matching, non-empty data");
  const auto f = static_cast<Eigen::Index>(phi.front().size());
  const auto n = static_cast<Eigen::Index>(phi.size());
  Eigen::MatrixXd P(n, f);
  Eigen::VectorXd t(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    for (Eigen::Index c = 0; c < f; ++c)
      P(r, c) = phi[static_cast<std::size_t>(r)][static_cast<std::size_t>(c)];
    t(r) = target[static_cast<std::size_t>(r)];
  }
  const double inv = 1.0 / static_cast<double>(n);
  Eigen::MatrixXd A = P.transpose() * P * inv + ridge * Eigen::MatrixXd::Identity(f, f);
  const Eigen::VectorXd w = A.colPivHouseholderQr().solve(P.transpose() * t * inv);
  return {w.data(), w.data() + w.size()};
}

// ---- safety variance ----------------------------------------------------------

double safety_bound(double p, double r) {
  require(p > 0.0 && p < 1.0, "safety_bound needs p in (0, 1)");
  require(r > 0.0, "safety_bound needs r > 0");
  const double m = p * r + (1.0 - p);
  return p * r * r - m * m;
}

double two_point_variance(double p, double r, double other) {
  require(p >= 0.0 && p <= 1.0, "probability out of range");
  const double gap = other + r;
  return p * (1.0 - p) * gap * gap;
}

SafetyDiagnostics safety_diagnostics(std::span<const double> returns, double r,
                                     std::vector<double> grad_variance) {
  require(!returns.empty(), "safety diagnostics need returns");
  require(r > 0.0, "accident penalty must be > 0");
  SafetyDiagnostics d;
  d.r = r;
  double mean = 0.0, sq = 0.0;
  std::size_t accidents = 0;
  for (double x : returns) {
    if (!std::isfinite(x)) throw ContractError("non-finite return");
    mean += x;
    sq += x * x;
    if (x <= -0.5 * r) ++accidents;
  }
  const double n = static_cast<double>(returns.size());
  mean /= n;
  d.return_variance = std::max(0.0, sq / n - mean * mean);
  d.p = static_cast<double>(accidents) / n;
  d.bound = d.p > 0.0 && d.p < 1.0 ? safety_bound(d.p, r) : 0.0;
  d.grad_variance = std::move(grad_variance);
  return d;
}

}  // namespace mergerl::learn
