#include "mergerl/training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <ostream>

#include "mergerl/error.hpp"

namespace mergerl::learn {

void Environment::validate() const {
  scene.validate();
  planner.validate();
  gating.validate();
  require(graph.chain_length() >= static_cast<int>(kMaxSensed),
          "graph label chain must cover every sensed vehicle");
}

// ---- episodes -----------------------------------------------------------------

double EpisodeTrace::recompute_return() const {
  std::vector<double> r;
  r.reserve(steps.size());
  for (const StepRecord& s : steps) r.push_back(s.reward);
  return sim::discounted_return(r, discount);
}

AgentAssignment uniform_assignment(const Environment& env,
                                   const options::PolicyParams* params, bool record) {
  const auto n = static_cast<std::size_t>(2 * env.scene.agents_per_side);
  return AgentAssignment{std::vector<const options::PolicyParams*>(n, params),
                         std::vector<bool>(n, record)};
}

EpisodeSummary run_episode(const Environment& env, std::uint64_t seed,
                           std::uint64_t index, const AgentAssignment& agents,
                           const StepObserver& observer) {
  sim::WorldState world =
      sim::init_scene(Rng::stream(seed, "scene", index).next_u64(), env.scene);
  Rng policy_rng = Rng::stream(seed, "policy", index);
  const std::size_t n = world.vehicles.size();
  require(agents.params.size() == n && agents.record.size() == n,
          "assignment must cover every vehicle");
  const double gamma = env.scene.reward.discount;

  EpisodeSummary out;
  out.returns.assign(n, 0.0);
  std::vector<std::optional<options::TraversalTrace>> previous(n);
  std::vector<int> trace_of(n, -1);
  for (std::size_t id = 0; id < n; ++id) {
    if (!agents.record[id]) continue;
    require(agents.params[id] != nullptr, "only learned agents can be recorded");
    trace_of[id] = static_cast<int>(out.traces.size());
    EpisodeTrace t;
    t.agent = static_cast<int>(id);
    t.discount = gamma;
    out.traces.push_back(std::move(t));
  }
  std::vector<double> weight(n, 1.0);

  while (!world.all_terminal()) {
    std::vector<std::optional<TrajectoryPlan>> plans(n);
    std::vector<AgentStepInfo> infos;
    const auto running = world.running_agents();
    for (int id : running) {
      const auto i = static_cast<std::size_t>(id);
      const AgnosticState st = sim::sense(world, id);
      options::Traversal tr;
      if (agents.params[i] == nullptr) {
        tr = options::follow_expert(env.graph, st, sim::expert_decide(st, env.expert));
      } else {
        options::TraverseContext ctx{world.step, previous[i] ? &*previous[i] : nullptr,
                                     env.gating};
        tr = options::traverse(env.graph, *agents.params[i], st, policy_rng, ctx);
      }
      planner::PlanResult res = planner::plan(tr.desires, st, env.planner);
      plans[i] = res.plan;
      out.fallbacks += res.fallback ? 1 : 0;
      previous[i] = options::strip_tapes(tr.trace);
      if (trace_of[i] >= 0) {
        StepRecord rec;
        rec.step = world.step;
        rec.speed = st.ego_speed;
        rec.distance_to_merge = st.distance_to_merge_m;
        rec.trace = std::move(tr.trace);
        out.traces[static_cast<std::size_t>(trace_of[i])].steps.push_back(std::move(rec));
      }
      if (observer) infos.push_back(AgentStepInfo{id, std::move(tr.desires), std::move(res), *previous[i]});
    }
    sim::StepResult next = sim::step(world, plans);
    for (int id : running) {
      const auto i = static_cast<std::size_t>(id);
      const double r = next.rewards[i];
      if (!std::isfinite(r)) throw ContractError("non-finite reward");
      out.returns[i] += weight[i] * r;
      weight[i] *= gamma;
      if (trace_of[i] >= 0)
        out.traces[static_cast<std::size_t>(trace_of[i])].steps.back().reward = r;
    }
    world = std::move(next.world);
    if (observer) observer(world, infos, next.rewards);
  }
  out.outcomes = world.outcomes;
  out.length = world.step;
  for (EpisodeTrace& t : out.traces) {
    t.outcome = world.outcomes[static_cast<std::size_t>(t.agent)];
    t.total_return = out.returns[static_cast<std::size_t>(t.agent)];
  }
  return out;
}

// ---- gradient estimation ------------------------------------------------------

CreditConfig credit_from(const options::GatingSchedule& gating, double discount) {
  return CreditConfig{gating.high_credit, gating.low_credit, discount};
}

double window_return(const EpisodeTrace& trace, std::size_t t, int window,
                     double discount) {
  require(t < trace.steps.size(), "step outside the trace");
  const std::size_t end =
      window < 0 ? trace.steps.size()
                 : std::min(trace.steps.size(), t + static_cast<std::size_t>(window));
  double r = 0.0, w = 1.0;
  for (std::size_t u = t; u < end; ++u) {
    r += w * trace.steps[u].reward;
    w *= discount;
  }
  return r;
}

std::array<double, kBaselineFeatures> baseline_features(const StepRecord& s,
                                                        const sim::SceneConfig& scene) {
  return {1.0, static_cast<double>(s.step) / scene.horizon_steps,
          s.speed / scene.geometry.v_max, s.distance_to_merge / 300.0};
}

GradientAccumulator::GradientAccumulator(const options::PolicyParams& params)
    : sum_(options::zero_grads(params)), sq_norm_sum_(params.sets.size(), 0.0) {}

void GradientAccumulator::add(const options::OptionGraph& graph,
                              const options::PolicyParams& params,
                              const EpisodeTrace& trace, const CreditConfig& credit,
                              const OnlineBaseline* baseline,
                              const sim::SceneConfig& scene,
                              std::vector<BaselineSample>* samples) {
  require(params.sets.size() == sum_.size(), "params do not match the accumulator");
  const std::size_t L = trace.steps.size();
  // suffix[t] = sum_{u >= t} gamma^{u - t} r_u; windows are differences.
  std::vector<double> suffix(L + 1, 0.0), gpow(L + 1, 1.0);
  for (std::size_t t = L; t-- > 0;) {
    if (!std::isfinite(trace.steps[t].reward)) throw ContractError("non-finite reward");
    suffix[t] = trace.steps[t].reward + credit.discount * suffix[t + 1];
  }
  for (std::size_t k = 1; k <= L; ++k) gpow[k] = gpow[k - 1] * credit.discount;
  auto window = [&](std::size_t t, int w) {
    const std::size_t end = w < 0 ? L : std::min(L, t + static_cast<std::size_t>(w));
    return suffix[t] - gpow[end - t] * suffix[end];
  };

  auto g = options::zero_grads(params);
  for (std::size_t t = 0; t < L; ++t) {
    const StepRecord& s = trace.steps[t];
    const auto phi = baseline_features(s, scene);
    for (const options::Decision& d : s.trace.decisions) {
      if (!d.sampled) continue;
      const options::Node& node = graph.node(d.node);
      const int w = options::is_high_level(node.kind) ? credit.high_window
                                                      : credit.low_window;
      const double R = window(t, w);
      const auto group = static_cast<std::size_t>(node.param_set);
      const double b = baseline ? baseline->predict(group, phi) : 0.0;
      options::accumulate_decision_grad(graph, params, d, R - b, g);
      if (samples) samples->push_back(BaselineSample{group, phi, R});
    }
  }
  for (std::size_t k = 0; k < g.size(); ++k) {
    sum_[k] += g[k];
    double sq = 0.0;
    for (double v : g[k].values) sq += v * v;
    sq_norm_sum_[k] += sq;
  }
  ++count_;
}

std::vector<net::GradVector> GradientAccumulator::mean() const {
  auto out = sum_;
  if (count_ == 0) return out;
  for (auto& g : out) g *= 1.0 / static_cast<double>(count_);
  return out;
}

std::vector<double> GradientAccumulator::variance_by_set() const {
  std::vector<double> out(sum_.size(), 0.0);
  if (count_ == 0) return out;
  const double n = static_cast<double>(count_);
  for (std::size_t k = 0; k < sum_.size(); ++k) {
    double mean_sq = 0.0;
    for (double v : sum_[k].values) mean_sq += (v / n) * (v / n);
    out[k] = std::max(0.0, sq_norm_sum_[k] / n - mean_sq);
  }
  return out;
}

GradientEstimate estimate_gradient(const options::OptionGraph& graph,
                                   const options::PolicyParams& params,
                                   const std::vector<EpisodeTrace>& traces,
                                   const CreditConfig& credit,
                                   const OnlineBaseline* baseline,
                                   const sim::SceneConfig& scene) {
  require(!traces.empty(), "gradient estimate needs at least one trace");
  GradientAccumulator acc(params);
  for (const EpisodeTrace& t : traces) acc.add(graph, params, t, credit, baseline, scene);
  GradientEstimate e{acc.mean(), acc.variance_by_set()};
  for (const auto& g : e.gradient)
    if (!g.all_finite()) throw ContractError("non-finite gradient estimate");
  return e;
}

// ---- imitation ----------------------------------------------------------------

void ImitationConfig::validate() const {
  require(demo_episodes >= 1, "imitation.demo_episodes must be >= 1");
  require(heldout_episodes >= 0, "imitation.heldout_episodes must be >= 0");
  require(epochs >= 0, "imitation.epochs must be >= 0");
  require(batch_size >= 1, "imitation.batch_size must be >= 1");
  require(learning_rate > 0, "imitation.learning_rate must be > 0");
  require(label_horizon >= 1, "imitation.label_horizon must be >= 1");
  require(separation_lanes > 0, "imitation.separation_lanes must be > 0");
}

Label infer_label(std::span<const double> ego_s, std::span<const double> ego_lane,
                  std::span<const double> other_s, std::span<const double> other_lane,
                  double separation_lanes) {
  require(!ego_s.empty() && ego_s.size() == ego_lane.size() &&
              ego_s.size() == other_s.size() && ego_s.size() == other_lane.size(),
          "label inference needs aligned, non-empty histories");
  bool separated = true;
  for (std::size_t u = 0; u < ego_s.size(); ++u)
    if (std::abs(ego_lane[u] - other_lane[u]) < separation_lanes) separated = false;
  if (separated) return Label::Offset;
  return ego_s.back() > other_s.back() ? Label::TakeWay : Label::GiveWay;
}

std::vector<Demo> collect_demos(const Environment& env, std::uint64_t seed,
                                std::uint64_t first_index, int episodes,
                                const ImitationConfig& config) {
  config.validate();
  std::vector<Demo> demos;
  for (int e = 0; e < episodes; ++e) {
    const std::uint64_t index = first_index + static_cast<std::uint64_t>(e);
    sim::WorldState world =
        sim::init_scene(Rng::stream(seed, "scene", index).next_u64(), env.scene);
    const std::size_t n = world.vehicles.size();
    std::vector<std::vector<double>> s_hist, lane_hist;  // [step][id]
    std::vector<int> end_step(n, -1);
    struct Pending {
      Demo demo;
      int step;
      int agent;
      std::vector<int> others;
    };
    std::vector<Pending> pending;
    std::vector<std::optional<options::TraversalTrace>> previous(n);
    auto snapshot = [&] {
      std::vector<double> s(n), l(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = world.vehicles[i].s;
        l[i] = world.vehicles[i].lateral;
      }
      s_hist.push_back(std::move(s));
      lane_hist.push_back(std::move(l));
    };
    snapshot();
    while (!world.all_terminal()) {
      std::vector<std::optional<TrajectoryPlan>> plans(n);
      for (int id : world.running_agents()) {
        const auto i = static_cast<std::size_t>(id);
        AgnosticState st = sim::sense(world, id);
        sim::ExpertDecision dec = sim::expert_decide(st, env.expert);
        options::Traversal tr = options::follow_expert(env.graph, st, dec);
        plans[i] = planner::plan(tr.desires, st, env.planner).plan;
        Pending p;
        p.step = world.step;
        p.agent = id;
        for (const SensedVehicle& o : st.others) p.others.push_back(o.id);
        p.demo.previous = previous[i] ? *previous[i] : options::TraversalTrace{};
        p.demo.state = std::move(st);
        p.demo.decision = std::move(dec);
        previous[i] = options::strip_tapes(tr.trace);
        pending.push_back(std::move(p));
      }
      world = sim::step(world, plans).world;
      snapshot();
      for (std::size_t i = 0; i < n; ++i)
        if (end_step[i] < 0 && !world.running(static_cast<int>(i)))
          end_step[i] = world.step;
    }
    for (Pending& p : pending) {
      const auto ego = static_cast<std::size_t>(p.agent);
      for (std::size_t k = 0; k < p.others.size(); ++k) {
        const auto o = static_cast<std::size_t>(p.others[k]);
        const int last = std::min({p.step + config.label_horizon, end_step[ego], end_step[o]});
        std::vector<double> es, el, os, ol;
        for (int u = p.step; u <= std::max(last, p.step); ++u) {
          const auto uu = static_cast<std::size_t>(u);
          es.push_back(s_hist[uu][ego]);
          el.push_back(lane_hist[uu][ego]);
          os.push_back(s_hist[uu][o]);
          ol.push_back(lane_hist[uu][o]);
        }
        p.demo.decision.labels[k] = infer_label(es, el, os, ol, config.separation_lanes);
      }
      demos.push_back(std::move(p.demo));
    }
  }
  return demos;
}

namespace {

options::TraverseContext imitation_context(const Demo& d) {
  options::TraverseContext ctx;
  ctx.previous = d.previous.decisions.empty() ? nullptr : &d.previous;
  ctx.schedule.high_period = 1;
  return ctx;
}

}  // namespace

ImitationStats imitation_stats(const options::OptionGraph& graph,
                               const options::PolicyParams& params,
                               const std::vector<Demo>& demos) {
  ImitationStats st;
  std::size_t agree = 0;
  for (const Demo& demo : demos) {
    const auto tr = options::traverse(graph, params, demo.state,
                                      options::expert_chooser(graph, demo.decision),
                                      imitation_context(demo));
    for (const options::Decision& d : tr.trace.decisions) {
      if (!d.sampled) continue;
      const auto target = options::expert_child(graph, graph.node(d.node), demo.decision);
      if (!target) continue;
      const auto& lp = d.tape.log_probs;
      st.nll -= lp[*target];
      const auto best =
          static_cast<std::size_t>(std::max_element(lp.begin(), lp.end()) - lp.begin());
      agree += best == *target ? 1 : 0;
      ++st.decisions;
    }
  }
  if (st.decisions > 0) {
    st.nll /= static_cast<double>(st.decisions);
    st.agreement = static_cast<double>(agree) / static_cast<double>(st.decisions);
  }
  return st;
}

options::PolicyParams imitation_init(const std::vector<Demo>& demos,
                                     const options::OptionGraph& graph,
                                     const options::PolicyParams& params,
                                     const ImitationConfig& config, Rng& rng) {
  config.validate();
  if (demos.empty()) throw ContractError("imitation needs at least one demo");
  options::PolicyParams p = params;
  std::vector<std::size_t> order(demos.size());
  std::iota(order.begin(), order.end(), 0);
  const auto batch = static_cast<std::size_t>(config.batch_size);
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.index(i)]);
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t end = std::min(order.size(), start + batch);
      auto grads = options::zero_grads(p);
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const Demo& demo = demos[order[k]];
        const auto tr = options::traverse(graph, p, demo.state,
                                          options::expert_chooser(graph, demo.decision),
                                          imitation_context(demo));
        for (const options::Decision& d : tr.trace.decisions) {
          if (!d.sampled) continue;
          if (!options::expert_child(graph, graph.node(d.node), demo.decision)) continue;
          options::accumulate_decision_grad(graph, p, d, scale, grads);
        }
      }
      for (std::size_t s = 0; s < p.sets.size(); ++s)
        p.sets[s] = net::sgd_step(p.sets[s], grads[s], config.learning_rate,
                                  net::Direction::Ascent);
    }
  }
  return p;
}

// ---- self-play ----------------------------------------------------------------

void TrainConfig::validate() const {
  require(rounds >= 0, "train.rounds must be >= 0");
  require(episodes_per_round >= 1, "train.episodes_per_round must be >= 1");
  require(batch_episodes >= 1, "train.batch_episodes must be >= 1");
  require(learning_rate > 0, "train.learning_rate must be > 0");
  require(clip_norm >= 0, "train.clip_norm must be >= 0");
}

namespace {

void clip(net::GradVector& g, double max_norm) {
  if (max_norm <= 0) return;
  double sq = 0.0;
  for (double v : g.values) sq += v * v;
  const double norm = std::sqrt(sq);
  if (norm > max_norm) g *= max_norm / norm;
}

}  // namespace

TrainResult self_play_train(const Environment& env, const TrainConfig& config,
                            const options::PolicyParams& init,
                            const RoundCallback& on_round) {
  env.validate();
  config.validate();
  TrainResult result{init, {}};
  const std::size_t sets = init.sets.size();
  const std::size_t n = static_cast<std::size_t>(2 * env.scene.agents_per_side);
  OnlineBaseline baseline(sets, kBaselineFeatures);
  CreditConfig credit = credit_from(env.gating, env.scene.reward.discount);
  if (config.full_return) credit.high_window = credit.low_window = -1;
  std::uint64_t episode_index = 0;

  for (int round = 1; round <= config.rounds; ++round) {
    const std::size_t learner_parity = round % 2 == 1 ? 1 : 0;
    const options::PolicyParams frozen = result.params;
    options::PolicyParams learning = result.params;
    const double lr =
        config.learning_rate / (config.decay ? std::sqrt(static_cast<double>(round)) : 1.0);

    RoundMetrics row;
    row.round = round;
    std::vector<double> var_sum(sets, 0.0);
    int batches = 0;
    std::size_t agents_total = 0, merged = 0, wrong = 0;
    double learner_return = 0.0;
    std::size_t learner_count = 0;

    AgentAssignment assign;
    for (std::size_t id = 0; id < n; ++id) {
      const bool learns = id % 2 == learner_parity;
      assign.params.push_back(learns ? &learning : &frozen);
      assign.record.push_back(learns);
    }

    for (int start = 0; start < config.episodes_per_round && !row.aborted;
         start += config.batch_episodes) {
      const int end = std::min(config.episodes_per_round, start + config.batch_episodes);
      GradientAccumulator acc(learning);
      std::vector<BaselineSample> samples;
      for (int e = start; e < end; ++e) {
        EpisodeSummary ep = run_episode(env, config.seed, episode_index++, assign);
        ++row.episodes;
        for (std::size_t id = 0; id < ep.outcomes.size(); ++id) {
          ++agents_total;
          merged += ep.outcomes[id] == sim::Outcome::MergedOk;
          wrong += ep.outcomes[id] == sim::Outcome::WrongSide;
          row.accidents += ep.outcomes[id] == sim::Outcome::Accident;
        }
        for (const EpisodeTrace& t : ep.traces) {
          learner_return += t.total_return;
          ++learner_count;
          acc.add(env.graph, learning, t, credit,
                  config.baseline == BaselineMode::Online ? &baseline : nullptr,
                  env.scene, &samples);
        }
      }
      auto grads = acc.mean();
      bool finite = true;
      for (const auto& g : grads) finite = finite && g.all_finite();
      if (!finite) {
        row.aborted = true;
        learning = frozen;
        break;
      }
      const auto var = acc.variance_by_set();
      for (std::size_t s = 0; s < sets; ++s) var_sum[s] += var[s];
      ++batches;
      for (std::size_t s = 0; s < sets; ++s) {
        clip(grads[s], config.clip_norm);
        learning.sets[s] = net::sgd_step(learning.sets[s], grads[s], lr, net::Direction::Ascent);
      }
      for (const BaselineSample& b : samples) baseline.add(b.group, b.phi, b.target);
    }

    result.params = row.aborted ? frozen : learning;
    row.merge_rate = agents_total ? static_cast<double>(merged) / agents_total : 0.0;
    row.wrong_side_rate = agents_total ? static_cast<double>(wrong) / agents_total : 0.0;
    row.mean_return = learner_count ? learner_return / static_cast<double>(learner_count) : 0.0;
    for (std::size_t s = 0; s < sets; ++s)
      row.grad_variance.emplace_back(env.graph.param_sets()[s].name,
                                     batches ? var_sum[s] / batches : 0.0);
    result.history.push_back(row);
    if (on_round) on_round(row, result.params);
  }
  return result;
}

void write_metrics_csv(std::ostream& out, const std::vector<RoundMetrics>& rows) {
  out << "round,episodes,merge_rate,wrong_side_rate,accidents,mean_return,"
         "grad_variance_by_node\n";
  auto num = [](double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return std::string(buf);
  };
  for (const RoundMetrics& r : rows) {
    out << r.round << ',' << r.episodes << ',' << num(r.merge_rate) << ','
        << num(r.wrong_side_rate) << ',' << r.accidents << ',' << num(r.mean_return) << ',';
    for (std::size_t k = 0; k < r.grad_variance.size(); ++k)
      out << (k ? ";" : "") << r.grad_variance[k].first << ':' << num(r.grad_variance[k].second);
    out << '\n';
  }
}

// ---- evaluation ---------------------------------------------------------------

EvalMetrics evaluate(const Environment& env, const options::PolicyParams* params,
                     std::uint64_t seed, int episodes, std::uint64_t first) {
  env.validate();
  require(episodes >= 1, "evaluation needs at least one episode");
  const AgentAssignment assign = uniform_assignment(env, params);
  EvalMetrics m;
  m.episodes = episodes;
  std::size_t merged = 0, wrong = 0;
  double ret = 0.0, len = 0.0;
  for (int e = 0; e < episodes; ++e) {
    const EpisodeSummary s =
        run_episode(env, seed, first + static_cast<std::uint64_t>(e), assign);
    for (std::size_t id = 0; id < s.outcomes.size(); ++id) {
      ++m.agents;
      merged += s.outcomes[id] == sim::Outcome::MergedOk;
      wrong += s.outcomes[id] == sim::Outcome::WrongSide;
      m.accidents += s.outcomes[id] == sim::Outcome::Accident;
      ret += s.returns[id];
    }
    len += s.length;
    m.fallbacks += s.fallbacks;
  }
  m.merge_rate = static_cast<double>(merged) / m.agents;
  m.wrong_side_rate = static_cast<double>(wrong) / m.agents;
  m.mean_return = ret / m.agents;
  m.mean_length = len / episodes;
  return m;
}

}  // namespace mergerl::learn
