#include <doctest.h>

#include <cmath>
#include <sstream>

#include "mergerl/error.hpp"
#include "mergerl/training.hpp"

using namespace mergerl;
using namespace mergerl::learn;

namespace {

std::vector<EpisodeTrace> recorded_traces(const Environment& env, const options::PolicyParams& p,
                                          int episodes, std::uint64_t seed) {
  std::vector<EpisodeTrace> out;
  const auto agents = uniform_assignment(env, &p, true);
  for (int e = 0; e < episodes; ++e) {
    auto s = run_episode(env, seed, static_cast<std::uint64_t>(e), agents);
    for (auto& t : s.traces) out.push_back(std::move(t));
  }
  return out;
}

Environment small_env() {
  Environment env;
  env.scene.agents_per_side = 2;
  return env;
}

double max_abs(const std::vector<net::GradVector>& g) {
  double m = 0.0;
  for (const auto& v : g)
    for (double x : v.values) m = std::max(m, std::abs(x));
  return m;
}

}  // namespace

TEST_SUITE("training") {
  TEST_CASE("recorded traces are consistent with the episode") {
    const Environment env = small_env();
    Rng rng(1);
    const auto p = options::init_params(env.graph, rng);
    const auto agents = uniform_assignment(env, &p, true);
    const auto s = run_episode(env, 3, 0, agents);
    REQUIRE(s.traces.size() == 4);
    for (const auto& t : s.traces) {
      CHECK(t.steps.size() <= static_cast<std::size_t>(env.scene.horizon_steps));
      CHECK(t.total_return == doctest::Approx(t.recompute_return()).epsilon(1e-12));
      CHECK(t.total_return == s.returns[static_cast<std::size_t>(t.agent)]);
      CHECK(t.outcome == s.outcomes[static_cast<std::size_t>(t.agent)]);
      CHECK(t.outcome != sim::Outcome::Running);
      for (std::size_t k = 0; k < t.steps.size(); ++k) CHECK(t.steps[k].step == static_cast<int>(k));
    }
    const auto again = run_episode(env, 3, 0, agents);
    CHECK(again.returns == s.returns);
    CHECK(again.length == s.length);
  }

  TEST_CASE("zero rewards give a zero gradient") {
    const Environment env = small_env();
    Rng rng(2);
    const auto p = options::init_params(env.graph, rng);
    auto traces = recorded_traces(env, p, 1, 5);
    for (auto& t : traces)
      for (auto& s : t.steps) s.reward = 0.0;
    const auto est = estimate_gradient(env.graph, p, traces, credit_from(env.gating, 1.0), nullptr, env.scene);
    CHECK(max_abs(est.gradient) == 0.0);

    traces[0].steps[0].reward = std::nan("");
    CHECK_THROWS_AS(estimate_gradient(env.graph, p, traces, credit_from(env.gating, 1.0), nullptr, env.scene),
                    ContractError);
  }

  TEST_CASE("estimated gradient equals a direct per-decision sum") {
    const Environment env = small_env();
    Rng rng(3);
    const auto p = options::init_params(env.graph, rng);
    const auto traces = recorded_traces(env, p, 2, 7);
    const CreditConfig credit = credit_from(env.gating, 0.99);
    CHECK(credit.high_window == -1);
    CHECK(credit.low_window == 25);

    OnlineBaseline baseline(p.sets.size(), kBaselineFeatures);
    for (std::size_t g = 0; g < p.sets.size(); ++g) {
      const std::array<double, kBaselineFeatures> phi{1.0, 0.5, 0.6, 0.3};
      baseline.add(g, phi, 0.1 * static_cast<double>(g));
      baseline.add(g, std::array<double, kBaselineFeatures>{1.0, 0.1, 0.2, 0.9}, -0.2);
    }

    auto expected = options::zero_grads(p);
    for (const auto& tr : traces) {
      for (std::size_t t = 0; t < tr.steps.size(); ++t) {
        const auto& s = tr.steps[t];
        for (const auto& d : s.trace.decisions) {
          if (!d.sampled) continue;
          const auto& node = env.graph.node(d.node);
          const int w = options::is_high_level(node.kind) ? -1 : 25;
          double R = 0.0, disc = 1.0;
          const std::size_t end = w < 0 ? tr.steps.size() : std::min(tr.steps.size(), t + 25);
          for (std::size_t u = t; u < end; ++u, disc *= 0.99) R += disc * tr.steps[u].reward;
          CHECK(window_return(tr, t, w, 0.99) == doctest::Approx(R).epsilon(1e-12));
          const double b = baseline.predict(static_cast<std::size_t>(node.param_set), baseline_features(s, env.scene));
          options::accumulate_decision_grad(env.graph, p, d, (R - b) / static_cast<double>(traces.size()), expected);
        }
      }
    }
    const auto est = estimate_gradient(env.graph, p, traces, credit, &baseline, env.scene);
    for (std::size_t k = 0; k < expected.size(); ++k)
      for (std::size_t i = 0; i < expected[k].size(); ++i)
        CHECK(std::abs(est.gradient[k][i] - expected[k][i]) <= 1e-9 * (1.0 + std::abs(expected[k][i])));
    CHECK(est.variance_by_set.size() == p.sets.size());
    for (double v : est.variance_by_set) CHECK(v >= 0.0);
  }

  TEST_CASE("short credit windows give lower gradient variance than full returns") {
    const Environment env;
    Rng rng(4);
    const auto p = options::init_params(env.graph, rng);
    const auto traces = recorded_traces(env, p, 6, 11);
    const auto windowed = estimate_gradient(env.graph, p, traces, credit_from(env.gating, 1.0), nullptr, env.scene);
    CreditConfig full = credit_from(env.gating, 1.0);
    full.low_window = -1;
    const auto whole = estimate_gradient(env.graph, p, traces, full, nullptr, env.scene);
    for (const std::string set : {"speed", "label"}) {
      const auto s = static_cast<std::size_t>(env.graph.param_set_index(set));
      MESSAGE(set << " windowed " << windowed.variance_by_set[s] << " full " << whole.variance_by_set[s]);
      CHECK(windowed.variance_by_set[s] < whole.variance_by_set[s]);
    }
  }

  TEST_CASE("label inference from relative future positions") {
    const std::vector<double> ego_s{0, 5, 10, 15}, lane_same{2, 2, 2, 2};
    const std::vector<double> behind{3, 6, 9, 12}, ahead{3, 8, 13, 18}, far_lane{4, 4, 4, 4};
    CHECK(infer_label(ego_s, lane_same, behind, lane_same, 0.9) == Label::TakeWay);
    CHECK(infer_label(ego_s, lane_same, ahead, lane_same, 0.9) == Label::GiveWay);
    CHECK(infer_label(ego_s, lane_same, ahead, far_lane, 0.9) == Label::Offset);
    const std::vector<double> merging{4, 3, 2.5, 2};
    CHECK(infer_label(ego_s, lane_same, ahead, merging, 0.9) == Label::GiveWay);
    CHECK_THROWS_AS(infer_label(ego_s, lane_same, std::vector<double>{1}, lane_same, 0.9), ContractError);
  }

  TEST_CASE("imitation: zero epochs change nothing, fitting lowers the held-out loss") {
    const Environment env = small_env();
    ImitationConfig cfg;
    const auto demos = collect_demos(env, 1, 100, 3, cfg);
    const auto held = collect_demos(env, 1, 200, 1, cfg);
    REQUIRE(!demos.empty());
    Rng rng(5);
    const auto init = options::init_params(env.graph, rng);

    ImitationConfig none = cfg;
    none.epochs = 0;
    Rng r0(6);
    CHECK(imitation_init(demos, env.graph, init, none, r0) == init);
    CHECK_THROWS_AS(imitation_init({}, env.graph, init, cfg, r0), ContractError);

    cfg.epochs = 2;
    Rng r1(6);
    const auto fitted = imitation_init(demos, env.graph, init, cfg, r1);
    const auto before = imitation_stats(env.graph, init, held);
    const auto after = imitation_stats(env.graph, fitted, held);
    CHECK(after.nll < before.nll);
    CHECK(after.agreement > before.agreement);
    CHECK(after.decisions == before.decisions);

    Rng r2(6);
    CHECK(imitation_init(demos, env.graph, init, cfg, r2) == fitted);
  }

  TEST_CASE("imitating an expert that never changes lane makes stay dominant") {
    const Environment env = small_env();
    ImitationConfig cfg;
    cfg.epochs = 3;
    auto demos = collect_demos(env, 2, 300, 2, cfg);
    for (auto& d : demos) {
      d.decision.lateral = sim::LateralChoice::Stay;
      d.decision.commitment.reset();
    }
    Rng rng(7);
    const auto fitted = imitation_init(demos, env.graph, options::init_params(env.graph, rng), cfg, rng);
    double min_stay = 1.0;
    for (std::size_t k = 0; k < demos.size(); k += 7) {
      const auto& demo = demos[k];
      const options::Chooser probe = [&](const options::Node& n, std::span<const double> probs) {
        if (n.kind == options::NodeKind::Lateral) min_stay = std::min(min_stay, probs[1]);
        return options::expert_chooser(env.graph, demo.decision)(n, probs);
      };
      options::TraverseContext ctx;
      ctx.previous = &demo.previous;
      options::traverse(env.graph, fitted, demo.state, probe, ctx);
    }
    MESSAGE("smallest stay probability " << min_stay);
    CHECK(min_stay > 0.9);
  }

  TEST_CASE("self-play bookkeeping and determinism") {
    const Environment env = small_env();
    Rng rng(8);
    const auto init = options::init_params(env.graph, rng);

    TrainConfig zero;
    zero.rounds = 0;
    const auto none = self_play_train(env, zero, init);
    CHECK(none.params == init);
    CHECK(none.history.empty());

    TrainConfig cfg;
    cfg.rounds = 2;
    cfg.episodes_per_round = 4;
    cfg.batch_episodes = 2;
    int callbacks = 0;
    const auto a = self_play_train(env, cfg, init, [&](const RoundMetrics& m, const options::PolicyParams&) {
      ++callbacks;
      CHECK(m.round == callbacks);
    });
    const auto b = self_play_train(env, cfg, init);
    CHECK(callbacks == 2);
    REQUIRE(a.history.size() == 2);
    CHECK(a.params == b.params);
    CHECK_FALSE(a.params == init);
    std::ostringstream ca, cb;
    write_metrics_csv(ca, a.history);
    write_metrics_csv(cb, b.history);
    CHECK(ca.str() == cb.str());
    CHECK(ca.str().rfind("round,episodes,merge_rate,wrong_side_rate,accidents,mean_return,grad_variance_by_node\n", 0) == 0);
    for (const auto& m : a.history) {
      CHECK(m.episodes == 4);
      CHECK(m.accidents == 0);
      CHECK(m.merge_rate + m.wrong_side_rate == doctest::Approx(1.0));
      CHECK(m.grad_variance.size() == init.sets.size());
    }

    TrainConfig bad = cfg;
    bad.learning_rate = 0.0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
  }

  TEST_CASE("scripted expert evaluation is accident free and reproducible") {
    const Environment env;
    const auto m = evaluate(env, nullptr, 9, 100);
    CHECK(m.episodes == 100);
    CHECK(m.agents == 800);
    CHECK(m.accidents == 0);
    CHECK(m.merge_rate + m.wrong_side_rate == doctest::Approx(1.0));
    const auto again = evaluate(env, nullptr, 9, 10);
    const auto first = evaluate(env, nullptr, 9, 10);
    CHECK(again.merge_rate == first.merge_rate);
    CHECK(again.mean_return == first.mean_return);
  }
}
