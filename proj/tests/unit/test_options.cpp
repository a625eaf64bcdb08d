#include <doctest.h>

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "mergerl/error.hpp"
#include "mergerl/options.hpp"

using namespace mergerl;
using namespace mergerl::options;

namespace {

// Ego in lane 2 inside the merge area with n vehicles spread around it.
AgnosticState merge_state(std::size_t n, double lane = 2.0, double speed = 16.0) {
  AgnosticState st;
  st.ego_speed = speed;
  st.ego_lane = lane;
  st.distance_to_merge_m = -10.0;
  st.lanes.merge_start_ahead_m = -10.0;
  st.lanes.merge_end_ahead_m = 90.0;
  st.origin_side = Side::Left;
  st.target_side = Side::Right;
  for (std::size_t i = 0; i < n; ++i) {
    SensedVehicle v;
    v.id = static_cast<int>(i + 1);
    v.x = (i % 2 == 0 ? 3.5 : -3.5);
    v.y = 8.0 * static_cast<double>(i + 1) * (i % 3 == 0 ? 1.0 : -1.0);
    v.vy = 15.0;
    st.others.push_back(v);
  }
  return st;
}

OptionGraph small_graph() {
  std::string text = default_graph_text();
  const auto pos = text.find("hidden = 32 32 32");
  REQUIRE(pos != std::string::npos);
  text.replace(pos, 17, "hidden = 4 3");
  return OptionGraph::parse(text, "small.ini");
}

int parse_error_line(const std::string& text) {
  try {
    OptionGraph::parse(text, "g.ini");
  } catch (const ParseError& e) {
    return e.line();
  }
  return -1;
}

// Chooses by node kind; label nodes take labels[slot - 1].
Chooser scripted(std::map<NodeKind, std::size_t> by_kind, std::vector<std::size_t> labels = {}) {
  return [by_kind, labels](const Node& n, std::span<const double>) -> std::size_t {
    if (n.kind == NodeKind::Label) return labels.at(static_cast<std::size_t>(n.slot - 1));
    return by_kind.at(n.kind);
  };
}

double replay_log_prob(const OptionGraph& g, const PolicyParams& p, const AgnosticState& st,
                       const TraversalTrace& trace) {
  std::map<int, std::size_t> choice;
  for (const auto& d : trace.decisions) choice[d.node] = d.child;
  const Chooser replay = [&](const Node& n, std::span<const double>) {
    return choice.at(g.find(n.id));
  };
  return traverse(g, p, st, replay).trace.total_log_prob();
}

const char* kTiny = R"([graph]
root = a

[node a]
kind = option
effect = speed +1
children = b

[node b]
kind = option
effect = none
)";

}  // namespace

TEST_SUITE("options") {
  TEST_CASE("bundled graph matches the data file and its documented shape") {
    std::ifstream in(std::string(MERGERL_SOURCE_DIR) + "/data/option_graph.ini");
    REQUIRE(in);
    std::stringstream ss;
    ss << in.rdbuf();
    CHECK(ss.str() == default_graph_text());

    const OptionGraph g = OptionGraph::default_graph();
    CHECK(g == OptionGraph::parse(default_graph_text(), "x"));
    CHECK(g.chain_length() == 8);
    CHECK(g.speed_step() == 2.5);
    std::vector<std::string> names;
    for (const auto& s : g.param_sets()) names.push_back(s.name);
    CHECK(names == std::vector<std::string>{"root", "lateral_prepare", "lateral_merge",
                                            "commitment", "speed", "label"});
    for (const auto& s : g.param_sets())
      CHECK(s.dims.input == (s.layout == InputLayout::Chain ? kChainInputs : kContextInputs));
    CHECK(kContextInputs == 69);
    CHECK(kChainInputs == 26);
    for (const Node& n : g.nodes())
      if (n.kind == NodeKind::Label) CHECK(n.param_set == g.param_set_index("label"));
  }

  TEST_CASE("malformed graphs are rejected at load with the offending line") {
    const std::string cycle =
        "[graph]\nroot = a\n[node a]\nkind = option\nchildren = b\n[node b]\nkind = option\nchildren = c\n"
        "[node c]\nkind = option\nchildren = b\n";
    CHECK(parse_error_line(cycle) == 9);
    CHECK(parse_error_line("[graph]\nroot = a\n[node a]\nkind = option\nchildren = zz\n") == 5);
    CHECK(parse_error_line("[graph]\nroot = a\n[node a]\nkind = wobble\n") == 4);
    CHECK(parse_error_line("[graph]\nroot = q\n[node a]\nkind = option\n") == 2);
    CHECK(parse_error_line("[graph]\nroot = a\n[node a]\nkind = option\n[node a]\nkind = option\n") == 5);
    CHECK(parse_error_line("[graph]\nroot = a\n[node a]\nkind = option\n[node b]\nkind = option\n") == 5);
    CHECK(parse_error_line("[graph]\nroot = a\n[node a]\nkind = option\nchildren = a\n") == 3);
    CHECK(parse_error_line("[graph]\nroot = a\n[node a]\nkind = root\nchildren = b c\n[node b]\n"
                           "kind = option\n[node c]\nkind = option\n") == 3);  // no params
    CHECK(parse_error_line("[graph]\nroot = a\n[node a]\nkind = option\neffect = direction 2\n") == 5);
    CHECK(parse_error_line("[graph]\nroot = a\n[node a]\nkind = option\nslot = 1\n") == 3);
    CHECK(parse_error_line("[bogus]\n") == 1);
    CHECK_THROWS_AS(OptionGraph::parse("[node a]\nkind = option\n", "g"), ParseError);

    std::string two_label_sets = default_graph_text();
    const auto pos = two_label_sets.find("slot = 2\nparams = label");
    REQUIRE(pos != std::string::npos);
    two_label_sets.replace(pos, 23, "slot = 2\nparams = other");
    CHECK_THROWS_AS(OptionGraph::parse(two_label_sets, "g"), ParseError);
  }

  TEST_CASE("a graph of single-child nodes is deterministic with zero log-probability") {
    const OptionGraph g = OptionGraph::parse(kTiny, "tiny.ini");
    const PolicyParams p = zero_params(g);
    const AgnosticState st = merge_state(0);
    Rng rng(1);
    const Traversal t = traverse(g, p, st, rng);
    CHECK(t.trace.total_log_prob() == 0.0);
    CHECK(t.desires.speed == 18.5);
    CHECK(t.desires.lateral == 2.0);
    Rng other(99);
    CHECK(traverse(g, p, st, other).desires == t.desires);
    for (const auto& gv : trace_grad(g, t.trace, p))
      for (double v : gv.values) CHECK(v == 0.0);
  }

  TEST_CASE("commitment choices from lane 2 towards lane 3") {
    const OptionGraph g = OptionGraph::default_graph();
    Rng rng(3);
    const PolicyParams p = init_params(g, rng);
    const AgnosticState st = merge_state(0);
    const std::map<std::size_t, double> expected{{0, 3.0}, {1, 2.0}, {2, 2.5}};
    for (const auto& [commit, lane] : expected) {
      const auto t = traverse(g, p, st,
                              scripted({{NodeKind::Root, 1}, {NodeKind::Lateral, 2},
                                        {NodeKind::Commitment, commit}, {NodeKind::Speed, 1}}));
      CHECK(t.desires.lateral == lane);
      CHECK(t.desires.speed == 16.0);
    }
  }

  TEST_CASE("speed choices shift the target by the configured step, clamped") {
    const OptionGraph g = OptionGraph::default_graph();
    const PolicyParams p = zero_params(g);
    auto speed_for = [&](std::size_t choice, double ego) {
      return traverse(g, p, merge_state(0, 2.0, ego),
                      scripted({{NodeKind::Root, 0}, {NodeKind::Lateral, 1}, {NodeKind::Speed, choice}}))
          .desires.speed;
    };
    CHECK(speed_for(1, 16.0) == 16.0);
    CHECK(speed_for(0, 16.0) == 16.0 + g.speed_step());
    CHECK(speed_for(2, 16.0) == 16.0 - g.speed_step());
    CHECK(speed_for(0, 24.0) == 25.0);
    CHECK(speed_for(2, 1.0) == 0.0);
  }

  TEST_CASE("label chain has one label per sensed vehicle") {
    const OptionGraph g = OptionGraph::default_graph();
    Rng rng(4);
    const PolicyParams p = init_params(g, rng);
    for (std::size_t n : {0u, 2u, 5u, 8u}) {
      const auto t = traverse(g, p, merge_state(n), rng);
      CHECK(t.desires.labels.size() == n);
      CHECK(t.trace.sensed == n);
    }
    const auto t = traverse(g, p, merge_state(2),
                            scripted({{NodeKind::Root, 0}, {NodeKind::Lateral, 1}, {NodeKind::Speed, 1}},
                                     {0, 1}));
    CHECK(t.desires.labels == std::vector<Label>{Label::GiveWay, Label::TakeWay});
  }

  TEST_CASE("desires are rebuilt exactly from a recorded trace") {
    const OptionGraph g = OptionGraph::default_graph();
    Rng rng(5);
    const PolicyParams p = init_params(g, rng);
    for (int k = 0; k < 50; ++k) {
      const AgnosticState st = merge_state(static_cast<std::size_t>(k % 9), 1.0 + (k % 4));
      const auto t = traverse(g, p, st, rng);
      CHECK(desires_from_traversal(g, t.trace, st) == t.desires);
      CHECK(desires_from_traversal(g, strip_tapes(t.trace), st) == t.desires);
    }
  }

  TEST_CASE("traces that leave the graph are rejected") {
    const OptionGraph g = OptionGraph::default_graph();
    Rng rng(6);
    const PolicyParams p = init_params(g, rng);
    const AgnosticState st = merge_state(2);
    const auto t = traverse(g, p, st, rng);

    TraversalTrace wrong_node = t.trace;
    wrong_node.decisions[1].node = g.root();
    CHECK_THROWS_AS(desires_from_traversal(g, wrong_node, st), ContractError);
    TraversalTrace bad_child = t.trace;
    bad_child.decisions[0].child = 7;
    CHECK_THROWS_AS(desires_from_traversal(g, bad_child, st), ContractError);
    TraversalTrace short_trace = t.trace;
    short_trace.decisions.pop_back();
    CHECK_THROWS_AS(desires_from_traversal(g, short_trace, st), ContractError);
    CHECK_THROWS_AS(desires_from_traversal(g, t.trace, merge_state(3)), ContractError);
  }

  TEST_CASE("child probabilities normalize and recorded log-probabilities match them") {
    const OptionGraph g = OptionGraph::default_graph();
    Rng rng(7);
    const PolicyParams p = init_params(g, rng);
    std::vector<double> chosen_log;
    Rng pick(8);
    const Chooser probe = [&](const Node&, std::span<const double> probs) {
      double s = 0.0;
      for (double q : probs) s += q;
      CHECK(std::abs(s - 1.0) < 1e-12);
      const std::size_t c = pick.categorical(probs);
      chosen_log.push_back(std::log(probs[c]));
      return c;
    };
    for (int k = 0; k < 20; ++k) {
      chosen_log.clear();
      const auto t = traverse(g, p, merge_state(static_cast<std::size_t>(k % 9)), probe);
      double sum = 0.0;
      std::size_t j = 0;
      for (const auto& d : t.trace.decisions) {
        CHECK(d.log_prob <= 0.0);
        sum += d.log_prob;
        if (d.sampled) CHECK(std::abs(d.log_prob - chosen_log[j++]) < 1e-12);
      }
      CHECK(j == chosen_log.size());
      CHECK(t.trace.total_log_prob() == sum);
    }
  }

  TEST_CASE("gating") {
    const GatingSchedule s;
    const std::set<NodeKind> everything{NodeKind::Root, NodeKind::Lateral, NodeKind::Commitment,
                                        NodeKind::Speed, NodeKind::Label, NodeKind::Option};
    CHECK(gate(s, 0, nullptr) == everything);
    TraversalTrace prev;
    prev.decisions.push_back(Decision{});
    const auto at7 = gate(s, 7, &prev);
    CHECK(at7.count(NodeKind::Root) == 0);
    CHECK(at7.count(NodeKind::Lateral) == 0);
    CHECK(at7.count(NodeKind::Commitment) == 0);
    CHECK(at7.count(NodeKind::Speed) == 1);
    CHECK(at7.count(NodeKind::Label) == 1);
    CHECK(gate(s, 20, &prev) == everything);

    GatingSchedule bad;
    bad.low_credit = 0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = {};
    bad.high_period = 0;
    CHECK_THROWS_AS(bad.validate(), ContractError);
    bad = {};
    bad.high_credit = 5;
    CHECK_THROWS_AS(bad.validate(), ContractError);
  }

  TEST_CASE("a 250-step episode makes 25 high-level decisions per node kind") {
    const OptionGraph g = small_graph();
    Rng rng(9);
    const PolicyParams p = init_params(g, rng);
    const AgnosticState st = merge_state(3);
    std::map<NodeKind, int> sampled;
    std::optional<TraversalTrace> prev;
    for (int step = 0; step < 250; ++step) {
      TraverseContext ctx;
      ctx.step = step;
      ctx.previous = prev ? &*prev : nullptr;
      const auto t = traverse(g, p, st, rng, ctx);
      for (const auto& d : t.trace.decisions) {
        const NodeKind k = g.node(d.node).kind;
        if (d.sampled) ++sampled[k];
        if (d.persisted) {
          CHECK(is_high_level(k));
          CHECK(d.log_prob == 0.0);
          CHECK(d.child == *prev->choice_at(d.node));
        }
      }
      if (step % 10 != 0) CHECK(t.trace.anchor_lane == prev->anchor_lane);
      prev = strip_tapes(t.trace);
    }
    CHECK(sampled[NodeKind::Root] == 25);
    CHECK(sampled[NodeKind::Lateral] == 25);
    CHECK(sampled[NodeKind::Commitment] <= 250 / 10 + 1);
    CHECK(sampled[NodeKind::Speed] == 250);
    CHECK(sampled[NodeKind::Label] == 250 * 3);
  }

  TEST_CASE("trace gradient matches finite differences of the total log-probability") {
    const OptionGraph g = small_graph();
    Rng rng(10);
    for (int trial = 0; trial < 5; ++trial) {
      const PolicyParams p = init_params(g, rng);
      const AgnosticState st = merge_state(static_cast<std::size_t>(1 + trial));
      const auto t = traverse(g, p, st, rng);
      const auto grads = trace_grad(g, t.trace, p);
      double num = 0.0, den = 0.0;
      for (std::size_t s = 0; s < p.sets.size(); ++s) {
        const auto theta = p.sets[s].flatten();
        for (std::size_t i = 0; i < theta.size(); ++i) {
          auto lp = [&](double h) {
            PolicyParams q = p;
            auto th = theta;
            th[i] += h;
            q.sets[s] = net::NetParams::unflatten(p.sets[s].dims(), th);
            return replay_log_prob(g, q, st, t.trace);
          };
          const double fd = (lp(1e-5) - lp(-1e-5)) / 2e-5;
          num += (fd - grads[s][i]) * (fd - grads[s][i]);
          den += fd * fd + grads[s][i] * grads[s][i];
        }
      }
      CHECK(std::sqrt(num) < 1e-4 * std::sqrt(den));
    }
  }

  TEST_CASE("a repeated chain decision doubles the shared gradient") {
    const OptionGraph g = small_graph();
    Rng rng(11);
    const PolicyParams p = init_params(g, rng);
    const auto t = traverse(g, p, merge_state(1), rng);
    const Decision* label = nullptr;
    for (const auto& d : t.trace.decisions)
      if (g.node(d.node).kind == NodeKind::Label) label = &d;
    REQUIRE(label != nullptr);
    auto once = zero_grads(p);
    accumulate_decision_grad(g, p, *label, 1.0, once);
    auto twice = zero_grads(p);
    accumulate_decision_grad(g, p, *label, 1.0, twice);
    accumulate_decision_grad(g, p, *label, 1.0, twice);
    const auto s = static_cast<std::size_t>(g.param_set_index("label"));
    bool nonzero = false;
    for (std::size_t i = 0; i < once[s].size(); ++i) {
      CHECK(twice[s][i] == 2.0 * once[s][i]);
      nonzero = nonzero || once[s][i] != 0.0;
    }
    CHECK(nonzero);

    Decision no_tape = *label;
    no_tape.tape = {};
    CHECK_THROWS_AS(accumulate_decision_grad(g, p, no_tape, 1.0, once), ContractError);
  }

  TEST_CASE("random traversals always map into the desire space") {
    const OptionGraph g = OptionGraph::default_graph();
    Rng rng(12);
    const PolicyParams p = zero_params(g);
    Rng pick(13);
    const Chooser uniform_pick = [&](const Node& n, std::span<const double>) {
      return pick.index(n.children.size());
    };
    for (int k = 0; k < 10000; ++k) {
      AgnosticState st = merge_state(rng.index(kMaxSensed + 1), 1.0 + 3.0 * rng.uniform(),
                                     rng.uniform(0.0, 25.0));
      const double ahead = rng.uniform(-120.0, 350.0);
      st.distance_to_merge_m = ahead;
      st.lanes.merge_start_ahead_m = ahead;
      st.lanes.merge_end_ahead_m = ahead + 100.0;
      const auto t = traverse(g, p, st, uniform_pick);
      CHECK(desires_valid(t.desires, st));
    }
  }

  TEST_CASE("parameters survive the named round trip and reject mismatches") {
    const OptionGraph g = OptionGraph::default_graph();
    Rng rng(14);
    const PolicyParams p = init_params(g, rng);
    CHECK(from_named(g, to_named(g, p)) == p);
    auto named = to_named(g, p);
    named.pop_back();
    CHECK_THROWS_AS(from_named(g, named), ContractError);
    CHECK_THROWS_AS(from_named(small_graph(), to_named(g, p)), ContractError);
  }

  TEST_CASE("following the expert reproduces its lateral and speed choices") {
    const OptionGraph g = OptionGraph::default_graph();
    sim::ExpertDecision d;
    d.root = sim::RootChoice::Merge;
    d.lateral = sim::LateralChoice::Right;
    d.commitment = sim::CommitChoice::Push;
    d.speed = sim::SpeedChoice::Decelerate;
    d.labels = {Label::Offset, Label::TakeWay};
    const auto t = follow_expert(g, merge_state(2), d);
    CHECK(t.desires.lateral == 2.5);
    CHECK(t.desires.speed == 16.0 - g.speed_step());
    CHECK(t.desires.labels == d.labels);
    for (const auto& dec : t.trace.decisions) CHECK_FALSE(dec.sampled);
  }
}
