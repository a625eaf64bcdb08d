#include "mergerl/options.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "mergerl/error.hpp"
#include "mergerl/ini.hpp"

namespace mergerl::options {

std::string_view to_string(NodeKind k) {
  switch (k) {
    case NodeKind::Root: return "root";
    case NodeKind::Lateral: return "lateral";
    case NodeKind::Commitment: return "commitment";
    case NodeKind::Speed: return "speed";
    case NodeKind::Label: return "label";
    case NodeKind::Option: return "option";
  }
  return "unknown";
}

std::optional<NodeKind> kind_from_string(std::string_view s) {
  for (NodeKind k : {NodeKind::Root, NodeKind::Lateral, NodeKind::Commitment,
                     NodeKind::Speed, NodeKind::Label, NodeKind::Option})
    if (to_string(k) == s) return k;
  return std::nullopt;
}

bool is_high_level(NodeKind k) {
  return k == NodeKind::Root || k == NodeKind::Lateral || k == NodeKind::Commitment;
}

// ---- graph loading ------------------------------------------------------------

namespace {

std::optional<std::size_t> required_children(NodeKind k) {
  switch (k) {
    case NodeKind::Root: return 2;
    case NodeKind::Lateral:
    case NodeKind::Commitment:
    case NodeKind::Speed:
    case NodeKind::Label: return 3;
    case NodeKind::Option: return std::nullopt;
  }
  return std::nullopt;
}

Effect parse_effect(const ini::Document& doc, const ini::Entry& e) {
  const auto words = ini::to_words(e);
  auto bad = [&]() -> Effect {
    ini::fail(doc, e.line, "unrecognised effect '" + e.value + "'");
  };
  if (words.empty()) return bad();
  const std::string& w = words[0];
  Effect eff;
  if (words.size() == 1) {
    if (w == "none") return eff;
    if (w == "go") eff.type = Effect::Type::Go;
    else if (w == "push") eff.type = Effect::Type::Push;
    else if (w == "stay") eff.type = Effect::Type::Stay;
    else return bad();
    return eff;
  }
  if (words.size() != 2) return bad();
  if (w == "label") {
    eff.type = Effect::Type::Label;
    if (words[1] == "g") eff.label = Label::GiveWay;
    else if (words[1] == "t") eff.label = Label::TakeWay;
    else if (words[1] == "o") eff.label = Label::Offset;
    else return bad();
    return eff;
  }
  const ini::Entry num{e.key, words[1], e.line};
  const double v = ini::to_double(doc, num);
  if (w == "direction") {
    if (v != 1.0 && v != -1.0) ini::fail(doc, e.line, "direction must be -1 or +1");
    eff.type = Effect::Type::Direction;
  } else if (w == "speed") {
    if (v != 1.0 && v != 0.0 && v != -1.0)
      ini::fail(doc, e.line, "speed effect must be -1, 0 or +1");
    eff.type = Effect::Type::Speed;
  } else {
    return bad();
  }
  eff.value = v;
  return eff;
}

}  // namespace

OptionGraph OptionGraph::parse(std::string_view text, const std::string& source) {
  const ini::Document doc = ini::parse(text, source);
  OptionGraph g;
  std::string root_id;
  int root_line = 0;
  std::vector<std::size_t> hidden{32, 32, 32};
  struct Pending {
    std::vector<std::string> children;
    std::string params;
    int children_line = 0;
    int params_line = 0;
  };
  std::vector<Pending> pending;
  bool saw_graph = false;

  for (const ini::Section& sec : doc.sections) {
    if (sec.name.empty()) {
      if (!sec.entries.empty())
        ini::fail(doc, sec.entries.front().line, "entry outside of any section");
      continue;
    }
    if (sec.name == "graph") {
      saw_graph = true;
      ini::apply(doc, sec, {
          {"root", [&](const ini::Entry& e) { root_id = e.value; root_line = e.line; }},
          {"speed_step", [&](const ini::Entry& e) {
             g.speed_step_ = ini::to_double(doc, e);
             if (!(g.speed_step_ > 0)) ini::fail(doc, e.line, "speed_step must be > 0");
           }},
          {"hidden", [&](const ini::Entry& e) {
             hidden.clear();
             for (const std::string& w : ini::to_words(e)) {
               const int h = ini::to_int(doc, ini::Entry{e.key, w, e.line});
               if (h < 1) ini::fail(doc, e.line, "hidden sizes must be >= 1");
               hidden.push_back(static_cast<std::size_t>(h));
             }
           }},
      });
      continue;
    }
    const std::string prefix = "node ";
    if (sec.name.rfind(prefix, 0) != 0)
      ini::fail(doc, sec.line, "unknown section [" + sec.name + "]");
    Node n;
    n.id = sec.name.substr(prefix.size());
    n.line = sec.line;
    if (n.id.empty() || n.id.find(' ') != std::string::npos)
      ini::fail(doc, sec.line, "node ids must be single words");
    if (g.find(n.id) >= 0) ini::fail(doc, sec.line, "duplicate node '" + n.id + "'");
    Pending p;
    bool has_kind = false;
    ini::apply(doc, sec, {
        {"kind", [&](const ini::Entry& e) {
           const auto k = kind_from_string(e.value);
           if (!k) ini::fail(doc, e.line, "unknown node kind '" + e.value + "'");
           n.kind = *k;
           has_kind = true;
         }},
        {"children", [&](const ini::Entry& e) {
           p.children = ini::to_words(e);
           p.children_line = e.line;
         }},
        {"params", [&](const ini::Entry& e) { p.params = e.value; p.params_line = e.line; }},
        {"effect", [&](const ini::Entry& e) { n.effect = parse_effect(doc, e); }},
        {"slot", [&](const ini::Entry& e) {
           n.slot = ini::to_int(doc, e);
           if (n.slot < 1) ini::fail(doc, e.line, "slot must be >= 1");
         }},
    });
    if (!has_kind) ini::fail(doc, sec.line, "node '" + n.id + "' has no kind");
    g.nodes_.push_back(std::move(n));
    pending.push_back(std::move(p));
  }
  if (!saw_graph) ini::fail(doc, 0, "missing [graph] section");
  if (root_id.empty()) ini::fail(doc, 0, "[graph] needs a root");
  g.root_ = g.find(root_id);
  if (g.root_ < 0) ini::fail(doc, root_line, "root '" + root_id + "' is not a node");

  // Resolve edges and parameter sets.
  std::map<std::string, int> set_index;
  for (std::size_t i = 0; i < g.nodes_.size(); ++i) {
    Node& n = g.nodes_[i];
    const Pending& p = pending[i];
    for (const std::string& c : p.children) {
      const int idx = g.find(c);
      if (idx < 0)
        ini::fail(doc, p.children_line,
                  "node '" + n.id + "' has unknown child '" + c + "'");
      if (std::find(n.children.begin(), n.children.end(), idx) != n.children.end())
        ini::fail(doc, p.children_line, "node '" + n.id + "' lists '" + c + "' twice");
      n.children.push_back(idx);
    }
    if (const auto req = required_children(n.kind); req && n.children.size() != *req)
      ini::fail(doc, n.line,
                std::string(to_string(n.kind)) + " node '" + n.id + "' needs " +
                    std::to_string(*req) + " children");
    if (n.kind == NodeKind::Option && n.children.size() > 1)
      ini::fail(doc, n.line, "option node '" + n.id + "' may have at most one child");
    if (n.kind == NodeKind::Label && n.slot == 0)
      ini::fail(doc, n.line, "label node '" + n.id + "' needs a slot");
    if (n.kind != NodeKind::Label && n.slot != 0)
      ini::fail(doc, n.line, "slot is only valid on label nodes");
    if (n.decides() && p.params.empty())
      ini::fail(doc, n.line, "decision node '" + n.id + "' needs params");
    if (!n.decides() && !p.params.empty())
      ini::fail(doc, p.params_line, "node '" + n.id + "' makes no decision; drop params");
    if (p.params.empty()) continue;
    const InputLayout layout =
        n.kind == NodeKind::Label ? InputLayout::Chain : InputLayout::Context;
    auto [it, inserted] = set_index.try_emplace(p.params, static_cast<int>(g.param_sets_.size()));
    if (inserted) {
      ParamSetInfo info;
      info.name = p.params;
      info.layout = layout;
      info.dims.input = layout == InputLayout::Chain ? kChainInputs : kContextInputs;
      info.dims.hidden = hidden;
      info.dims.output = n.children.size();
      g.param_sets_.push_back(info);
    } else {
      const ParamSetInfo& info = g.param_sets_[static_cast<std::size_t>(it->second)];
      if (info.layout != layout || info.dims.output != n.children.size())
        ini::fail(doc, p.params_line,
                  "params '" + p.params + "' shared by nodes with different shapes");
    }
    n.param_set = it->second;
  }

  // Label chain shares one parameter set.
  int label_set = -2;
  for (const Node& n : g.nodes_) {
    if (n.kind != NodeKind::Label) continue;
    if (label_set == -2) label_set = n.param_set;
    if (n.param_set != label_set)
      ini::fail(doc, n.line, "all label nodes must use the same params");
    g.chain_length_ = std::max(g.chain_length_, n.slot);
  }

  // Root without incoming edges, acyclic, everything reachable.
  for (const Node& n : g.nodes_)
    for (int c : n.children)
      if (c == g.root_)
        ini::fail(doc, n.line, "node '" + n.id + "' points back to the root");
  std::vector<int> color(g.nodes_.size(), 0);
  std::function<void(int)> dfs = [&](int u) {
    color[static_cast<std::size_t>(u)] = 1;
    const Node& n = g.nodes_[static_cast<std::size_t>(u)];
    for (int c : n.children) {
      if (color[static_cast<std::size_t>(c)] == 1)
        ini::fail(doc, n.line, "cycle through edge '" + n.id + "' -> '" +
                                   g.nodes_[static_cast<std::size_t>(c)].id + "'");
      if (color[static_cast<std::size_t>(c)] == 0) dfs(c);
    }
    color[static_cast<std::size_t>(u)] = 2;
  };
  dfs(g.root_);
  for (std::size_t i = 0; i < g.nodes_.size(); ++i)
    if (color[i] == 0)
      ini::fail(doc, g.nodes_[i].line,
                "node '" + g.nodes_[i].id + "' is unreachable from the root");
  return g;
}

OptionGraph OptionGraph::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path);
}

OptionGraph OptionGraph::default_graph() {
  return parse(default_graph_text(), "<default graph>");
}

const Node& OptionGraph::node(int index) const {
  require(index >= 0 && static_cast<std::size_t>(index) < nodes_.size(),
          "node index out of range");
  return nodes_[static_cast<std::size_t>(index)];
}

int OptionGraph::find(std::string_view id) const {
  for (std::size_t i = 0; i < nodes_.size(); ++i)
    if (nodes_[i].id == id) return static_cast<int>(i);
  return -1;
}

int OptionGraph::param_set_index(std::string_view name) const {
  for (std::size_t i = 0; i < param_sets_.size(); ++i)
    if (param_sets_[i].name == name) return static_cast<int>(i);
  return -1;
}

std::string default_graph_text() {
  std::ostringstream o;
  o << "# Double-merge option graph.\n"
       "[graph]\n"
       "root = root\n"
       "speed_step = 2.5\n"
       "hidden = 32 32 32\n\n"
       "[node root]\nkind = root\nparams = root\nchildren = prepare merge\n\n"
       "[node prepare]\nkind = lateral\nparams = lateral_prepare\n"
       "children = left stay right\n\n"
       "[node merge]\nkind = lateral\nparams = lateral_merge\n"
       "children = left stay right\n\n"
       "[node left]\nkind = commitment\nparams = commitment\neffect = direction -1\n"
       "children = go stay push\n\n"
       "[node right]\nkind = commitment\nparams = commitment\neffect = direction +1\n"
       "children = go stay push\n\n";
  for (const char* name : {"go", "stay", "push"})
    o << "[node " << name << "]\nkind = speed\nparams = speed\neffect = " << name
      << "\nchildren = accelerate same decelerate\n\n";
  const std::pair<const char*, const char*> speeds[] = {
      {"accelerate", "+1"}, {"same", "0"}, {"decelerate", "-1"}};
  for (const auto& [name, v] : speeds)
    o << "[node " << name << "]\nkind = option\neffect = speed " << v
      << "\nchildren = id1\n\n";
  for (std::size_t i = 1; i <= kMaxSensed; ++i) {
    o << "[node id" << i << "]\nkind = label\nslot = " << i
      << "\nparams = label\nchildren = g" << i << " t" << i << " o" << i << "\n\n";
    for (const char* l : {"g", "t", "o"}) {
      o << "[node " << l << i << "]\nkind = option\neffect = label " << l << "\n";
      if (i < kMaxSensed) o << "children = id" << i + 1 << "\n";
      o << "\n";
    }
  }
  std::string s = o.str();
  s.pop_back();
  return s;
}

// ---- parameters ---------------------------------------------------------------

PolicyParams init_params(const OptionGraph& graph, Rng& rng) {
  PolicyParams p;
  for (const ParamSetInfo& info : graph.param_sets())
    p.sets.push_back(net::NetParams::random(info.dims, rng));
  return p;
}

PolicyParams zero_params(const OptionGraph& graph) {
  PolicyParams p;
  for (const ParamSetInfo& info : graph.param_sets())
    p.sets.push_back(net::NetParams::zeros(info.dims));
  return p;
}

std::vector<net::NamedParams> to_named(const OptionGraph& graph,
                                       const PolicyParams& params) {
  require(params.sets.size() == graph.param_sets().size(),
          "parameter blocks do not match the graph");
  std::vector<net::NamedParams> out;
  for (std::size_t i = 0; i < params.sets.size(); ++i)
    out.push_back({graph.param_sets()[i].name, params.sets[i]});
  return out;
}

PolicyParams from_named(const OptionGraph& graph,
                        const std::vector<net::NamedParams>& named) {
  PolicyParams p;
  for (const ParamSetInfo& info : graph.param_sets()) {
    const auto it = std::find_if(named.begin(), named.end(),
                                 [&](const auto& n) { return n.name == info.name; });
    if (it == named.end())
      throw ContractError("checkpoint lacks parameter set '" + info.name + "'");
    if (!(it->params.dims() == info.dims))
      throw ContractError("checkpoint set '" + info.name +
                          "' has dimensions that do not match the graph");
    p.sets.push_back(it->params);
  }
  if (named.size() != p.sets.size())
    throw ContractError("checkpoint has parameter sets the graph does not use");
  return p;
}

// ---- gating -------------------------------------------------------------------

void GatingSchedule::validate() const {
  require(high_period >= 1, "gating.high_period must be >= 1");
  require(low_period >= 1, "gating.low_period must be >= 1");
  require(high_credit == -1 || high_credit >= high_period,
          "gating.high_credit must be -1 or >= gating.high_period");
  require(low_credit == -1 || low_credit >= low_period,
          "gating.low_credit must be -1 or >= gating.low_period");
}

std::set<NodeKind> gate(const GatingSchedule& schedule, int step,
                        const TraversalTrace* previous) {
  const bool fresh = previous == nullptr || previous->decisions.empty();
  std::set<NodeKind> out;
  if (fresh || step % schedule.high_period == 0)
    out.insert({NodeKind::Root, NodeKind::Lateral, NodeKind::Commitment});
  if (fresh || step % schedule.low_period == 0)
    out.insert({NodeKind::Speed, NodeKind::Label, NodeKind::Option});
  return out;
}

// ---- features -----------------------------------------------------------------

namespace {

double side_sign(Side s) { return s == Side::Left ? -1.0 : 1.0; }

bool in_merge_area(const AgnosticState& st) {
  return st.lanes.merge_start_ahead_m <= 0.0 && st.lanes.merge_end_ahead_m > 0.0;
}

double anchor_lane_of(const AgnosticState& st) {
  return std::clamp(std::round(st.ego_lane), st.lanes.min_lane(), st.lanes.max_lane());
}

bool can_move(const AgnosticState& st, double dir) {
  const double cur = anchor_lane_of(st);
  const double next = cur + dir;
  if (next < st.lanes.min_lane() || next > st.lanes.max_lane()) return false;
  return in_merge_area(st) || st.lanes.side_of(next) == st.lanes.side_of(cur);
}

}  // namespace

std::vector<double> ego_features(const AgnosticState& st) {
  const LaneGeometry& l = st.lanes;
  const Side own = l.side_of(st.ego_lane);
  std::vector<double> f(kEgoFeatures, 0.0);
  f[0] = st.ego_speed / st.v_max;
  f[1] = st.ego_heading;
  f[2] = (st.ego_lane - l.min_lane()) / (l.max_lane() - l.min_lane());
  f[3] = st.distance_to_merge_m / 300.0;
  f[4] = l.merge_end_ahead_m / 100.0;
  f[5] = in_merge_area(st) ? 1.0 : 0.0;
  f[6] = st.target_side ? 1.0 : 0.0;
  f[7] = st.target_side ? side_sign(*st.target_side) : 0.0;
  f[8] = side_sign(own);
  f[9] = st.target_side && *st.target_side == own ? 1.0 : 0.0;
  f[10] = st.ego_lane - std::round(st.ego_lane);
  f[11] = can_move(st, -1.0) ? 1.0 : 0.0;
  f[12] = can_move(st, +1.0) ? 1.0 : 0.0;
  return f;
}

void vehicle_features(const AgnosticState& st, const SensedVehicle& v,
                      std::span<double> out) {
  require(out.size() == kVehicleFeatures, "vehicle feature block has 6 entries");
  out[0] = 1.0;
  out[1] = v.x / st.lanes.lane_width_m;
  out[2] = v.y / 100.0;
  out[3] = v.vx / 5.0;
  out[4] = (v.vy - st.longitudinal_speed()) / 10.0;
  out[5] = v.heading;
}

bool desires_valid(const Desires& d, const AgnosticState& st) {
  if (!(d.speed >= 0.0 && d.speed <= st.v_max)) return false;
  const double twice = 2.0 * d.lateral;
  if (twice != std::round(twice)) return false;
  if (d.lateral < st.lanes.min_lane() || d.lateral > st.lanes.max_lane()) return false;
  return d.labels.size() == st.others.size();
}

// ---- traversal ----------------------------------------------------------------

namespace {

struct ActiveOption {
  int root = -1;
  int lateral = -1;
  int commitment = -1;

  void note(NodeKind kind, std::size_t child) {
    const int c = static_cast<int>(child);
    if (kind == NodeKind::Root) root = c;
    if (kind == NodeKind::Lateral) { lateral = c; commitment = -1; }
    if (kind == NodeKind::Commitment) commitment = c;
  }
  void write(std::span<double> out) const {
    std::fill(out.begin(), out.end(), 0.0);
    if (root >= 0) out[static_cast<std::size_t>(root)] = 1.0;
    if (lateral >= 0) out[2 + static_cast<std::size_t>(lateral)] = 1.0;
    if (commitment >= 0) out[5 + static_cast<std::size_t>(commitment)] = 1.0;
  }
};

ActiveOption active_from(const OptionGraph& graph, const TraversalTrace* prev) {
  ActiveOption a;
  if (!prev) return a;
  for (const Decision& d : prev->decisions) a.note(graph.node(d.node).kind, d.child);
  return a;
}

// Folds node effects into a Desires value.
class DesireBuilder {
 public:
  DesireBuilder(const AgnosticState& st, double anchor, double speed_step)
      : st_(st), anchor_(anchor), speed_step_(speed_step), lateral_(anchor),
        speed_(std::clamp(st.ego_speed, 0.0, st.v_max)) {}

  void apply(const Effect& e) {
    const double lo = st_.lanes.min_lane(), hi = st_.lanes.max_lane();
    switch (e.type) {
      case Effect::Type::None: break;
      case Effect::Type::Direction: dir_ = e.value; break;
      case Effect::Type::Go: lateral_ = std::clamp(anchor_ + dir_, lo, hi); break;
      case Effect::Type::Push: lateral_ = std::clamp(anchor_ + dir_ / 2.0, lo, hi); break;
      case Effect::Type::Stay: lateral_ = anchor_; break;
      case Effect::Type::Speed:
        speed_choice_ = static_cast<int>(e.value);
        speed_ = std::clamp(st_.ego_speed + e.value * speed_step_, 0.0, st_.v_max);
        break;
      case Effect::Type::Label: labels_.push_back(e.label); break;
    }
  }

  const std::vector<Label>& labels() const { return labels_; }

  // Chain-node input for the vehicle at slot (1-based).
  std::vector<double> chain_input(const std::vector<double>& ego, int slot) const {
    std::vector<double> in(kChainInputs, 0.0);
    std::copy(ego.begin(), ego.end(), in.begin());
    std::size_t o = kEgoFeatures;
    vehicle_features(st_, st_.others[static_cast<std::size_t>(slot - 1)],
                     std::span<double>(in).subspan(o, kVehicleFeatures));
    o += kVehicleFeatures;
    if (!labels_.empty()) in[o + static_cast<std::size_t>(labels_.back())] = 1.0;
    o += 3;
    in[o++] = lateral_ - st_.ego_lane;
    if (speed_choice_) in[o + static_cast<std::size_t>(1 - *speed_choice_)] = 1.0;
    return in;
  }

  Desires finish() const { return Desires{speed_, lateral_, labels_}; }

 private:
  const AgnosticState& st_;
  double anchor_;
  double speed_step_;
  double dir_ = 0.0;
  double lateral_;
  double speed_;
  std::optional<int> speed_choice_;
  std::vector<Label> labels_;
};

std::vector<double> context_input(const AgnosticState& st,
                                  const std::vector<double>& ego,
                                  const ActiveOption& active) {
  std::vector<double> in(kContextInputs, 0.0);
  std::copy(ego.begin(), ego.end(), in.begin());
  std::size_t o = kEgoFeatures;
  for (std::size_t i = 0; i < st.others.size() && i < kMaxSensed; ++i)
    vehicle_features(st, st.others[i],
                     std::span<double>(in).subspan(o + i * kVehicleFeatures,
                                                   kVehicleFeatures));
  o += kMaxSensed * kVehicleFeatures;
  active.write(std::span<double>(in).subspan(o, kActiveOptionFeatures));
  return in;
}

bool stops_at(const Node& n, std::size_t sensed) {
  return n.children.empty() ||
         (n.kind == NodeKind::Label && static_cast<std::size_t>(n.slot) > sensed);
}

}  // namespace

double TraversalTrace::total_log_prob() const {
  double s = 0.0;
  for (const Decision& d : decisions) s += d.log_prob;
  return s;
}

std::optional<std::size_t> TraversalTrace::choice_at(int node) const {
  for (const Decision& d : decisions)
    if (d.node == node) return d.child;
  return std::nullopt;
}

Chooser sampling_chooser(Rng& rng) {
  return [&rng](const Node&, std::span<const double> probs) {
    return rng.categorical(probs);
  };
}

Chooser greedy_chooser() {
  return [](const Node&, std::span<const double> probs) {
    return static_cast<std::size_t>(
        std::max_element(probs.begin(), probs.end()) - probs.begin());
  };
}

Traversal traverse(const OptionGraph& graph, const PolicyParams& params,
                   const AgnosticState& state, Rng& rng,
                   const TraverseContext& ctx) {
  return traverse(graph, params, state, sampling_chooser(rng), ctx);
}

Traversal traverse(const OptionGraph& graph, const PolicyParams& params,
                   const AgnosticState& state, const Chooser& choose,
                   const TraverseContext& ctx) {
  require(params.sets.size() == graph.param_sets().size(),
          "parameter blocks do not match the graph");
  require(state.others.size() <= static_cast<std::size_t>(graph.chain_length()) ||
              state.others.empty(),
          "more sensed vehicles than label-chain nodes");
  const TraversalTrace* prev = ctx.previous;
  const auto kinds = gate(ctx.schedule, ctx.step, prev);
  const bool high_fresh = kinds.count(NodeKind::Root) > 0;

  Traversal out;
  TraversalTrace& trace = out.trace;
  trace.step = ctx.step;
  trace.sensed = state.others.size();
  trace.anchor_lane = high_fresh || !prev ? anchor_lane_of(state) : prev->anchor_lane;

  DesireBuilder builder(state, trace.anchor_lane, graph.speed_step());
  ActiveOption active = active_from(graph, prev);
  const std::vector<double> ego = ego_features(state);

  int current = graph.root();
  while (true) {
    const Node& n = graph.node(current);
    builder.apply(n.effect);
    if (stops_at(n, trace.sensed)) break;
    Decision d;
    d.node = current;
    d.credit_window = ctx.schedule.credit_for(n.kind);
    if (n.decides()) {
      const auto earlier = prev ? prev->choice_at(current) : std::nullopt;
      if (!kinds.count(n.kind) && earlier) {
        d.child = *earlier;
        d.persisted = true;
      } else {
        const std::vector<double> input =
            n.kind == NodeKind::Label ? builder.chain_input(ego, n.slot)
                                      : context_input(state, ego, active);
        net::Forward fwd =
            net::forward(params.sets[static_cast<std::size_t>(n.param_set)], input);
        d.child = choose(n, fwd.probs);
        require(d.child < n.children.size(), "chooser returned an invalid child");
        d.log_prob = fwd.tape.log_probs[d.child];
        d.sampled = true;
        d.tape = std::move(fwd.tape);
      }
    }
    active.note(n.kind, d.child);
    current = n.children[d.child];
    trace.decisions.push_back(std::move(d));
  }
  trace.terminal = current;
  out.desires = builder.finish();
  if (out.desires.labels.size() != trace.sensed)
    throw ContractError("label chain ended before every sensed vehicle was labelled");
  return out;
}

Desires desires_from_traversal(const OptionGraph& graph,
                               const TraversalTrace& trace,
                               const AgnosticState& state) {
  require(trace.sensed == state.others.size(),
          "trace was recorded for a different number of sensed vehicles");
  DesireBuilder builder(state, trace.anchor_lane, graph.speed_step());
  int current = graph.root();
  for (const Decision& d : trace.decisions) {
    require(d.node == current, "trace leaves the graph's edges");
    const Node& n = graph.node(current);
    require(!stops_at(n, trace.sensed), "trace continues past a stopping node");
    require(d.child < n.children.size(), "trace chooses a child that does not exist");
    builder.apply(n.effect);
    current = n.children[d.child];
  }
  require(trace.terminal == current, "trace terminal does not follow its last choice");
  const Node& last = graph.node(current);
  require(stops_at(last, trace.sensed), "trace ends before reaching a leaf");
  builder.apply(last.effect);
  Desires d = builder.finish();
  require(d.labels.size() == state.others.size(), "trace labels do not match vehicles");
  return d;
}

std::vector<net::GradVector> zero_grads(const PolicyParams& params) {
  std::vector<net::GradVector> out;
  out.reserve(params.sets.size());
  for (const net::NetParams& p : params.sets) out.emplace_back(p.parameter_count());
  return out;
}

void accumulate_decision_grad(const OptionGraph& graph,
                              const PolicyParams& params,
                              const Decision& decision, double scale,
                              std::vector<net::GradVector>& out) {
  if (!decision.sampled) return;
  const Node& n = graph.node(decision.node);
  require(n.param_set >= 0, "sampled decision at a node without params");
  const auto s = static_cast<std::size_t>(n.param_set);
  require(out.size() == params.sets.size(), "gradient blocks do not match params");
  if (decision.tape.layer_count() == 0)
    throw ContractError("decision at node '" + n.id + "' has no forward tape");
  net::accumulate_logprob_grad(params.sets[s], decision.tape, decision.child, scale,
                               out[s].values);
}

std::vector<net::GradVector> trace_grad(const OptionGraph& graph,
                                        const TraversalTrace& trace,
                                        const PolicyParams& params) {
  auto out = zero_grads(params);
  for (const Decision& d : trace.decisions)
    accumulate_decision_grad(graph, params, d, 1.0, out);
  return out;
}

// ---- expert mapping -----------------------------------------------------------

std::optional<std::size_t> expert_child(const OptionGraph& graph, const Node& node,
                                        const sim::ExpertDecision& decision) {
  (void)graph;
  switch (node.kind) {
    case NodeKind::Root: return static_cast<std::size_t>(decision.root);
    case NodeKind::Lateral: return static_cast<std::size_t>(decision.lateral);
    case NodeKind::Commitment:
      if (!decision.commitment) return std::nullopt;
      return static_cast<std::size_t>(*decision.commitment);
    case NodeKind::Speed: return static_cast<std::size_t>(decision.speed);
    case NodeKind::Label: {
      const auto i = static_cast<std::size_t>(node.slot - 1);
      if (i >= decision.labels.size()) return std::nullopt;
      return static_cast<std::size_t>(decision.labels[i]);
    }
    case NodeKind::Option: return std::nullopt;
  }
  return std::nullopt;
}

Chooser expert_chooser(const OptionGraph& graph, const sim::ExpertDecision& decision) {
  return [&graph, decision](const Node& n, std::span<const double> probs) {
    if (const auto c = expert_child(graph, n, decision)) return *c;
    return greedy_chooser()(n, probs);
  };
}

Traversal follow_expert(const OptionGraph& graph, const AgnosticState& state,
                        const sim::ExpertDecision& decision) {
  require(state.others.size() <= static_cast<std::size_t>(graph.chain_length()) ||
              state.others.empty(),
          "more sensed vehicles than label-chain nodes");
  Traversal out;
  TraversalTrace& trace = out.trace;
  trace.sensed = state.others.size();
  trace.anchor_lane = anchor_lane_of(state);
  DesireBuilder builder(state, trace.anchor_lane, graph.speed_step());
  int current = graph.root();
  while (true) {
    const Node& n = graph.node(current);
    builder.apply(n.effect);
    if (stops_at(n, trace.sensed)) break;
    Decision d;
    d.node = current;
    d.child = n.decides() ? expert_child(graph, n, decision).value_or(0) : 0;
    current = n.children[d.child];
    trace.decisions.push_back(d);
  }
  trace.terminal = current;
  out.desires = builder.finish();
  if (out.desires.labels.size() != trace.sensed)
    throw ContractError("label chain ended before every sensed vehicle was labelled");
  return out;
}

TraversalTrace strip_tapes(const TraversalTrace& trace) {
  TraversalTrace out;
  out.step = trace.step;
  out.terminal = trace.terminal;
  out.anchor_lane = trace.anchor_lane;
  out.sensed = trace.sensed;
  out.decisions.reserve(trace.decisions.size());
  for (const Decision& d : trace.decisions) {
    Decision c;
    c.node = d.node;
    c.child = d.child;
    c.log_prob = d.log_prob;
    c.persisted = d.persisted;
    c.sampled = d.sampled;
    c.credit_window = d.credit_window;
    out.decisions.push_back(std::move(c));
  }
  return out;
}

}  // namespace mergerl::options
