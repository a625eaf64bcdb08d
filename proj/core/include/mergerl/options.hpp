#pragma once

// Learnable Desires policy: a DAG of decision nodes, each backed by a small
// softmax net, traversed root to leaf once per step. The effects of the
// visited nodes are folded into a Desires value for the planner.
//
// Child order is fixed per node kind and is what the scripted expert maps to:
//   root        prepare, merge
//   lateral     left, stay, right
//   commitment  go, stay, push
//   speed       accelerate, same, decelerate
//   label       g, t, o

#include <functional>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "mergerl/net.hpp"
#include "mergerl/rng.hpp"
#include "mergerl/simulator.hpp"
#include "mergerl/types.hpp"

namespace mergerl::options {

enum class NodeKind { Root, Lateral, Commitment, Speed, Label, Option };
std::string_view to_string(NodeKind k);
std::optional<NodeKind> kind_from_string(std::string_view s);

// High-level kinds re-decide on the slow clock, the rest every step.
bool is_high_level(NodeKind k);

struct Effect {
  enum class Type { None, Direction, Go, Push, Stay, Speed, Label };
  Type type = Type::None;
  double value = 0.0;  // lateral direction (+-1) or speed steps (-1, 0, +1)
  mergerl::Label label = mergerl::Label::GiveWay;

  friend bool operator==(const Effect&, const Effect&) = default;
};

struct Node {
  std::string id;
  NodeKind kind = NodeKind::Option;
  std::vector<int> children;   // node indices
  int param_set = -1;          // index into OptionGraph::param_sets()
  Effect effect;
  int slot = 0;                // 1-based chain position, label nodes only
  int line = 0;                // where the node was declared

  bool decides() const { return children.size() >= 2; }
  friend bool operator==(const Node&, const Node&) = default;
};

enum class InputLayout { Context, Chain };

struct ParamSetInfo {
  std::string name;
  InputLayout layout = InputLayout::Context;
  net::Dims dims;

  friend bool operator==(const ParamSetInfo&, const ParamSetInfo&) = default;
};

// ---- feature layout ---------------------------------------------------------

inline constexpr std::size_t kEgoFeatures = 13;
inline constexpr std::size_t kVehicleFeatures = 6;
inline constexpr std::size_t kActiveOptionFeatures = 8;  // root 2, lateral 3, commitment 3
inline constexpr std::size_t kContextInputs =
    kEgoFeatures + kMaxSensed * kVehicleFeatures + kActiveOptionFeatures;
// ego block, one vehicle block, previous label one-hot, lateral offset of the
// desire so far, speed choice one-hot.
inline constexpr std::size_t kChainInputs = kEgoFeatures + kVehicleFeatures + 3 + 1 + 3;

// Immutable after load; validation happens in parse().
class OptionGraph {
 public:
  static OptionGraph parse(std::string_view text, const std::string& source);
  static OptionGraph load(const std::string& path);
  static OptionGraph default_graph();

  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(int index) const;
  int root() const { return root_; }
  int find(std::string_view id) const;  // -1 when absent
  const std::vector<ParamSetInfo>& param_sets() const { return param_sets_; }
  int param_set_index(std::string_view name) const;  // -1 when absent
  double speed_step() const { return speed_step_; }
  int chain_length() const { return chain_length_; }

  friend bool operator==(const OptionGraph&, const OptionGraph&) = default;

 private:
  std::vector<Node> nodes_;
  std::vector<ParamSetInfo> param_sets_;
  int root_ = -1;
  double speed_step_ = 2.5;
  int chain_length_ = 0;
};

// Text of the bundled graph (root, prepare/merge, left/stay/right,
// go/stay/push, speed choices, an 8-long shared label chain).
std::string default_graph_text();

// One parameter block per graph parameter set, same order.
struct PolicyParams {
  std::vector<net::NetParams> sets;

  friend bool operator==(const PolicyParams&, const PolicyParams&) = default;
};

PolicyParams init_params(const OptionGraph& graph, Rng& rng);
PolicyParams zero_params(const OptionGraph& graph);
std::vector<net::NamedParams> to_named(const OptionGraph& graph,
                                       const PolicyParams& params);
// Matches blocks by name and checks dimensions against the graph.
PolicyParams from_named(const OptionGraph& graph,
                        const std::vector<net::NamedParams>& named);

// ---- gating -----------------------------------------------------------------

struct GatingSchedule {
  int high_period = 10;  // steps between root/lateral/commitment re-decisions
  int low_period = 1;    // speed and label nodes
  int high_credit = -1;  // reward steps credited; -1 = until the episode ends
  int low_credit = 25;

  int credit_for(NodeKind k) const {
    return is_high_level(k) ? high_credit : low_credit;
  }
  void validate() const;
};

// ---- traversal ----------------------------------------------------------------

struct Decision {
  int node = -1;
  std::size_t child = 0;     // position in node.children
  double log_prob = 0.0;     // log pi(child); 0 when persisted or forced-single
  bool persisted = false;    // copied from the previous traversal
  bool sampled = false;      // produced by the node's net; carries a gradient
  int credit_window = -1;    // see GatingSchedule
  net::ForwardTape tape;     // valid when sampled
};

struct TraversalTrace {
  int step = 0;
  std::vector<Decision> decisions;  // path order, starting at the root
  int terminal = -1;                // last visited node, no decision there
  double anchor_lane = 1.0;         // lane the lateral effects are relative to
  std::size_t sensed = 0;           // label-chain length used

  double total_log_prob() const;
  // Earlier choice at node, if the node was on this path.
  std::optional<std::size_t> choice_at(int node) const;
};

struct Traversal {
  Desires desires;
  TraversalTrace trace;
};

// Picks a child given the node and its probabilities.
using Chooser = std::function<std::size_t(const Node&, std::span<const double>)>;

Chooser sampling_chooser(Rng& rng);
Chooser greedy_chooser();

struct TraverseContext {
  int step = 0;
  const TraversalTrace* previous = nullptr;  // for persistence and features
  GatingSchedule schedule;
};

Traversal traverse(const OptionGraph& graph, const PolicyParams& params,
                   const AgnosticState& state, Rng& rng,
                   const TraverseContext& ctx = {});
Traversal traverse(const OptionGraph& graph, const PolicyParams& params,
                   const AgnosticState& state, const Chooser& choose,
                   const TraverseContext& ctx = {});

// Rebuilds Desires from a recorded path; throws ContractError when the trace
// does not follow the graph's edges.
Desires desires_from_traversal(const OptionGraph& graph,
                               const TraversalTrace& trace,
                               const AgnosticState& state);

// Node kinds that re-decide at this step.
std::set<NodeKind> gate(const GatingSchedule& schedule, int step,
                        const TraversalTrace* previous);

// Gradient of total_log_prob() with respect to every parameter set.
std::vector<net::GradVector> trace_grad(const OptionGraph& graph,
                                        const TraversalTrace& trace,
                                        const PolicyParams& params);

// out[set] += scale * grad log pi for one sampled decision.
void accumulate_decision_grad(const OptionGraph& graph,
                              const PolicyParams& params,
                              const Decision& decision, double scale,
                              std::vector<net::GradVector>& out);

std::vector<net::GradVector> zero_grads(const PolicyParams& params);

// Expert choice for a node of the graph, or nullopt when the expert's
// decision does not cover it.
std::optional<std::size_t> expert_child(const OptionGraph& graph, const Node& node,
                                        const sim::ExpertDecision& decision);
// Chooser that follows the expert and falls back to argmax elsewhere.
Chooser expert_chooser(const OptionGraph& graph, const sim::ExpertDecision& decision);

// Walks the expert's path without evaluating any net; nodes the decision
// does not cover take their first child.
Traversal follow_expert(const OptionGraph& graph, const AgnosticState& state,
                        const sim::ExpertDecision& decision);

// Copy of the trace without forward tapes, enough for persistence.
TraversalTrace strip_tapes(const TraversalTrace& trace);

// ---- features -----------------------------------------------------------------

std::vector<double> ego_features(const AgnosticState& state);
void vehicle_features(const AgnosticState& state, const SensedVehicle& v,
                      std::span<double> out);

bool desires_valid(const Desires& d, const AgnosticState& state);

}  // namespace mergerl::options
