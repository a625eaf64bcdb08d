#include "mergerl/cli.hpp"

#include <charconv>
#include <cstdlib>
#include <functional>
#include <map>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "mergerl/error.hpp"
#include "mergerl/ini.hpp"

namespace mergerl::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string fmt(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

std::string fmt_list(const std::vector<double>& vs) {
  std::string s;
  for (double v : vs) s += (s.empty() ? "" : " ") + fmt(v);
  return s;
}

// One config key: where it lives, how to read it, how to print it.
struct Field {
  std::string_view section;
  std::string_view key;
  std::function<void(RunConfig&, const ini::Document&, const ini::Entry&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class Ref>
Field real(std::string_view sec, std::string_view key, Ref ref) {
  return {sec, key,
          [ref](RunConfig& c, const ini::Document& d, const ini::Entry& e) {
            ref(c) = ini::to_double(d, e);
          },
          [ref](const RunConfig& c) { return fmt(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Field integer(std::string_view sec, std::string_view key, Ref ref) {
  return {sec, key,
          [ref](RunConfig& c, const ini::Document& d, const ini::Entry& e) {
            ref(c) = ini::to_int(d, e);
          },
          [ref](const RunConfig& c) { return std::to_string(ref(const_cast<RunConfig&>(c))); }};
}

template <class Ref>
Field flag(std::string_view sec, std::string_view key, Ref ref) {
  return {sec, key,
          [ref](RunConfig& c, const ini::Document& d, const ini::Entry& e) {
            ref(c) = ini::to_bool(d, e);
          },
          [ref](const RunConfig& c) {
            return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false");
          }};
}

template <class Ref>
Field reals(std::string_view sec, std::string_view key, Ref ref) {
  return {sec, key,
          [ref](RunConfig& c, const ini::Document& d, const ini::Entry& e) {
            ref(c) = ini::to_doubles(d, e);
          },
          [ref](const RunConfig& c) { return fmt_list(ref(const_cast<RunConfig&>(c))); }};
}

#define MERGERL_REF(expr) [](RunConfig& c) -> auto& { return c.expr; }

const std::vector<Field>& fields() {
  static const std::vector<Field> all = [] {
    std::vector<Field> f;
    f.push_back({"run", "seed",
                 [](RunConfig& c, const ini::Document& d, const ini::Entry& e) {
                   c.seed = ini::to_u64(d, e);
                 },
                 [](const RunConfig& c) { return std::to_string(c.seed); }});
    f.push_back({"run", "out",
                 [](RunConfig& c, const ini::Document&, const ini::Entry& e) { c.out_dir = e.value; },
                 [](const RunConfig& c) { return c.out_dir; }});
    f.push_back({"run", "graph",
                 [](RunConfig& c, const ini::Document&, const ini::Entry& e) { c.graph_path = e.value; },
                 [](const RunConfig& c) { return c.graph_path; }});

    f.push_back(integer("scene", "agents_per_side", MERGERL_REF(env.scene.agents_per_side)));
    f.push_back(integer("scene", "horizon_steps", MERGERL_REF(env.scene.horizon_steps)));
    f.push_back(real("scene", "collision_distance_m", MERGERL_REF(env.scene.collision_distance_m)));
    f.push_back(real("scene", "spawn_back_m", MERGERL_REF(env.scene.spawn_back_m)));
    f.push_back(real("scene", "spawn_front_m", MERGERL_REF(env.scene.spawn_front_m)));
    f.push_back(real("scene", "min_spawn_gap_m", MERGERL_REF(env.scene.min_spawn_gap_m)));
    f.push_back(real("scene", "spawn_speed_min", MERGERL_REF(env.scene.spawn_speed_min)));
    f.push_back(real("scene", "spawn_speed_max", MERGERL_REF(env.scene.spawn_speed_max)));
    f.push_back(real("scene", "cross_probability", MERGERL_REF(env.scene.cross_probability)));

    f.push_back(real("geometry", "approach_length_m", MERGERL_REF(env.scene.geometry.approach_length_m)));
    f.push_back(real("geometry", "merge_length_m", MERGERL_REF(env.scene.geometry.merge_length_m)));
    f.push_back(integer("geometry", "lanes_per_side", MERGERL_REF(env.scene.geometry.lanes_per_side)));
    f.push_back(real("geometry", "lane_width_m", MERGERL_REF(env.scene.geometry.lane_width_m)));
    f.push_back(real("geometry", "v_max", MERGERL_REF(env.scene.geometry.v_max)));
    f.push_back(real("geometry", "sensing_range_m", MERGERL_REF(env.scene.geometry.sensing_range_m)));
    f.push_back(real("geometry", "assignment_range_m", MERGERL_REF(env.scene.geometry.assignment_range_m)));
    f.push_back(real("geometry", "edge_margin_lanes", MERGERL_REF(env.scene.geometry.edge_margin_lanes)));

    f.push_back(real("reward", "accident_penalty", MERGERL_REF(env.scene.reward.accident_penalty)));
    f.push_back(real("reward", "merge_reward", MERGERL_REF(env.scene.reward.merge_reward)));
    f.push_back(real("reward", "wrong_side_penalty", MERGERL_REF(env.scene.reward.wrong_side_penalty)));
    f.push_back(real("reward", "comfort_budget", MERGERL_REF(env.scene.reward.comfort_budget)));
    f.push_back(real("reward", "jerk_weight", MERGERL_REF(env.scene.reward.jerk_weight)));
    f.push_back(real("reward", "lateral_weight", MERGERL_REF(env.scene.reward.lateral_weight)));
    f.push_back(real("reward", "jerk_ref", MERGERL_REF(env.scene.reward.jerk_ref)));
    f.push_back(real("reward", "discount", MERGERL_REF(env.scene.reward.discount)));

    f.push_back(integer("gating", "high_period", MERGERL_REF(env.gating.high_period)));
    f.push_back(integer("gating", "low_period", MERGERL_REF(env.gating.low_period)));
    f.push_back(integer("gating", "high_credit", MERGERL_REF(env.gating.high_credit)));
    f.push_back(integer("gating", "low_credit", MERGERL_REF(env.gating.low_credit)));

    f.push_back(real("weights", "speed", MERGERL_REF(env.planner.weights.speed)));
    f.push_back(real("weights", "lateral", MERGERL_REF(env.planner.weights.lateral)));
    f.push_back(real("weights", "give_way", MERGERL_REF(env.planner.weights.give_way)));
    f.push_back(real("weights", "take_way", MERGERL_REF(env.planner.weights.take_way)));
    f.push_back(real("weights", "offset", MERGERL_REF(env.planner.weights.offset)));
    f.push_back(real("weights", "smoothness", MERGERL_REF(env.planner.weights.smoothness)));

    f.push_back(real("constraints", "min_separation_m", MERGERL_REF(env.planner.constraints.min_separation_m)));
    f.push_back(integer("constraints", "index_window", MERGERL_REF(env.planner.constraints.index_window)));
    f.push_back(real("constraints", "time_margin_s", MERGERL_REF(env.planner.constraints.time_margin_s)));
    f.push_back(real("constraints", "first_step_slack_m", MERGERL_REF(env.planner.constraints.first_step_slack_m)));
    f.push_back(flag("constraints", "following_gap", MERGERL_REF(env.planner.constraints.following_gap)));
    f.push_back(real("constraints", "lateral_overlap_m", MERGERL_REF(env.planner.constraints.lateral_overlap_m)));
    f.push_back(real("constraints", "response_time_s", MERGERL_REF(env.planner.constraints.response_time_s)));
    f.push_back(real("constraints", "max_accel", MERGERL_REF(env.planner.constraints.max_accel)));
    f.push_back(real("constraints", "max_brake", MERGERL_REF(env.planner.constraints.max_brake)));

    f.push_back(reals("lattice", "accelerations", MERGERL_REF(env.planner.lattice.accelerations)));
    f.push_back(reals("lattice", "lateral_velocities", MERGERL_REF(env.planner.lattice.lateral_velocities)));
    f.push_back(integer("lattice", "stages", MERGERL_REF(env.planner.lattice.stages)));
    f.push_back(real("lattice", "fallback_accel", MERGERL_REF(env.planner.lattice.fallback_accel)));

    f.push_back(real("planner", "intersection_threshold_m", MERGERL_REF(env.planner.intersection_threshold_m)));
    f.push_back(real("planner", "offset_margin_m", MERGERL_REF(env.planner.offset_margin_m)));

    f.push_back(real("expert", "cruise_speed", MERGERL_REF(env.expert.cruise_speed)));
    f.push_back(real("expert", "time_gap_s", MERGERL_REF(env.expert.time_gap_s)));
    f.push_back(real("expert", "gap_ahead_m", MERGERL_REF(env.expert.gap_ahead_m)));
    f.push_back(real("expert", "gap_behind_m", MERGERL_REF(env.expert.gap_behind_m)));
    f.push_back(real("expert", "label_lateral_lanes", MERGERL_REF(env.expert.label_lateral_lanes)));

    f.push_back(integer("imitation", "demo_episodes", MERGERL_REF(imitation.demo_episodes)));
    f.push_back(integer("imitation", "heldout_episodes", MERGERL_REF(imitation.heldout_episodes)));
    f.push_back(integer("imitation", "epochs", MERGERL_REF(imitation.epochs)));
    f.push_back(integer("imitation", "batch_size", MERGERL_REF(imitation.batch_size)));
    f.push_back(real("imitation", "learning_rate", MERGERL_REF(imitation.learning_rate)));
    f.push_back(integer("imitation", "label_horizon", MERGERL_REF(imitation.label_horizon)));
    f.push_back(real("imitation", "separation_lanes", MERGERL_REF(imitation.separation_lanes)));

    f.push_back(integer("train", "rounds", MERGERL_REF(train.rounds)));
    f.push_back(integer("train", "episodes_per_round", MERGERL_REF(train.episodes_per_round)));
    f.push_back(integer("train", "batch_episodes", MERGERL_REF(train.batch_episodes)));
    f.push_back(real("train", "learning_rate", MERGERL_REF(train.learning_rate)));
    f.push_back(flag("train", "decay", MERGERL_REF(train.decay)));
    f.push_back(real("train", "clip_norm", MERGERL_REF(train.clip_norm)));
    f.push_back({"train", "baseline",
                 [](RunConfig& c, const ini::Document& d, const ini::Entry& e) {
                   if (e.value == "online") c.train.baseline = learn::BaselineMode::Online;
                   else if (e.value == "none") c.train.baseline = learn::BaselineMode::None;
                   else ini::fail(d, e.line, "key 'baseline' expects none or online, got '" + e.value + "'");
                 },
                 [](const RunConfig& c) {
                   return std::string(c.train.baseline == learn::BaselineMode::Online ? "online" : "none");
                 }});
    f.push_back(flag("train", "full_return", MERGERL_REF(train.full_return)));

    f.push_back(integer("evaluate", "episodes", MERGERL_REF(eval_episodes)));
    return f;
  }();
  return all;
}

#undef MERGERL_REF

// First "section.key" named in a validation message, mapped to its line.
int line_for_message(const std::string& msg,
                     const std::map<std::string, int, std::less<>>& lines) {
  // Earliest mention wins; at equal positions the longer (key) name does.
  std::size_t best_pos = std::string::npos, best_len = 0;
  int best = 0;
  for (const auto& [name, line] : lines) {
    const auto pos = msg.find(name);
    if (pos == std::string::npos) continue;
    if (pos < best_pos || (pos == best_pos && name.size() > best_len)) {
      best_pos = pos;
      best_len = name.size();
      best = line;
    }
  }
  return best;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ParseError(path, 0, "cannot open file");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const RunConfig& c, const std::string& name) {
  fs::create_directories(c.out_dir);
  const fs::path p = fs::path(c.out_dir) / name;
  std::ofstream f(p, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write " + p.string());
  return f;
}

void write_json(const RunConfig& c, const std::string& name, const json& j) {
  open_out(c, name) << j.dump(2) << '\n';
}

options::PolicyParams load_policy(const RunConfig& c, const std::string& path) {
  return options::from_named(c.env.graph, net::load_checkpoint(path));
}

void save_policy(const RunConfig& c, const std::string& name,
                 const options::PolicyParams& p) {
  fs::create_directories(c.out_dir);
  net::save_checkpoint((fs::path(c.out_dir) / name).string(), options::to_named(c.env.graph, p));
}

json metrics_json(const learn::EvalMetrics& m) {
  return {{"episodes", m.episodes},       {"agents", m.agents},
          {"merge_rate", m.merge_rate},   {"wrong_side_rate", m.wrong_side_rate},
          {"accidents", m.accidents},     {"mean_return", m.mean_return},
          {"mean_length", m.mean_length}, {"fallbacks", m.fallbacks}};
}

json stats_json(const learn::ImitationStats& s) {
  return {{"nll", s.nll}, {"agreement", s.agreement}, {"decisions", s.decisions}};
}

std::string fmt3(double v) {
  std::ostringstream s;
  s.setf(std::ios::fixed);
  s.precision(3);
  s << v;
  return s.str();
}

}  // namespace

// ---- config -------------------------------------------------------------------

void RunConfig::validate() const {
  env.validate();
  imitation.validate();
  train.validate();
  require(eval_episodes >= 1, "evaluate.episodes must be >= 1");
  require(env.expert.cruise_speed >= 0 && env.expert.cruise_speed <= env.scene.geometry.v_max,
          "expert.cruise_speed must be in [0, geometry.v_max]");
  require(env.expert.time_gap_s > 0, "expert.time_gap_s must be > 0");
  require(env.expert.gap_ahead_m >= 0 && env.expert.gap_behind_m >= 0,
          "expert.gap_ahead_m and expert.gap_behind_m must be >= 0");
  require(env.expert.label_lateral_lanes > 0, "expert.label_lateral_lanes must be > 0");
  require(!out_dir.empty(), "run.out must not be empty");
}

RunConfig parse_config(std::string_view text, const std::string& source) {
  const ini::Document doc = ini::parse(text, source);
  RunConfig c;
  c.source = source;
  std::map<std::string, int, std::less<>> lines;
  for (const ini::Section& sec : doc.sections) {
    std::map<std::string, ini::Handler, std::less<>> handlers;
    for (const Field& f : fields()) {
      if (f.section != sec.name) continue;
      handlers.emplace(std::string(f.key), [&c, &doc, &f](const ini::Entry& e) { f.set(c, doc, e); });
    }
    if (handlers.empty()) {
      if (sec.name.empty() && sec.entries.empty()) continue;
      ini::fail(doc, sec.entries.empty() || !sec.name.empty() ? sec.line : sec.entries.front().line,
                sec.name.empty() ? "entries must follow a [section] header"
                                 : "unknown section [" + sec.name + "]");
    }
    ini::apply(doc, sec, handlers);
    lines.emplace(sec.name, sec.line);
    for (const ini::Entry& e : sec.entries) lines[sec.name + "." + e.key] = e.line;
  }
  c.train.seed = c.seed;
  if (!c.graph_path.empty()) {
    fs::path g(c.graph_path);
    if (g.is_relative() && !fs::exists(g) && source.find('<') == std::string::npos)
      g = fs::path(source).parent_path() / g;
    try {
      c.env.graph = options::OptionGraph::load(g.string());
    } catch (const ParseError& e) {
      if (e.line() > 0) throw;
      ini::fail(doc, lines.count("run.graph") ? lines.at("run.graph") : 0,
                "cannot load graph '" + c.graph_path + "'");
    }
  }
  try {
    c.validate();
  } catch (const ContractError& e) {
    int line = line_for_message(e.what(), lines);
    if (line == 0) {
      // A default value broke an invariant: point at the section instead.
      const std::string msg = e.what();
      const auto dot = msg.find('.');
      const auto it = dot == std::string::npos ? lines.end() : lines.find(msg.substr(0, dot));
      if (it != lines.end()) line = it->second;
    }
    ini::fail(doc, line, e.what());
  }
  return c;
}

RunConfig load_config(const std::string& path) {
  return parse_config(read_text(path), path);
}

std::string default_config_text() {
  const RunConfig c;
  std::string out = "# mergerl run configuration; every key is optional\n";
  std::string_view current;
  for (const Field& f : fields()) {
    if (f.section != current) {
      out += "\n[" + std::string(f.section) + "]\n";
      current = f.section;
    }
    std::string value = f.get(c);
    if (f.section == "run" && f.key == "graph" && value.empty()) {
      out += "# graph = option_graph.ini   (bundled graph when unset)\n";
      continue;
    }
    out += std::string(f.key) + " = " + value + "\n";
  }
  return out;
}

// ---- scenes -------------------------------------------------------------------

PlanScene parse_scene(std::string_view text, const std::string& source) {
  const ini::Document doc = ini::parse(text, source);
  PlanScene s;
  AgnosticState& st = s.state;
  bool have_desires = false;
  int desires_line = 0;
  std::vector<std::string> labels;
  std::vector<int> vehicle_lines;
  auto side = [&](const ini::Entry& e) {
    if (e.value == "left") return Side::Left;
    if (e.value == "right") return Side::Right;
    ini::fail(doc, e.line, "key '" + e.key + "' expects left or right, got '" + e.value + "'");
  };
  for (const ini::Section& sec : doc.sections) {
    if (sec.name.empty()) {
      if (!sec.entries.empty()) ini::fail(doc, sec.entries.front().line, "entries must follow a [section] header");
      continue;
    }
    auto d = [&](double& ref) {
      return [&doc, &ref](const ini::Entry& e) { ref = ini::to_double(doc, e); };
    };
    if (sec.name == "ego") {
      ini::apply(doc, sec,
                 {{"speed", d(st.ego_speed)},
                  {"heading", d(st.ego_heading)},
                  {"lateral_velocity", d(st.ego_lateral_velocity)},
                  {"lane", d(st.ego_lane)},
                  {"distance_to_merge_m", d(st.distance_to_merge_m)},
                  {"origin_side", [&](const ini::Entry& e) { st.origin_side = side(e); }},
                  {"target_side", [&](const ini::Entry& e) {
                     if (e.value == "none") st.target_side.reset();
                     else st.target_side = side(e);
                   }}});
    } else if (sec.name == "road") {
      ini::apply(doc, sec,
                 {{"lane_width_m", d(st.lanes.lane_width_m)},
                  {"lanes_per_side", [&](const ini::Entry& e) { st.lanes.lanes_per_side = ini::to_int(doc, e); }},
                  {"merge_start_ahead_m", d(st.lanes.merge_start_ahead_m)},
                  {"merge_end_ahead_m", d(st.lanes.merge_end_ahead_m)},
                  {"edge_margin_lanes", d(st.lanes.edge_margin_lanes)},
                  {"v_max", d(st.v_max)}});
    } else if (sec.name == "desires") {
      have_desires = true;
      desires_line = sec.line;
      ini::apply(doc, sec,
                 {{"speed", d(s.desires.speed)},
                  {"lateral", d(s.desires.lateral)},
                  {"labels", [&](const ini::Entry& e) { labels = ini::to_words(e); }}});
    } else if (sec.name.rfind("vehicle ", 0) == 0) {
      SensedVehicle v;
      const std::string id = sec.name.substr(8);
      const auto res = std::from_chars(id.data(), id.data() + id.size(), v.id);
      if (res.ec != std::errc() || res.ptr != id.data() + id.size() || v.id < 0)
        ini::fail(doc, sec.line, "vehicle sections are named [vehicle <id>] with a non-negative id");
      ini::apply(doc, sec,
                 {{"x", d(v.x)}, {"y", d(v.y)}, {"vx", d(v.vx)}, {"vy", d(v.vy)},
                  {"heading", d(v.heading)}});
      st.others.push_back(v);
      vehicle_lines.push_back(sec.line);
    } else {
      ini::fail(doc, sec.line, "unknown section [" + sec.name + "]");
    }
  }
  if (!have_desires) ini::fail(doc, 0, "scene needs a [desires] section");
  for (const std::string& w : labels) {
    if (w == "g") s.desires.labels.push_back(Label::GiveWay);
    else if (w == "t") s.desires.labels.push_back(Label::TakeWay);
    else if (w == "o") s.desires.labels.push_back(Label::Offset);
    else ini::fail(doc, desires_line, "labels are g, t or o, got '" + w + "'");
  }
  if (st.others.size() > kMaxSensed)
    ini::fail(doc, vehicle_lines[kMaxSensed], "at most 8 vehicles can be sensed");
  if (s.desires.labels.size() != st.others.size())
    ini::fail(doc, desires_line, "desires.labels needs one label per vehicle section");
  if (!(st.lanes.lane_width_m > 0) || st.lanes.lanes_per_side < 1 || !(st.v_max > 0))
    ini::fail(doc, 0, "road needs lane_width_m > 0, lanes_per_side >= 1 and v_max > 0");
  if (!options::desires_valid(s.desires, st))
    ini::fail(doc, desires_line,
              "desires.speed must be in [0, v_max] and desires.lateral a half-lane position on the road");
  return s;
}

PlanScene load_scene(const std::string& path) {
  return parse_scene(read_text(path), path);
}

// ---- logging ------------------------------------------------------------------

LogLevel log_level_from_env() {
  const char* v = std::getenv("MERGERL_LOG");
  if (v == nullptr) return LogLevel::Info;
  const std::string s(v);
  if (s == "quiet") return LogLevel::Quiet;
  if (s == "debug") return LogLevel::Debug;
  return LogLevel::Info;
}

void Logger::info(const std::string& msg) const {
  if (level_ != LogLevel::Quiet) sink_ << msg << '\n';
}

void Logger::debug(const std::string& msg) const {
  if (level_ == LogLevel::Debug) sink_ << "[debug] " << msg << '\n';
}

// ---- commands -----------------------------------------------------------------

namespace {

// Episode index ranges per purpose; self-play draws its own below these.
constexpr std::uint64_t kDemoEpisodeBase = 1000000;
constexpr std::uint64_t kHeldoutEpisodeBase = 2000000;
constexpr std::uint64_t kEvalEpisodeBase = 3000000;

struct ImitationRun {
  options::PolicyParams params;
  learn::ImitationStats before, after;
};

ImitationRun run_imitation(const RunConfig& c, const Logger& log) {
  const auto demos = learn::collect_demos(c.env, c.seed, kDemoEpisodeBase,
                                          c.imitation.demo_episodes, c.imitation);
  const auto heldout = learn::collect_demos(c.env, c.seed, kHeldoutEpisodeBase,
                                            c.imitation.heldout_episodes, c.imitation);
  log.info("demos " + std::to_string(demos.size()) + ", held out " + std::to_string(heldout.size()));
  Rng init_rng = Rng::stream(c.seed, "init");
  const options::PolicyParams init = options::init_params(c.env.graph, init_rng);
  const auto& eval_set = heldout.empty() ? demos : heldout;
  ImitationRun run;
  run.before = learn::imitation_stats(c.env.graph, init, eval_set);
  Rng rng = Rng::stream(c.seed, "imitation");
  run.params = learn::imitation_init(demos, c.env.graph, init, c.imitation, rng);
  run.after = learn::imitation_stats(c.env.graph, run.params, eval_set);
  log.info("imitation agreement " + fmt3(run.before.agreement) + " -> " +
           fmt3(run.after.agreement) + ", nll " + fmt3(run.before.nll) + " -> " +
           fmt3(run.after.nll));
  return run;
}

}  // namespace

learn::ImitationStats cmd_imitate(const RunConfig& config, const Logger& log) {
  config.validate();
  const ImitationRun run = run_imitation(config, log);
  save_policy(config, "imitation.ckpt", run.params);
  write_json(config, "imitation.json",
             {{"seed", config.seed},
              {"before", stats_json(run.before)},
              {"heldout", stats_json(run.after)}});
  return run.after;
}

learn::TrainResult cmd_train(const RunConfig& config, const Logger& log,
                             const std::optional<std::string>& checkpoint) {
  config.validate();
  options::PolicyParams init;
  if (checkpoint) {
    init = load_policy(config, *checkpoint);
  } else {
    const ImitationRun run = run_imitation(config, log);
    save_policy(config, "imitation.ckpt", run.params);
    init = run.params;
  }
  learn::TrainConfig tc = config.train;
  tc.seed = config.seed;
  std::ofstream csv = open_out(config, "metrics.csv");
  std::vector<learn::RoundMetrics> rows;
  auto on_round = [&](const learn::RoundMetrics& m, const options::PolicyParams& p) {
    rows.push_back(m);
    save_policy(config, "round_" + std::to_string(m.round) + ".ckpt", p);
    log.info("round " + std::to_string(m.round) + " merge " + fmt3(m.merge_rate) + " wrong " +
             fmt3(m.wrong_side_rate) + " accidents " + std::to_string(m.accidents) +
             (m.aborted ? " (aborted)" : ""));
  };
  learn::TrainResult res = learn::self_play_train(config.env, tc, init, on_round);
  learn::write_metrics_csv(csv, res.history);
  save_policy(config, "final.ckpt", res.params);
  return res;
}

learn::EvalMetrics cmd_evaluate(const RunConfig& config, const Logger& log,
                                const std::optional<std::string>& checkpoint) {
  config.validate();
  std::optional<options::PolicyParams> params;
  if (checkpoint) params = load_policy(config, *checkpoint);
  const learn::EvalMetrics m = learn::evaluate(config.env, params ? &*params : nullptr,
                                               config.seed, config.eval_episodes, kEvalEpisodeBase);
  log.info("evaluate " + std::string(params ? "policy" : "expert") + ": merge " +
           fmt3(m.merge_rate) + " wrong " + fmt3(m.wrong_side_rate) + " accidents " +
           std::to_string(m.accidents));
  json j = metrics_json(m);
  j["seed"] = config.seed;
  j["policy"] = params ? "checkpoint" : "expert";
  write_json(config, "evaluate.json", j);
  return m;
}

std::string cmd_rollout(const RunConfig& config, const Logger& log,
                        const std::optional<std::string>& checkpoint) {
  config.validate();
  std::optional<options::PolicyParams> params;
  if (checkpoint) params = load_policy(config, *checkpoint);
  std::ofstream out = open_out(config, "rollout.jsonl");
  const auto assignment = learn::uniform_assignment(config.env, params ? &*params : nullptr);
  const auto& graph = config.env.graph;
  // One record per agent and step, written once the step's outcome is known.
  auto observer = [&](const sim::WorldState& w, const std::vector<learn::AgentStepInfo>& infos,
                      const std::vector<double>& rewards) {
    for (const learn::AgentStepInfo& a : infos) {
      const auto id = static_cast<std::size_t>(a.id);
      const sim::VehicleState& v = w.vehicles[id];
      json path = json::array();
      for (const options::Decision& d : a.trace.decisions) {
        const options::Node& n = graph.node(d.node);
        path.push_back({{"node", n.id},
                        {"child", graph.node(n.children[d.child]).id},
                        {"log_prob", d.log_prob},
                        {"persisted", d.persisted}});
      }
      std::string labels;
      for (Label l : a.desires.labels) labels += to_char(l);
      json pts = json::array();
      for (const Point& p : a.plan.plan.points) pts.push_back({p.x, p.y});
      json rec{{"time", (w.step - 1) * kTau},
               {"agent", a.id},
               {"state",
                {{"s", v.s}, {"lateral", v.lateral}, {"speed", v.speed}, {"heading", v.heading}}},
               {"traversal", std::move(path)},
               {"desires",
                {{"speed", a.desires.speed}, {"lateral", a.desires.lateral}, {"labels", labels}}},
               {"plan", std::move(pts)},
               {"fallback", a.plan.fallback},
               {"reward", rewards[id]},
               {"outcome", sim::to_string(w.outcomes[id])}};
      out << rec.dump() << '\n';
    }
  };
  const auto summary = learn::run_episode(config.env, config.seed, 0, assignment, observer);
  const std::string path = (fs::path(config.out_dir) / "rollout.jsonl").string();
  log.info("rollout: " + std::to_string(summary.length) + " steps written to " + path);
  return path;
}

std::string plan_report_text(const planner::PlanResult& res, std::size_t violations) {
  const planner::CostBreakdown& c = res.cost;
  std::string out = "[plan]\n";
  out += std::string("fallback = ") + (res.fallback ? "true" : "false") + "\n";
  out += "candidates_evaluated = " + std::to_string(res.candidates_evaluated) + "\n";
  out += "violations = " + std::to_string(violations) + "\n\n[cost]\n";
  out += "speed = " + fmt(c.speed) + "\n";
  out += "lateral = " + fmt(c.lateral) + "\n";
  out += "give_way = " + fmt(c.give_way) + "\n";
  out += "take_way = " + fmt(c.take_way) + "\n";
  out += "offset = " + fmt(c.offset) + "\n";
  out += "smoothness = " + fmt(c.smoothness) + "\n";
  out += "total = " + fmt(c.total) + "\n";
  for (std::size_t i = 0; i < res.plan.points.size(); ++i) {
    const Point& p = res.plan.points[i];
    out += "\n[point " + std::to_string(i + 1) + "]\nx = " + fmt(p.x) + "\ny = " + fmt(p.y) + "\n";
  }
  return out;
}

std::string cmd_plan(const RunConfig& config, const Logger& log, const std::string& scene_path) {
  config.validate();
  const PlanScene scene = load_scene(scene_path);
  const planner::PlanResult res = planner::plan(scene.desires, scene.state, config.env.planner);
  const auto report = planner::feasible(res.plan, planner::predict_others(scene.state),
                                        scene.state, config.env.planner.constraints);
  const std::string text = plan_report_text(res, report.violations.size());
  open_out(config, "plan.ini") << text;
  log.info("plan: total cost " + fmt(res.cost.total) + (res.fallback ? " (fallback)" : ""));
  return text;
}

}  // namespace mergerl::cli
