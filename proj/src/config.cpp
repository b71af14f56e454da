#include "tsc/config.hpp"

#include <json.hpp>

#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <set>
#include <sstream>
#include <stdexcept>

namespace tsc {

using Json = nlohmann::ordered_json;

namespace {

// Reads keys of one object and complains about anything it did not consume.
class Section {
 public:
  Section(const Json& obj, std::string path) : obj_(obj), path_(std::move(path)) {
    if (!obj_.is_object()) throw std::invalid_argument(path_ + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = obj_.find(key);
    if (it == obj_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const nlohmann::json::exception&) {
      throw std::invalid_argument(path_ + "." + key + " has the wrong type");
    }
  }

  const Json* child(const char* key) {
    seen_.insert(key);
    auto it = obj_.find(key);
    return it == obj_.end() ? nullptr : &*it;
  }

  void finish() const {
    for (auto it = obj_.begin(); it != obj_.end(); ++it) {
      if (!seen_.count(it.key())) {
        throw std::invalid_argument("unknown key " + path_ + "." + it.key());
      }
    }
  }

 private:
  const Json& obj_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string weighting_name(EdgeWeighting w) { return w == EdgeWeighting::kUnit ? "unit" : "lane-count"; }

EdgeWeighting parse_weighting(const std::string& s) {
  if (s == "unit") return EdgeWeighting::kUnit;
  if (s == "lane-count") return EdgeWeighting::kLaneCount;
  throw std::invalid_argument("network.weighting must be unit or lane-count, got '" + s + "'");
}

std::string agg_mode_name(AggregationMode m) {
  return m == AggregationMode::kFixedBidirectional ? "fixed" : "time-varying";
}

AggregationMode parse_agg_mode(const std::string& s) {
  if (s == "fixed") return AggregationMode::kFixedBidirectional;
  if (s == "time-varying") return AggregationMode::kTimeVarying;
  throw std::invalid_argument("agg.mode must be fixed or time-varying, got '" + s + "'");
}

std::string schedule_name(LrSchedule s) { return s == LrSchedule::kLinearDecay ? "linear" : "constant"; }

LrSchedule parse_schedule(const std::string& s) {
  if (s == "linear") return LrSchedule::kLinearDecay;
  if (s == "constant") return LrSchedule::kConstant;
  throw std::invalid_argument("train.lr_schedule must be linear or constant, got '" + s + "'");
}

std::string mode_name(ExecutionMode m) { return m == ExecutionMode::kDecentralized ? "decentralized" : "graph"; }

ExecutionMode parse_mode(const std::string& s) {
  if (s == "decentralized") return ExecutionMode::kDecentralized;
  if (s == "graph") return ExecutionMode::kGraph;
  throw std::invalid_argument("train.mode must be decentralized or graph, got '" + s + "'");
}

Json to_json(const ExperimentConfig& c) {
  Json j;
  Json net;
  net["kind"] = c.network.kind;
  net["rows"] = c.network.rows;
  net["cols"] = c.network.cols;
  net["lanes_per_edge"] = c.network.lanes_per_edge;
  net["weighting"] = weighting_name(c.network.weighting);
  net["num_nodes"] = c.network.num_nodes;
  net["edges"] = Json::array();
  net["weights"] = Json::array();
  net["lanes"] = Json::array();
  for (const Edge& e : c.network.edges) {
    net["edges"].push_back({e.from, e.to});
    net["weights"].push_back(e.weight);
    net["lanes"].push_back(e.lanes);
  }
  net["restart_alpha"] = c.network.restart_alpha;
  net["walk_depth"] = c.network.walk_depth;
  j["network"] = net;

  j["flows"] = Json::array();
  for (const FlowSpec& f : c.flows) {
    Json fj;
    fj["origin"] = f.origin;
    fj["destination"] = f.destination;
    Json sched = Json::array();
    for (const RatePoint& p : f.schedule) sched.push_back({p.time_s, p.vph});
    fj["rate_vph"] = sched;
    fj["swap_after_s"] = std::isfinite(f.swap_after_s) ? Json(f.swap_after_s) : Json(nullptr);
    j["flows"].push_back(fj);
  }

  j["sim"] = {{"delta_t", c.sim.delta_t},
              {"guard", c.sim.guard},
              {"horizon_steps", c.sim.horizon_steps},
              {"detection_range", c.sim.detection_range},
              {"wait_coeff", c.sim.wait_coeff},
              {"saturation_rate", c.sim.saturation_rate},
              {"free_flow_speed", c.sim.free_flow_speed},
              {"lane_length", c.sim.lane_length},
              {"vehicle_spacing", c.sim.vehicle_spacing}};
  j["agg"] = {{"K", c.agg.K}, {"mode", agg_mode_name(c.agg.mode)}, {"double_identity", c.agg.double_identity}};
  j["model"] = {{"encoder_units", c.model.encoder_units},
                {"hidden", c.model.hidden},
                {"k_tap", c.model.k_tap},
                {"literal_candidate_gate", c.model.literal_candidate_gate},
                {"critic_sees_actions", c.model.critic_sees_actions},
                {"own_phase", c.model.own_phase}};
  const TrainConfig& t = c.train;
  j["train"] = {{"gamma", t.gamma},
                {"spatial_alpha", t.spatial_alpha},
                {"entropy_coef", t.entropy_coef},
                {"lr_actor", t.lr_actor},
                {"lr_critic", t.lr_critic},
                {"batch_size", t.batch_size},
                {"total_steps", t.total_steps},
                {"lr_schedule", schedule_name(t.lr_schedule)},
                {"exact_spatial", t.exact_spatial},
                {"reward_norm", t.reward_norm},
                {"reward_clip", t.reward_clip},
                {"wave_scale", t.wave_scale},
                {"max_grad_norm", t.max_grad_norm},
                {"normalize_advantages", t.normalize_advantages},
                {"adam_beta1", t.adam_beta1},
                {"adam_beta2", t.adam_beta2},
                {"adam_eps", t.adam_eps},
                {"share_params", t.share_params},
                {"split_trunk", t.split_trunk},
                {"mode", mode_name(t.mode)}};
  Json split = Json::array();
  for (int s : c.baseline.cycle.steps_per_phase) split.push_back(s);
  j["baseline"] = {{"controller", c.baseline.controller},
                   {"steps_per_phase", split},
                   {"checkpoint_dir", c.baseline.checkpoint_dir},
                   {"eval_episodes", c.baseline.eval_episodes},
                   {"greedy", c.baseline.greedy}};
  j["output"] = {{"dir", c.output_dir}};
  j["seed"] = c.seed;
  return j;
}

FlowSpec flow_from_json(const Json& fj, const std::string& path) {
  Section s(fj, path);
  FlowSpec f;
  s.get("origin", f.origin);
  s.get("destination", f.destination);
  if (const Json* rate = s.child("rate_vph")) {
    if (rate->is_number()) {
      f.schedule = {{0.0, rate->get<double>()}};
    } else if (rate->is_array()) {
      for (const Json& p : *rate) {
        if (!p.is_array() || p.size() != 2 || !p[0].is_number() || !p[1].is_number()) {
          throw std::invalid_argument(path + ".rate_vph entries must be [time_s, vph] pairs");
        }
        f.schedule.push_back({p[0].get<double>(), p[1].get<double>()});
      }
    } else {
      throw std::invalid_argument(path + ".rate_vph must be a number or a list of [time_s, vph]");
    }
  }
  if (const Json* swap = s.child("swap_after_s")) {
    if (swap->is_null()) {
      f.swap_after_s = std::numeric_limits<double>::infinity();
    } else if (swap->is_number()) {
      f.swap_after_s = swap->get<double>();
    } else {
      throw std::invalid_argument(path + ".swap_after_s must be a number or null");
    }
  }
  s.finish();
  return f;
}

ExperimentConfig from_json(const Json& j) {
  ExperimentConfig c = ExperimentConfig::defaults();
  Section root(j, "config");

  if (const Json* nj = root.child("network")) {
    Section s(*nj, "network");
    NetworkConfig& n = c.network;
    s.get("kind", n.kind);
    s.get("rows", n.rows);
    s.get("cols", n.cols);
    s.get("lanes_per_edge", n.lanes_per_edge);
    std::string w = weighting_name(n.weighting);
    s.get("weighting", w);
    n.weighting = parse_weighting(w);
    s.get("num_nodes", n.num_nodes);
    std::vector<std::array<int, 2>> pairs;
    std::vector<double> weights;
    std::vector<int> lanes;
    for (const Edge& e : n.edges) {
      pairs.push_back({e.from, e.to});
      weights.push_back(e.weight);
      lanes.push_back(e.lanes);
    }
    const bool edges_given = s.child("edges") != nullptr;
    s.get("edges", pairs);
    if (edges_given) {
      weights.assign(pairs.size(), 1.0);
      lanes.assign(pairs.size(), 1);
    }
    s.get("weights", weights);
    s.get("lanes", lanes);
    if (weights.size() != pairs.size() || lanes.size() != pairs.size()) {
      throw std::invalid_argument("network.weights and network.lanes must have one entry per edge");
    }
    n.edges.clear();
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      n.edges.push_back({pairs[i][0], pairs[i][1], weights[i], lanes[i]});
    }
    s.get("restart_alpha", n.restart_alpha);
    s.get("walk_depth", n.walk_depth);
    s.finish();
  }

  if (const Json* fj = root.child("flows")) {
    if (!fj->is_array()) throw std::invalid_argument("flows must be a list");
    c.flows.clear();
    for (std::size_t i = 0; i < fj->size(); ++i) {
      c.flows.push_back(flow_from_json((*fj)[i], "flows[" + std::to_string(i) + "]"));
    }
  }

  if (const Json* sj = root.child("sim")) {
    Section s(*sj, "sim");
    s.get("delta_t", c.sim.delta_t);
    s.get("guard", c.sim.guard);
    s.get("horizon_steps", c.sim.horizon_steps);
    s.get("detection_range", c.sim.detection_range);
    s.get("wait_coeff", c.sim.wait_coeff);
    s.get("saturation_rate", c.sim.saturation_rate);
    s.get("free_flow_speed", c.sim.free_flow_speed);
    s.get("lane_length", c.sim.lane_length);
    s.get("vehicle_spacing", c.sim.vehicle_spacing);
    s.finish();
  }

  if (const Json* aj = root.child("agg")) {
    Section s(*aj, "agg");
    s.get("K", c.agg.K);
    std::string mode = agg_mode_name(c.agg.mode);
    s.get("mode", mode);
    c.agg.mode = parse_agg_mode(mode);
    s.get("double_identity", c.agg.double_identity);
    s.finish();
  }

  if (const Json* mj = root.child("model")) {
    Section s(*mj, "model");
    s.get("encoder_units", c.model.encoder_units);
    s.get("hidden", c.model.hidden);
    s.get("k_tap", c.model.k_tap);
    s.get("literal_candidate_gate", c.model.literal_candidate_gate);
    s.get("critic_sees_actions", c.model.critic_sees_actions);
    s.get("own_phase", c.model.own_phase);
    c.model.action_dim = observation_action_dim(c.model.own_phase);
    s.finish();
  }

  if (const Json* tj = root.child("train")) {
    Section s(*tj, "train");
    TrainConfig& t = c.train;
    s.get("gamma", t.gamma);
    s.get("spatial_alpha", t.spatial_alpha);
    s.get("entropy_coef", t.entropy_coef);
    s.get("lr_actor", t.lr_actor);
    s.get("lr_critic", t.lr_critic);
    s.get("batch_size", t.batch_size);
    s.get("total_steps", t.total_steps);
    std::string sched = schedule_name(t.lr_schedule);
    s.get("lr_schedule", sched);
    t.lr_schedule = parse_schedule(sched);
    s.get("exact_spatial", t.exact_spatial);
    s.get("reward_norm", t.reward_norm);
    s.get("reward_clip", t.reward_clip);
    s.get("wave_scale", t.wave_scale);
    s.get("max_grad_norm", t.max_grad_norm);
    s.get("normalize_advantages", t.normalize_advantages);
    s.get("adam_beta1", t.adam_beta1);
    s.get("adam_beta2", t.adam_beta2);
    s.get("adam_eps", t.adam_eps);
    s.get("share_params", t.share_params);
    s.get("split_trunk", t.split_trunk);
    std::string mode = mode_name(t.mode);
    s.get("mode", mode);
    t.mode = parse_mode(mode);
    s.finish();
  }

  if (const Json* bj = root.child("baseline")) {
    Section s(*bj, "baseline");
    s.get("controller", c.baseline.controller);
    if (const Json* split = s.child("steps_per_phase")) {
      if (!split->is_array() || split->size() != kNumPhases) {
        throw std::invalid_argument("baseline.steps_per_phase must list one entry per phase (5)");
      }
      for (int p = 0; p < kNumPhases; ++p) {
        if (!(*split)[p].is_number_integer()) {
          throw std::invalid_argument("baseline.steps_per_phase entries must be integers");
        }
        c.baseline.cycle.steps_per_phase[p] = (*split)[p].get<int>();
      }
    }
    s.get("checkpoint_dir", c.baseline.checkpoint_dir);
    s.get("eval_episodes", c.baseline.eval_episodes);
    s.get("greedy", c.baseline.greedy);
    s.finish();
  }

  if (const Json* oj = root.child("output")) {
    Section s(*oj, "output");
    s.get("dir", c.output_dir);
    s.finish();
  }
  root.get("seed", c.seed);
  root.finish();

  c.train.seed = c.seed;
  c.validate();
  return c;
}

Json parse_value(const std::string& text) {
  try {
    return Json::parse(text);
  } catch (const nlohmann::json::parse_error&) {
    return Json(text);
  }
}

}  // namespace

std::vector<FlowSpec> ramp_flows(double horizon_s, double major_peak_vph, double minor_peak_vph) {
  // Rate profile in fractions of the horizon; the direction swap happens at
  // the first quarter (15 minutes of an hour-long episode).
  static const double kShape[][2] = {{0.0, 0.25},   {1.0 / 12, 0.6}, {1.0 / 6, 1.0},
                                     {1.0 / 3, 0.75}, {0.5, 0.5},     {2.0 / 3, 0.3},
                                     {5.0 / 6, 0.15}};
  auto make = [&](const char* o, const char* d, double peak) {
    FlowSpec f;
    f.origin = o;
    f.destination = d;
    for (const auto& p : kShape) f.schedule.push_back({p[0] * horizon_s, p[1] * peak});
    f.swap_after_s = 0.25 * horizon_s;
    return f;
  };
  return {make("north", "south", major_peak_vph), make("west", "east", major_peak_vph),
          make("east", "west", major_peak_vph),   make("south", "east", minor_peak_vph),
          make("north", "west", minor_peak_vph),  make("west", "south", minor_peak_vph)};
}

ExperimentConfig ExperimentConfig::defaults() {
  ExperimentConfig c;
  c.flows = ramp_flows(c.sim.delta_t * c.sim.horizon_steps);
  c.train.total_steps = 1000000;
  c.train.seed = c.seed;
  return c;
}

void ExperimentConfig::validate() const {
  if (network.kind == "grid") {
    if (network.rows < 1 || network.cols < 1) throw std::invalid_argument("network grid must be at least 1x1");
    if (network.lanes_per_edge < 1) throw std::invalid_argument("network.lanes_per_edge must be >= 1");
  } else if (network.kind == "edges") {
    if (network.num_nodes < 1) throw std::invalid_argument("network.num_nodes must be >= 1");
  } else {
    throw std::invalid_argument("network.kind must be grid or edges, got '" + network.kind + "'");
  }
  if (!(network.restart_alpha > 0.0 && network.restart_alpha <= 1.0)) {
    throw std::invalid_argument("network.restart_alpha must be in (0, 1]");
  }
  if (network.walk_depth < 0) throw std::invalid_argument("network.walk_depth must be >= 0");
  if (flows.empty()) throw std::invalid_argument("at least one flow is required");
  for (const FlowSpec& f : flows) f.validate();
  sim.validate();
  if (agg.K < 1) throw std::invalid_argument("agg.K must be >= 1");
  ModelConfig m = model;
  m.K = agg.K;
  m.validate();
  train.validate();
  baseline.cycle.validate();
  parse_controller_kind(baseline.controller);
  if (baseline.eval_episodes < 1) throw std::invalid_argument("baseline.eval_episodes must be >= 1");
}

RoadNetwork ExperimentConfig::build_network() const {
  if (network.kind == "grid") {
    return RoadNetwork::grid(network.rows, network.cols, network.weighting, network.lanes_per_edge);
  }
  return RoadNetwork::from_edges(network.num_nodes, network.edges, network.weighting);
}

DiffusionOperator ExperimentConfig::build_operator(const RoadNetwork& net) const {
  return tsc::build_operator(net, network.restart_alpha, network.walk_depth);
}

TrainSetup ExperimentConfig::train_setup(const RoadNetwork& net, const DiffusionOperator& op) const {
  TrainSetup s;
  s.net = &net;
  s.op = &op;
  s.sim = sim;
  s.flows = flows;
  s.model = model;
  s.model.K = agg.K;
  s.agg = agg;
  s.train = train;
  s.train.seed = seed;
  if (agg.mode != AggregationMode::kFixedBidirectional) {
    throw std::invalid_argument(
        "training needs agg.mode = fixed; time-varying operators are only available through the "
        "library interface");
  }
  return s;
}

std::string config_to_string(const ExperimentConfig& config) { return to_json(config).dump(2) + "\n"; }

ExperimentConfig config_from_string(const std::string& text, const std::string& source) {
  Json j;
  try {
    j = Json::parse(text, nullptr, true, true);
  } catch (const nlohmann::json::parse_error& e) {
    throw std::invalid_argument(source + ": " + e.what());
  }
  try {
    return from_json(j);
  } catch (const std::invalid_argument& e) {
    throw std::invalid_argument(source + ": " + e.what());
  }
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return config_from_string(ss.str(), path);
}

void apply_override(ExperimentConfig& config, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw std::invalid_argument("override '" + assignment + "' must look like key=value");
  }
  const std::string path = assignment.substr(0, eq);
  Json j = to_json(config);
  Json* node = &j;
  std::stringstream parts(path);
  std::string part;
  std::vector<std::string> keys;
  while (std::getline(parts, part, '.')) keys.push_back(part);
  for (std::size_t i = 0; i < keys.size(); ++i) {
    const std::string& k = keys[i];
    const bool last = i + 1 == keys.size();
    if (node->is_array()) {
      std::size_t idx = 0;
      try {
        idx = std::stoul(k);
      } catch (const std::exception&) {
        throw std::invalid_argument("override " + path + ": '" + k + "' is not a list index");
      }
      if (idx >= node->size()) throw std::invalid_argument("override " + path + ": index out of range");
      node = &(*node)[idx];
    } else if (node->is_object()) {
      if (!node->contains(k)) throw std::invalid_argument("unknown key " + path);
      node = &(*node)[k];
    } else {
      throw std::invalid_argument("override " + path + ": '" + k + "' is not a section");
    }
    if (last) *node = parse_value(assignment.substr(eq + 1));
  }
  config = from_json(j);
}

}  // namespace tsc
