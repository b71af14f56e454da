#include "tsc/simulator.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <stdexcept>
#include <string>

namespace tsc {

namespace {

constexpr int kNoLink = -1;
constexpr int kExitTerminal = -2;

int opposite(int arm) { return (arm + 2) % kNumArms; }

const char* side_name(int arm) {
  switch (arm) {
    case kNorth: return "north";
    case kEast: return "east";
    case kSouth: return "south";
    default: return "west";
  }
}

}  // namespace

Turn classify_turn(int in_arm, int out_arm) {
  switch (((out_arm - in_arm) % kNumArms + kNumArms) % kNumArms) {
    case 1: return Turn::kLeft;
    case 2: return Turn::kStraight;
    case 3: return Turn::kRight;
    default: throw std::invalid_argument("u-turn movements are not modelled");
  }
}

bool phase_serves(int phase, int in_arm, Turn turn) {
  const bool ns = in_arm == kNorth || in_arm == kSouth;
  switch (phase) {
    case 0: return ns && turn != Turn::kLeft;
    case 1: return !ns && turn != Turn::kLeft;
    case 2: return ns && turn == Turn::kLeft;
    case 3: return !ns && turn == Turn::kLeft;
    case 4: return turn == Turn::kRight;
    default: return false;
  }
}

void SimConfig::validate() const {
  if (!(delta_t > guard && guard >= 0.0)) {
    throw std::invalid_argument("sim config requires delta_t > guard >= 0");
  }
  if (horizon_steps < 1) throw std::invalid_argument("sim.horizon_steps must be >= 1");
  if (!(saturation_rate > 0.0)) throw std::invalid_argument("sim.saturation_rate must be > 0");
  if (!(free_flow_speed > 0.0)) throw std::invalid_argument("sim.free_flow_speed must be > 0");
  if (!(lane_length > 0.0)) throw std::invalid_argument("sim.lane_length must be > 0");
  if (!(vehicle_spacing > 0.0)) throw std::invalid_argument("sim.vehicle_spacing must be > 0");
  if (!(detection_range >= 0.0)) throw std::invalid_argument("sim.detection_range must be >= 0");
  if (lane_capacity() < 1) throw std::invalid_argument("lane too short to hold a vehicle");
}

int SimConfig::lane_capacity() const {
  return static_cast<int>(std::floor(lane_length / vehicle_spacing));
}

double FlowSpec::rate_at(double t) const {
  double rate = 0.0;
  for (const RatePoint& p : schedule) {
    if (p.time_s <= t) rate = p.vph;
    else break;
  }
  return rate;
}

void FlowSpec::validate() const {
  if (schedule.empty()) throw std::invalid_argument("flow " + origin + "->" + destination + " has no rate");
  if (schedule.front().time_s > 0.0) {
    throw std::invalid_argument("flow " + origin + "->" + destination +
                                " schedule must start at t=0");
  }
  for (std::size_t i = 0; i < schedule.size(); ++i) {
    if (!(schedule[i].vph >= 0.0)) {
      throw std::invalid_argument("flow " + origin + "->" + destination + " has a negative rate");
    }
    if (i > 0 && schedule[i].time_s < schedule[i - 1].time_s) {
      throw std::invalid_argument("flow " + origin + "->" + destination +
                                  " schedule times must be non-decreasing");
    }
  }
  if (origin == destination) {
    throw std::invalid_argument("flow origin and destination must differ (" + origin + ")");
  }
}

double Vehicle::completed_wait() const {
  double w = 0.0;
  for (const auto& [node, secs] : per_intersection_wait) w += secs;
  return w;
}

Simulator::Simulator(const RoadNetwork& net, SimConfig config, std::vector<FlowSpec> flows)
    : net_(net), config_(config), flows_(std::move(flows)) {
  config_.validate();
  for (const FlowSpec& f : flows_) f.validate();
  build_layout();
  resolve_flows();
  reset(0);
}

void Simulator::build_layout() {
  const int n = net_.num_nodes();
  arm_neighbor_.assign(n, {-1, -1, -1, -1});
  std::vector<std::array<bool, kNumArms>> terminal(n, {false, false, false, false});

  if (const auto& g = net_.grid_shape()) {
    for (int node = 0; node < n; ++node) {
      const int r = node / g->cols;
      const int c = node % g->cols;
      const int dr[kNumArms] = {-1, 0, 1, 0};
      const int dc[kNumArms] = {0, 1, 0, -1};
      for (int a = 0; a < kNumArms; ++a) {
        const int rr = r + dr[a];
        const int cc = c + dc[a];
        if (rr >= 0 && rr < g->rows && cc >= 0 && cc < g->cols) {
          arm_neighbor_[node][a] = rr * g->cols + cc;
        } else {
          terminal[node][a] = true;
        }
      }
    }
  } else {
    // Neighbours take slots N, S, E, W in id order; the next free slot
    // becomes the boundary terminal.
    constexpr int kSlotOrder[kNumArms] = {kNorth, kSouth, kEast, kWest};
    for (int node = 0; node < n; ++node) {
      const auto& nb = net_.neighbors(node);
      if (nb.size() > static_cast<std::size_t>(kNumArms)) {
        throw std::invalid_argument("node " + std::to_string(node) +
                                    " has more than four neighbours");
      }
      std::size_t k = 0;
      for (; k < nb.size(); ++k) arm_neighbor_[node][kSlotOrder[k]] = nb[k];
      if (k < static_cast<std::size_t>(kNumArms)) terminal[node][kSlotOrder[k]] = true;
    }
  }

  auto arm_towards = [this](int node, int other) {
    for (int a = 0; a < kNumArms; ++a) {
      if (arm_neighbor_[node][a] == other) return a;
    }
    throw std::logic_error("arm lookup failed");
  };

  links_.clear();
  arm_in_link_.assign(n, {kNoLink, kNoLink, kNoLink, kNoLink});
  arm_out_link_.assign(n, {kNoLink, kNoLink, kNoLink, kNoLink});
  for (const Edge& e : net_.edges()) {
    LinkInfo link;
    link.id = static_cast<int>(links_.size());
    link.from_node = e.from;
    link.to_node = e.to;
    link.from_arm = arm_towards(e.from, e.to);
    link.to_arm = arm_towards(e.to, e.from);
    arm_out_link_[e.from][link.from_arm] = link.id;
    arm_in_link_[e.to][link.to_arm] = link.id;
    links_.push_back(link);
  }
  for (int node = 0; node < n; ++node) {
    for (int a = 0; a < kNumArms; ++a) {
      if (!terminal[node][a]) continue;
      LinkInfo link;
      link.id = static_cast<int>(links_.size());
      link.to_node = node;
      link.to_arm = a;
      arm_in_link_[node][a] = link.id;
      arm_out_link_[node][a] = kExitTerminal;
      links_.push_back(link);
    }
  }

  lanes_.clear();
  node_lanes_.assign(n, {});
  lane_slot_.assign(n, {});
  link_lanes_.assign(links_.size(), {});
  for (int node = 0; node < n; ++node) {
    lane_slot_[node].fill(-1);
    for (int a = 0; a < kNumArms; ++a) {
      if (arm_in_link_[node][a] == kNoLink) continue;
      for (int t = 0; t < kTurnsPerArm; ++t) {
        const int b = (a + 1 + t) % kNumArms;  // left, straight, right
        if (arm_out_link_[node][b] == kNoLink) continue;
        LaneInfo lane;
        lane.id = static_cast<int>(lanes_.size());
        lane.node = node;
        lane.in_arm = a;
        lane.out_arm = b;
        lane.turn = static_cast<Turn>(t);
        lane.in_link = arm_in_link_[node][a];
        lane.out_link = arm_out_link_[node][b] == kExitTerminal ? -1 : arm_out_link_[node][b];
        node_lanes_[node].push_back(lane.id);
        lane_slot_[node][a * kTurnsPerArm + t] = lane.id;
        link_lanes_[lane.in_link].push_back(lane.id);
        lanes_.push_back(lane);
      }
    }
  }

  regions_.clear();
  if (net_.grid_shape()) {
    for (int side = 0; side < kNumArms; ++side) {
      Region region;
      region.name = side_name(side);
      region.side = side;
      for (int node = 0; node < n; ++node) {
        if (terminal[node][side]) region.terminals.push_back({node, side, arm_in_link_[node][side]});
      }
      regions_.push_back(region);
    }
  }
  for (int node = 0; node < n; ++node) {
    Region region;
    region.name = "node:" + std::to_string(node);
    for (int a = 0; a < kNumArms; ++a) {
      if (terminal[node][a]) region.terminals.push_back({node, a, arm_in_link_[node][a]});
    }
    if (!region.terminals.empty()) regions_.push_back(region);
  }
}

const Simulator::Region* Simulator::find_region(const std::string& name) const {
  for (const Region& r : regions_) {
    if (r.name == name) return &r;
  }
  return nullptr;
}

void Simulator::resolve_flows() {
  flow_regions_.clear();
  for (const FlowSpec& f : flows_) {
    const Region* o = find_region(f.origin);
    const Region* d = find_region(f.destination);
    if (o == nullptr) throw std::invalid_argument("flow references unknown region '" + f.origin + "'");
    if (d == nullptr) {
      throw std::invalid_argument("flow references unknown region '" + f.destination + "'");
    }
    // Every origin terminal must reach some destination terminal and back.
    for (const auto& [from, to] : {std::pair{o, d}, std::pair{d, o}}) {
      for (const Terminal& src : from->terminals) {
        bool ok = false;
        for (const Terminal& dst : to->terminals) {
          if (src.node == dst.node && src.arm == dst.arm) continue;
          if (net_.hop(src.node, dst.node) != kUnreachable) ok = true;
        }
        if (!ok) {
          throw std::invalid_argument("flow " + from->name + "->" + to->name +
                                      " has an unreachable terminal at node " +
                                      std::to_string(src.node));
        }
      }
    }
    flow_regions_.emplace_back(o, d);
  }
}

int Simulator::lane_id(int node, int in_arm, Turn turn) const {
  return lane_slot_[node][in_arm * kTurnsPerArm + static_cast<int>(turn)];
}

void Simulator::reset(std::uint64_t seed) {
  const int n = net_.num_nodes();
  phases_.assign(n, 0);
  queues_.assign(lanes_.size(), {});
  inbound_.assign(lanes_.size(), 0);
  moving_.assign(links_.size(), {});
  backlog_.assign(links_.size(), {});
  vehicles_.clear();
  completed_.clear();
  spawn_rng_.clear();
  route_rng_.clear();
  for (std::size_t f = 0; f < flows_.size(); ++f) {
    spawn_rng_.emplace_back(seed, StreamPurpose::kSpawn, static_cast<std::uint32_t>(f));
    route_rng_.emplace_back(seed, StreamPurpose::kRoute, static_cast<std::uint32_t>(f));
  }
  now_ = 0.0;
  step_ = 0;
  spawned_total_ = 0;
  arrived_total_ = 0;
  event_seq_ = 0;
  trip_delay_sum_ = 0.0;
}

std::vector<int> Simulator::grid_path_lanes(int entry_node, int entry_arm, int exit_node,
                                            int exit_arm, RandomStream& rng) const {
  const int cols = net_.grid_shape()->cols;
  const int r0 = entry_node / cols, c0 = entry_node % cols;
  const int r1 = exit_node / cols, c1 = exit_node % cols;
  std::vector<int> moves;
  for (int i = 0; i < std::abs(r1 - r0); ++i) moves.push_back(r1 > r0 ? kSouth : kNorth);
  for (int i = 0; i < std::abs(c1 - c0); ++i) moves.push_back(c1 > c0 ? kEast : kWest);
  for (std::size_t i = moves.size(); i > 1; --i) {
    std::swap(moves[i - 1], moves[rng.below(static_cast<std::uint32_t>(i))]);
  }
  std::vector<int> lanes;
  int node = entry_node;
  int in_arm = entry_arm;
  for (int move : moves) {
    lanes.push_back(lane_id(node, in_arm, classify_turn(in_arm, move)));
    node = arm_neighbor_[node][move];
    in_arm = opposite(move);
  }
  lanes.push_back(lane_id(node, in_arm, classify_turn(in_arm, exit_arm)));
  return lanes;
}

std::vector<int> Simulator::graph_path_lanes(int entry_node, int entry_arm, int exit_node,
                                             int exit_arm, RandomStream& rng) const {
  const int n = net_.num_nodes();
  std::vector<int> dist(n, kUnreachable);
  std::deque<int> frontier{entry_node};
  dist[entry_node] = 0;
  while (!frontier.empty()) {
    const int u = frontier.front();
    frontier.pop_front();
    for (int v : net_.out_neighbors(u)) {
      if (dist[v] == kUnreachable) {
        dist[v] = dist[u] + 1;
        frontier.push_back(v);
      }
    }
  }
  if (dist[exit_node] == kUnreachable) throw std::runtime_error("route destination unreachable");
  std::vector<int> path{exit_node};
  while (path.back() != entry_node) {
    const int v = path.back();
    std::vector<int> preds;
    for (int p : net_.in_neighbors(v)) {
      if (dist[p] != kUnreachable && dist[p] + 1 == dist[v]) preds.push_back(p);
    }
    path.push_back(preds[rng.below(static_cast<std::uint32_t>(preds.size()))]);
  }
  std::reverse(path.begin(), path.end());
  auto arm_towards = [this](int node, int other) {
    for (int a = 0; a < kNumArms; ++a) {
      if (arm_neighbor_[node][a] == other) return a;
    }
    throw std::logic_error("arm lookup failed");
  };
  std::vector<int> lanes;
  int in_arm = entry_arm;
  for (std::size_t k = 0; k < path.size(); ++k) {
    const int node = path[k];
    const int out_arm = k + 1 < path.size() ? arm_towards(node, path[k + 1]) : exit_arm;
    lanes.push_back(lane_id(node, in_arm, classify_turn(in_arm, out_arm)));
    if (k + 1 < path.size()) in_arm = arm_towards(path[k + 1], node);
  }
  return lanes;
}

std::vector<int> Simulator::sample_route(int flow_index, bool swapped, int& entry_link) {
  const auto [o, d] = flow_regions_[flow_index];
  const Region* from = swapped ? d : o;
  const Region* to = swapped ? o : d;
  RandomStream& rng = route_rng_[flow_index];
  const Terminal& src = from->terminals[rng.below(static_cast<std::uint32_t>(from->terminals.size()))];
  std::vector<const Terminal*> exits;
  for (const Terminal& t : to->terminals) {
    if (t.node == src.node && t.arm == src.arm) continue;
    if (net_.hop(src.node, t.node) == kUnreachable) continue;
    exits.push_back(&t);
  }
  const Terminal& dst = *exits[rng.below(static_cast<std::uint32_t>(exits.size()))];
  entry_link = src.entry_link;
  if (net_.grid_shape()) return grid_path_lanes(src.node, src.arm, dst.node, dst.arm, rng);
  return graph_path_lanes(src.node, src.arm, dst.node, dst.arm, rng);
}

bool Simulator::try_enter_link(int vehicle, double time, std::vector<EntryEvent>& events) {
  const Vehicle& v = vehicles_[vehicle];
  const int lane = v.route_lanes[v.next_hop];
  if (lane_occupancy(lane) >= config_.lane_capacity()) return false;
  ++inbound_[lane];
  events.push_back({time, event_seq_++, vehicle, lanes_[lane].in_link});
  return true;
}

void Simulator::finish_trip(int vehicle, double time) {
  Vehicle& v = vehicles_[vehicle];
  v.arrive_time = time;
  ++arrived_total_;
  trip_delay_sum_ += v.arrive_time - v.depart_time;
  completed_.push_back(vehicle);
}

StepResult Simulator::step(std::span<const int> actions) {
  const int n = net_.num_nodes();
  if (static_cast<int>(actions.size()) != n) {
    throw std::invalid_argument("expected " + std::to_string(n) + " actions, got " +
                                std::to_string(actions.size()));
  }
  for (int i = 0; i < n; ++i) {
    if (actions[i] < 0 || actions[i] >= kNumPhases) {
      throw std::invalid_argument("agent " + std::to_string(i) + ": action " +
                                  std::to_string(actions[i]) + " out of range 0..4");
    }
  }
  if (done()) throw std::logic_error("step() called after the episode horizon");

  const double t0 = now_;
  const double t1 = now_ + config_.delta_t;
  const int capacity = config_.lane_capacity();
  std::vector<EntryEvent> events;

  // Signal service. Only vehicles queued at the start of the interval may
  // discharge; the guard blocks every movement after a phase change.
  for (int node = 0; node < n; ++node) {
    const bool switched = actions[node] != phases_[node];
    phases_[node] = actions[node];
    const double offset = switched ? config_.guard : 0.0;
    const double green = config_.delta_t - offset;
    const int slots = static_cast<int>(std::floor(config_.saturation_rate * green + 1e-9));
    for (int lane : node_lanes_[node]) {
      const LaneInfo& info = lanes_[lane];
      if (!phase_serves(phases_[node], info.in_arm, info.turn)) continue;
      auto& queue = queues_[lane];
      for (int k = 0; k < slots && !queue.empty(); ++k) {
        const int vid = queue.front();
        Vehicle& v = vehicles_[vid];
        const double depart = t0 + offset + (k + 1) / config_.saturation_rate;
        const bool exits = v.next_hop + 1 == static_cast<int>(v.route_lanes.size());
        if (!exits) {
          const int target = v.route_lanes[v.next_hop + 1];
          if (lane_occupancy(target) >= capacity) break;  // spillback holds the head
        }
        queue.pop_front();
        v.per_intersection_wait.emplace_back(node, depart - v.queue_join_time);
        ++v.next_hop;
        if (exits) {
          finish_trip(vid, depart);
        } else {
          const int target = v.route_lanes[v.next_hop];
          ++inbound_[target];
          events.push_back({depart, event_seq_++, vid, lanes_[target].in_link});
        }
      }
    }
  }

  // Vehicles held at full entry links retry first, then new demand.
  for (std::size_t link = 0; link < backlog_.size(); ++link) {
    auto& waiting = backlog_[link];
    while (!waiting.empty() && try_enter_link(waiting.front(), t0, events)) waiting.pop_front();
  }
  for (std::size_t f = 0; f < flows_.size(); ++f) {
    const FlowSpec& flow = flows_[f];
    const double mean = flow.rate_at(t0) * config_.delta_t / 3600.0;
    const int count = spawn_rng_[f].poisson(mean);
    const bool swapped = t0 >= flow.swap_after_s;
    for (int k = 0; k < count; ++k) {
      Vehicle v;
      v.id = static_cast<int>(vehicles_.size());
      v.flow = static_cast<int>(f);
      v.depart_time = t0 + config_.delta_t * (k + 1) / (count + 1);
      v.route_lanes = sample_route(static_cast<int>(f), swapped, v.entry_link);
      vehicles_.push_back(std::move(v));
      ++spawned_total_;
      const int vid = static_cast<int>(vehicles_.size()) - 1;
      auto& waiting = backlog_[vehicles_[vid].entry_link];
      if (!waiting.empty() || !try_enter_link(vid, vehicles_[vid].depart_time, events)) {
        waiting.push_back(vid);
      }
    }
  }

  std::stable_sort(events.begin(), events.end(), [](const EntryEvent& a, const EntryEvent& b) {
    return a.time < b.time || (a.time == b.time && a.seq < b.seq);
  });
  const double travel = config_.free_flow_time();
  for (const EntryEvent& e : events) moving_[e.link].push_back({e.vehicle, e.time + travel});

  for (auto& on_link : moving_) {
    while (!on_link.empty() && on_link.front().arrival_time <= t1) {
      const Moving m = on_link.front();
      on_link.pop_front();
      Vehicle& v = vehicles_[m.vehicle];
      const int lane = v.route_lanes[v.next_hop];
      --inbound_[lane];
      v.queue_join_time = m.arrival_time;
      queues_[lane].push_back(m.vehicle);
    }
  }

  now_ = t1;
  ++step_;
  return {current_rewards(), done()};
}

std::array<double, kMaxLanes> Simulator::observe_wave(int node) const {
  std::array<double, kMaxLanes> wave{};
  for (int slot = 0; slot < kMaxLanes; ++slot) {
    const int lane = lane_slot_[node][slot];
    if (lane >= 0) wave[slot] = static_cast<double>(queues_[lane].size());
  }
  const double speed = config_.free_flow_speed;
  for (int a = 0; a < kNumArms; ++a) {
    const int link = arm_in_link_[node][a];
    if (link == kNoLink) continue;
    for (const Moving& m : moving_[link]) {
      const double remaining = (m.arrival_time - now_) * speed;
      if (!(remaining < config_.detection_range)) break;
      const Vehicle& v = vehicles_[m.vehicle];
      const LaneInfo& lane = lanes_[v.route_lanes[v.next_hop]];
      wave[lane.in_arm * kTurnsPerArm + static_cast<int>(lane.turn)] += 1.0;
    }
  }
  return wave;
}

std::array<int, kNumArms> Simulator::arm_neighbors(int node) const { return arm_neighbor_[node]; }

int Simulator::queue_length(int node) const {
  int total = 0;
  for (int lane : node_lanes_[node]) total += static_cast<int>(queues_[lane].size());
  return total;
}

double Simulator::max_head_wait(int node) const {
  double wait = 0.0;
  for (int lane : node_lanes_[node]) {
    if (queues_[lane].empty()) continue;
    wait = std::max(wait, now_ - vehicles_[queues_[lane].front()].queue_join_time);
  }
  return wait;
}

std::vector<double> Simulator::current_rewards() const {
  std::vector<double> r(net_.num_nodes());
  for (int i = 0; i < net_.num_nodes(); ++i) {
    r[i] = -(queue_length(i) + config_.wait_coeff * max_head_wait(i));
  }
  return r;
}

std::vector<MovementQueues> Simulator::movement_queues(int node) const {
  std::vector<MovementQueues> out;
  for (int lane : node_lanes_[node]) {
    const LaneInfo& info = lanes_[lane];
    MovementQueues m;
    m.in_arm = info.in_arm;
    m.turn = info.turn;
    m.queue_in = static_cast<int>(queues_[lane].size());
    if (info.out_link >= 0) {
      for (int down : link_lanes_[info.out_link]) {
        m.queue_out += static_cast<int>(queues_[down].size());
      }
    }
    out.push_back(m);
  }
  return out;
}

long Simulator::in_network() const { return spawned_total_ - arrived_total_; }

long Simulator::count_vehicles_in_structures() const {
  long count = 0;
  for (const auto& q : queues_) count += static_cast<long>(q.size());
  for (const auto& m : moving_) count += static_cast<long>(m.size());
  for (const auto& b : backlog_) count += static_cast<long>(b.size());
  return count;
}

MetricsSnapshot Simulator::metrics_snapshot() const {
  MetricsSnapshot s;
  s.step = step_;
  const int n = net_.num_nodes();
  double reward_sum = 0.0;
  for (int i = 0; i < n; ++i) {
    s.avg_queue += queue_length(i);
    reward_sum += -(queue_length(i) + config_.wait_coeff * max_head_wait(i));
  }
  s.avg_queue /= n;
  s.avg_reward = reward_sum / n;

  double speed_sum = 0.0;
  double delay_sum = 0.0;
  long count = 0;
  for (const auto& on_link : moving_) {
    for (const Moving& m : on_link) {
      speed_sum += config_.free_flow_speed;
      delay_sum += vehicles_[m.vehicle].completed_wait();
      ++count;
    }
  }
  for (const auto& q : queues_) {
    for (int vid : q) {
      const Vehicle& v = vehicles_[vid];
      delay_sum += v.completed_wait() + (now_ - v.queue_join_time);
      ++count;
    }
  }
  for (const auto& b : backlog_) count += static_cast<long>(b.size());
  s.empty_network = count == 0;
  if (count > 0) {
    s.avg_speed = speed_sum / static_cast<double>(count);
    s.avg_intersection_delay = delay_sum / static_cast<double>(count);
  }
  s.no_trips = arrived_total_ == 0;
  if (arrived_total_ > 0) s.avg_trip_delay = trip_delay_sum_ / static_cast<double>(arrived_total_);
  return s;
}

void Simulator::inject_queued(int lane, int count, double join_time) {
  if (lane < 0 || lane >= static_cast<int>(lanes_.size())) {
    throw std::out_of_range("inject_queued: unknown lane");
  }
  if (lanes_[lane].out_link >= 0) {
    throw std::invalid_argument("inject_queued: lane must lead out of the network");
  }
  for (int k = 0; k < count; ++k) {
    Vehicle v;
    v.id = static_cast<int>(vehicles_.size());
    v.route_lanes = {lane};
    v.depart_time = join_time;
    v.queue_join_time = join_time;
    queues_[lane].push_back(v.id);
    vehicles_.push_back(std::move(v));
    ++spawned_total_;
  }
}

}  // namespace tsc
