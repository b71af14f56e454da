#pragma once

// Deterministic point-queue simulator of a signalised road network.
//
// Every intersection has four arm slots (N, E, S, W). An arm carries an
// incoming link (from a neighbour or from a boundary entry) and/or an
// outgoing link (to a neighbour or to a boundary exit). Each incoming arm
// is split into one lane per turning movement, so a lane is identified by
// (intersection, incoming arm, turn). Vehicles cross a link in free-flow
// time and then wait in the FIFO queue of the lane matching their next
// turn.

#include "tsc/netgraph.hpp"
#include "tsc/rng.hpp"

#include <array>
#include <cstdint>
#include <deque>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace tsc {

inline constexpr int kNumArms = 4;
inline constexpr int kNumPhases = 5;
inline constexpr int kTurnsPerArm = 3;
inline constexpr int kMaxLanes = kNumArms * kTurnsPerArm;

enum Arm : int { kNorth = 0, kEast = 1, kSouth = 2, kWest = 3 };
enum class Turn : int { kLeft = 0, kStraight = 1, kRight = 2 };

/// Turn taken when entering through `in_arm` and leaving through `out_arm`.
Turn classify_turn(int in_arm, int out_arm);

/// Phase templates: 0 N/S straight+right, 1 E/W straight+right, 2 N/S left,
/// 3 E/W left, 4 right turns from every arm.
bool phase_serves(int phase, int in_arm, Turn turn);

struct SimConfig {
  double delta_t = 5.0;
  double guard = 2.0;
  int horizon_steps = 720;
  double detection_range = 50.0;
  double wait_coeff = 0.2;
  double saturation_rate = 0.5;
  double free_flow_speed = 13.9;
  double lane_length = 200.0;
  double vehicle_spacing = 7.5;

  void validate() const;
  double free_flow_time() const { return lane_length / free_flow_speed; }
  int lane_capacity() const;
};

struct RatePoint {
  double time_s = 0.0;
  double vph = 0.0;
};

/// Origin/destination demand. Regions are grid sides ("north", "east",
/// "south", "west") or boundary terminals of single nodes ("node:<id>").
/// After `swap_after_s` the origin and destination exchange roles.
struct FlowSpec {
  std::string origin;
  std::string destination;
  std::vector<RatePoint> schedule;
  double swap_after_s = std::numeric_limits<double>::infinity();

  /// Piecewise-constant rate in vehicles per hour at time t.
  double rate_at(double t) const;
  void validate() const;
};

struct Vehicle {
  int id = 0;
  int flow = -1;
  std::vector<int> route_lanes;  // lane ids queued at, one per intersection crossed
  int next_hop = 0;              // index into route_lanes
  int entry_link = -1;
  double depart_time = 0.0;
  double arrive_time = -1.0;  // < 0 while the trip is pending
  double queue_join_time = 0.0;
  std::vector<std::pair<int, double>> per_intersection_wait;

  bool arrived() const { return arrive_time >= 0.0; }
  double completed_wait() const;
};

struct LaneInfo {
  int id = 0;
  int node = 0;
  int in_arm = 0;
  int out_arm = 0;
  Turn turn = Turn::kStraight;
  int in_link = -1;
  int out_link = -1;  // -1 when the movement leaves the network
};

struct LinkInfo {
  int id = 0;
  int from_node = -1;  // -1 for boundary entries
  int to_node = -1;    // -1 for boundary exits
  int from_arm = -1;   // arm slot at from_node
  int to_arm = -1;     // arm slot at to_node
};

struct MetricsSnapshot {
  int step = 0;
  double avg_queue = 0.0;
  double avg_speed = 0.0;
  double avg_trip_delay = 0.0;
  double avg_intersection_delay = 0.0;
  double avg_reward = 0.0;
  bool empty_network = true;  // no vehicle currently in the network
  bool no_trips = true;       // no completed trip yet
};

struct StepResult {
  std::vector<double> rewards;
  bool done = false;
};

/// One movement as seen by a pressure-based controller.
struct MovementQueues {
  int in_arm = 0;
  Turn turn = Turn::kStraight;
  int queue_in = 0;
  int queue_out = 0;
};

class Simulator {
 public:
  Simulator(const RoadNetwork& net, SimConfig config, std::vector<FlowSpec> flows);

  /// Empty network, every signal at phase 0, fresh random streams.
  void reset(std::uint64_t seed);
  StepResult step(std::span<const int> actions);

  int num_agents() const { return net_.num_nodes(); }
  int step_count() const { return step_; }
  double now() const { return now_; }
  bool done() const { return step_ >= config_.horizon_steps; }
  const SimConfig& config() const { return config_; }
  const RoadNetwork& network() const { return net_; }

  /// Per-lane vehicle counts (queued + approaching within detection range),
  /// laid out as in_arm * 3 + turn; absent lanes read 0.
  std::array<double, kMaxLanes> observe_wave(int node) const;
  /// Neighbour intersection on each arm, -1 for boundary or missing arms.
  std::array<int, kNumArms> arm_neighbors(int node) const;
  int phase(int node) const { return phases_[node]; }

  /// -(queue + wait_coeff * max head wait) for every agent at the current time.
  std::vector<double> current_rewards() const;
  int queue_length(int node) const;
  double max_head_wait(int node) const;
  std::vector<MovementQueues> movement_queues(int node) const;
  MetricsSnapshot metrics_snapshot() const;

  // Accounting
  long spawned_total() const { return spawned_total_; }
  long arrived_total() const { return arrived_total_; }
  long in_network() const;
  /// Recounts in-network vehicles from the lane/link structures.
  long count_vehicles_in_structures() const;

  const std::vector<Vehicle>& vehicles() const { return vehicles_; }
  const std::vector<LaneInfo>& lanes() const { return lanes_; }
  const std::vector<LinkInfo>& links() const { return links_; }
  /// Lane ids entering `node`, ordered by (in_arm, turn).
  const std::vector<int>& node_lanes(int node) const { return node_lanes_[node]; }
  int lane_id(int node, int in_arm, Turn turn) const;
  const std::deque<int>& lane_queue(int lane) const { return queues_[lane]; }

  /// Places `count` vehicles directly into a lane queue; each leaves the
  /// network after crossing this intersection. Intended for tests and
  /// scenario setup.
  void inject_queued(int lane, int count, double join_time);

  /// Trips whose arrival has been recorded, in arrival order.
  const std::vector<int>& completed_trips() const { return completed_; }

 private:
  struct Moving {
    int vehicle;
    double arrival_time;
  };
  struct EntryEvent {
    double time;
    long seq;
    int vehicle;
    int link;
  };

  void build_layout();
  void resolve_flows();
  std::vector<int> sample_route(int flow_index, bool swapped, int& entry_link);
  std::vector<int> grid_path_lanes(int entry_node, int entry_arm, int exit_node, int exit_arm,
                                   RandomStream& rng) const;
  std::vector<int> graph_path_lanes(int entry_node, int entry_arm, int exit_node, int exit_arm,
                                    RandomStream& rng) const;
  int lane_occupancy(int lane) const { return static_cast<int>(queues_[lane].size()) + inbound_[lane]; }
  bool try_enter_link(int vehicle, double time, std::vector<EntryEvent>& events);
  void finish_trip(int vehicle, double time);

  struct Terminal {
    int node;
    int arm;
    int entry_link;  // -1 if none
  };
  struct Region {
    std::string name;
    std::vector<Terminal> terminals;
    int side = -1;  // arm direction for grid sides
  };
  const Region* find_region(const std::string& name) const;

  RoadNetwork net_;
  SimConfig config_;
  std::vector<FlowSpec> flows_;

  // Static layout
  std::vector<std::array<int, kNumArms>> arm_neighbor_;
  std::vector<std::array<int, kNumArms>> arm_in_link_;
  std::vector<std::array<int, kNumArms>> arm_out_link_;  // -2 exit terminal, -1 none
  std::vector<LinkInfo> links_;
  std::vector<LaneInfo> lanes_;
  std::vector<std::vector<int>> node_lanes_;
  std::vector<std::array<int, kMaxLanes>> lane_slot_;  // -1 when absent
  std::vector<std::vector<int>> link_lanes_;
  std::vector<Region> regions_;
  std::vector<std::pair<const Region*, const Region*>> flow_regions_;

  // Dynamic state
  std::vector<int> phases_;
  std::vector<std::deque<int>> queues_;
  std::vector<int> inbound_;
  std::vector<std::deque<Moving>> moving_;
  std::vector<std::deque<int>> backlog_;  // per entry link
  std::vector<Vehicle> vehicles_;
  std::vector<int> completed_;
  std::vector<RandomStream> spawn_rng_, route_rng_;
  double now_ = 0.0;
  int step_ = 0;
  long spawned_total_ = 0;
  long arrived_total_ = 0;
  long event_seq_ = 0;
  double trip_delay_sum_ = 0.0;
};

}  // namespace tsc
