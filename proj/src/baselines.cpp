#include "tsc/baselines.hpp"

#include <stdexcept>

namespace tsc {

ControllerKind parse_controller_kind(const std::string& name) {
  if (name == "fixed-time") return ControllerKind::kFixedTime;
  if (name == "max-pressure") return ControllerKind::kMaxPressure;
  if (name == "ia2c-ablation") return ControllerKind::kIa2cAblation;
  if (name == "agg-a2c") return ControllerKind::kAggA2c;
  throw std::invalid_argument("unknown controller '" + name +
                              "' (expected fixed-time, max-pressure, ia2c-ablation or agg-a2c)");
}

std::string controller_kind_name(ControllerKind kind) {
  switch (kind) {
    case ControllerKind::kFixedTime: return "fixed-time";
    case ControllerKind::kMaxPressure: return "max-pressure";
    case ControllerKind::kIa2cAblation: return "ia2c-ablation";
    case ControllerKind::kAggA2c: return "agg-a2c";
  }
  return "unknown";
}

int CycleTable::period() const {
  int p = 0;
  for (int s : steps_per_phase) p += s;
  return p;
}

void CycleTable::validate() const {
  for (int s : steps_per_phase) {
    if (s < 0) throw std::invalid_argument("fixed-time split must be >= 0");
  }
  if (period() == 0) throw std::invalid_argument("fixed-time cycle has zero length");
}

int fixed_time(const CycleTable& table, int /*agent*/, long step) {
  long pos = step % table.period();
  for (int p = 0; p < kNumPhases; ++p) {
    if (pos < table.steps_per_phase[p]) return p;
    pos -= table.steps_per_phase[p];
  }
  return 0;
}

std::array<double, kNumPhases> phase_pressures(const std::vector<MovementQueues>& movements) {
  std::array<double, kNumPhases> pressure{};
  for (const MovementQueues& m : movements) {
    for (int p = 0; p < kNumPhases; ++p) {
      if (phase_serves(p, m.in_arm, m.turn)) pressure[p] += m.queue_in - m.queue_out;
    }
  }
  return pressure;
}

int max_pressure(const std::vector<MovementQueues>& movements) {
  const auto pressure = phase_pressures(movements);
  int best = 0;
  for (int p = 1; p < kNumPhases; ++p) {
    if (pressure[p] > pressure[best]) best = p;
  }
  return best;
}

FixedTimeController::FixedTimeController(CycleTable table) : table_(table) { table_.validate(); }

void FixedTimeController::begin_episode(const Simulator&, std::uint64_t) {}

std::vector<int> FixedTimeController::act(const Simulator& sim) {
  std::vector<int> a(sim.num_agents());
  for (int i = 0; i < sim.num_agents(); ++i) a[i] = fixed_time(table_, i, sim.step_count());
  return a;
}

std::vector<int> MaxPressureController::act(const Simulator& sim) {
  std::vector<int> a(sim.num_agents());
  for (int i = 0; i < sim.num_agents(); ++i) a[i] = max_pressure(sim.movement_queues(i));
  return a;
}

AggregationOptions ia2c_aggregation() {
  AggregationOptions o;
  o.K = 1;
  return o;
}

std::unique_ptr<LearnedController> ia2c_ablation(const RoadNetwork& net, const DiffusionOperator& op,
                                                 std::vector<AgentModel> models, double wave_scale,
                                                 bool greedy) {
  return std::make_unique<LearnedController>("ia2c-ablation", net, op, std::move(models),
                                             ia2c_aggregation(), ExecutionMode::kDecentralized,
                                             wave_scale, greedy);
}

}  // namespace tsc
