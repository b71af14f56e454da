#pragma once

#include "tsc/controller.hpp"
#include "tsc/marl.hpp"

#include <array>
#include <memory>
#include <string>
#include <vector>

namespace tsc {

enum class ControllerKind { kFixedTime, kMaxPressure, kIa2cAblation, kAggA2c };

ControllerKind parse_controller_kind(const std::string& name);
std::string controller_kind_name(ControllerKind kind);

/// Round-robin schedule: `steps_per_phase[p]` decision steps of phase p, in
/// phase order.
struct CycleTable {
  std::array<int, kNumPhases> steps_per_phase{4, 4, 4, 4, 4};

  int period() const;
  void validate() const;
};

int fixed_time(const CycleTable& table, int agent, long step);

/// Phase with the largest summed pressure (queue_in - queue_out) over the
/// movements it serves; ties go to the lowest phase id.
int max_pressure(const std::vector<MovementQueues>& movements);
std::array<double, kNumPhases> phase_pressures(const std::vector<MovementQueues>& movements);

class FixedTimeController : public Controller {
 public:
  explicit FixedTimeController(CycleTable table = {});
  std::string name() const override { return "fixed-time"; }
  void begin_episode(const Simulator& sim, std::uint64_t episode_seed) override;
  std::vector<int> act(const Simulator& sim) override;

 private:
  CycleTable table_;
};

class MaxPressureController : public Controller {
 public:
  std::string name() const override { return "max-pressure"; }
  void begin_episode(const Simulator&, std::uint64_t) override {}
  std::vector<int> act(const Simulator& sim) override;
};

/// Independent learners: the aggregation sequence collapses to the local
/// observation (K = 1), so no neighbour messages are exchanged.
AggregationOptions ia2c_aggregation();

/// Learned controller for the K = 1 ablation.
std::unique_ptr<LearnedController> ia2c_ablation(const RoadNetwork& net, const DiffusionOperator& op,
                                                 std::vector<AgentModel> models, double wave_scale,
                                                 bool greedy);

}  // namespace tsc
