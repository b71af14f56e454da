#pragma once

// Experiment configuration: one JSON document with the sections network,
// flows, sim, agg, model, train, baseline, output and a single seed.
// Every key has a default; unknown keys are rejected.

#include "tsc/aggregate.hpp"
#include "tsc/baselines.hpp"
#include "tsc/marl.hpp"
#include "tsc/netgraph.hpp"
#include "tsc/nn.hpp"
#include "tsc/simulator.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace tsc {

struct NetworkConfig {
  std::string kind = "grid";  // grid | edges
  int rows = 5;
  int cols = 5;
  int lanes_per_edge = 3;
  EdgeWeighting weighting = EdgeWeighting::kUnit;
  int num_nodes = 0;  // edge-list networks only
  std::vector<Edge> edges;  // serialised as edges/weights/lanes lists
  double restart_alpha = 0.75;
  int walk_depth = 3;
};

struct BaselineConfig {
  std::string controller = "fixed-time";
  CycleTable cycle;
  /// Directory holding agent checkpoints for learned controllers.
  std::string checkpoint_dir;
  int eval_episodes = 20;
  bool greedy = true;
};

struct ExperimentConfig {
  NetworkConfig network;
  std::vector<FlowSpec> flows;
  SimConfig sim;
  AggregationOptions agg;
  ModelConfig model;
  TrainConfig train;
  BaselineConfig baseline;
  std::string output_dir = "runs/default";
  std::uint64_t seed = 1;

  /// Defaults: 5x5 grid with ramping, direction-swapping flows.
  static ExperimentConfig defaults();
  void validate() const;

  RoadNetwork build_network() const;
  DiffusionOperator build_operator(const RoadNetwork& net) const;
  /// Training setup with the seed and K propagated.
  TrainSetup train_setup(const RoadNetwork& net, const DiffusionOperator& op) const;
};

/// Three major and three minor flows whose origins and destinations swap
/// a quarter of the way through a horizon of `horizon_s` seconds.
std::vector<FlowSpec> ramp_flows(double horizon_s, double major_peak_vph = 1100.0,
                                 double minor_peak_vph = 700.0);

std::string config_to_string(const ExperimentConfig& config);
ExperimentConfig config_from_string(const std::string& text, const std::string& source = "config");
ExperimentConfig load_config(const std::string& path);
/// Applies `path.to.key=value` (value parsed as JSON, else taken as a string).
void apply_override(ExperimentConfig& config, const std::string& assignment);

}  // namespace tsc
