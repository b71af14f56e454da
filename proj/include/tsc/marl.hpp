#pragma once

// Aggregated advantage actor-critic: on-policy batch collection, spatially
// discounted returns, actor/critic losses, Adam updates and evaluation.

#include "tsc/aggregate.hpp"
#include "tsc/controller.hpp"
#include "tsc/netgraph.hpp"
#include "tsc/nn.hpp"
#include "tsc/rng.hpp"
#include "tsc/simulator.hpp"

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace tsc {

enum class ExecutionMode {
  /// Each agent unrolls its own sequence; the GRU shift operator is the
  /// identity because spatial mixing already happened during aggregation.
  kDecentralized,
  /// One shared network runs diffusion-convolution gates over all nodes.
  kGraph,
};

enum class LrSchedule { kLinearDecay, kConstant };

struct TrainConfig {
  double gamma = 0.99;
  double spatial_alpha = 0.75;
  double entropy_coef = 0.01;
  double lr_actor = 5e-4;
  double lr_critic = 2.5e-4;
  int batch_size = 120;
  long total_steps = 0;
  std::uint64_t seed = 1;
  LrSchedule lr_schedule = LrSchedule::kLinearDecay;
  /// Sum neighbour rewards over every agent instead of hops <= K.
  bool exact_spatial = false;
  /// Rewards are divided by this before entering returns and losses.
  double reward_norm = 5000.0;
  /// Symmetric clip applied after normalisation; 0 disables.
  double reward_clip = 0.0;
  /// Wave counts are divided by this when forming observations.
  double wave_scale = 10.0;
  double max_grad_norm = 40.0;
  /// Standardise each agent's advantages over the batch before the actor
  /// loss (zero mean, unit variance).
  bool normalize_advantages = true;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  bool share_params = false;
  bool split_trunk = false;
  ExecutionMode mode = ExecutionMode::kDecentralized;

  void validate() const;
};

/// Observation matrix (agents x input_dim): scaled per-lane wave, then
/// optionally the one-hot own phase, then one-hot current phases of the four
/// arm neighbours (zeros for no neighbour).
Mat observation_matrix(const Simulator& sim, double wave_scale, bool own_phase);
/// Width of the action block produced by observation_matrix.
int observation_action_dim(bool own_phase);
/// Throws unless the model input matches observation_matrix.
void check_observation_layout(const ModelConfig& config);

// ------------------------------------------------------------------ batches

struct AgentTrajectory {
  std::vector<Mat> sequences;  // K x F per step
  std::vector<int> actions;
  std::vector<double> rewards;  // normalised rewards
  std::vector<double> values;   // critic estimate at collection time
  std::vector<std::uint8_t> dones;
};

struct ExperienceBatch {
  std::vector<AgentTrajectory> agents;
  /// Sequences of the state following the last step, per agent; unused when
  /// the last step is terminal.
  std::vector<Mat> bootstrap_sequences;

  int size() const { return agents.empty() ? 0 : static_cast<int>(agents[0].actions.size()); }
  int num_agents() const { return static_cast<int>(agents.size()); }
  bool ends_terminal() const { return size() > 0 && agents[0].dones.back() != 0; }
  void clear();
};

struct ReturnParams {
  double gamma = 0.99;
  double alpha = 0.75;
  /// Neighbours farther than this many hops are ignored; < 0 means no limit.
  int max_hop = -1;
};

/// sum_j alpha^{d_ij} r_{j,tau} over agents within max_hop.
double spatial_reward(const ExperienceBatch& batch, const RoadNetwork& net, int agent, int tau,
                      const ReturnParams& params);
/// Discounted spatial return from tau to the end of the batch plus the
/// discounted bootstrap value; an episode end inside the batch cuts both.
double sampled_return(const ExperienceBatch& batch, const RoadNetwork& net, int agent, int tau,
                      const ReturnParams& params, double bootstrap_value);
/// All returns of one agent by backward recursion.
std::vector<double> sampled_returns(const ExperienceBatch& batch, const RoadNetwork& net, int agent,
                                    const ReturnParams& params, double bootstrap_value);
/// In-place (a - mean) / (std + 1e-8); batches of size 1 become zero.
void standardize(std::vector<double>& values);

/// R_hat - V_target, element-wise.
std::vector<double> advantages(const std::vector<double>& returns,
                               const std::vector<double>& target_values);

struct LossResult {
  double loss = 0.0;
  double entropy = 0.0;  // mean policy entropy
  Mat dlogits;
  Vec dvalues;
  long clamped_logs = 0;
};

/// -(1/B) sum_tau [log pi(a_tau) A_tau + beta H(pi_tau)]; A is constant.
LossResult actor_loss(const Mat& probs, const std::vector<int>& actions,
                      const std::vector<double>& advantages, double beta);
/// (1/B) sum_tau (R_tau - V_tau)^2.
LossResult critic_loss(const Vec& values, const std::vector<double>& returns);

// ------------------------------------------------------------------- models

struct AdamState {
  std::vector<Mat> m, v;
  long t = 0;
};

void adam_step(ParamStore& store, AdamState& state, double lr_trunk_actor, double lr_critic,
               const TrainConfig& config);
double grad_norm(const ParamStore& store);

struct AgentModel {
  AgentNet net;
  AgentNet target;  // frozen copy used for advantages and bootstraps
  std::optional<AgentNet> critic_net;  // split-trunk critic
  std::optional<AgentNet> critic_target;
  AdamState opt;
  AdamState critic_opt;

  AgentModel() = default;
  AgentModel(const ModelConfig& config, bool split_trunk);
  void init(std::uint64_t seed, std::uint32_t index);
  void sync_target();

  /// Live policy and critic on a batch of sequences.
  TrunkOutput forward(const std::vector<Mat>& entries, const Gso& gso);
  /// Target critic values.
  Vec target_values(const std::vector<Mat>& entries, const Gso& gso);
};

/// Splits per-row K x F sequences into K row-stacked entry matrices.
std::vector<Mat> stack_entries(const std::vector<const Mat*>& sequences);

struct AgentUpdateStats {
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
  long clamped_logs = 0;
};

/// Gradients of one agent's losses on its trajectory (decentralised mode).
/// Leaves gradients in the model's stores; does not step the optimiser.
AgentUpdateStats accumulate_agent_gradients(AgentModel& model, const ExperienceBatch& batch,
                                            const RoadNetwork& net, int agent,
                                            const ReturnParams& params, double entropy_coef);

// ------------------------------------------------------------------ training

struct TrainLogRow {
  int episode = 0;
  long steps = 0;
  double mean_episode_reward = 0.0;
  double actor_loss = 0.0;
  double critic_loss = 0.0;
  double entropy = 0.0;
};

struct TrainResult {
  std::vector<AgentModel> models;  // one per agent, or one when shared
  std::vector<TrainLogRow> log;
  long clamped_logs = 0;
};

struct TrainSetup {
  const RoadNetwork* net = nullptr;
  const DiffusionOperator* op = nullptr;
  SimConfig sim;
  std::vector<FlowSpec> flows;
  ModelConfig model;
  AggregationOptions agg;
  TrainConfig train;
};

/// Model per agent (or a single shared one), initialised from the seed.
std::vector<AgentModel> make_models(const TrainSetup& setup);

/// Collect/aggregate/act/update loop. `models` empty -> fresh models.
TrainResult train(const TrainSetup& setup, std::vector<AgentModel> models = {},
                  const std::function<void(const TrainLogRow&)>& on_episode = {});

/// Controller backed by learned models.
class LearnedController : public Controller {
 public:
  LearnedController(std::string name, const RoadNetwork& net, const DiffusionOperator& op,
                    std::vector<AgentModel> models, AggregationOptions agg, ExecutionMode mode,
                    double wave_scale, bool greedy);

  std::string name() const override { return name_; }
  void begin_episode(const Simulator& sim, std::uint64_t episode_seed) override;
  std::vector<int> act(const Simulator& sim) override;

  const SequenceBuilder& builder() const { return builder_; }
  std::vector<AgentModel>& models() { return models_; }

 private:
  std::string name_;
  const RoadNetwork* net_;
  std::vector<AgentModel> models_;
  SequenceBuilder builder_;
  ExecutionMode mode_;
  Gso graph_gso_;
  double wave_scale_;
  bool greedy_;
  std::vector<RandomStream> action_rng_;
};

// ---------------------------------------------------------------- evaluation

struct StepStats {
  double mean = 0.0;
  double stddev = 0.0;
};

struct EpisodeSummary {
  double avg_queue = 0.0;
  double avg_speed = 0.0;
  double avg_trip_delay = 0.0;
  double avg_intersection_delay = 0.0;
  double episode_reward = 0.0;  // mean over steps of the agent-averaged reward
  long completed_trips = 0;
};

struct TripRecord {
  int episode = 0;
  int vehicle_id = 0;
  double depart_s = 0.0;
  double arrive_s = 0.0;
  double trip_delay_s = 0.0;
  double intersection_delay_s = 0.0;
};

struct EvaluationResult {
  std::string controller;
  std::vector<EpisodeSummary> episodes;
  /// Per step, across episodes: avg_queue, avg_speed, avg_reward, avg_intersection_delay.
  std::vector<std::array<StepStats, 4>> per_step;
  std::vector<TripRecord> trips;
  /// Raw per-episode metric streams (episode-major).
  std::vector<std::vector<MetricsSnapshot>> streams;

  EpisodeSummary mean() const;
  EpisodeSummary stddev() const;
};

/// Episode seeds used by evaluate().
std::uint64_t evaluation_episode_seed(std::uint64_t seed, int episode);

EvaluationResult evaluate(Simulator& env, Controller& controller, int episodes, std::uint64_t seed);

}  // namespace tsc
