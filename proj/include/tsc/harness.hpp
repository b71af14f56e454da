#pragma once

// Experiment orchestration and result files.

#include "tsc/baselines.hpp"
#include "tsc/config.hpp"
#include "tsc/marl.hpp"

#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace tsc {

/// Builds the controller named by baseline.controller. Learned controllers
/// load their models from baseline.checkpoint_dir.
std::unique_ptr<Controller> make_controller(const ExperimentConfig& config, const RoadNetwork& net,
                                            const DiffusionOperator& op);

void save_models(const std::string& dir, const std::vector<AgentModel>& models);
/// Reads agent_<i>.ckpt files; a lone agent_0.ckpt is a shared model.
std::vector<AgentModel> load_models(const std::string& dir, int num_agents);

// CSV writers. Numbers use 12 significant digits so identical runs produce
// identical bytes.
void write_metrics_csv(std::ostream& out, const std::vector<MetricsSnapshot>& stream);
void write_step_stats_csv(std::ostream& out, const EvaluationResult& eval);
void write_trips_csv(std::ostream& out, const std::vector<TripRecord>& trips, bool with_episode);
void write_episodes_csv(std::ostream& out, const EvaluationResult& eval);
void write_train_log_csv(std::ostream& out, const std::vector<TrainLogRow>& log);

/// Runs one episode and writes metrics.csv, trips.csv, episodes.csv and
/// summary.json into `out_dir`.
EvaluationResult run_simulate(const ExperimentConfig& config, const std::string& out_dir);
/// Evaluation protocol; per-step mean/std go to metrics.csv.
EvaluationResult run_evaluate(const ExperimentConfig& config, const std::string& out_dir);
/// Trains, writes train_log.csv, checkpoints/ and summary.json.
TrainResult run_train(const ExperimentConfig& config, const std::string& out_dir,
                      std::ostream* progress = nullptr);

struct GradCheckOptions {
  long samples_per_tensor = 12;  // < 0 checks every coordinate
  std::uint64_t seed = 1;
  bool graph_mode = true;
  bool identity_mode = true;
};

struct GradCheckSummary {
  GradCheckReport identity;
  GradCheckReport graph;
  bool passed = true;
  double max_rel_error = 0.0;
};

/// Actor + critic loss of a two-agent network, checked against central
/// differences in both shift-operator modes.
GradCheckSummary run_gradcheck(const ModelConfig& model, const GradCheckOptions& options);

struct MetricStat {
  double mean = 0.0;
  double stddev = 0.0;
};

struct ReportEntry {
  std::string controller;
  int episodes = 0;
  std::map<std::string, MetricStat> metrics;
};

/// Metric columns summarised by the report.
const std::vector<std::string>& report_metrics();

/// Reads episodes.csv from every run directory and summarises each
/// controller over all of its episodes (population std).
std::vector<ReportEntry> build_report(const std::vector<std::string>& run_dirs);
std::string report_table(const std::vector<ReportEntry>& entries);
std::string report_json(const std::vector<ReportEntry>& entries);

/// Command-line entry point.
int run_cli(int argc, char** argv);

}  // namespace tsc
