#include "tsc/harness.hpp"

#include "tsc/checkpoint.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>
#include <stdexcept>

namespace tsc {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

namespace {

std::string num(double v) {
  std::ostringstream ss;
  ss << std::setprecision(12) << v;
  return ss.str();
}

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

Json summary_json(const EpisodeSummary& s) {
  return {{"avg_queue", s.avg_queue},
          {"avg_speed", s.avg_speed},
          {"avg_trip_delay", s.avg_trip_delay},
          {"avg_intersection_delay", s.avg_intersection_delay},
          {"episode_reward", s.episode_reward},
          {"completed_trips", s.completed_trips}};
}

void write_eval_files(const EvaluationResult& eval, const ExperimentConfig& config,
                      const fs::path& dir, bool per_step_stats) {
  fs::create_directories(dir);
  {
    auto out = open_out(dir / "metrics.csv");
    if (per_step_stats) {
      write_step_stats_csv(out, eval);
    } else {
      write_metrics_csv(out, eval.streams.front());
    }
  }
  {
    auto out = open_out(dir / "trips.csv");
    write_trips_csv(out, eval.trips, per_step_stats);
  }
  {
    auto out = open_out(dir / "episodes.csv");
    write_episodes_csv(out, eval);
  }
  Json summary;
  summary["controller"] = eval.controller;
  summary["episodes"] = eval.episodes.size();
  summary["seed"] = config.seed;
  summary["mean"] = summary_json(eval.mean());
  summary["std"] = summary_json(eval.stddev());
  auto out = open_out(dir / "summary.json");
  out << summary.dump(2) << "\n";
}

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) cells.push_back(cell);
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

// ------------------------------------------------------------------ models

std::unique_ptr<Controller> make_controller(const ExperimentConfig& config, const RoadNetwork& net,
                                            const DiffusionOperator& op) {
  switch (parse_controller_kind(config.baseline.controller)) {
    case ControllerKind::kFixedTime:
      return std::make_unique<FixedTimeController>(config.baseline.cycle);
    case ControllerKind::kMaxPressure:
      return std::make_unique<MaxPressureController>();
    case ControllerKind::kIa2cAblation:
    case ControllerKind::kAggA2c: {
      if (config.baseline.checkpoint_dir.empty()) {
        throw std::invalid_argument("learned controllers need baseline.checkpoint_dir (or --checkpoint)");
      }
      std::vector<AgentModel> models = load_models(config.baseline.checkpoint_dir, net.num_nodes());
      if (config.baseline.controller == "ia2c-ablation") {
        return ia2c_ablation(net, op, std::move(models), config.train.wave_scale, config.baseline.greedy);
      }
      return std::make_unique<LearnedController>("agg-a2c", net, op, std::move(models), config.agg,
                                                 config.train.mode, config.train.wave_scale,
                                                 config.baseline.greedy);
    }
  }
  throw std::logic_error("unhandled controller kind");
}

void save_models(const std::string& dir, const std::vector<AgentModel>& models) {
  fs::create_directories(dir);
  for (std::size_t i = 0; i < models.size(); ++i) {
    const std::string stem = (fs::path(dir) / ("agent_" + std::to_string(i))).string();
    save_checkpoint(stem + ".ckpt", models[i].net);
    if (models[i].critic_net) save_checkpoint(stem + "_critic.ckpt", *models[i].critic_net);
  }
}

std::vector<AgentModel> load_models(const std::string& dir, int num_agents) {
  std::vector<AgentModel> models;
  for (int i = 0; i < num_agents; ++i) {
    const fs::path path = fs::path(dir) / ("agent_" + std::to_string(i) + ".ckpt");
    if (!fs::exists(path)) {
      if (i == 1) break;  // shared model
      throw std::runtime_error("missing checkpoint " + path.string());
    }
    AgentModel m;
    m.net = load_checkpoint(path.string());
    const fs::path critic = fs::path(dir) / ("agent_" + std::to_string(i) + "_critic.ckpt");
    if (fs::exists(critic)) {
      m.critic_net = load_checkpoint(critic.string());
      m.critic_target = *m.critic_net;
    }
    m.target = m.net;
    models.push_back(std::move(m));
  }
  return models;
}

// --------------------------------------------------------------------- CSV

void write_metrics_csv(std::ostream& out, const std::vector<MetricsSnapshot>& stream) {
  out << "step,avg_queue,avg_speed,avg_reward,avg_intersection_delay\n";
  for (const MetricsSnapshot& m : stream) {
    out << m.step << ',' << num(m.avg_queue) << ',' << num(m.avg_speed) << ',' << num(m.avg_reward)
        << ',' << num(m.avg_intersection_delay) << '\n';
  }
}

void write_step_stats_csv(std::ostream& out, const EvaluationResult& eval) {
  out << "step,avg_queue,avg_queue_std,avg_speed,avg_speed_std,avg_reward,avg_reward_std,"
         "avg_intersection_delay,avg_intersection_delay_std\n";
  for (std::size_t t = 0; t < eval.per_step.size(); ++t) {
    out << t + 1;
    for (const StepStats& s : eval.per_step[t]) out << ',' << num(s.mean) << ',' << num(s.stddev);
    out << '\n';
  }
}

void write_trips_csv(std::ostream& out, const std::vector<TripRecord>& trips, bool with_episode) {
  if (with_episode) out << "episode,";
  out << "vehicle_id,depart_s,arrive_s,trip_delay_s,intersection_delay_s\n";
  for (const TripRecord& t : trips) {
    if (with_episode) out << t.episode << ',';
    out << t.vehicle_id << ',' << num(t.depart_s) << ',' << num(t.arrive_s) << ','
        << num(t.trip_delay_s) << ',' << num(t.intersection_delay_s) << '\n';
  }
}

void write_episodes_csv(std::ostream& out, const EvaluationResult& eval) {
  out << "controller,episode,avg_queue,avg_speed,avg_trip_delay,avg_intersection_delay,"
         "episode_reward,completed_trips\n";
  for (std::size_t e = 0; e < eval.episodes.size(); ++e) {
    const EpisodeSummary& s = eval.episodes[e];
    out << eval.controller << ',' << e << ',' << num(s.avg_queue) << ',' << num(s.avg_speed) << ','
        << num(s.avg_trip_delay) << ',' << num(s.avg_intersection_delay) << ','
        << num(s.episode_reward) << ',' << s.completed_trips << '\n';
  }
}

void write_train_log_csv(std::ostream& out, const std::vector<TrainLogRow>& log) {
  out << "episode,steps,mean_episode_reward,actor_loss,critic_loss,entropy\n";
  for (const TrainLogRow& r : log) {
    out << r.episode << ',' << r.steps << ',' << num(r.mean_episode_reward) << ','
        << num(r.actor_loss) << ',' << num(r.critic_loss) << ',' << num(r.entropy) << '\n';
  }
}

// --------------------------------------------------------------------- runs

EvaluationResult run_simulate(const ExperimentConfig& config, const std::string& out_dir) {
  const RoadNetwork net = config.build_network();
  const DiffusionOperator op = config.build_operator(net);
  auto controller = make_controller(config, net, op);
  Simulator env(net, config.sim, config.flows);
  EvaluationResult eval = evaluate(env, *controller, 1, config.seed);
  write_eval_files(eval, config, out_dir, false);
  return eval;
}

EvaluationResult run_evaluate(const ExperimentConfig& config, const std::string& out_dir) {
  const RoadNetwork net = config.build_network();
  const DiffusionOperator op = config.build_operator(net);
  auto controller = make_controller(config, net, op);
  Simulator env(net, config.sim, config.flows);
  EvaluationResult eval = evaluate(env, *controller, config.baseline.eval_episodes, config.seed);
  write_eval_files(eval, config, out_dir, true);
  return eval;
}

TrainResult run_train(const ExperimentConfig& config, const std::string& out_dir,
                      std::ostream* progress) {
  const RoadNetwork net = config.build_network();
  const DiffusionOperator op = config.build_operator(net);
  const TrainSetup setup = config.train_setup(net, op);
  fs::create_directories(out_dir);
  {
    auto cfg = open_out(fs::path(out_dir) / "config.json");
    cfg << config_to_string(config);
  }
  auto log_out = open_out(fs::path(out_dir) / "train_log.csv");
  log_out << "episode,steps,mean_episode_reward,actor_loss,critic_loss,entropy\n";
  TrainResult result = train(setup, {}, [&](const TrainLogRow& r) {
    log_out << r.episode << ',' << r.steps << ',' << num(r.mean_episode_reward) << ','
            << num(r.actor_loss) << ',' << num(r.critic_loss) << ',' << num(r.entropy) << '\n';
    log_out.flush();
    if (progress) {
      *progress << "episode " << r.episode << "  steps " << r.steps << "  reward "
                << num(r.mean_episode_reward) << "  entropy " << num(r.entropy) << "\n";
    }
  });
  save_models((fs::path(out_dir) / "checkpoints").string(), result.models);
  Json summary;
  summary["episodes"] = result.log.size();
  summary["steps"] = config.train.total_steps;
  summary["clamped_log_probs"] = result.clamped_logs;
  if (!result.log.empty()) summary["final_mean_episode_reward"] = result.log.back().mean_episode_reward;
  auto out = open_out(fs::path(out_dir) / "summary.json");
  out << summary.dump(2) << "\n";
  return result;
}

// ---------------------------------------------------------------- gradcheck

GradCheckSummary run_gradcheck(const ModelConfig& model, const GradCheckOptions& options) {
  const RoadNetwork net = RoadNetwork::grid(1, 2);
  const DiffusionOperator op = build_operator(net, 0.75, 2);
  RandomStream rng(options.seed, StreamPurpose::kTest, 0);
  const int rows = 2;

  std::vector<Mat> entries(model.K, Mat(rows, model.input_dim()));
  for (Mat& e : entries) {
    for (Eigen::Index r = 0; r < rows; ++r) {
      for (int c = 0; c < model.wave_dim; ++c) e(r, c) = 2.0 * rng.uniform();
      for (int c = model.wave_dim; c < model.input_dim(); ++c) e(r, c) = rng.uniform() < 0.3 ? 1.0 : 0.0;
    }
  }
  std::vector<int> actions(rows);
  std::vector<double> adv(rows), returns(rows);
  for (int r = 0; r < rows; ++r) {
    actions[r] = static_cast<int>(rng.below(static_cast<std::uint32_t>(model.num_actions)));
    adv[r] = 2.0 * rng.uniform() - 1.0;
    returns[r] = 2.0 * rng.uniform() - 1.0;
  }

  auto check = [&](const Gso& gso, std::uint32_t index) {
    AgentNet agent(model);
    agent.init(options.seed, index);
    // Nonzero actor and bias weights so every parameter has a gradient path.
    RandomStream perturb(options.seed, StreamPurpose::kTest, 100 + index);
    for (std::size_t i = 0; i < agent.store().size(); ++i) {
      Param& p = agent.store().mutable_param(i);
      for (Eigen::Index k = 0; k < p.value.size(); ++k) p.value.data()[k] += 0.1 * (2.0 * perturb.uniform() - 1.0);
    }
    auto loss = [&](AgentNet& a) {
      const TrunkOutput out = a.forward(entries, gso);
      return actor_loss(out.probs, actions, adv, 0.01).loss + critic_loss(out.values, returns).loss;
    };
    auto analytic = [&](AgentNet& a) {
      a.store().zero_grad();
      const TrunkOutput out = a.forward(entries, gso);
      a.backward(actor_loss(out.probs, actions, adv, 0.01).dlogits,
                 critic_loss(out.values, returns).dvalues);
    };
    return grad_check(agent, loss, analytic, 1e-5, options.samples_per_tensor, options.seed);
  };

  GradCheckSummary s;
  if (options.identity_mode) {
    s.identity = check(Gso::make_identity(), 0);
    s.passed = s.passed && s.identity.passed();
    s.max_rel_error = std::max(s.max_rel_error, s.identity.max_rel_error);
  }
  if (options.graph_mode) {
    s.graph = check(Gso::from_operator(op, model.k_tap), 1);
    s.passed = s.passed && s.graph.passed();
    s.max_rel_error = std::max(s.max_rel_error, s.graph.max_rel_error);
  }
  return s;
}

// ------------------------------------------------------------------- report

const std::vector<std::string>& report_metrics() {
  static const std::vector<std::string> names = {"avg_queue", "avg_speed", "avg_trip_delay",
                                                 "avg_intersection_delay", "episode_reward"};
  return names;
}

std::vector<ReportEntry> build_report(const std::vector<std::string>& run_dirs) {
  if (run_dirs.empty()) throw std::invalid_argument("report needs at least one run directory");
  std::vector<std::string> order;
  std::map<std::string, std::map<std::string, std::vector<double>>> values;
  for (const std::string& dir : run_dirs) {
    const fs::path path = fs::path(dir) / "episodes.csv";
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw std::runtime_error(path.string() + " is empty");
    const std::vector<std::string> header = split_csv_line(line);
    auto column = [&](const std::string& name) {
      const auto it = std::find(header.begin(), header.end(), name);
      if (it == header.end()) {
        throw std::runtime_error(path.string() + " has no column '" + name + "'");
      }
      return static_cast<std::size_t>(it - header.begin());
    };
    const std::size_t ctrl_col = column("controller");
    std::vector<std::size_t> cols;
    for (const std::string& m : report_metrics()) cols.push_back(column(m));
    int line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const std::vector<std::string> cells = split_csv_line(line);
      if (cells.size() != header.size()) {
        throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected " +
                                 std::to_string(header.size()) + " cells");
      }
      const std::string& ctrl = cells[ctrl_col];
      if (!values.count(ctrl)) order.push_back(ctrl);
      for (std::size_t k = 0; k < cols.size(); ++k) {
        double v = 0.0;
        try {
          v = std::stod(cells[cols[k]]);
        } catch (const std::exception&) {
          throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": column '" +
                                   report_metrics()[k] + "' is not a number");
        }
        values[ctrl][report_metrics()[k]].push_back(v);
      }
    }
  }
  std::vector<ReportEntry> entries;
  for (const std::string& ctrl : order) {
    ReportEntry e;
    e.controller = ctrl;
    for (const auto& [metric, xs] : values[ctrl]) {
      e.episodes = static_cast<int>(xs.size());
      double mean = 0.0;
      for (double x : xs) mean += x;
      mean /= static_cast<double>(xs.size());
      double var = 0.0;
      for (double x : xs) var += (x - mean) * (x - mean);
      var /= static_cast<double>(xs.size());
      e.metrics[metric] = {mean, std::sqrt(var)};
    }
    entries.push_back(std::move(e));
  }
  return entries;
}

std::string report_table(const std::vector<ReportEntry>& entries) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> head = {"controller", "episodes"};
  for (const std::string& m : report_metrics()) head.push_back(m);
  rows.push_back(head);
  for (const ReportEntry& e : entries) {
    std::vector<std::string> row = {e.controller, std::to_string(e.episodes)};
    for (const std::string& m : report_metrics()) {
      const MetricStat& s = e.metrics.at(m);
      std::ostringstream cell;
      cell << std::fixed << std::setprecision(3) << s.mean << " +- " << s.stddev;
      row.push_back(cell.str());
    }
    rows.push_back(row);
  }
  std::vector<std::size_t> width(head.size(), 0);
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) width[c] = std::max(width[c], row[c].size());
  }
  std::ostringstream out;
  for (const auto& row : rows) {
    for (std::size_t c = 0; c < row.size(); ++c) {
      if (c > 0) out << "  ";
      out << (c == 0 ? std::left : std::right) << std::setw(static_cast<int>(width[c])) << row[c];
    }
    out << '\n';
  }
  return out.str();
}

std::string report_json(const std::vector<ReportEntry>& entries) {
  Json j = Json::array();
  for (const ReportEntry& e : entries) {
    Json item;
    item["controller"] = e.controller;
    item["episodes"] = e.episodes;
    for (const std::string& m : report_metrics()) {
      const MetricStat& s = e.metrics.at(m);
      item[m] = {{"mean", s.mean}, {"std", s.stddev}};
    }
    j.push_back(item);
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------- CLI

int run_cli(int argc, char** argv) {
  CLI::App app{"Traffic signal control testbed with topology-aware aggregation"};
  app.require_subcommand(0, 1);
  app.fallthrough();

  std::string config_path;
  std::vector<std::string> overrides;
  std::int64_t seed = -1;
  std::string out_dir;
  bool print_config = false;
  app.add_option("--config", config_path, "experiment config (JSON)");
  app.add_option("--set", overrides, "override a config key, e.g. train.gamma=0.95");
  app.add_option("--seed", seed, "experiment seed");
  app.add_option("--out", out_dir, "output directory (overrides output.dir)");
  app.add_flag("--print-config", print_config, "print the fully resolved config and exit");

  std::string controller;
  std::string checkpoint;
  int episodes = 0;

  auto* sim_cmd = app.add_subcommand("simulate", "run one episode under a controller");
  sim_cmd->add_option("--controller", controller, "fixed-time | max-pressure | ia2c-ablation | agg-a2c");
  sim_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory for learned controllers");

  auto* train_cmd = app.add_subcommand("train", "train agents");
  train_cmd->add_option("--controller", controller, "agg-a2c (default) or ia2c-ablation");
  long steps = -1;
  train_cmd->add_option("--steps", steps, "training step budget (overrides train.total_steps)");

  auto* eval_cmd = app.add_subcommand("evaluate", "evaluate a controller over several episodes");
  eval_cmd->add_option("--controller", controller, "fixed-time | max-pressure | ia2c-ablation | agg-a2c");
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint directory for learned controllers");
  eval_cmd->add_option("--episodes", episodes, "number of episodes (overrides baseline.eval_episodes)");

  auto* grad_cmd = app.add_subcommand("gradcheck", "compare analytic and numeric gradients");
  GradCheckOptions gopt;
  bool full = false;
  grad_cmd->add_option("--samples", gopt.samples_per_tensor, "coordinates checked per tensor");
  grad_cmd->add_flag("--full", full, "check every coordinate");

  auto* report_cmd = app.add_subcommand("report", "summarise episodes.csv files of run directories");
  std::vector<std::string> run_dirs;
  std::string json_path;
  report_cmd->add_option("runs", run_dirs, "run directories")->required();
  report_cmd->add_option("--json", json_path, "also write the summary as JSON to this file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    ExperimentConfig config = config_path.empty() ? ExperimentConfig::defaults() : load_config(config_path);
    for (const std::string& o : overrides) apply_override(config, o);
    if (seed >= 0) apply_override(config, "seed=" + std::to_string(seed));
    if (!out_dir.empty()) config.output_dir = out_dir;
    if (!controller.empty()) {
      parse_controller_kind(controller);
      config.baseline.controller = controller;
    }
    if (!checkpoint.empty()) config.baseline.checkpoint_dir = checkpoint;
    if (episodes > 0) config.baseline.eval_episodes = episodes;

    if (print_config) {
      std::cout << config_to_string(config);
      return 0;
    }
    if (app.got_subcommand(sim_cmd)) {
      const EvaluationResult r = run_simulate(config, config.output_dir);
      const EpisodeSummary s = r.mean();
      std::cout << r.controller << ": avg_queue " << num(s.avg_queue) << ", avg_speed "
                << num(s.avg_speed) << ", episode_reward " << num(s.episode_reward) << "\n"
                << "wrote " << config.output_dir << "\n";
      return 0;
    }
    if (app.got_subcommand(train_cmd)) {
      if (steps >= 0) config.train.total_steps = steps;
      if (config.baseline.controller == "ia2c-ablation") {
        config.agg = ia2c_aggregation();
      } else if (controller.empty() || config.baseline.controller != "agg-a2c") {
        config.baseline.controller = "agg-a2c";
      }
      const TrainResult r = run_train(config, config.output_dir, &std::cout);
      std::cout << "trained " << r.log.size() << " episodes; wrote " << config.output_dir << "\n";
      return 0;
    }
    if (app.got_subcommand(eval_cmd)) {
      const EvaluationResult r = run_evaluate(config, config.output_dir);
      const EpisodeSummary m = r.mean();
      const EpisodeSummary s = r.stddev();
      std::cout << r.controller << " over " << r.episodes.size() << " episodes: avg_queue "
                << num(m.avg_queue) << " +- " << num(s.avg_queue) << ", episode_reward "
                << num(m.episode_reward) << " +- " << num(s.episode_reward) << "\n"
                << "wrote " << config.output_dir << "\n";
      return 0;
    }
    if (app.got_subcommand(grad_cmd)) {
      if (full) gopt.samples_per_tensor = -1;
      gopt.seed = config.seed;
      ModelConfig model = config.model;
      model.K = config.agg.K;
      const GradCheckSummary g = run_gradcheck(model, gopt);
      auto show = [](const char* label, const GradCheckReport& r) {
        std::cout << label << ": checked " << r.checked << ", skipped at rectifier kinks "
                  << r.skipped_kinks << ", max relative error " << r.max_rel_error;
        if (!r.worst_param.empty()) std::cout << " (" << r.worst_param << "[" << r.worst_index << "])";
        if (!r.finite) std::cout << ", non-finite gradient in " << r.nonfinite_param;
        std::cout << "\n";
      };
      show("identity operator", g.identity);
      show("graph operator", g.graph);
      std::cout << "max relative error: " << g.max_rel_error << (g.passed ? "  PASS" : "  FAIL") << "\n";
      return g.passed ? 0 : 1;
    }
    if (app.got_subcommand(report_cmd)) {
      const auto entries = build_report(run_dirs);
      std::cout << report_table(entries);
      if (!json_path.empty()) {
        auto out = open_out(json_path);
        out << report_json(entries);
      }
      return 0;
    }
    std::cout << app.help();
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tsc
