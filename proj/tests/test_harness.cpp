#include "tsc/config.hpp"
#include "tsc/harness.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

using namespace tsc;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tsc_test_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

int cli(std::vector<std::string> args) {
  args.insert(args.begin(), "tsc");
  std::vector<char*> argv;
  for (auto& a : args) argv.push_back(a.data());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

void write_file(const fs::path& p, const std::string& text) {
  std::ofstream out(p);
  out << text;
}

}  // namespace

TEST_CASE("defaults follow the documented table") {
  const ExperimentConfig c = ExperimentConfig::defaults();
  CHECK(c.sim.delta_t == 5.0);
  CHECK(c.sim.horizon_steps == 720);
  CHECK(c.train.batch_size == 120);
  CHECK(c.train.gamma == 0.99);
  CHECK(c.train.spatial_alpha == 0.75);
  CHECK(c.train.entropy_coef == 0.01);
  CHECK(c.train.lr_actor == 5e-4);
  CHECK(c.train.lr_critic == 2.5e-4);
  CHECK(c.agg.K == 3);
  CHECK(c.model.k_tap == 2);
  CHECK(c.model.hidden == 64);
  CHECK(c.network.rows == 5);
  CHECK(c.network.cols == 5);
  CHECK(c.flows.size() == 6);
}

TEST_CASE("config round trip") {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.network.kind = "edges";
  c.network.num_nodes = 3;
  c.network.edges = {{0, 1, 2.0, 2}, {1, 2, 1.0, 3}, {2, 0, 0.5, 1}};
  c.train.gamma = 0.95;
  c.agg.double_identity = false;
  c.seed = 17;
  const std::string text = config_to_string(c);
  const ExperimentConfig back = config_from_string(text);
  CHECK(config_to_string(back) == text);
  CHECK(back.network.edges.size() == 3);
  CHECK(back.network.edges[2].weight == 0.5);
  CHECK(back.train.gamma == 0.95);
  CHECK(back.seed == 17);
  CHECK(back.train.seed == 17);
}

TEST_CASE("unknown keys are rejected") {
  CHECK_THROWS_AS(config_from_string(R"({"trian": {}})"), std::invalid_argument);
  CHECK_THROWS_AS(config_from_string(R"({"train": {"gama": 0.9}})"), std::invalid_argument);
  CHECK_NOTHROW(config_from_string(R"({"train": {"gamma": 0.9}})"));
  ExperimentConfig c = ExperimentConfig::defaults();
  CHECK_THROWS_AS(apply_override(c, "train.nope=1"), std::invalid_argument);
  CHECK_THROWS_AS(apply_override(c, "train.gamma"), std::invalid_argument);
}

TEST_CASE("overrides") {
  ExperimentConfig c = ExperimentConfig::defaults();
  apply_override(c, "train.gamma=0.95");
  apply_override(c, "network.rows=3");
  apply_override(c, "baseline.controller=max-pressure");
  apply_override(c, "agg.mode=time-varying");
  CHECK(c.train.gamma == 0.95);
  CHECK(c.network.rows == 3);
  CHECK(c.baseline.controller == "max-pressure");
  CHECK(c.agg.mode == AggregationMode::kTimeVarying);
  CHECK_THROWS_AS(apply_override(c, "train.gamma=\"x\""), std::invalid_argument);
}

TEST_CASE("invalid values are rejected") {
  ExperimentConfig c = ExperimentConfig::defaults();
  c.train.gamma = 1.5;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ExperimentConfig::defaults();
  c.agg.K = 0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("simulate twice gives identical bytes") {
  const fs::path a = scratch("sim_a"), b = scratch("sim_b");
  const std::vector<std::string> common{"--set", "network.rows=2", "--set", "network.cols=2",
                                        "--set", "sim.horizon_steps=120", "--seed", "7"};
  auto args = [&](const fs::path& out) {
    std::vector<std::string> v = common;
    v.insert(v.end(), {"--out", out.string(), "simulate", "--controller", "fixed-time"});
    return v;
  };
  REQUIRE(cli(args(a)) == 0);
  REQUIRE(cli(args(b)) == 0);
  CHECK(slurp(a / "metrics.csv") == slurp(b / "metrics.csv"));
  CHECK(slurp(a / "trips.csv") == slurp(b / "trips.csv"));
  CHECK(!slurp(a / "metrics.csv").empty());
  CHECK(fs::exists(a / "summary.json"));
}

TEST_CASE("cli rejects unknown subcommands and flags") {
  CHECK(cli({"fly"}) != 0);
  CHECK(cli({"simulate", "--bogus"}) != 0);
  CHECK(cli({"--set", "train.nope=1", "simulate"}) != 0);
}

TEST_CASE("gradcheck subcommand passes") {
  CHECK(cli({"gradcheck", "--samples", "4"}) == 0);
}

TEST_CASE("gradcheck on the default model") {
  GradCheckOptions opt;
  opt.samples_per_tensor = 6;
  const GradCheckSummary s = run_gradcheck(ModelConfig{}, opt);
  CHECK(s.passed);
  CHECK(s.identity.checked > 0);
  CHECK(s.graph.checked > 0);
  CHECK(s.max_rel_error < 1e-4);
}

TEST_CASE("train then evaluate through the cli") {
  const fs::path out = scratch("train");
  const std::vector<std::string> common{"--set", "network.rows=1", "--set", "network.cols=2",
                                        "--set", "sim.horizon_steps=120", "--set", "model.hidden=8",
                                        "--set", "model.encoder_units=8"};
  auto with = [&](std::vector<std::string> tail) {
    std::vector<std::string> v = common;
    v.insert(v.end(), tail.begin(), tail.end());
    return v;
  };
  REQUIRE(cli(with({"--out", out.string(), "train", "--steps", "480"})) == 0);
  CHECK(fs::exists(out / "train_log.csv"));
  CHECK(fs::exists(out / "checkpoints" / "agent_1.ckpt"));
  const fs::path ev = scratch("eval");
  REQUIRE(cli(with({"--out", ev.string(), "evaluate", "--controller", "agg-a2c", "--checkpoint",
                    (out / "checkpoints").string(), "--episodes", "2"})) == 0);
  CHECK(fs::exists(ev / "episodes.csv"));
  const auto report = build_report({ev.string()});
  REQUIRE(report.size() == 1);
  CHECK(report[0].controller == "agg-a2c");
  CHECK(report[0].episodes == 2);
}

TEST_CASE("report fixtures") {
  const fs::path r1 = scratch("rep1"), r2 = scratch("rep2");
  const std::string header =
      "controller,episode,avg_queue,avg_speed,avg_trip_delay,avg_intersection_delay,"
      "episode_reward,completed_trips\n";
  write_file(r1 / "episodes.csv", header + "fixed-time,0,2,10,30,4,-1,5\nfixed-time,1,4,6,50,8,-3,7\n");
  write_file(r2 / "episodes.csv", header + "max-pressure,0,1.5,12,20,2,-0.5,9\n");

  const auto rep = build_report({r1.string(), r2.string()});
  REQUIRE(rep.size() == 2);
  const ReportEntry& ft = rep[0].controller == "fixed-time" ? rep[0] : rep[1];
  const ReportEntry& mp = rep[0].controller == "fixed-time" ? rep[1] : rep[0];
  CHECK(ft.episodes == 2);
  CHECK(std::abs(ft.metrics.at("avg_queue").mean - 3.0) < 1e-12);
  CHECK(std::abs(ft.metrics.at("avg_queue").stddev - 1.0) < 1e-12);
  CHECK(std::abs(ft.metrics.at("avg_speed").mean - 8.0) < 1e-12);
  CHECK(std::abs(ft.metrics.at("avg_trip_delay").stddev - 10.0) < 1e-12);
  CHECK(std::abs(ft.metrics.at("episode_reward").mean + 2.0) < 1e-12);
  for (const auto& name : report_metrics()) CHECK(mp.metrics.at(name).stddev == 0.0);
  CHECK(mp.metrics.at("avg_intersection_delay").mean == 2.0);

  // two identical runs: means equal the run values, no spread
  const fs::path r3 = scratch("rep3");
  write_file(r3 / "episodes.csv", header + "max-pressure,0,1.5,12,20,2,-0.5,9\n");
  const auto twin = build_report({r2.string(), r3.string()});
  REQUIRE(twin.size() == 1);
  CHECK(twin[0].metrics.at("avg_queue").mean == 1.5);
  CHECK(twin[0].metrics.at("avg_queue").stddev == 0.0);

  const std::string table = report_table(rep);
  CHECK(table.find("fixed-time") != std::string::npos);
  CHECK(report_json(rep).find("\"max-pressure\"") != std::string::npos);
}

TEST_CASE("report names the file and missing column") {
  const fs::path r = scratch("rep_bad");
  write_file(r / "episodes.csv", "controller,episode,avg_queue\nfixed-time,0,1\n");
  try {
    build_report({r.string()});
    FAIL("expected an error");
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    CHECK(msg.find("episodes.csv") != std::string::npos);
    CHECK(msg.find("avg_speed") != std::string::npos);
  }
  CHECK_THROWS(build_report({(r / "missing").string()}));
}
