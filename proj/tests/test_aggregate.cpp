#include "tsc/aggregate.hpp"
#include "tsc/netgraph.hpp"
#include "tsc/rng.hpp"

#include <doctest.h>

#include <stdexcept>

using namespace tsc;
using Eigen::MatrixXd;

namespace {

RoadNetwork random_graph(RandomStream& rng, int n) {
  std::vector<Edge> edges;
  for (int a = 0; a < n; ++a) {
    for (int b = 0; b < n; ++b) {
      if (a != b && rng.uniform() < 0.35) edges.push_back({a, b, 0.25 + rng.uniform(), 1});
    }
  }
  return RoadNetwork::from_edges(n, edges);
}

MatrixXd random_matrix(RandomStream& rng, int rows, int cols) {
  MatrixXd m(rows, cols);
  for (int i = 0; i < rows; ++i) {
    for (int j = 0; j < cols; ++j) m(i, j) = 2.0 * rng.uniform() - 1.0;
  }
  return m;
}

// Random matrix supported on the 1-hop neighbourhood (both directions).
MatrixXd random_local_operator(RandomStream& rng, const RoadNetwork& net) {
  const int n = net.num_nodes();
  MatrixXd p = MatrixXd::Zero(n, n);
  for (int i = 0; i < n; ++i) {
    p(i, i) = rng.uniform();
    for (int j : net.neighbors(i)) p(i, j) = rng.uniform();
  }
  return p;
}

// Dense evaluation of the bidirectional fixed-operator sequence.
MatrixXd dense_fixed(const DiffusionOperator& op, const std::vector<MatrixXd>& hist, int agent,
                     int K, bool double_identity) {
  const int n = op.num_nodes();
  const int f = static_cast<int>(hist.back().cols());
  const int T = static_cast<int>(hist.size());
  MatrixXd seq(K, f);
  for (int k = 0; k < K; ++k) {
    const MatrixXd y = T - 1 - k >= 0 ? hist[T - 1 - k] : MatrixXd::Zero(n, f);
    if (k == 0) {
      seq.row(0) = y.row(agent);
      continue;
    }
    MatrixXd m = MatrixXd::Zero(n, n);
    MatrixXd fp = MatrixXd::Identity(n, n), rp = MatrixXd::Identity(n, n);
    for (int j = 0; j < k; ++j) {
      m += (j == 0 && !double_identity) ? fp : MatrixXd(fp + rp);
      fp = op.fwd * fp;
      rp = op.rev * rp;
    }
    seq.row(k) = (m * y).row(agent);
  }
  return seq;
}

double max_abs(const MatrixXd& a, const MatrixXd& b) { return (a - b).cwiseAbs().maxCoeff(); }

}  // namespace

TEST_CASE("aggregate_step examples") {
  const RoadNetwork two = RoadNetwork::from_edges(2, {{0, 1}, {1, 0}});
  MatrixXd p(2, 2);
  p << 0.5, 0.25, 0.25, 0.5;
  MatrixXd s(2, 1);
  s << 1, 0;
  const MatrixXd out = aggregate_step(two, p, s);
  CHECK(out(0, 0) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK(out(1, 0) == doctest::Approx(0.25).epsilon(1e-15));

  const MatrixXd y = MatrixXd::Random(2, 3);
  CHECK(max_abs(aggregate_step(two, MatrixXd::Identity(2, 2), y), y) == 0.0);
  CHECK(aggregate_step(two, p, MatrixXd::Zero(2, 3)).isZero(0.0));
}

TEST_CASE("aggregate_step errors") {
  const RoadNetwork path = RoadNetwork::from_edges(3, {{0, 1}, {1, 2}});
  CHECK_THROWS_AS(aggregate_step(path, MatrixXd::Identity(2, 2), MatrixXd::Zero(3, 1)),
                  std::invalid_argument);
  CHECK_THROWS_AS(aggregate_step(path, MatrixXd::Identity(3, 3), MatrixXd::Zero(2, 1)),
                  std::invalid_argument);
  MatrixXd far = MatrixXd::Identity(3, 3);
  far(0, 2) = 0.5;
  CHECK_THROWS_AS(aggregate_step(path, far, MatrixXd::Zero(3, 1)), std::invalid_argument);
}

TEST_CASE("fixed-operator sequence matches dense evaluation on random graphs") {
  RandomStream rng(7, StreamPurpose::kTest, 1);
  double worst = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const int n = 1 + static_cast<int>(rng.below(8));
    const int K = 1 + static_cast<int>(rng.below(4));
    const int f = 1 + static_cast<int>(rng.below(3));
    const bool dbl = trial % 2 == 0;
    const RoadNetwork net = random_graph(rng, n);
    const DiffusionOperator op = build_operator(net, 0.75, 3);
    const int T = 1 + static_cast<int>(rng.below(K + 2));
    std::vector<MatrixXd> hist;
    for (int t = 0; t < T; ++t) hist.push_back(random_matrix(rng, n, f));
    const auto seqs = build_sequence(net, op, hist, {K, AggregationMode::kFixedBidirectional, dbl});
    REQUIRE(seqs.size() == static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
      REQUIRE(seqs[i].length() == K);
      CHECK(seqs[i].owner == i);
      worst = std::max(worst, max_abs(seqs[i].entries, dense_fixed(op, hist, i, K, dbl)));
    }
  }
  CHECK(worst < 1e-12);
}

TEST_CASE("streaming builder matches dense evaluation at every tick") {
  RandomStream rng(11, StreamPurpose::kTest, 2);
  const RoadNetwork net = RoadNetwork::grid(2, 3);
  const DiffusionOperator op = build_operator(net, 0.75, 3);
  SequenceBuilder b(net, op, 2, {4});
  std::vector<MatrixXd> hist;
  for (int t = 0; t < 12; ++t) {
    hist.push_back(random_matrix(rng, 6, 2));
    b.push(hist.back());
    for (int i = 0; i < 6; ++i) {
      CHECK(max_abs(b.agent_sequence(i), dense_fixed(op, hist, i, 4, true)) < 1e-12);
    }
  }
  b.reset();
  CHECK(b.ticks() == 0);
  CHECK(b.agent_sequence(0).isZero(0.0));
}

TEST_CASE("time-varying product matches dense evaluation") {
  RandomStream rng(13, StreamPurpose::kTest, 3);
  // path a-b-c with unit impulses plus random graphs
  for (int trial = 0; trial < 50; ++trial) {
    const RoadNetwork net = trial == 0 ? RoadNetwork::from_edges(3, {{0, 1}, {1, 0}, {1, 2}, {2, 1}})
                                       : random_graph(rng, 2 + static_cast<int>(rng.below(7)));
    const int n = net.num_nodes();
    const int K = trial == 0 ? 3 : 1 + static_cast<int>(rng.below(4));
    const DiffusionOperator op = build_operator(net, 0.75, 3);
    SequenceBuilder b(net, op, 1, {K, AggregationMode::kTimeVarying});
    std::vector<MatrixXd> ys, ps;
    for (int t = 0; t < K + 3; ++t) {
      MatrixXd y = trial == 0 ? MatrixXd(MatrixXd::Zero(n, 1)) : random_matrix(rng, n, 1);
      if (trial == 0) y(t % n, 0) = 1.0;
      ys.push_back(y);
      ps.push_back(random_local_operator(rng, net));
      b.push(ys.back(), ps.back());
      const int T = static_cast<int>(ys.size());
      for (int k = 0; k < K; ++k) {
        MatrixXd expect = T - 1 - k >= 0 ? ys[T - 1 - k] : MatrixXd::Zero(n, 1);
        for (int s = T - k; s <= T - 1 && T - 1 - k >= 0; ++s) expect = ps[s] * expect;
        for (int i = 0; i < n; ++i) CHECK(std::abs(b.agent_sequence(i)(k, 0) - expect(i, 0)) < 1e-12);
      }
    }
  }
}

TEST_CASE("K = 1 is the local observation with no communication") {
  const RoadNetwork net = RoadNetwork::grid(3, 3);
  const DiffusionOperator op = build_operator(net, 0.75, 3);
  SequenceBuilder b(net, op, 4, {1});
  RandomStream rng(3, StreamPurpose::kTest, 4);
  for (int t = 0; t < 5; ++t) {
    const MatrixXd y = random_matrix(rng, 9, 4);
    b.push(y);
    for (int i = 0; i < 9; ++i) CHECK(b.agent_sequence(i) == y.row(i));
  }
  CHECK_FALSE(b.needs_exchange());
  CHECK(b.exchanges() == 0);
}

TEST_CASE("edgeless graph entries are multiples of the stale local signal") {
  const RoadNetwork net = RoadNetwork::from_edges(3, {});
  const DiffusionOperator op = build_operator(net, 0.75, 3);
  RandomStream rng(5, StreamPurpose::kTest, 5);
  std::vector<MatrixXd> hist;
  for (int t = 0; t < 4; ++t) hist.push_back(random_matrix(rng, 3, 2));
  const auto seqs = build_sequence(net, op, hist, {4});
  for (int i = 0; i < 3; ++i) {
    for (int k = 0; k < 4; ++k) {
      const double mult = k == 0 ? 1.0 : 2.0 * k;
      CHECK(max_abs(seqs[i].entries.row(k), mult * hist[3 - k].row(i)) < 1e-14);
    }
  }
}

TEST_CASE("linearity") {
  RandomStream rng(17, StreamPurpose::kTest, 6);
  const RoadNetwork net = random_graph(rng, 6);
  const DiffusionOperator op = build_operator(net, 0.75, 3);
  std::vector<MatrixXd> x, y, z;
  const double a = 1.7, c = -0.3;
  for (int t = 0; t < 4; ++t) {
    x.push_back(random_matrix(rng, 6, 3));
    y.push_back(random_matrix(rng, 6, 3));
    z.push_back(a * x.back() + c * y.back());
  }
  const auto sx = build_sequence(net, op, x, {4});
  const auto sy = build_sequence(net, op, y, {4});
  const auto sz = build_sequence(net, op, z, {4});
  for (int i = 0; i < 6; ++i) {
    CHECK(max_abs(sz[i].entries, a * sx[i].entries + c * sy[i].entries) < 1e-10);
  }
}

TEST_CASE("locality holds for every pair on random graphs") {
  RandomStream rng(19, StreamPurpose::kTest, 7);
  for (int trial = 0; trial < 30; ++trial) {
    const RoadNetwork net = random_graph(rng, 2 + static_cast<int>(rng.below(7)));
    const DiffusionOperator op = build_operator(net, 0.75, 3);
    const AggregationOptions opts{1 + static_cast<int>(rng.below(4))};
    for (int i = 0; i < net.num_nodes(); ++i) {
      for (int j = 0; j < net.num_nodes(); ++j) CHECK(locality_check(net, op, opts, j, i));
    }
  }
}

TEST_CASE("perturbing the agent itself changes entry 0") {
  const RoadNetwork net = RoadNetwork::grid(3, 3);
  const DiffusionOperator op = build_operator(net, 0.75, 3);
  std::vector<MatrixXd> hist(3, MatrixXd::Zero(9, 1));
  auto changed = hist;
  changed.back()(4, 0) = 1.0;
  const auto a = build_sequence(net, op, hist)[4].entries;
  const auto b = build_sequence(net, op, changed)[4].entries;
  CHECK(a(0, 0) != b(0, 0));
  // a node two hops away leaves entries 0 and 1 untouched
  std::vector<MatrixXd> far(3, MatrixXd::Zero(9, 1));
  for (auto& y : far) y(0, 0) = 1.0;
  const auto c = build_sequence(net, op, far)[8].entries;
  CHECK(c(0, 0) == 0.0);
  CHECK(c(1, 0) == 0.0);
}

TEST_CASE("one exchange per neighbour per tick") {
  const RoadNetwork net = RoadNetwork::grid(3, 3);
  const DiffusionOperator op = build_operator(net, 0.75, 3);
  long degree_sum = 0;
  for (int i = 0; i < 9; ++i) degree_sum += static_cast<long>(net.neighbors(i).size());
  SequenceBuilder b(net, op, 2, {3});
  for (int t = 0; t < 7; ++t) b.push(MatrixXd::Zero(9, 2));
  CHECK(b.exchanges() == 7 * degree_sum);
}

TEST_CASE("short history without padding is rejected") {
  const RoadNetwork net = RoadNetwork::grid(2, 2);
  const DiffusionOperator op = build_operator(net, 0.75, 3);
  std::vector<MatrixXd> hist(2, MatrixXd::Zero(4, 1));
  CHECK_THROWS_AS(build_sequence(net, op, hist, {3}, false), std::invalid_argument);
  CHECK_NOTHROW(build_sequence(net, op, hist, {3}, true));
  CHECK_THROWS_AS(build_sequence(net, op, {}, {3}), std::invalid_argument);
}

TEST_CASE("json dump lists owners and entries") {
  const RoadNetwork net = RoadNetwork::grid(1, 2);
  const DiffusionOperator op = build_operator(net, 0.75, 3);
  const auto seqs = build_sequence(net, op, {MatrixXd::Ones(2, 1)}, {2});
  const std::string s = sequences_to_json(seqs);
  CHECK(s.find("\"owner\": 1") != std::string::npos);
  CHECK(s.find("\"entries\"") != std::string::npos);
}
