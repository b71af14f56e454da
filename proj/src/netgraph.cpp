#include "tsc/netgraph.hpp"

#include <algorithm>
#include <deque>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>

namespace tsc {

namespace {

std::vector<int> bfs_hops(int n, int source, const std::vector<std::vector<int>>& adj) {
  std::vector<int> dist(n, kUnreachable);
  std::deque<int> frontier{source};
  dist[source] = 0;
  while (!frontier.empty()) {
    const int u = frontier.front();
    frontier.pop_front();
    for (int v : adj[u]) {
      if (dist[v] == kUnreachable) {
        dist[v] = dist[u] + 1;
        frontier.push_back(v);
      }
    }
  }
  return dist;
}

}  // namespace

RoadNetwork RoadNetwork::grid(int rows, int cols, EdgeWeighting weighting, int lanes_per_edge) {
  if (rows < 1 || cols < 1) {
    throw std::invalid_argument("grid dimensions must be >= 1, got " + std::to_string(rows) +
                                "x" + std::to_string(cols));
  }
  std::vector<Edge> edges;
  auto id = [cols](int r, int c) { return r * cols + c; };
  for (int r = 0; r < rows; ++r) {
    for (int c = 0; c < cols; ++c) {
      const int u = id(r, c);
      if (r > 0) edges.push_back({u, id(r - 1, c), 1.0, lanes_per_edge});
      if (c + 1 < cols) edges.push_back({u, id(r, c + 1), 1.0, lanes_per_edge});
      if (r + 1 < rows) edges.push_back({u, id(r + 1, c), 1.0, lanes_per_edge});
      if (c > 0) edges.push_back({u, id(r, c - 1), 1.0, lanes_per_edge});
    }
  }
  RoadNetwork net = from_edges(rows * cols, std::move(edges), weighting);
  net.grid_ = GridShape{rows, cols};
  return net;
}

RoadNetwork RoadNetwork::from_edges(int num_nodes, std::vector<Edge> edges,
                                    EdgeWeighting weighting) {
  if (num_nodes < 1) throw std::invalid_argument("network needs at least one node");
  std::set<std::pair<int, int>> seen;
  for (Edge& e : edges) {
    if (e.from < 0 || e.from >= num_nodes || e.to < 0 || e.to >= num_nodes) {
      throw std::invalid_argument("edge (" + std::to_string(e.from) + "," + std::to_string(e.to) +
                                  ") references an unknown node");
    }
    if (e.from == e.to) {
      throw std::invalid_argument("self edge on node " + std::to_string(e.from));
    }
    if (!(e.weight >= 0.0)) {
      throw std::invalid_argument("negative weight on edge (" + std::to_string(e.from) + "," +
                                  std::to_string(e.to) + ")");
    }
    if (!seen.insert({e.from, e.to}).second) {
      throw std::invalid_argument("duplicate edge (" + std::to_string(e.from) + "," +
                                  std::to_string(e.to) + ")");
    }
    if (e.lanes < 1) e.lanes = 1;
    if (weighting == EdgeWeighting::kLaneCount) e.weight = static_cast<double>(e.lanes);
  }
  RoadNetwork net;
  net.num_nodes_ = num_nodes;
  net.edges_ = std::move(edges);
  net.finalize();
  return net;
}

void RoadNetwork::finalize() {
  out_.assign(num_nodes_, {});
  in_.assign(num_nodes_, {});
  both_.assign(num_nodes_, {});
  for (const Edge& e : edges_) {
    out_[e.from].push_back(e.to);
    in_[e.to].push_back(e.from);
  }
  std::vector<std::vector<int>> undirected(num_nodes_);
  for (int i = 0; i < num_nodes_; ++i) {
    std::sort(out_[i].begin(), out_[i].end());
    std::sort(in_[i].begin(), in_[i].end());
    std::set_union(out_[i].begin(), out_[i].end(), in_[i].begin(), in_[i].end(),
                   std::back_inserter(both_[i]));
  }
  hop_.resize(static_cast<std::size_t>(num_nodes_) * num_nodes_);
  undirected_hop_.resize(hop_.size());
  for (int s = 0; s < num_nodes_; ++s) {
    const auto d = bfs_hops(num_nodes_, s, out_);
    const auto u = bfs_hops(num_nodes_, s, both_);
    std::copy(d.begin(), d.end(), hop_.begin() + static_cast<std::ptrdiff_t>(s) * num_nodes_);
    std::copy(u.begin(), u.end(),
              undirected_hop_.begin() + static_cast<std::ptrdiff_t>(s) * num_nodes_);
  }
}

bool RoadNetwork::has_edge(int from, int to) const {
  const auto& o = out_[from];
  return std::binary_search(o.begin(), o.end(), to);
}

double RoadNetwork::weight(int from, int to) const {
  for (const Edge& e : edges_) {
    if (e.from == from && e.to == to) return e.weight;
  }
  return 0.0;
}

Eigen::MatrixXd RoadNetwork::weight_matrix() const {
  Eigen::MatrixXd w = Eigen::MatrixXd::Zero(num_nodes_, num_nodes_);
  for (const Edge& e : edges_) w(e.from, e.to) = e.weight;
  return w;
}

int hop_distance(const RoadNetwork& net, int i, int j) {
  if (i < 0 || j < 0 || i >= net.num_nodes() || j >= net.num_nodes()) {
    throw std::out_of_range("hop_distance: node id out of range");
  }
  return net.hop(i, j);
}

std::vector<Eigen::MatrixXd> matrix_powers(const Eigen::MatrixXd& m, int max_power) {
  std::vector<Eigen::MatrixXd> powers;
  powers.reserve(static_cast<std::size_t>(std::max(max_power, 0)) + 1);
  powers.push_back(Eigen::MatrixXd::Identity(m.rows(), m.cols()));
  for (int d = 1; d <= max_power; ++d) powers.push_back(powers.back() * m);
  return powers;
}

DiffusionOperator build_operator(const RoadNetwork& net, double restart_alpha, int depth,
                                 bool self_loop_fix) {
  if (!(restart_alpha > 0.0 && restart_alpha <= 1.0)) {
    throw std::invalid_argument("restart_alpha must lie in (0, 1]");
  }
  if (depth < 0) throw std::invalid_argument("diffusion depth must be >= 0");
  const int n = net.num_nodes();
  Eigen::MatrixXd w = net.weight_matrix();
  for (int i = 0; i < n; ++i) {
    const bool no_out = w.row(i).sum() <= 0.0;
    const bool no_in = w.col(i).sum() <= 0.0;
    if (!no_out && !no_in) continue;
    if (!self_loop_fix) {
      throw std::invalid_argument("node " + std::to_string(i) + " has zero " +
                                  (no_out ? "out" : "in") + "-degree");
    }
    w(i, i) += 1.0;
  }
  const Eigen::VectorXd out_deg = w.rowwise().sum();
  const Eigen::VectorXd in_deg = w.colwise().sum().transpose();

  DiffusionOperator op;
  op.restart_alpha = restart_alpha;
  op.depth = depth;
  op.fwd = w.transpose() * out_deg.cwiseInverse().asDiagonal();
  op.rev = w * in_deg.cwiseInverse().asDiagonal();
  op.fwd_powers = matrix_powers(op.fwd, depth);
  op.rev_powers = matrix_powers(op.rev, depth);
  return op;
}

Eigen::VectorXd rwr_distribution(const DiffusionOperator& op, int source,
                                 WalkDirection direction) {
  const int n = op.num_nodes();
  if (source < 0 || source >= n) throw std::out_of_range("rwr_distribution: unknown source node");
  const auto& powers = direction == WalkDirection::kForward ? op.fwd_powers : op.rev_powers;
  const double a = op.restart_alpha;
  Eigen::VectorXd p = Eigen::VectorXd::Zero(n);
  double scale = a;
  for (int d = 0; d <= op.depth; ++d) {
    p += scale * powers[d].col(source);
    scale *= 1.0 - a;
  }
  return p;
}

Eigen::MatrixXd diffusion_matrix(const DiffusionOperator& op, double forward_share) {
  if (!(forward_share >= 0.0 && forward_share <= 1.0)) {
    throw std::invalid_argument("forward_share must lie in [0, 1]");
  }
  const int n = op.num_nodes();
  Eigen::MatrixXd p(n, n);
  for (int i = 0; i < n; ++i) {
    Eigen::VectorXd row = forward_share * rwr_distribution(op, i, WalkDirection::kForward);
    if (forward_share < 1.0) {
      row += (1.0 - forward_share) * rwr_distribution(op, i, WalkDirection::kReverse);
    }
    p.row(i) = row.transpose();
  }
  return p;
}

}  // namespace tsc
