#pragma once

// Road-network topology of signal agents and the diffusion operators
// (forward/reverse random-walk transition matrices) derived from it.

#include <Eigen/Dense>

#include <limits>
#include <optional>
#include <vector>

namespace tsc {

inline constexpr int kUnreachable = std::numeric_limits<int>::max();

struct Edge {
  int from = 0;
  int to = 0;
  double weight = 1.0;
  int lanes = 1;
};

struct GridShape {
  int rows = 1;
  int cols = 1;
};

enum class EdgeWeighting { kUnit, kLaneCount };

/// Directed agent graph. Immutable after construction.
class RoadNetwork {
 public:
  /// 4-neighbour grid; node id = row * cols + col, edges in both directions.
  static RoadNetwork grid(int rows, int cols, EdgeWeighting weighting = EdgeWeighting::kUnit,
                          int lanes_per_edge = 3);
  /// Explicit directed edge list. Rejects duplicates, self edges, negative
  /// weights and out-of-range node ids.
  static RoadNetwork from_edges(int num_nodes, std::vector<Edge> edges,
                                EdgeWeighting weighting = EdgeWeighting::kUnit);

  int num_nodes() const { return num_nodes_; }
  const std::vector<Edge>& edges() const { return edges_; }
  const std::vector<int>& out_neighbors(int node) const { return out_[node]; }
  const std::vector<int>& in_neighbors(int node) const { return in_[node]; }
  /// Union of in- and out-neighbours, ascending.
  const std::vector<int>& neighbors(int node) const { return both_[node]; }

  bool has_edge(int from, int to) const;
  /// Affinity weight w_ij; 0 when there is no edge.
  double weight(int from, int to) const;
  Eigen::MatrixXd weight_matrix() const;

  /// Directed shortest hop count, kUnreachable when j cannot be reached.
  int hop(int i, int j) const { return hop_[static_cast<std::size_t>(i) * num_nodes_ + j]; }
  /// Hop count ignoring edge direction.
  int undirected_hop(int i, int j) const {
    return undirected_hop_[static_cast<std::size_t>(i) * num_nodes_ + j];
  }

  const std::optional<GridShape>& grid_shape() const { return grid_; }

 private:
  RoadNetwork() = default;
  void finalize();

  int num_nodes_ = 0;
  std::vector<Edge> edges_;
  std::vector<std::vector<int>> out_, in_, both_;
  std::vector<int> hop_, undirected_hop_;
  std::optional<GridShape> grid_;
};

int hop_distance(const RoadNetwork& net, int i, int j);

/// Column-stochastic transition pair and cached truncated powers.
struct DiffusionOperator {
  Eigen::MatrixXd fwd;  // W^T (D_out)^-1
  Eigen::MatrixXd rev;  // W (D_in)^-1
  double restart_alpha = 0.75;
  int depth = 0;
  std::vector<Eigen::MatrixXd> fwd_powers;  // fwd^0 .. fwd^depth
  std::vector<Eigen::MatrixXd> rev_powers;

  int num_nodes() const { return static_cast<int>(fwd.rows()); }
};

enum class WalkDirection { kForward, kReverse };

/// Builds the operator. Nodes with zero in- or out-degree get a unit self
/// loop unless `self_loop_fix` is false, in which case they are an error.
DiffusionOperator build_operator(const RoadNetwork& net, double restart_alpha, int depth,
                                 bool self_loop_fix = true);

/// alpha * sum_{d=0..D} (1-alpha)^d T^d e_source for T = fwd or rev.
Eigen::VectorXd rwr_distribution(const DiffusionOperator& op, int source,
                                 WalkDirection direction = WalkDirection::kForward);

/// Row i is the restart-walk distribution from node i; the forward and
/// reverse walks are mixed convexly with weight `forward_share` on forward.
Eigen::MatrixXd diffusion_matrix(const DiffusionOperator& op, double forward_share = 0.5);

/// [I, m, m^2, ..., m^max_power].
std::vector<Eigen::MatrixXd> matrix_powers(const Eigen::MatrixXd& m, int max_power);

}  // namespace tsc
