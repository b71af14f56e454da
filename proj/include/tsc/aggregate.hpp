#pragma once

// Topology-aware information aggregation.
//
// Each agent builds a K-entry traffic aggregation sequence
//   [y^0_t]_i, [y^1_t]_i, ..., [y^{K-1}_t]_i
// where entry k mixes observations from k ticks ago over a widening
// neighbourhood. The builder is recursive: every tick each agent receives
// one message (its neighbours' registers from the previous tick) per
// 1-hop neighbour and never reads anything further away.
//
// Signals are node-major matrices: row i holds node i's feature vector.

#include "tsc/netgraph.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <vector>

namespace tsc {

struct AggSequence {
  int owner = 0;
  long time = 0;
  Eigen::MatrixXd entries;  // K x F, row k = [y^k_t]_owner

  int length() const { return static_cast<int>(entries.rows()); }
};

enum class AggregationMode {
  /// Fixed bidirectional operator:
  /// y^k_t = sum_{j<k} (fwd^j + rev^j) y^0_{t-k}.
  kFixedBidirectional,
  /// Time-varying product y^k_t = P_t y^{k-1}_{t-1} with caller-supplied P_t.
  kTimeVarying,
};

struct AggregationOptions {
  int K = 3;
  AggregationMode mode = AggregationMode::kFixedBidirectional;
  /// Literal form counts the identity from both walk families (2I at power
  /// 0); when false it is counted once.
  bool double_identity = true;
};

/// output_i = sum_{j in N_i + {i}} P[i, j] * signal_j using neighbour reads
/// only. Throws if P couples non-adjacent nodes or dimensions disagree.
Eigen::MatrixXd aggregate_step(const RoadNetwork& net, const Eigen::MatrixXd& p,
                               const Eigen::MatrixXd& signal);

class SequenceBuilder {
 public:
  SequenceBuilder(const RoadNetwork& net, const DiffusionOperator& op, int features,
                  AggregationOptions options = {});

  /// Clears all history to zero (episode start).
  void reset();
  /// Fixed-operator tick: y0 is N x F.
  void push(const Eigen::MatrixXd& y0);
  /// Time-varying tick with this tick's operator P_t.
  void push(const Eigen::MatrixXd& y0, const Eigen::MatrixXd& p_t);

  /// K x F sequence of one agent at the latest tick.
  Eigen::MatrixXd agent_sequence(int agent) const;
  AggSequence sequence(int agent) const;
  std::vector<AggSequence> sequences() const;

  int K() const { return options_.K; }
  int features() const { return features_; }
  long ticks() const { return ticks_; }
  /// Number of neighbour messages received so far, summed over agents.
  long exchanges() const { return exchanges_; }
  /// Whether a tick needs any neighbour message at all.
  bool needs_exchange() const;

 private:
  Eigen::MatrixXd shift(const Eigen::MatrixXd& t, const Eigen::MatrixXd& x) const;

  const RoadNetwork* net_;
  Eigen::MatrixXd fwd_, rev_;
  int features_;
  AggregationOptions options_;
  // fixed mode: hist_[l] = y0_{t-l}; fwd_reg_[l][j] = fwd^j y0_{t-l}, j in 1..l-1
  std::vector<Eigen::MatrixXd> hist_;
  std::vector<std::vector<Eigen::MatrixXd>> fwd_reg_, rev_reg_;
  // time-varying mode: tv_[k] = y^k_t
  std::vector<Eigen::MatrixXd> tv_;
  long ticks_ = 0;
  long exchanges_ = 0;
};

/// Runs a fresh builder over `history` (oldest first) and returns every
/// agent's sequence at the last tick. Missing leading entries are zero when
/// `pad` is set, otherwise a short history is an error.
std::vector<AggSequence> build_sequence(const RoadNetwork& net, const DiffusionOperator& op,
                                        const std::vector<Eigen::MatrixXd>& history,
                                        AggregationOptions options = {}, bool pad = true);

/// Perturbs node `perturbed` across a random history and reports whether
/// every entry k < hop(agent, perturbed) of the agent's sequence stayed
/// bit-identical. Hop counts ignore edge direction because both walk
/// families carry information along and against edges.
bool locality_check(const RoadNetwork& net, const DiffusionOperator& op, AggregationOptions options,
                    int perturbed, int agent, std::uint64_t seed = 1);

/// Debug dump of sequences as a JSON document.
std::string sequences_to_json(const std::vector<AggSequence>& seqs);

}  // namespace tsc
