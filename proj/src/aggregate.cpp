#include "tsc/aggregate.hpp"

#include "tsc/rng.hpp"

#include <json.hpp>

#include <stdexcept>
#include <string>

namespace tsc {

namespace {

void check_support(const RoadNetwork& net, const Eigen::MatrixXd& p) {
  const int n = net.num_nodes();
  if (p.rows() != n || p.cols() != n) {
    throw std::invalid_argument("aggregation matrix is " + std::to_string(p.rows()) + "x" +
                                std::to_string(p.cols()) + ", network has " + std::to_string(n) +
                                " nodes");
  }
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < n; ++j) {
      if (i == j || p(i, j) == 0.0) continue;
      if (net.undirected_hop(i, j) != 1) {
        throw std::invalid_argument("aggregation matrix couples non-neighbours " +
                                    std::to_string(i) + " and " + std::to_string(j));
      }
    }
  }
}

// Row i of T x, reading only rows of i's 1-hop neighbourhood.
Eigen::MatrixXd local_product(const RoadNetwork& net, const Eigen::MatrixXd& t,
                              const Eigen::MatrixXd& x) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (int i = 0; i < net.num_nodes(); ++i) {
    Eigen::RowVectorXd acc = t(i, i) * x.row(i);
    for (int j : net.neighbors(i)) acc += t(i, j) * x.row(j);
    out.row(i) = acc;
  }
  return out;
}

}  // namespace

Eigen::MatrixXd aggregate_step(const RoadNetwork& net, const Eigen::MatrixXd& p,
                               const Eigen::MatrixXd& signal) {
  check_support(net, p);
  if (signal.rows() != net.num_nodes()) {
    throw std::invalid_argument("signal has " + std::to_string(signal.rows()) +
                                " rows, network has " + std::to_string(net.num_nodes()) + " nodes");
  }
  return local_product(net, p, signal);
}

SequenceBuilder::SequenceBuilder(const RoadNetwork& net, const DiffusionOperator& op, int features,
                                 AggregationOptions options)
    : net_(&net), fwd_(op.fwd), rev_(op.rev), features_(features), options_(options) {
  if (options_.K < 1) throw std::invalid_argument("aggregation K must be >= 1");
  if (features_ < 1) throw std::invalid_argument("aggregation needs at least one feature");
  if (op.num_nodes() != net.num_nodes()) {
    throw std::invalid_argument("diffusion operator and network disagree on node count");
  }
  reset();
}

void SequenceBuilder::reset() {
  const int n = net_->num_nodes();
  const int k = options_.K;
  const Eigen::MatrixXd zero = Eigen::MatrixXd::Zero(n, features_);
  hist_.assign(k, zero);
  fwd_reg_.assign(k, {});
  rev_reg_.assign(k, {});
  for (int l = 0; l < k; ++l) {
    fwd_reg_[l].assign(std::max(l, 1), zero);
    rev_reg_[l].assign(std::max(l, 1), zero);
  }
  tv_.assign(k, zero);
  ticks_ = 0;
}

bool SequenceBuilder::needs_exchange() const {
  if (options_.mode == AggregationMode::kTimeVarying) return options_.K >= 2;
  return options_.K >= 3;  // powers >= 1 only appear from entry 2 on
}

Eigen::MatrixXd SequenceBuilder::shift(const Eigen::MatrixXd& t, const Eigen::MatrixXd& x) const {
  return local_product(*net_, t, x);
}

void SequenceBuilder::push(const Eigen::MatrixXd& y0) {
  if (options_.mode != AggregationMode::kFixedBidirectional) {
    throw std::logic_error("time-varying aggregation needs P_t on every push");
  }
  if (y0.rows() != net_->num_nodes() || y0.cols() != features_) {
    throw std::invalid_argument("observation matrix has the wrong shape");
  }
  const int k = options_.K;
  // Registers for lag l and power j come from the neighbours' registers
  // for lag l-1 and power j-1 one tick earlier.
  for (int l = k - 1; l >= 2; --l) {
    for (int j = l - 1; j >= 1; --j) {
      const Eigen::MatrixXd& prev_f = j - 1 == 0 ? hist_[l - 1] : fwd_reg_[l - 1][j - 1];
      const Eigen::MatrixXd& prev_r = j - 1 == 0 ? hist_[l - 1] : rev_reg_[l - 1][j - 1];
      fwd_reg_[l][j] = shift(fwd_, prev_f);
      rev_reg_[l][j] = shift(rev_, prev_r);
    }
  }
  for (int l = k - 1; l >= 1; --l) hist_[l] = hist_[l - 1];
  hist_[0] = y0;
  if (needs_exchange()) {
    for (int i = 0; i < net_->num_nodes(); ++i) {
      exchanges_ += static_cast<long>(net_->neighbors(i).size());
    }
  }
  ++ticks_;
}

void SequenceBuilder::push(const Eigen::MatrixXd& y0, const Eigen::MatrixXd& p_t) {
  if (options_.mode != AggregationMode::kTimeVarying) {
    throw std::logic_error("fixed-operator aggregation does not take P_t");
  }
  if (y0.rows() != net_->num_nodes() || y0.cols() != features_) {
    throw std::invalid_argument("observation matrix has the wrong shape");
  }
  check_support(*net_, p_t);
  for (int k = options_.K - 1; k >= 1; --k) tv_[k] = shift(p_t, tv_[k - 1]);
  tv_[0] = y0;
  if (needs_exchange()) {
    for (int i = 0; i < net_->num_nodes(); ++i) {
      exchanges_ += static_cast<long>(net_->neighbors(i).size());
    }
  }
  ++ticks_;
}

Eigen::MatrixXd SequenceBuilder::agent_sequence(int agent) const {
  const int k = options_.K;
  Eigen::MatrixXd seq(k, features_);
  if (options_.mode == AggregationMode::kTimeVarying) {
    for (int e = 0; e < k; ++e) seq.row(e) = tv_[e].row(agent);
    return seq;
  }
  seq.row(0) = hist_[0].row(agent);
  for (int e = 1; e < k; ++e) {
    Eigen::RowVectorXd acc = (options_.double_identity ? 2.0 : 1.0) * hist_[e].row(agent);
    for (int j = 1; j < e; ++j) acc += fwd_reg_[e][j].row(agent) + rev_reg_[e][j].row(agent);
    seq.row(e) = acc;
  }
  return seq;
}

AggSequence SequenceBuilder::sequence(int agent) const {
  return {agent, ticks_ - 1, agent_sequence(agent)};
}

std::vector<AggSequence> SequenceBuilder::sequences() const {
  std::vector<AggSequence> out;
  out.reserve(net_->num_nodes());
  for (int i = 0; i < net_->num_nodes(); ++i) out.push_back(sequence(i));
  return out;
}

std::vector<AggSequence> build_sequence(const RoadNetwork& net, const DiffusionOperator& op,
                                        const std::vector<Eigen::MatrixXd>& history,
                                        AggregationOptions options, bool pad) {
  if (options.mode != AggregationMode::kFixedBidirectional) {
    throw std::invalid_argument("build_sequence uses the fixed operator; push P_t explicitly");
  }
  if (history.empty()) throw std::invalid_argument("build_sequence needs at least one observation");
  if (!pad && static_cast<int>(history.size()) < options.K) {
    throw std::invalid_argument("history shorter than K and padding disabled");
  }
  SequenceBuilder builder(net, op, static_cast<int>(history.front().cols()), options);
  const std::size_t start =
      history.size() > static_cast<std::size_t>(options.K) ? history.size() - options.K : 0;
  for (std::size_t t = start; t < history.size(); ++t) builder.push(history[t]);
  return builder.sequences();
}

bool locality_check(const RoadNetwork& net, const DiffusionOperator& op, AggregationOptions options,
                    int perturbed, int agent, std::uint64_t seed) {
  const int n = net.num_nodes();
  const int f = 2;
  RandomStream rng(seed, StreamPurpose::kTest, static_cast<std::uint32_t>(perturbed * 131 + agent));
  std::vector<Eigen::MatrixXd> history(options.K, Eigen::MatrixXd(n, f));
  for (auto& y : history) {
    for (int i = 0; i < n; ++i) {
      for (int c = 0; c < f; ++c) y(i, c) = rng.uniform() - 0.5;
    }
  }
  auto changed = history;
  for (auto& y : changed) {
    for (int c = 0; c < f; ++c) y(perturbed, c) += 1.0 + rng.uniform();
  }
  const auto base = build_sequence(net, op, history, options)[agent].entries;
  const auto pert = build_sequence(net, op, changed, options)[agent].entries;
  const int hop = net.undirected_hop(agent, perturbed);
  for (int k = 0; k < options.K && k < hop; ++k) {
    if (base.row(k) != pert.row(k)) return false;
  }
  return true;
}

std::string sequences_to_json(const std::vector<AggSequence>& seqs) {
  nlohmann::json doc = nlohmann::json::array();
  for (const AggSequence& s : seqs) {
    nlohmann::json entries = nlohmann::json::array();
    for (int k = 0; k < s.entries.rows(); ++k) {
      std::vector<double> row(s.entries.cols());
      for (int c = 0; c < s.entries.cols(); ++c) row[c] = s.entries(k, c);
      entries.push_back(row);
    }
    doc.push_back({{"owner", s.owner}, {"time", s.time}, {"entries", entries}});
  }
  return doc.dump(2);
}

}  // namespace tsc
