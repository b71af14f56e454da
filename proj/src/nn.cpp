#include "tsc/nn.hpp"

#include "tsc/rng.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace tsc {

namespace {

Mat relu(const Mat& x) { return x.cwiseMax(0.0); }

Mat relu_grad(const Mat& pre, const Mat& dy) {
  return (pre.array() > 0.0).select(dy, 0.0);
}

Mat sigmoid(const Mat& x) {
  return x.unaryExpr([](double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
  });
}

Mat add_bias(Mat x, const Mat& bias) {
  x.rowwise() += bias.row(0);
  return x;
}

Mat hcat(const Mat& a, const Mat& b) {
  Mat out(a.rows(), a.cols() + b.cols());
  out << a, b;
  return out;
}

void append_signature(std::vector<std::uint8_t>& sig, const Mat& pre) {
  for (Eigen::Index i = 0; i < pre.size(); ++i) sig.push_back(pre.data()[i] > 0.0 ? 1 : 0);
}

}  // namespace

// ---------------------------------------------------------------- ParamStore

int ParamStore::add(std::string name, int rows, int cols, ParamGroup group) {
  params_.push_back({std::move(name), Mat::Zero(rows, cols), Mat::Zero(rows, cols), group});
  ++version_;
  return static_cast<int>(params_.size()) - 1;
}

long ParamStore::num_scalars() const {
  long n = 0;
  for (const Param& p : params_) n += static_cast<long>(p.value.size());
  return n;
}

void ParamStore::zero_grad() {
  for (Param& p : params_) p.grad.setZero();
}

std::vector<double> ParamStore::flatten() const {
  std::vector<double> flat;
  flat.reserve(static_cast<std::size_t>(num_scalars()));
  for (const Param& p : params_) {
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) flat.push_back(p.value(r, c));
    }
  }
  return flat;
}

void ParamStore::unflatten(const std::vector<double>& flat) {
  if (static_cast<long>(flat.size()) != num_scalars()) {
    throw std::invalid_argument("parameter vector has " + std::to_string(flat.size()) +
                                " entries, model expects " + std::to_string(num_scalars()));
  }
  std::size_t k = 0;
  for (Param& p : params_) {
    for (Eigen::Index r = 0; r < p.value.rows(); ++r) {
      for (Eigen::Index c = 0; c < p.value.cols(); ++c) p.value(r, c) = flat[k++];
    }
  }
  ++version_;
}

// ----------------------------------------------------------------------- Gso

Gso Gso::from_operator(const DiffusionOperator& op, int k_tap) {
  Gso g;
  g.identity = false;
  g.fwd = matrix_powers(op.fwd, k_tap - 1);
  g.rev = matrix_powers(op.rev, k_tap - 1);
  return g;
}

// --------------------------------------------------------------------- Affine

AffineLayer AffineLayer::create(ParamStore& store, const std::string& name, int in, int out,
                                ParamGroup group) {
  AffineLayer layer;
  layer.weight = store.add(name + ".weight", in, out, group);
  layer.bias = store.add(name + ".bias", 1, out, group);
  return layer;
}

Mat AffineLayer::forward(const ParamStore& store, const Mat& x) const {
  return add_bias(x * store.value(weight), store.value(bias));
}

Mat AffineLayer::backward(ParamStore& store, const Mat& x, const Mat& dy) const {
  store.grad(weight).noalias() += x.transpose() * dy;
  store.grad(bias) += dy.colwise().sum();
  return dy * store.value(weight).transpose();
}

// ----------------------------------------------------------- GraphFilterBank

GraphFilterBank GraphFilterBank::create(ParamStore& store, const std::string& name, int in,
                                        int out, int k_tap, ParamGroup group) {
  if (k_tap < 1) throw std::invalid_argument("filter bank needs at least one tap");
  GraphFilterBank bank;
  bank.in = in;
  bank.out = out;
  for (int k = 0; k < k_tap; ++k) {
    bank.taps_fwd.push_back(store.add(name + ".fwd" + std::to_string(k), in, out, group));
    bank.taps_rev.push_back(store.add(name + ".rev" + std::to_string(k), in, out, group));
  }
  return bank;
}

Mat GraphFilterBank::summed_taps(const ParamStore& store) const {
  if (sum_store_ != &store || sum_version_ != store.version()) {
    sum_cache_ = Mat::Zero(in, out);
    for (int k = 0; k < k_tap(); ++k) {
      sum_cache_ += store.value(taps_fwd[k]);
      sum_cache_ += store.value(taps_rev[k]);
    }
    sum_store_ = &store;
    sum_version_ = store.version();
  }
  return sum_cache_;
}

Mat GraphFilterBank::apply(const ParamStore& store, const Gso& gso, const Mat& z) const {
  if (z.cols() != in) {
    throw std::invalid_argument("filter bank expects " + std::to_string(in) + " features, got " +
                                std::to_string(z.cols()));
  }
  if (gso.identity) return z * summed_taps(store);
  if (static_cast<int>(gso.fwd.size()) < k_tap() || gso.fwd[0].rows() != z.rows()) {
    throw std::invalid_argument("shift operator does not match the node count or tap count");
  }
  Mat x = Mat::Zero(z.rows(), out);
  for (int k = 0; k < k_tap(); ++k) {
    x.noalias() += (gso.fwd[k] * z) * store.value(taps_fwd[k]);
    x.noalias() += (gso.rev[k] * z) * store.value(taps_rev[k]);
  }
  return x;
}

Mat GraphFilterBank::backward(ParamStore& store, const Gso& gso, const Mat& z, const Mat& dx) const {
  if (gso.identity) {
    const Mat dtap = z.transpose() * dx;
    for (int k = 0; k < k_tap(); ++k) {
      store.grad(taps_fwd[k]) += dtap;
      store.grad(taps_rev[k]) += dtap;
    }
    return dx * summed_taps(store).transpose();
  }
  Mat dz = Mat::Zero(z.rows(), in);
  for (int k = 0; k < k_tap(); ++k) {
    store.grad(taps_fwd[k]).noalias() += (gso.fwd[k] * z).transpose() * dx;
    store.grad(taps_rev[k]).noalias() += (gso.rev[k] * z).transpose() * dx;
    dz.noalias() += gso.fwd[k].transpose() * (dx * store.value(taps_fwd[k]).transpose());
    dz.noalias() += gso.rev[k].transpose() * (dx * store.value(taps_rev[k]).transpose());
  }
  return dz;
}

Mat graph_filter(const GraphFilterBank& bank, const ParamStore& store, const Gso& gso, const Mat& z) {
  return relu(bank.apply(store, gso, z));
}

// ----------------------------------------------------------------------- GRU

DiffusionGruCell DiffusionGruCell::create(ParamStore& store, const std::string& name, int in,
                                          int hidden, int k_tap, bool literal_candidate_gate) {
  DiffusionGruCell cell;
  cell.in = in;
  cell.hidden = hidden;
  cell.literal_candidate_gate = literal_candidate_gate;
  const auto g = ParamGroup::kTrunk;
  cell.gate_z = GraphFilterBank::create(store, name + ".update", in + hidden, hidden, k_tap, g);
  cell.gate_r = GraphFilterBank::create(store, name + ".reset", in + hidden, hidden, k_tap, g);
  cell.candidate = GraphFilterBank::create(store, name + ".candidate", in + hidden, hidden, k_tap, g);
  cell.bias_z = store.add(name + ".update.bias", 1, hidden, g);
  cell.bias_r = store.add(name + ".reset.bias", 1, hidden, g);
  cell.bias_c = store.add(name + ".candidate.bias", 1, hidden, g);
  return cell;
}

Mat DiffusionGruCell::step(const ParamStore& store, const Gso& gso, const Mat& x, const Mat& h_prev,
                           GruCache* cache) const {
  if (x.cols() != in || h_prev.cols() != hidden || x.rows() != h_prev.rows()) {
    throw std::invalid_argument("gru step: input or hidden state has the wrong shape");
  }
  const Mat xh = hcat(x, h_prev);
  const Mat z = sigmoid(add_bias(gate_z.apply(store, gso, xh), store.value(bias_z)));
  const Mat r = sigmoid(add_bias(gate_r.apply(store, gso, xh), store.value(bias_r)));
  const Mat gated = (literal_candidate_gate ? z : r).cwiseProduct(h_prev);
  const Mat xg = hcat(x, gated);
  const Mat c = add_bias(candidate.apply(store, gso, xg), store.value(bias_c)).array().tanh().matrix();
  Mat h = (1.0 - z.array()).matrix().cwiseProduct(h_prev) + z.cwiseProduct(c);
  if (cache != nullptr) {
    *cache = {x, h_prev, xh, z, r, gated, xg, c, h};
  }
  return h;
}

void DiffusionGruCell::backward(ParamStore& store, const Gso& gso, const GruCache& k, const Mat& dh,
                                Mat& dx, Mat& dh_prev) const {
  const Mat dc = dh.cwiseProduct(k.z);
  Mat dz = dh.cwiseProduct(k.c - k.h_prev);
  dh_prev = dh.cwiseProduct((1.0 - k.z.array()).matrix());

  const Mat dc_pre = dc.cwiseProduct((1.0 - k.c.array().square()).matrix());
  store.grad(bias_c) += dc_pre.colwise().sum();
  const Mat dxg = candidate.backward(store, gso, k.xg, dc_pre);
  dx = dxg.leftCols(in);
  const Mat dgated = dxg.rightCols(hidden);

  Mat dr = Mat::Zero(dh.rows(), hidden);
  if (literal_candidate_gate) {
    dz += dgated.cwiseProduct(k.h_prev);
    dh_prev += dgated.cwiseProduct(k.z);
  } else {
    dr = dgated.cwiseProduct(k.h_prev);
    dh_prev += dgated.cwiseProduct(k.r);
  }

  const Mat dz_pre = dz.cwiseProduct(k.z.cwiseProduct((1.0 - k.z.array()).matrix()));
  const Mat dr_pre = dr.cwiseProduct(k.r.cwiseProduct((1.0 - k.r.array()).matrix()));
  store.grad(bias_z) += dz_pre.colwise().sum();
  store.grad(bias_r) += dr_pre.colwise().sum();
  const Mat dxh = gate_z.backward(store, gso, k.xh, dz_pre) + gate_r.backward(store, gso, k.xh, dr_pre);
  dx += dxh.leftCols(in);
  dh_prev += dxh.rightCols(hidden);
}

Mat gru_step(const DiffusionGruCell& cell, const ParamStore& store, const Gso& gso, const Mat& x,
             const Mat& h_prev) {
  return cell.step(store, gso, x, h_prev);
}

// ------------------------------------------------------------------- Encoder

Mat Encoder::forward(const ParamStore& store, const Mat& x, Cache* cache) const {
  if (x.cols() != wave_dim + action_dim) {
    throw std::invalid_argument("encoder expects " + std::to_string(wave_dim + action_dim) +
                                " inputs, got " + std::to_string(x.cols()));
  }
  Cache local;
  Cache& c = cache != nullptr ? *cache : local;
  c.wave = x.leftCols(wave_dim);
  c.actions = x.rightCols(action_dim);
  c.state_pre = state.forward(store, c.wave);
  c.policy_pre = policy.forward(store, c.actions);
  return hcat(relu(c.state_pre), relu(c.policy_pre));
}

Mat Encoder::backward(ParamStore& store, const Cache& c, const Mat& dy) const {
  const Eigen::Index units = c.state_pre.cols();
  const Mat dwave = state.backward(store, c.wave, relu_grad(c.state_pre, dy.leftCols(units)));
  const Mat dact = policy.backward(store, c.actions, relu_grad(c.policy_pre, dy.rightCols(units)));
  return hcat(dwave, dact);
}

// ------------------------------------------------------------------ AgentNet

void ModelConfig::validate() const {
  if (wave_dim < 1 || action_dim < 0 || encoder_units < 1 || hidden < 1 || K < 1 || k_tap < 1 ||
      num_actions < 2) {
    throw std::invalid_argument("invalid model dimensions");
  }
}

AgentNet::AgentNet(const ModelConfig& config) : config_(config) {
  config_.validate();
  const int e = config.encoder_units;
  encoder_.wave_dim = config.wave_dim;
  encoder_.action_dim = config.action_dim;
  encoder_.state = AffineLayer::create(store_, "encoder.state", config.wave_dim, e, ParamGroup::kTrunk);
  encoder_.policy =
      AffineLayer::create(store_, "encoder.policy", config.action_dim, e, ParamGroup::kTrunk);
  gru1_ = DiffusionGruCell::create(store_, "gru1", 2 * e, config.hidden, config.k_tap,
                                   config.literal_candidate_gate);
  gru2_ = DiffusionGruCell::create(store_, "gru2", config.hidden, config.hidden, config.k_tap,
                                   config.literal_candidate_gate);
  actor_ = AffineLayer::create(store_, "actor", config.hidden, config.num_actions, ParamGroup::kActor);
  const int critic_in = config.hidden + (config.critic_sees_actions ? config.action_dim : 0);
  critic_ = AffineLayer::create(store_, "critic", critic_in, 1, ParamGroup::kCritic);
}

void AgentNet::init(std::uint64_t seed, std::uint32_t index) {
  RandomStream rng(seed, StreamPurpose::kInit, index);
  for (std::size_t i = 0; i < store_.size(); ++i) {
    Param& p = store_.mutable_param(i);
    const bool is_bias = p.value.rows() == 1 && p.name.ends_with("bias");
    if (is_bias || p.name == "actor.weight") {
      p.value.setZero();
      continue;
    }
    const double limit = std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols()));
    for (Eigen::Index k = 0; k < p.value.size(); ++k) {
      p.value.data()[k] = (2.0 * rng.uniform() - 1.0) * limit;
    }
  }
}

void AgentNet::zero_params() {
  for (std::size_t i = 0; i < store_.size(); ++i) store_.mutable_param(i).value.setZero();
}

Mat softmax_rows(const Mat& logits) {
  Mat p = logits;
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double m = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - m).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

TrunkOutput AgentNet::forward(const std::vector<Mat>& entries, const Gso& gso) {
  if (static_cast<int>(entries.size()) != config_.K) {
    throw std::invalid_argument("sequence length " + std::to_string(entries.size()) +
                                " does not match configured K = " + std::to_string(config_.K));
  }
  const Eigen::Index rows = entries.front().rows();
  gso_ = gso;
  steps_.assign(entries.size(), {});
  signature_.clear();
  Mat h1 = Mat::Zero(rows, config_.hidden);
  Mat h2 = Mat::Zero(rows, config_.hidden);
  for (std::size_t k = 0; k < entries.size(); ++k) {
    if (entries[k].rows() != rows) throw std::invalid_argument("sequence entries differ in rows");
    StepCache& s = steps_[k];
    const Mat e = encoder_.forward(store_, entries[k], &s.enc);
    h1 = gru1_.step(store_, gso_, e, h1, &s.g1);
    s.between_pre = h1;
    h2 = gru2_.step(store_, gso_, relu(h1), h2, &s.g2);
    append_signature(signature_, s.enc.state_pre);
    append_signature(signature_, s.enc.policy_pre);
    append_signature(signature_, s.between_pre);
  }
  TrunkOutput out;
  out.logits = actor_.forward(store_, h2);
  out.probs = softmax_rows(out.logits);
  critic_in_ = config_.critic_sees_actions ? hcat(h2, entries.front().rightCols(config_.action_dim)) : h2;
  out.values = critic_.forward(store_, critic_in_).col(0);
  return out;
}

void AgentNet::backward(const Mat& dlogits, const Vec& dvalues) {
  if (steps_.empty()) throw std::logic_error("backward() without a preceding forward()");
  const int hid = config_.hidden;
  const Mat& h2_final = steps_.back().g2.h;
  Mat dh2 = actor_.backward(store_, h2_final, dlogits);
  const Mat dcritic = critic_.backward(store_, critic_in_, dvalues);
  dh2 += dcritic.leftCols(hid);
  Mat dh1 = Mat::Zero(h2_final.rows(), hid);
  for (int k = static_cast<int>(steps_.size()) - 1; k >= 0; --k) {
    StepCache& s = steps_[k];
    Mat du, dh2_prev;
    gru2_.backward(store_, gso_, s.g2, dh2, du, dh2_prev);
    dh1 += relu_grad(s.between_pre, du);
    Mat de, dh1_prev;
    gru1_.backward(store_, gso_, s.g1, dh1, de, dh1_prev);
    encoder_.backward(store_, s.enc, de);
    dh2 = dh2_prev;
    dh1 = dh1_prev;
  }
}

Mat encode(const AgentNet& net, const Mat& wave, const Mat& neighbor_actions) {
  if (wave.rows() != neighbor_actions.rows()) {
    throw std::invalid_argument("encode: wave and action blocks differ in rows");
  }
  if (wave.cols() != net.config().wave_dim || neighbor_actions.cols() != net.config().action_dim) {
    throw std::invalid_argument("encode: input dimensions do not match the model");
  }
  return net.encoder().forward(net.store(), hcat(wave, neighbor_actions));
}

TrunkOutput forward_trunk(AgentNet& net, const Mat& sequence, const Gso& gso) {
  std::vector<Mat> entries;
  for (Eigen::Index k = 0; k < sequence.rows(); ++k) entries.push_back(sequence.row(k));
  return net.forward(entries, gso);
}

// ----------------------------------------------------------------- gradcheck

double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-6});
  return std::abs(analytic - numeric) / denom;
}

GradCheckReport grad_check(AgentNet& net, const std::function<double(AgentNet&)>& loss,
                           const std::function<void(AgentNet&)>& analytic, double h,
                           long max_per_param, std::uint64_t seed) {
  GradCheckReport report;
  ParamStore& store = net.store();
  store.zero_grad();
  analytic(net);
  std::vector<Mat> grads;
  for (std::size_t i = 0; i < store.size(); ++i) grads.push_back(store[i].grad);

  loss(net);
  const std::vector<std::uint8_t> base_sig = net.relu_signature();
  RandomStream rng(seed, StreamPurpose::kTest, 7);

  for (std::size_t i = 0; i < store.size(); ++i) {
    const std::string& name = store[i].name;
    if (!grads[i].allFinite()) {
      report.finite = false;
      report.nonfinite_param = name;
      return report;
    }
    const Eigen::Index n = store[i].value.size();
    std::vector<Eigen::Index> coords;
    if (max_per_param < 0 || n <= max_per_param) {
      for (Eigen::Index k = 0; k < n; ++k) coords.push_back(k);
    } else {
      for (long s = 0; s < max_per_param; ++s) {
        coords.push_back(static_cast<Eigen::Index>(rng.below(static_cast<std::uint32_t>(n))));
      }
    }
    for (Eigen::Index k : coords) {
      double& v = store.mutable_value(static_cast<int>(i)).data()[k];
      const double orig = v;
      v = orig + h;
      store.mutable_value(static_cast<int>(i));
      const double up = loss(net);
      const bool kink_up = net.relu_signature() != base_sig;
      v = orig - h;
      store.mutable_value(static_cast<int>(i));
      const double down = loss(net);
      const bool kink_down = net.relu_signature() != base_sig;
      v = orig;
      store.mutable_value(static_cast<int>(i));
      if (!std::isfinite(up) || !std::isfinite(down)) {
        report.finite = false;
        report.nonfinite_param = name;
        return report;
      }
      if (kink_up || kink_down) {
        ++report.skipped_kinks;
        continue;
      }
      const double numeric = (up - down) / (2.0 * h);
      const double err = relative_error(grads[i].data()[k], numeric);
      ++report.checked;
      if (err > report.max_rel_error) {
        report.max_rel_error = err;
        report.worst_param = name;
        report.worst_index = static_cast<long>(k);
      }
    }
  }
  loss(net);
  return report;
}

}  // namespace tsc
