#include "tsc/marl.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace tsc {

namespace {

constexpr double kLogFloor = 1e-12;

int argmax_row(const Mat& m, Eigen::Index r) {
  int best = 0;
  for (Eigen::Index c = 1; c < m.cols(); ++c) {
    if (m(r, c) > m(r, best)) best = static_cast<int>(c);
  }
  return best;
}

double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

void TrainConfig::validate() const {
  if (!(gamma > 0.0 && gamma <= 1.0)) throw std::invalid_argument("train.gamma must be in (0, 1]");
  if (!(spatial_alpha >= 0.0 && spatial_alpha <= 1.0)) {
    throw std::invalid_argument("train.spatial_alpha must be in [0, 1]");
  }
  if (entropy_coef < 0.0) throw std::invalid_argument("train.entropy_coef must be >= 0");
  if (!(lr_actor > 0.0) || !(lr_critic > 0.0)) {
    throw std::invalid_argument("learning rates must be positive");
  }
  if (batch_size <= 0) throw std::invalid_argument("train.batch_size must be positive");
  if (total_steps < 0) throw std::invalid_argument("train.total_steps must be >= 0");
  if (!(reward_norm > 0.0)) throw std::invalid_argument("train.reward_norm must be positive");
  if (reward_clip < 0.0) throw std::invalid_argument("train.reward_clip must be >= 0");
  if (!(wave_scale > 0.0)) throw std::invalid_argument("train.wave_scale must be positive");
  if (max_grad_norm < 0.0) throw std::invalid_argument("train.max_grad_norm must be >= 0");
}

int observation_action_dim(bool own_phase) { return (own_phase ? 1 : 0) * kNumPhases + kNumArms * kNumPhases; }

void check_observation_layout(const ModelConfig& config) {
  if (config.wave_dim != kMaxLanes || config.action_dim != observation_action_dim(config.own_phase)) {
    throw std::invalid_argument("model input layout (" + std::to_string(config.wave_dim) + " + " +
                                std::to_string(config.action_dim) +
                                ") does not match the simulator observation");
  }
}

Mat observation_matrix(const Simulator& sim, double wave_scale, bool own_phase) {
  const int n = sim.num_agents();
  Mat obs = Mat::Zero(n, kMaxLanes + observation_action_dim(own_phase));
  const int nb_start = kMaxLanes + (own_phase ? kNumPhases : 0);
  for (int i = 0; i < n; ++i) {
    const auto wave = sim.observe_wave(i);
    for (int l = 0; l < kMaxLanes; ++l) obs(i, l) = wave[l] / wave_scale;
    if (own_phase) obs(i, kMaxLanes + sim.phase(i)) = 1.0;
    const auto nb = sim.arm_neighbors(i);
    for (int a = 0; a < kNumArms; ++a) {
      if (nb[a] >= 0) obs(i, nb_start + a * kNumPhases + sim.phase(nb[a])) = 1.0;
    }
  }
  return obs;
}

void ExperienceBatch::clear() {
  for (AgentTrajectory& t : agents) {
    t.sequences.clear();
    t.actions.clear();
    t.rewards.clear();
    t.values.clear();
    t.dones.clear();
  }
  bootstrap_sequences.clear();
}

// ------------------------------------------------------------------- returns

double spatial_reward(const ExperienceBatch& batch, const RoadNetwork& net, int agent, int tau,
                      const ReturnParams& params) {
  double r = 0.0;
  for (int j = 0; j < batch.num_agents(); ++j) {
    const int d = net.hop(agent, j);
    if (d == kUnreachable) continue;
    if (params.max_hop >= 0 && d > params.max_hop) continue;
    r += std::pow(params.alpha, d) * batch.agents[j].rewards[tau];
  }
  return r;
}

double sampled_return(const ExperienceBatch& batch, const RoadNetwork& net, int agent, int tau,
                      const ReturnParams& params, double bootstrap_value) {
  const int b = batch.size();
  if (tau < 0 || tau >= b) throw std::out_of_range("sampled_return: step outside the batch");
  double ret = 0.0;
  double disc = 1.0;
  for (int t = tau; t < b; ++t) {
    ret += disc * spatial_reward(batch, net, agent, t, params);
    disc *= params.gamma;
    if (batch.agents[agent].dones[t]) return ret;
  }
  return ret + disc * bootstrap_value;
}

std::vector<double> sampled_returns(const ExperienceBatch& batch, const RoadNetwork& net, int agent,
                                    const ReturnParams& params, double bootstrap_value) {
  const int b = batch.size();
  std::vector<double> weights(batch.num_agents(), 0.0);
  for (int j = 0; j < batch.num_agents(); ++j) {
    const int d = net.hop(agent, j);
    if (d == kUnreachable || (params.max_hop >= 0 && d > params.max_hop)) continue;
    weights[j] = std::pow(params.alpha, d);
  }
  std::vector<double> out(b);
  double next = bootstrap_value;
  for (int t = b - 1; t >= 0; --t) {
    double r = 0.0;
    for (int j = 0; j < batch.num_agents(); ++j) {
      if (weights[j] != 0.0) r += weights[j] * batch.agents[j].rewards[t];
    }
    if (batch.agents[agent].dones[t]) next = 0.0;
    out[t] = r + params.gamma * next;
    next = out[t];
  }
  return out;
}

void standardize(std::vector<double>& values) {
  if (values.empty()) return;
  double mean = 0.0;
  for (double v : values) mean += v;
  mean /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mean) * (v - mean);
  const double sd = std::sqrt(var / static_cast<double>(values.size()));
  for (double& v : values) v = (v - mean) / (sd + 1e-8);
}

std::vector<double> advantages(const std::vector<double>& returns,
                               const std::vector<double>& target_values) {
  if (returns.size() != target_values.size()) {
    throw std::invalid_argument("advantages: returns and values differ in length");
  }
  std::vector<double> a(returns.size());
  for (std::size_t t = 0; t < a.size(); ++t) a[t] = returns[t] - target_values[t];
  return a;
}

// -------------------------------------------------------------------- losses

LossResult actor_loss(const Mat& probs, const std::vector<int>& actions,
                      const std::vector<double>& advantages, double beta) {
  const Eigen::Index b = probs.rows();
  if (static_cast<Eigen::Index>(actions.size()) != b ||
      static_cast<Eigen::Index>(advantages.size()) != b) {
    throw std::invalid_argument("actor_loss: batch dimensions disagree");
  }
  if (b == 0) throw std::invalid_argument("actor_loss: empty batch");
  LossResult res;
  res.dlogits = Mat::Zero(b, probs.cols());
  const double inv_b = 1.0 / static_cast<double>(b);
  double total = 0.0;
  double entropy = 0.0;
  for (Eigen::Index t = 0; t < b; ++t) {
    const int a = actions[t];
    if (a < 0 || a >= probs.cols()) throw std::out_of_range("actor_loss: action out of range");
    Eigen::RowVectorXd logp(probs.cols());
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      double p = probs(t, c);
      if (p < kLogFloor) {
        p = kLogFloor;
        if (c == a) ++res.clamped_logs;
      }
      logp(c) = std::log(p);
    }
    const double h = -(probs.row(t).array() * logp.array()).sum();
    entropy += h;
    total += logp(a) * advantages[t] + beta * h;
    for (Eigen::Index c = 0; c < probs.cols(); ++c) {
      const double p = probs(t, c);
      const double dlogp = (c == a ? 1.0 : 0.0) - p;
      const double dh = -p * (logp(c) + h);
      res.dlogits(t, c) = -inv_b * (advantages[t] * dlogp + beta * dh);
    }
  }
  res.loss = -total * inv_b;
  res.entropy = entropy * inv_b;
  return res;
}

LossResult critic_loss(const Vec& values, const std::vector<double>& returns) {
  const Eigen::Index b = values.size();
  if (static_cast<Eigen::Index>(returns.size()) != b) {
    throw std::invalid_argument("critic_loss: batch dimensions disagree");
  }
  if (b == 0) throw std::invalid_argument("critic_loss: empty batch");
  LossResult res;
  res.dvalues = Vec::Zero(b);
  const double inv_b = 1.0 / static_cast<double>(b);
  for (Eigen::Index t = 0; t < b; ++t) {
    const double e = returns[t] - values(t);
    res.loss += e * e * inv_b;
    res.dvalues(t) = -2.0 * e * inv_b;
  }
  return res;
}

// ----------------------------------------------------------------- optimiser

double grad_norm(const ParamStore& store) {
  double s = 0.0;
  for (std::size_t i = 0; i < store.size(); ++i) s += store[i].grad.squaredNorm();
  return std::sqrt(s);
}

void adam_step(ParamStore& store, AdamState& state, double lr_trunk_actor, double lr_critic,
               const TrainConfig& config) {
  if (state.m.size() != store.size()) {
    state.m.clear();
    state.v.clear();
    for (std::size_t i = 0; i < store.size(); ++i) {
      state.m.push_back(Mat::Zero(store[i].value.rows(), store[i].value.cols()));
      state.v.push_back(Mat::Zero(store[i].value.rows(), store[i].value.cols()));
    }
    state.t = 0;
  }
  double scale = 1.0;
  if (config.max_grad_norm > 0.0) {
    const double norm = grad_norm(store);
    if (norm > config.max_grad_norm) scale = config.max_grad_norm / norm;
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(config.adam_beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(config.adam_beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < store.size(); ++i) {
    const Mat g = store.grad(static_cast<int>(i)) * scale;
    state.m[i] = config.adam_beta1 * state.m[i] + (1.0 - config.adam_beta1) * g;
    state.v[i] = config.adam_beta2 * state.v[i] + (1.0 - config.adam_beta2) * g.cwiseProduct(g);
    const double lr = store[i].group == ParamGroup::kCritic ? lr_critic : lr_trunk_actor;
    Mat& w = store.mutable_value(static_cast<int>(i));
    w.array() -= lr * (state.m[i].array() / c1) /
                 ((state.v[i].array() / c2).sqrt() + config.adam_eps);
  }
}

// -------------------------------------------------------------------- models

AgentModel::AgentModel(const ModelConfig& config, bool split_trunk) : net(config), target(config) {
  if (split_trunk) {
    critic_net.emplace(config);
    critic_target.emplace(config);
  }
}

void AgentModel::init(std::uint64_t seed, std::uint32_t index) {
  net.init(seed, index);
  if (critic_net) critic_net->init(seed, index + (1u << 20));
  sync_target();
}

void AgentModel::sync_target() {
  target.store().unflatten(net.store().flatten());
  if (critic_net) critic_target->store().unflatten(critic_net->store().flatten());
}

TrunkOutput AgentModel::forward(const std::vector<Mat>& entries, const Gso& gso) {
  TrunkOutput out = net.forward(entries, gso);
  if (critic_net) out.values = critic_net->forward(entries, gso).values;
  return out;
}

Vec AgentModel::target_values(const std::vector<Mat>& entries, const Gso& gso) {
  return critic_target ? critic_target->forward(entries, gso).values
                       : target.forward(entries, gso).values;
}

std::vector<Mat> stack_entries(const std::vector<const Mat*>& sequences) {
  if (sequences.empty()) throw std::invalid_argument("stack_entries: no sequences");
  const Eigen::Index k = sequences.front()->rows();
  const Eigen::Index f = sequences.front()->cols();
  std::vector<Mat> entries(k, Mat(static_cast<Eigen::Index>(sequences.size()), f));
  for (std::size_t r = 0; r < sequences.size(); ++r) {
    const Mat& s = *sequences[r];
    if (s.rows() != k || s.cols() != f) throw std::invalid_argument("stack_entries: ragged sequences");
    for (Eigen::Index e = 0; e < k; ++e) entries[e].row(static_cast<Eigen::Index>(r)) = s.row(e);
  }
  return entries;
}

namespace {

std::vector<double> to_std(const Vec& v) { return {v.data(), v.data() + v.size()}; }

// Gradients for one agent; `target_is_live` means the target copy equals the
// live network, so the live forward already yields the target values.
AgentUpdateStats agent_gradients(AgentModel& model, const ExperienceBatch& batch,
                                 const RoadNetwork& net, int agent, const ReturnParams& params,
                                 double entropy_coef, bool normalize, bool target_is_live) {
  const Gso gso = Gso::make_identity();
  const AgentTrajectory& traj = batch.agents[agent];
  std::vector<const Mat*> seqs;
  seqs.reserve(traj.sequences.size());
  for (const Mat& s : traj.sequences) seqs.push_back(&s);
  const std::vector<Mat> entries = stack_entries(seqs);

  double bootstrap = 0.0;
  if (!batch.ends_terminal()) {
    const auto boot = stack_entries({&batch.bootstrap_sequences[agent]});
    bootstrap = model.target_values(boot, gso)(0);
  }
  std::vector<double> target_vals;
  if (!target_is_live) target_vals = to_std(model.target_values(entries, gso));

  const std::vector<double> returns = sampled_returns(batch, net, agent, params, bootstrap);

  AgentUpdateStats stats;
  const TrunkOutput out = model.net.forward(entries, gso);
  Vec values = out.values;
  if (model.critic_net) values = model.critic_net->forward(entries, gso).values;
  if (target_is_live) target_vals = to_std(values);

  std::vector<double> adv = advantages(returns, target_vals);
  if (normalize) standardize(adv);
  const LossResult actor = actor_loss(out.probs, traj.actions, adv, entropy_coef);
  const LossResult critic = critic_loss(values, returns);
  if (model.critic_net) {
    model.net.backward(actor.dlogits, Vec::Zero(values.size()));
    model.critic_net->backward(Mat::Zero(out.logits.rows(), out.logits.cols()), critic.dvalues);
  } else {
    model.net.backward(actor.dlogits, critic.dvalues);
  }
  stats.actor_loss = actor.loss;
  stats.critic_loss = critic.loss;
  stats.entropy = actor.entropy;
  stats.clamped_logs = actor.clamped_logs;
  return stats;
}

// Shared graph-mode model: every step of the batch is one forward over all
// nodes; per-agent losses are averaged over agents.
AgentUpdateStats graph_gradients(AgentModel& model, const ExperienceBatch& batch,
                                 const RoadNetwork& net, const Gso& gso, const ReturnParams& params,
                                 double entropy_coef, bool normalize) {
  const int n = batch.num_agents();
  const int b = batch.size();
  auto node_entries = [&](const std::vector<const Mat*>& seqs) { return stack_entries(seqs); };
  auto step_entries = [&](int tau) {
    std::vector<const Mat*> seqs(n);
    for (int i = 0; i < n; ++i) seqs[i] = &batch.agents[i].sequences[tau];
    return node_entries(seqs);
  };

  Vec bootstrap = Vec::Zero(n);
  if (!batch.ends_terminal()) {
    std::vector<const Mat*> seqs(n);
    for (int i = 0; i < n; ++i) seqs[i] = &batch.bootstrap_sequences[i];
    bootstrap = model.target_values(node_entries(seqs), gso);
  }
  std::vector<std::vector<double>> target_vals(n, std::vector<double>(b));
  for (int tau = 0; tau < b; ++tau) {
    const Vec v = model.target_values(step_entries(tau), gso);
    for (int i = 0; i < n; ++i) target_vals[i][tau] = v(i);
  }
  std::vector<std::vector<double>> adv(n), ret(n);
  for (int i = 0; i < n; ++i) {
    ret[i] = sampled_returns(batch, net, i, params, bootstrap(i));
    adv[i] = advantages(ret[i], target_vals[i]);
    if (normalize) standardize(adv[i]);
  }

  AgentUpdateStats stats;
  const double inv_b = 1.0 / static_cast<double>(b);
  for (int tau = 0; tau < b; ++tau) {
    const std::vector<Mat> entries = step_entries(tau);
    const TrunkOutput out = model.net.forward(entries, gso);
    Vec values = out.values;
    if (model.critic_net) values = model.critic_net->forward(entries, gso).values;
    std::vector<int> acts(n);
    std::vector<double> a(n), r(n);
    for (int i = 0; i < n; ++i) {
      acts[i] = batch.agents[i].actions[tau];
      a[i] = adv[i][tau];
      r[i] = ret[i][tau];
    }
    const LossResult actor = actor_loss(out.probs, acts, a, entropy_coef);
    const LossResult critic = critic_loss(values, r);
    if (model.critic_net) {
      model.net.backward(actor.dlogits * inv_b, Vec::Zero(n));
      model.critic_net->backward(Mat::Zero(n, out.logits.cols()), critic.dvalues * inv_b);
    } else {
      model.net.backward(actor.dlogits * inv_b, critic.dvalues * inv_b);
    }
    stats.actor_loss += actor.loss * inv_b;
    stats.critic_loss += critic.loss * inv_b;
    stats.entropy += actor.entropy * inv_b;
    stats.clamped_logs += actor.clamped_logs;
  }
  return stats;
}

}  // namespace

AgentUpdateStats accumulate_agent_gradients(AgentModel& model, const ExperienceBatch& batch,
                                            const RoadNetwork& net, int agent,
                                            const ReturnParams& params, double entropy_coef) {
  if (agent < 0 || agent >= batch.num_agents()) throw std::out_of_range("unknown agent");
  if (batch.size() == 0) throw std::invalid_argument("empty batch");
  return agent_gradients(model, batch, net, agent, params, entropy_coef, false, false);
}

std::vector<AgentModel> make_models(const TrainSetup& setup) {
  const int n = setup.net->num_nodes();
  const bool shared = setup.train.share_params || setup.train.mode == ExecutionMode::kGraph;
  const int count = shared ? 1 : n;
  ModelConfig mc = setup.model;
  mc.K = setup.agg.K;
  std::vector<AgentModel> models;
  models.reserve(count);
  for (int i = 0; i < count; ++i) {
    models.emplace_back(mc, setup.train.split_trunk);
    models.back().init(setup.train.seed, static_cast<std::uint32_t>(i));
  }
  return models;
}

// ------------------------------------------------------------------ training

TrainResult train(const TrainSetup& setup, std::vector<AgentModel> models,
                  const std::function<void(const TrainLogRow&)>& on_episode) {
  if (setup.net == nullptr || setup.op == nullptr) throw std::invalid_argument("train: missing network");
  const TrainConfig& tc = setup.train;
  tc.validate();
  setup.model.validate();
  const RoadNetwork& net = *setup.net;
  const int n = net.num_nodes();
  const bool graph = tc.mode == ExecutionMode::kGraph;
  const bool shared = tc.share_params || graph;

  if (models.empty()) models = make_models(setup);
  const std::size_t expected = shared ? 1 : static_cast<std::size_t>(n);
  if (models.size() != expected) {
    throw std::invalid_argument("expected " + std::to_string(expected) + " models, got " +
                                std::to_string(models.size()));
  }
  if (models.front().net.config().K != setup.agg.K) {
    throw std::invalid_argument("model sequence length does not match aggregation K");
  }
  auto model_of = [&](int agent) -> AgentModel& { return models[shared ? 0 : agent]; };

  Simulator env(net, setup.sim, setup.flows);
  const ModelConfig& mc = models.front().net.config();
  check_observation_layout(mc);
  const bool own_phase = mc.own_phase;
  SequenceBuilder builder(net, *setup.op, mc.input_dim(), setup.agg);
  const Gso gso = graph ? Gso::from_operator(*setup.op, models.front().net.config().k_tap)
                        : Gso::make_identity();
  const ReturnParams rp{tc.gamma, tc.spatial_alpha, tc.exact_spatial ? -1 : setup.agg.K};

  std::vector<RandomStream> action_rng;
  for (int i = 0; i < n; ++i) action_rng.emplace_back(tc.seed, StreamPurpose::kAction, i);

  TrainResult result;
  ExperienceBatch batch;
  batch.agents.resize(n);

  int episode = 0;
  env.reset(derive_seed(tc.seed, StreamPurpose::kEpisode, 0));
  builder.reset();
  bool observed = false;  // builder already holds the current observation

  double ep_reward = 0.0;
  long ep_steps = 0;
  double ep_actor = 0.0, ep_critic = 0.0, ep_entropy = 0.0;
  int ep_updates = 0;

  std::vector<int> actions(n);
  std::vector<Mat> seqs(n);

  for (long step = 0; step < tc.total_steps; ++step) {
    if (!observed) builder.push(observation_matrix(env, tc.wave_scale, own_phase));
    observed = false;
    for (int i = 0; i < n; ++i) seqs[i] = builder.agent_sequence(i);

    Vec values(n);
    if (graph) {
      std::vector<const Mat*> ptrs(n);
      for (int i = 0; i < n; ++i) ptrs[i] = &seqs[i];
      const TrunkOutput out = models[0].forward(stack_entries(ptrs), gso);
      for (int i = 0; i < n; ++i) {
        const Eigen::RowVectorXd p = out.probs.row(i);
        actions[i] = action_rng[i].categorical(std::vector<double>(p.data(), p.data() + p.size()));
      }
      values = out.values;
    } else {
      for (int i = 0; i < n; ++i) {
        const TrunkOutput out = model_of(i).forward(stack_entries({&seqs[i]}), gso);
        const Eigen::RowVectorXd p = out.probs.row(0);
        actions[i] = action_rng[i].categorical(std::vector<double>(p.data(), p.data() + p.size()));
        values(i) = out.values(0);
      }
    }

    const StepResult sr = env.step(actions);
    for (int i = 0; i < n; ++i) {
      AgentTrajectory& t = batch.agents[i];
      double r = sr.rewards[i] / tc.reward_norm;
      if (tc.reward_clip > 0.0) r = std::clamp(r, -tc.reward_clip, tc.reward_clip);
      t.sequences.push_back(std::move(seqs[i]));
      t.actions.push_back(actions[i]);
      t.rewards.push_back(r);
      t.values.push_back(values(i));
      t.dones.push_back(sr.done ? 1 : 0);
    }
    ep_reward += std::accumulate(sr.rewards.begin(), sr.rewards.end(), 0.0) / n;
    ++ep_steps;

    if (batch.size() == tc.batch_size) {
      if (!sr.done) {
        builder.push(observation_matrix(env, tc.wave_scale, own_phase));
        observed = true;
        for (int i = 0; i < n; ++i) batch.bootstrap_sequences.push_back(builder.agent_sequence(i));
      }
      const double progress = static_cast<double>(step + 1) / static_cast<double>(tc.total_steps);
      const double lr_scale = tc.lr_schedule == LrSchedule::kLinearDecay ? std::max(0.0, 1.0 - progress) : 1.0;

      for (AgentModel& m : models) {
        m.sync_target();
        m.net.store().zero_grad();
        if (m.critic_net) m.critic_net->store().zero_grad();
      }
      AgentUpdateStats total;
      if (graph) {
        total = graph_gradients(models[0], batch, net, gso, rp, tc.entropy_coef,
                                tc.normalize_advantages);
      } else {
        for (int i = 0; i < n; ++i) {
          const AgentUpdateStats s =
              agent_gradients(model_of(i), batch, net, i, rp, tc.entropy_coef,
                              tc.normalize_advantages, true);
          total.actor_loss += s.actor_loss / n;
          total.critic_loss += s.critic_loss / n;
          total.entropy += s.entropy / n;
          total.clamped_logs += s.clamped_logs;
          if (!std::isfinite(s.actor_loss) || !std::isfinite(s.critic_loss)) {
            std::ostringstream msg;
            msg << "non-finite loss at episode " << episode << ", step " << step + 1 << ", agent "
                << i << ": actor " << s.actor_loss << ", critic " << s.critic_loss;
            throw std::runtime_error(msg.str());
          }
        }
      }
      if (!std::isfinite(total.actor_loss) || !std::isfinite(total.critic_loss)) {
        std::ostringstream msg;
        msg << "non-finite loss at episode " << episode << ", step " << step + 1 << ": actor "
            << total.actor_loss << ", critic " << total.critic_loss;
        throw std::runtime_error(msg.str());
      }
      for (AgentModel& m : models) {
        if (m.critic_net) {
          adam_step(m.net.store(), m.opt, tc.lr_actor * lr_scale, tc.lr_actor * lr_scale, tc);
          adam_step(m.critic_net->store(), m.critic_opt, tc.lr_critic * lr_scale,
                    tc.lr_critic * lr_scale, tc);
        } else {
          adam_step(m.net.store(), m.opt, tc.lr_actor * lr_scale, tc.lr_critic * lr_scale, tc);
        }
      }
      result.clamped_logs += total.clamped_logs;
      ep_actor += total.actor_loss;
      ep_critic += total.critic_loss;
      ep_entropy += total.entropy;
      ++ep_updates;
      batch.clear();
    }

    if (sr.done || step + 1 == tc.total_steps) {
      TrainLogRow row;
      row.episode = episode;
      row.steps = step + 1;
      row.mean_episode_reward = ep_reward / static_cast<double>(ep_steps);
      if (ep_updates > 0) {
        row.actor_loss = ep_actor / ep_updates;
        row.critic_loss = ep_critic / ep_updates;
        row.entropy = ep_entropy / ep_updates;
      }
      // a trailing partial episode is only logged when it is complete
      if (sr.done) {
        result.log.push_back(row);
        if (on_episode) on_episode(row);
      }
      ep_reward = 0.0;
      ep_steps = 0;
      ep_actor = ep_critic = ep_entropy = 0.0;
      ep_updates = 0;
      if (sr.done) {
        ++episode;
        env.reset(derive_seed(tc.seed, StreamPurpose::kEpisode, static_cast<std::uint32_t>(episode)));
        builder.reset();
        observed = false;
      }
    }
  }
  for (AgentModel& m : models) m.sync_target();
  result.models = std::move(models);
  return result;
}

// ---------------------------------------------------------------- controller

LearnedController::LearnedController(std::string name, const RoadNetwork& net,
                                     const DiffusionOperator& op, std::vector<AgentModel> models,
                                     AggregationOptions agg, ExecutionMode mode, double wave_scale,
                                     bool greedy)
    : name_(std::move(name)),
      net_(&net),
      models_(std::move(models)),
      builder_(net, op, models_.empty() ? 1 : models_.front().net.config().input_dim(), agg),
      mode_(mode),
      wave_scale_(wave_scale),
      greedy_(greedy) {
  if (models_.empty()) throw std::invalid_argument("learned controller needs at least one model");
  check_observation_layout(models_.front().net.config());
  const std::size_t n = static_cast<std::size_t>(net.num_nodes());
  if (models_.size() != 1 && models_.size() != n) {
    throw std::invalid_argument("learned controller: expected 1 or " + std::to_string(n) +
                                " models, got " + std::to_string(models_.size()));
  }
  if (models_.front().net.config().K != agg.K) {
    throw std::invalid_argument("model sequence length does not match aggregation K");
  }
  if (mode_ == ExecutionMode::kGraph) {
    if (models_.size() != 1) throw std::invalid_argument("graph mode needs one shared model");
    graph_gso_ = Gso::from_operator(op, models_.front().net.config().k_tap);
  }
}

void LearnedController::begin_episode(const Simulator&, std::uint64_t episode_seed) {
  builder_.reset();
  action_rng_.clear();
  for (int i = 0; i < net_->num_nodes(); ++i) {
    action_rng_.emplace_back(episode_seed, StreamPurpose::kAction, i);
  }
}

std::vector<int> LearnedController::act(const Simulator& sim) {
  const int n = net_->num_nodes();
  builder_.push(observation_matrix(sim, wave_scale_, models_.front().net.config().own_phase));
  std::vector<int> actions(n);
  auto choose = [&](const Mat& probs, Eigen::Index row, int agent) {
    if (greedy_) return argmax_row(probs, row);
    const Eigen::RowVectorXd p = probs.row(row);
    return action_rng_[agent].categorical(std::vector<double>(p.data(), p.data() + p.size()));
  };
  if (mode_ == ExecutionMode::kGraph) {
    std::vector<Mat> seqs(n);
    std::vector<const Mat*> ptrs(n);
    for (int i = 0; i < n; ++i) {
      seqs[i] = builder_.agent_sequence(i);
      ptrs[i] = &seqs[i];
    }
    const TrunkOutput out = models_[0].net.forward(stack_entries(ptrs), graph_gso_);
    for (int i = 0; i < n; ++i) actions[i] = choose(out.probs, i, i);
    return actions;
  }
  const Gso id = Gso::make_identity();
  for (int i = 0; i < n; ++i) {
    const Mat seq = builder_.agent_sequence(i);
    AgentModel& m = models_[models_.size() == 1 ? 0 : i];
    const TrunkOutput out = m.net.forward(stack_entries({&seq}), id);
    actions[i] = choose(out.probs, 0, i);
  }
  return actions;
}

// ---------------------------------------------------------------- evaluation

std::uint64_t evaluation_episode_seed(std::uint64_t seed, int episode) {
  return derive_seed(seed ^ 0x6576616c75617465ULL, StreamPurpose::kEpisode,
                     static_cast<std::uint32_t>(episode));
}

EpisodeSummary EvaluationResult::mean() const {
  EpisodeSummary m;
  if (episodes.empty()) return m;
  const double k = static_cast<double>(episodes.size());
  for (const EpisodeSummary& e : episodes) {
    m.avg_queue += e.avg_queue / k;
    m.avg_speed += e.avg_speed / k;
    m.avg_trip_delay += e.avg_trip_delay / k;
    m.avg_intersection_delay += e.avg_intersection_delay / k;
    m.episode_reward += e.episode_reward / k;
    m.completed_trips += e.completed_trips;
  }
  m.completed_trips = static_cast<long>(std::llround(static_cast<double>(m.completed_trips) / k));
  return m;
}

EpisodeSummary EvaluationResult::stddev() const {
  EpisodeSummary s;
  if (episodes.empty()) return s;
  const EpisodeSummary m = mean();
  const double k = static_cast<double>(episodes.size());
  auto sq = [](double x) { return x * x; };
  double trips = 0.0;
  for (const EpisodeSummary& e : episodes) {
    s.avg_queue += sq(e.avg_queue - m.avg_queue) / k;
    s.avg_speed += sq(e.avg_speed - m.avg_speed) / k;
    s.avg_trip_delay += sq(e.avg_trip_delay - m.avg_trip_delay) / k;
    s.avg_intersection_delay += sq(e.avg_intersection_delay - m.avg_intersection_delay) / k;
    s.episode_reward += sq(e.episode_reward - m.episode_reward) / k;
    trips += sq(static_cast<double>(e.completed_trips - m.completed_trips)) / k;
  }
  s.avg_queue = std::sqrt(s.avg_queue);
  s.avg_speed = std::sqrt(s.avg_speed);
  s.avg_trip_delay = std::sqrt(s.avg_trip_delay);
  s.avg_intersection_delay = std::sqrt(s.avg_intersection_delay);
  s.episode_reward = std::sqrt(s.episode_reward);
  s.completed_trips = static_cast<long>(std::llround(std::sqrt(trips)));
  return s;
}

EvaluationResult evaluate(Simulator& env, Controller& controller, int episodes, std::uint64_t seed) {
  if (episodes <= 0) throw std::invalid_argument("evaluate: episodes must be positive");
  EvaluationResult res;
  res.controller = controller.name();
  for (int e = 0; e < episodes; ++e) {
    const std::uint64_t es = evaluation_episode_seed(seed, e);
    env.reset(es);
    controller.begin_episode(env, es);
    std::vector<MetricsSnapshot> stream;
    while (!env.done()) {
      const std::vector<int> actions = controller.act(env);
      env.step(actions);
      stream.push_back(env.metrics_snapshot());
    }
    EpisodeSummary s;
    std::vector<double> q, sp, d, r;
    for (const MetricsSnapshot& m : stream) {
      q.push_back(m.avg_queue);
      sp.push_back(m.avg_speed);
      d.push_back(m.avg_intersection_delay);
      r.push_back(m.avg_reward);
    }
    s.avg_queue = mean_of(q);
    s.avg_speed = mean_of(sp);
    s.avg_intersection_delay = mean_of(d);
    s.episode_reward = mean_of(r);
    s.avg_trip_delay = stream.empty() ? 0.0 : stream.back().avg_trip_delay;
    s.completed_trips = static_cast<long>(env.completed_trips().size());
    for (int vid : env.completed_trips()) {
      const Vehicle& v = env.vehicles()[vid];
      res.trips.push_back({e, v.id, v.depart_time, v.arrive_time, v.arrive_time - v.depart_time,
                           v.completed_wait()});
    }
    res.episodes.push_back(s);
    res.streams.push_back(std::move(stream));
  }
  std::size_t steps = 0;
  for (const auto& s : res.streams) steps = std::max(steps, s.size());
  res.per_step.resize(steps);
  for (std::size_t t = 0; t < steps; ++t) {
    std::array<std::vector<double>, 4> cols;
    for (const auto& s : res.streams) {
      if (t >= s.size()) continue;
      cols[0].push_back(s[t].avg_queue);
      cols[1].push_back(s[t].avg_speed);
      cols[2].push_back(s[t].avg_reward);
      cols[3].push_back(s[t].avg_intersection_delay);
    }
    for (int c = 0; c < 4; ++c) {
      const double m = mean_of(cols[c]);
      double var = 0.0;
      for (double x : cols[c]) var += (x - m) * (x - m);
      var /= static_cast<double>(cols[c].size());
      res.per_step[t][c] = {m, std::sqrt(var)};
    }
  }
  return res;
}

}  // namespace tsc
