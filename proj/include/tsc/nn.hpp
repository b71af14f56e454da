#pragma once

// Differentiable agent network: encoder -> two diffusion-convolution GRU
// layers unrolled over the aggregation sequence -> softmax actor and
// linear critic heads. Gradients are hand-derived reverse mode; every
// layer keeps what its backward pass needs in an explicit cache.
//
// Matrices are row-major in meaning: each row is one graph node (graph
// mode) or one independent sample (identity shift operator).

#include "tsc/netgraph.hpp"

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

namespace tsc {

using Mat = Eigen::MatrixXd;
using Vec = Eigen::VectorXd;

enum class ParamGroup { kTrunk, kActor, kCritic };

struct Param {
  std::string name;
  Mat value;
  Mat grad;
  ParamGroup group = ParamGroup::kTrunk;
};

/// Owns parameters in declaration order. Mutable access bumps a version
/// counter so derived quantities can be cached.
class ParamStore {
 public:
  int add(std::string name, int rows, int cols, ParamGroup group);

  const Mat& value(int i) const { return params_[i].value; }
  Mat& mutable_value(int i) {
    ++version_;
    return params_[i].value;
  }
  Mat& grad(int i) { return params_[i].grad; }
  const Mat& grad(int i) const { return params_[i].grad; }

  std::size_t size() const { return params_.size(); }
  const Param& operator[](std::size_t i) const { return params_[i]; }
  Param& mutable_param(std::size_t i) {
    ++version_;
    return params_[i];
  }
  long num_scalars() const;
  void zero_grad();
  std::uint64_t version() const { return version_; }

  std::vector<double> flatten() const;
  void unflatten(const std::vector<double>& flat);

 private:
  std::vector<Param> params_;
  std::uint64_t version_ = 0;
};

/// Shift operator context for graph filters. The identity operator lets the
/// rows be independent samples.
struct Gso {
  bool identity = true;
  std::vector<Mat> fwd;  // fwd^0 .. fwd^{k_tap-1}
  std::vector<Mat> rev;

  static Gso make_identity() { return {}; }
  static Gso from_operator(const DiffusionOperator& op, int k_tap);
};

struct AffineLayer {
  int weight = -1;  // in x out
  int bias = -1;    // 1 x out

  static AffineLayer create(ParamStore& store, const std::string& name, int in, int out,
                            ParamGroup group);
  Mat forward(const ParamStore& store, const Mat& x) const;
  /// Accumulates parameter gradients, returns dL/dx.
  Mat backward(ParamStore& store, const Mat& x, const Mat& dy) const;
};

/// Bank of K_tap filter taps per shift direction, mapping F_in features to
/// F_out features: x = sum_k (fwd^k z psi1_k + rev^k z psi2_k).
struct GraphFilterBank {
  int in = 0;
  int out = 0;
  std::vector<int> taps_fwd;
  std::vector<int> taps_rev;

  static GraphFilterBank create(ParamStore& store, const std::string& name, int in, int out,
                                int k_tap, ParamGroup group);
  int k_tap() const { return static_cast<int>(taps_fwd.size()); }
  /// Linear part only.
  Mat apply(const ParamStore& store, const Gso& gso, const Mat& z) const;
  /// Sum of all taps; equals the filter under the identity operator.
  Mat summed_taps(const ParamStore& store) const;
  Mat backward(ParamStore& store, const Gso& gso, const Mat& z, const Mat& dx) const;

 private:
  mutable Mat sum_cache_;
  mutable const ParamStore* sum_store_ = nullptr;
  mutable std::uint64_t sum_version_ = 0;
};

/// relu(bank(z)).
Mat graph_filter(const GraphFilterBank& bank, const ParamStore& store, const Gso& gso, const Mat& z);

struct GruCache {
  Mat x, h_prev, xh, z, r, gated, xg, c, h;
};

/// GRU whose input/hidden products are diffusion convolutions over [x, h].
struct DiffusionGruCell {
  int in = 0;
  int hidden = 0;
  GraphFilterBank gate_z, gate_r, candidate;
  int bias_z = -1, bias_r = -1, bias_c = -1;
  /// Gate the candidate's hidden input with the update gate instead of the
  /// reset gate.
  bool literal_candidate_gate = false;

  static DiffusionGruCell create(ParamStore& store, const std::string& name, int in, int hidden,
                                 int k_tap, bool literal_candidate_gate);
  Mat step(const ParamStore& store, const Gso& gso, const Mat& x, const Mat& h_prev,
           GruCache* cache = nullptr) const;
  void backward(ParamStore& store, const Gso& gso, const GruCache& cache, const Mat& dh, Mat& dx,
                Mat& dh_prev) const;
};

struct ModelConfig {
  int wave_dim = 12;
  int action_dim = 25;
  int encoder_units = 64;
  int hidden = 64;
  int K = 3;
  int k_tap = 2;
  int num_actions = 5;
  bool literal_candidate_gate = false;
  /// Critic head also sees the raw one-hot action block.
  bool critic_sees_actions = true;
  /// The action block starts with the agent's own current phase (5 entries)
  /// before the four neighbour phases (20 entries).
  bool own_phase = true;

  int input_dim() const { return wave_dim + action_dim; }
  void validate() const;
};

struct Encoder {
  AffineLayer state, policy;
  int wave_dim = 0;
  int action_dim = 0;

  struct Cache {
    Mat wave, actions, state_pre, policy_pre;
  };
  /// concat(relu(wave A1 + c1), relu(actions A2 + c2)).
  Mat forward(const ParamStore& store, const Mat& x, Cache* cache = nullptr) const;
  Mat backward(ParamStore& store, const Cache& cache, const Mat& dy) const;
};

struct TrunkOutput {
  Mat logits;  // rows x num_actions
  Mat probs;
  Vec values;
};

/// Full agent network. forward() caches activations for one following
/// backward().
class AgentNet {
 public:
  AgentNet() = default;
  explicit AgentNet(const ModelConfig& config);

  /// Xavier-uniform weights, zero biases, zero actor output weights.
  void init(std::uint64_t seed, std::uint32_t index);
  void zero_params();

  /// entries[k] is rows x input_dim, the k-th sequence entry of every row.
  TrunkOutput forward(const std::vector<Mat>& entries, const Gso& gso);
  /// Accumulates gradients for dL/dlogits and dL/dvalues of the last forward.
  void backward(const Mat& dlogits, const Vec& dvalues);

  const ModelConfig& config() const { return config_; }
  ParamStore& store() { return store_; }
  const ParamStore& store() const { return store_; }
  const Encoder& encoder() const { return encoder_; }
  const DiffusionGruCell& gru1() const { return gru1_; }
  const DiffusionGruCell& gru2() const { return gru2_; }

  /// Signs of every rectifier input in the last forward pass.
  const std::vector<std::uint8_t>& relu_signature() const { return signature_; }

 private:
  struct StepCache {
    Encoder::Cache enc;
    GruCache g1, g2;
    Mat between_pre;
  };

  ModelConfig config_;
  ParamStore store_;
  Encoder encoder_;
  DiffusionGruCell gru1_, gru2_;
  AffineLayer actor_, critic_;

  Gso gso_;
  std::vector<StepCache> steps_;
  Mat critic_in_;
  std::vector<std::uint8_t> signature_;
};

// Free-function forms of the layer operations.
Mat encode(const AgentNet& net, const Mat& wave, const Mat& neighbor_actions);
Mat gru_step(const DiffusionGruCell& cell, const ParamStore& store, const Gso& gso, const Mat& x,
             const Mat& h_prev);
/// One sequence -> action distribution and value (single row).
TrunkOutput forward_trunk(AgentNet& net, const Mat& sequence, const Gso& gso = Gso::make_identity());

Mat softmax_rows(const Mat& logits);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  long worst_index = -1;
  long checked = 0;
  long skipped_kinks = 0;
  bool finite = true;
  std::string nonfinite_param;

  bool passed(double threshold = 1e-4) const { return finite && max_rel_error < threshold; }
};

/// Compares analytic gradients with central differences.
/// `loss` runs a forward pass and returns the scalar loss; `analytic` fills
/// the store's gradients. Coordinates whose perturbation flips any
/// rectifier are skipped (the loss is not differentiable there).
/// `max_per_param` < 0 checks every coordinate, otherwise a deterministic
/// sample of that many per tensor.
GradCheckReport grad_check(AgentNet& net, const std::function<double(AgentNet&)>& loss,
                           const std::function<void(AgentNet&)>& analytic, double h = 1e-5,
                           long max_per_param = -1, std::uint64_t seed = 0);

/// Relative error used by grad_check. The denominator is floored at 1e-6:
/// with h = 1e-5 a central difference of an O(1) loss carries roundoff near
/// 1e-11, so smaller gradients cannot be resolved to 1e-4 relative accuracy.
double relative_error(double analytic, double numeric);

}  // namespace tsc
