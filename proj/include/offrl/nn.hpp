// Minimal dense network stack: batched MLPs with optional LayerNorm and an
// explicit reverse pass, Adam, Polyak averaging and a tanh-squashed Gaussian
// policy head.
//
// Batches are column-major: a (features x batch) matrix holds one sample per
// column.
#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <optional>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "offrl/core.hpp"

namespace offrl::nn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;
using Rng = std::mt19937_64;

class NonFiniteError : public std::runtime_error {
 public:
  NonFiniteError(std::string leaf, const std::string& what)
      : std::runtime_error(what), leaf_(std::move(leaf)) {}
  const std::string& leaf() const noexcept { return leaf_; }

 private:
  std::string leaf_;
};

/// Raised when a tape is replayed after its parameters changed.
class StaleTapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct Leaf {
  std::string name;
  Matrix value;
};

/// Named parameter arrays. `version` changes on every mutation that goes
/// through `touch()`, which invalidates recorded tapes.
class ParamTree {
 public:
  ParamTree();

  void add(std::string name, Matrix value);
  std::size_t size() const noexcept { return leaves_.size(); }

  Matrix& operator[](const std::string& name);
  const Matrix& operator[](const std::string& name) const;
  Matrix& at(std::size_t i) { return leaves_[i].value; }
  const Matrix& at(std::size_t i) const { return leaves_[i].value; }
  const std::string& name(std::size_t i) const { return leaves_[i].name; }
  bool contains(const std::string& name) const;

  /// Zeros with the same names and shapes.
  ParamTree zeros_like() const;
  bool same_shape(const ParamTree& other) const;
  bool all_finite() const;
  std::size_t num_scalars() const;

  void touch() noexcept;
  std::uint64_t id() const noexcept { return id_; }
  std::uint64_t version() const noexcept { return version_; }

  ParamTree(const ParamTree& other);
  ParamTree& operator=(const ParamTree& other);
  ParamTree(ParamTree&&) noexcept = default;
  ParamTree& operator=(ParamTree&&) noexcept = default;

  std::vector<Leaf>::const_iterator begin() const { return leaves_.begin(); }
  std::vector<Leaf>::const_iterator end() const { return leaves_.end(); }

 private:
  std::size_t index_of(const std::string& name) const;

  std::vector<Leaf> leaves_;
  std::uint64_t id_;
  std::uint64_t version_ = 0;
};

/// Elementwise a += scale * b.
void axpy(ParamTree& a, const ParamTree& b, double scale);

struct MLPConfig {
  std::size_t input_dim = 1;
  std::vector<std::size_t> hidden_dims = {32, 32};
  std::size_t output_dim = 1;
  /// LayerNorm after every linear layer except the last, before the ReLU.
  bool layernorm = true;
  double layernorm_eps = 1e-5;

  void validate() const;
  std::size_t num_layers() const { return hidden_dims.size() + 1; }
};

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; LayerNorm
/// gain 1 and bias 0.
ParamTree init_mlp(const MLPConfig& cfg, Rng& rng);

struct LayerRecord {
  Matrix input;
  Matrix pre_norm;   // W x + b
  Matrix normalized; // (z - mean) / std, LayerNorm layers only
  RowVector inv_std;
  Matrix pre_activation;
};

/// Reverse-pass record of one batched forward call.
struct Tape {
  const ParamTree* params = nullptr;
  std::uint64_t params_id = 0;
  std::uint64_t params_version = 0;
  MLPConfig config;
  std::vector<LayerRecord> layers;
  Matrix output;
};

/// Batched forward; `x` is (input_dim x batch).
Matrix forward(const ParamTree& params, const MLPConfig& cfg, const Matrix& x,
               Tape* tape = nullptr);
/// Single-sample convenience overload.
Vector forward(const ParamTree& params, const MLPConfig& cfg, const Vector& x,
               Tape* tape = nullptr);

struct Gradients {
  ParamTree params;
  Matrix input;
};

/// Exact reverse-mode gradients of sum(upstream .* output).
Gradients backward(const Tape& tape, const Matrix& upstream);

/// (x - mean) / sqrt(var + eps) * gain + bias over the feature vector, with
/// the population variance.
Vector layernorm(const Vector& x, const Vector& gain, const Vector& bias, double eps);

struct OptimizerState {
  double learning_rate = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::uint64_t step = 0;
  std::optional<ParamTree> first_moment;
  std::optional<ParamTree> second_moment;
};

/// Bias-corrected Adam update. Throws NonFiniteError naming the first
/// non-finite gradient leaf; parameters are left untouched in that case.
void adam_step(OptimizerState& state, ParamTree& params, const ParamTree& grads);

/// target <- tau * target + (1 - tau) * online. tau is the retention
/// coefficient: tau = 1 keeps the target, tau = 0 copies the online network.
void polyak_update(ParamTree& target, const ParamTree& online, double tau);

// ---------------------------------------------------------------------------
// Squashed Gaussian policy head

inline constexpr double kLogStdMin = -5.0;
inline constexpr double kLogStdMax = 2.0;

struct GaussianPolicyHead {
  Vector mean;
  Vector log_std;  // clamped to [kLogStdMin, kLogStdMax] on use
};

/// action = tanh(mean + std * noise) with the change-of-variables log density.
std::pair<Vector, double> sample_squashed_gaussian(const GaussianPolicyHead& head,
                                                   std::uint64_t seed);

/// Batched head over a network output of shape (2 * act_dim x batch): the
/// first act_dim rows are means, the rest raw log-stds.
struct SquashedSample {
  Matrix action;
  Matrix noise;
  Matrix std;
  RowVector log_prob;
  /// 1 where the raw log-std was inside the clamp range.
  Matrix log_std_live;
};

SquashedSample sample_squashed(const Matrix& head_out, Rng& rng);
/// Deterministic-noise variant (noise given, e.g. zeros for the mean action).
SquashedSample squash_with_noise(const Matrix& head_out, const Matrix& noise);

/// Gradient w.r.t. the head output given upstream gradients on the sampled
/// action and its log density (reparameterized).
Matrix squashed_backward(const SquashedSample& s, const Matrix& d_action,
                         const RowVector& d_log_prob);

struct ActionLogProb {
  RowVector log_prob;
  /// d log_prob / d head_out.
  Matrix grad;
};

/// Log density of given actions in (-1, 1) under the head, with gradient.
ActionLogProb squashed_log_prob(const Matrix& head_out, const Matrix& actions);

/// tanh of the mean rows.
Matrix squashed_mean_action(const Matrix& head_out);

// ---------------------------------------------------------------------------
// Checkpoints: {"config": {...}, "leaves": {name: nested lists},
//               "optimizer": {...}?}

std::string checkpoint_to_json(const ParamTree& params, const MLPConfig& cfg,
                               const OptimizerState* opt = nullptr);
void checkpoint_from_json(const std::string& text, ParamTree& params, MLPConfig& cfg,
                          OptimizerState* opt = nullptr);

}  // namespace offrl::nn
