#include "offrl/agents.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>

namespace offrl::agents {
namespace {

Matrix stack(const Matrix& top, const Matrix& bottom) {
  Matrix x(top.rows() + bottom.rows(), top.cols());
  x << top, bottom;
  return x;
}

double grad_norm(const nn::ParamTree& g) {
  double s = 0.0;
  for (const auto& leaf : g) s += leaf.value.squaredNorm();
  return std::sqrt(s);
}

nn::ParamTree scaled(const nn::ParamTree& g, double k) {
  nn::ParamTree out = g;
  for (std::size_t i = 0; i < out.size(); ++i) out.at(i) *= k;
  return out;
}

void copy_into(nn::ParamTree& dst, const nn::ParamTree& src) { nn::polyak_update(dst, src, 0.0); }

std::size_t member_count(const ActorCritic& ac) { return ac.critics.size(); }

// Derivative of sum(upstream .* Q) with respect to the action rows of the
// critic input.
Matrix action_input_grad(const nn::Tape& tape, const RowVector& upstream, Eigen::Index act_dim) {
  const nn::Gradients g = nn::backward(tape, upstream);
  return g.input.bottomRows(act_dim);
}

std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t h = 1469598103934665603ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 1099511628211ULL;
  }
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Featurizer / tables

Featurizer Featurizer::continuous(std::size_t obs_dim, std::size_t act_dim) {
  if (obs_dim == 0 || act_dim == 0) throw ConfigError("featurizer dims must be positive");
  Featurizer f;
  f.obs_dim = obs_dim;
  f.act_dim = act_dim;
  return f;
}

Featurizer Featurizer::discrete(std::size_t n_states, std::size_t n_actions) {
  if (n_states == 0 || n_actions == 0) throw ConfigError("featurizer sizes must be positive");
  Featurizer f;
  f.obs_dim = n_states;
  f.act_dim = n_actions;
  f.n_states = n_states;
  f.n_actions = n_actions;
  return f;
}

Vector Featurizer::encode_obs(const Observation& o) const {
  if (n_states > 0) {
    const auto* s = std::get_if<std::size_t>(&o);
    if (!s || *s >= n_states) throw ConfigError("expected a discrete state below n_states");
    Vector v = Vector::Zero(static_cast<Eigen::Index>(n_states));
    v(static_cast<Eigen::Index>(*s)) = 1.0;
    return v;
  }
  const auto* x = std::get_if<std::vector<double>>(&o);
  if (!x || x->size() != obs_dim) throw ConfigError("observation width does not match obs_dim");
  return Eigen::Map<const Vector>(x->data(), static_cast<Eigen::Index>(x->size()));
}

Vector Featurizer::encode_action(const ActionValue& a) const {
  if (n_actions > 0) {
    const auto* i = std::get_if<std::size_t>(&a);
    if (!i || *i >= n_actions) throw ConfigError("expected a discrete action below n_actions");
    Vector v = Vector::Zero(static_cast<Eigen::Index>(n_actions));
    v(static_cast<Eigen::Index>(*i)) = 1.0;
    return v;
  }
  const auto* x = std::get_if<std::vector<double>>(&a);
  if (!x || x->size() != act_dim) throw ConfigError("action width does not match act_dim");
  return Eigen::Map<const Vector>(x->data(), static_cast<Eigen::Index>(x->size()));
}

TransitionTable make_table(const OfflineDataset& ds, const Featurizer& feat,
                           const ReturnConfig& cfg) {
  const auto n = static_cast<Eigen::Index>(ds.num_transitions());
  if (n == 0) throw ConfigError("cannot train on an empty dataset");
  TransitionTable t;
  t.states.resize(static_cast<Eigen::Index>(feat.obs_dim), n);
  t.next_states.resize(static_cast<Eigen::Index>(feat.obs_dim), n);
  t.actions.resize(static_cast<Eigen::Index>(feat.act_dim), n);
  t.rewards.resize(n);
  t.not_done.resize(n);
  t.rtg = RowVector::Zero(n);
  t.soft_rtg = RowVector::Zero(n);
  t.has_rtg = true;
  t.has_soft_rtg = true;
  Eigen::Index c = 0;
  for (const auto& traj : ds.trajectories) {
    const std::vector<bool> mask = critic_pretrain_mask(traj, cfg);
    for (std::size_t k = 0; k < traj.transitions.size(); ++k, ++c) {
      const Transition& tr = traj.transitions[k];
      t.states.col(c) = feat.encode_obs(tr.state);
      t.next_states.col(c) = feat.encode_obs(tr.next_state);
      t.actions.col(c) = feat.encode_action(tr.action);
      t.rewards(c) = tr.reward;
      t.not_done(c) = tr.done_kind == DoneKind::Termination ? 0.0 : 1.0;
      if (tr.rtg) t.rtg(c) = *tr.rtg; else t.has_rtg = false;
      if (tr.soft_rtg) t.soft_rtg(c) = *tr.soft_rtg; else t.has_soft_rtg = false;
      if (mask[k]) t.pretrain_indices.push_back(static_cast<std::size_t>(c));
    }
  }
  return t;
}

Batch gather(const TransitionTable& table, const std::vector<std::size_t>& idx) {
  const auto b = static_cast<Eigen::Index>(idx.size());
  Batch out;
  out.s.resize(table.states.rows(), b);
  out.s2.resize(table.next_states.rows(), b);
  out.a.resize(table.actions.rows(), b);
  out.r.resize(b);
  out.not_done.resize(b);
  out.rtg.resize(b);
  out.soft_rtg.resize(b);
  for (Eigen::Index j = 0; j < b; ++j) {
    const auto i = static_cast<Eigen::Index>(idx[static_cast<std::size_t>(j)]);
    if (i >= table.states.cols()) throw ConfigError("batch index out of range");
    out.s.col(j) = table.states.col(i);
    out.s2.col(j) = table.next_states.col(i);
    out.a.col(j) = table.actions.col(i);
    out.r(j) = table.rewards(i);
    out.not_done(j) = table.not_done(i);
    out.rtg(j) = table.rtg(i);
    out.soft_rtg(j) = table.soft_rtg(i);
  }
  out.has_rtg = table.has_rtg;
  out.has_soft_rtg = table.has_soft_rtg;
  return out;
}

Batch sample_batch(const TransitionTable& table, std::size_t batch_size, nn::Rng& rng,
                   bool pretrain_only) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  const std::size_t pool = pretrain_only ? table.pretrain_indices.size() : table.size();
  if (pool == 0) {
    throw ConfigError(pretrain_only ? "no transitions are eligible for critic pre-training"
                                    : "cannot sample from an empty table");
  }
  std::uniform_int_distribution<std::size_t> pick(0, pool - 1);
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) {
    const std::size_t k = pick(rng);
    i = pretrain_only ? table.pretrain_indices[k] : k;
  }
  return gather(table, idx);
}

// ---------------------------------------------------------------------------
// Configuration

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::BC: return "BC";
    case Algorithm::TD3BC: return "TD3BC";
    case Algorithm::CQLOnly: return "CQLOnly";
    case Algorithm::TD3BC_CQL: return "TD3BC_CQL";
    case Algorithm::EnsembleSoftAC: return "EnsembleSoftAC";
    case Algorithm::EnsembleSoftAC_BC: return "EnsembleSoftAC_BC";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
  for (auto a : {Algorithm::BC, Algorithm::TD3BC, Algorithm::CQLOnly, Algorithm::TD3BC_CQL,
                 Algorithm::EnsembleSoftAC, Algorithm::EnsembleSoftAC_BC}) {
    if (to_string(a) == s) return a;
  }
  throw ConfigError("unknown algorithm '" + s + "'");
}

bool uses_gaussian_actor(Algorithm a) {
  return a == Algorithm::EnsembleSoftAC || a == Algorithm::EnsembleSoftAC_BC;
}

void AgentConfig::validate() const {
  if (num_critics == 0) throw ConfigError("num_critics must be at least 1");
  if (algorithm != Algorithm::BC && num_critics < 2) {
    throw ConfigError(to_string(algorithm) + " needs at least two critics");
  }
  if (batch_size == 0) throw ConfigError("batch_size must be positive");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ConfigError("gamma must lie in [0, 1]");
  if (!(tau >= 0.0 && tau <= 1.0)) throw ConfigError("tau must lie in [0, 1]");
  if (!(reward_scale > 0.0) || !std::isfinite(reward_scale)) {
    throw ConfigError("reward_scale must be positive");
  }
  if (!(actor_lr > 0.0) || !(critic_lr > 0.0)) throw ConfigError("learning rates must be positive");
  if (!(temperature >= 0.0)) throw ConfigError("temperature must be non-negative");
  if (!(bc_alpha >= 0.0)) throw ConfigError("bc_alpha must be non-negative");
  if (!(eta >= 0.0)) throw ConfigError("eta must be non-negative");
  if (!(cql_weight >= 0.0)) throw ConfigError("cql_weight must be non-negative");
  if (!(bc_weight >= 0.0)) throw ConfigError("bc_weight must be non-negative");
  if (!(cql_temperature > 0.0)) throw ConfigError("cql_temperature must be positive");
  if (cql_n_actions == 0) throw ConfigError("cql_n_actions must be positive");
  if (policy_delay == 0) throw ConfigError("policy_delay must be positive");
  if (!(policy_noise >= 0.0) || !(noise_clip >= 0.0)) throw ConfigError("noise must be non-negative");
  if (hidden_dims.empty()) throw ConfigError("hidden_dims must not be empty");
}

void PretrainConfig::validate() const {
  if (!(lambda_mix >= 0.0 && lambda_mix <= 1.0)) throw ConfigError("lambda_mix must lie in [0, 1]");
  if (pretrain_steps == 0) throw ConfigError("pretrain_steps must be positive");
  if (plateau_window == 0) throw ConfigError("plateau_window must be positive");
  if (!(plateau_tol >= 0.0)) throw ConfigError("plateau_tol must be non-negative");
  if (const auto* s = std::get_if<bcmode::Soft>(&bc_mode); s && !(s->temperature >= 0.0)) {
    throw ConfigError("soft BC temperature must be non-negative");
  }
  if (const auto* c = std::get_if<regularizer::CQL>(&value_regularizer); c && !(c->weight >= 0.0)) {
    throw ConfigError("CQL weight must be non-negative");
  }
  if (const auto* d = std::get_if<regularizer::EnsembleDiversify>(&value_regularizer);
      d && !(d->eta >= 0.0)) {
    throw ConfigError("eta must be non-negative");
  }
}

// ---------------------------------------------------------------------------
// Networks

Matrix ActorCritic::act_batch(const Matrix& obs) const {
  const Matrix out = nn::forward(actor.params, actor.cfg, obs);
  if (gaussian_actor) return nn::squashed_mean_action(out);
  return out.array().tanh();
}

Vector ActorCritic::act(const Vector& obs) const {
  Matrix m = obs;
  return act_batch(m).col(0);
}

RowVector ActorCritic::q_values(std::size_t member, const Matrix& s, const Matrix& a,
                                bool use_target) const {
  const Network& c = critics.at(member);
  return nn::forward(use_target ? c.target : c.params, c.cfg, stack(s, a));
}

ActorCritic make_actor_critic(const Featurizer& feat, const AgentConfig& cfg) {
  cfg.validate();
  ActorCritic ac;
  ac.feat = feat;
  ac.seed = cfg.seed;
  ac.rng.seed(cfg.seed);
  ac.gaussian_actor = uses_gaussian_actor(cfg.algorithm);

  ac.actor.cfg.input_dim = feat.obs_dim;
  ac.actor.cfg.hidden_dims = cfg.hidden_dims;
  ac.actor.cfg.output_dim = feat.act_dim * (ac.gaussian_actor ? 2 : 1);
  ac.actor.cfg.layernorm = cfg.actor_layernorm;
  ac.actor.params = nn::init_mlp(ac.actor.cfg, ac.rng);
  ac.actor.target = ac.actor.params;
  ac.actor.opt.learning_rate = cfg.actor_lr;

  for (std::size_t i = 0; i < cfg.num_critics; ++i) {
    Network c;
    c.cfg.input_dim = feat.obs_dim + feat.act_dim;
    c.cfg.hidden_dims = cfg.hidden_dims;
    c.cfg.output_dim = 1;
    c.cfg.layernorm = cfg.critic_layernorm;
    c.params = nn::init_mlp(c.cfg, ac.rng);
    c.target = c.params;
    c.opt.learning_rate = cfg.critic_lr;
    ac.critics.push_back(std::move(c));
  }
  return ac;
}

// ---------------------------------------------------------------------------
// Losses

double LossReport::get(const std::string& key) const {
  const auto it = losses.find(key);
  return it == losses.end() ? std::numeric_limits<double>::quiet_NaN() : it->second;
}

CombinedLoss normalize_and_combine(double primary_loss, double aux_loss, double c) {
  constexpr double kTiny = 1e-12;
  CombinedLoss out;
  out.primary_weight = std::abs(primary_loss) > kTiny ? 1.0 / std::abs(primary_loss) : 1.0;
  out.aux_weight = std::abs(aux_loss) > kTiny ? c / std::abs(aux_loss) : c;
  out.value = out.primary_weight * primary_loss + out.aux_weight * aux_loss;
  return out;
}

ValueAndGrad cql_regularizer(const Network& critic, const Batch& batch, std::size_t n_actions,
                             double temperature, nn::Rng& rng) {
  if (n_actions == 0) throw ConfigError("cql needs at least one sampled action");
  if (!(temperature > 0.0)) throw ConfigError("cql temperature must be positive");
  const Eigen::Index b = batch.s.cols();
  const Eigen::Index d = batch.a.rows();
  const auto n = static_cast<Eigen::Index>(n_actions);
  std::uniform_real_distribution<double> unif(-1.0, 1.0);

  Matrix x(batch.s.rows() + d, b * n);
  for (Eigen::Index i = 0; i < b; ++i) {
    for (Eigen::Index j = 0; j < n; ++j) {
      x.col(i * n + j).head(batch.s.rows()) = batch.s.col(i);
      for (Eigen::Index k = 0; k < d; ++k) x(batch.s.rows() + k, i * n + j) = unif(rng);
    }
  }
  nn::Tape rand_tape;
  nn::Tape data_tape;
  const RowVector q_rand = nn::forward(critic.params, critic.cfg, x, &rand_tape);
  const RowVector q_data = nn::forward(critic.params, critic.cfg, stack(batch.s, batch.a), &data_tape);

  RowVector up_rand(b * n);
  double lse_sum = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto z = q_rand.segment(i * n, n) / temperature;
    const double m = z.maxCoeff();
    const RowVector e = (z.array() - m).exp();
    const double s = e.sum();
    lse_sum += temperature * (m + std::log(s));
    up_rand.segment(i * n, n) = e / (s * static_cast<double>(b));
  }
  ValueAndGrad out;
  out.value = lse_sum / static_cast<double>(b) - q_data.mean();
  out.grad = nn::backward(rand_tape, up_rand).params;
  const RowVector up_data = RowVector::Constant(b, -1.0 / static_cast<double>(b));
  nn::axpy(out.grad, nn::backward(data_tape, up_data).params, 1.0);
  return out;
}

DiversityTerm ensemble_diversity(const std::vector<Network>& critics, const Batch& batch) {
  const std::size_t n = critics.size();
  DiversityTerm out;
  for (const auto& c : critics) out.grads.push_back(c.params.zeros_like());
  if (n < 2) return out;

  const Eigen::Index b = batch.s.cols();
  const Eigen::Index d = batch.a.rows();
  const Matrix x = stack(batch.s, batch.a);
  const RowVector ones = RowVector::Ones(b);
  std::vector<Matrix> g(n);
  for (std::size_t i = 0; i < n; ++i) {
    nn::Tape tape;
    nn::forward(critics[i].params, critics[i].cfg, x, &tape);
    g[i] = action_input_grad(tape, ones, d);
  }
  constexpr double kNormFloor = 1e-10;
  std::vector<RowVector> norms(n);
  std::vector<Matrix> unit(n);
  for (std::size_t i = 0; i < n; ++i) {
    norms[i] = g[i].colwise().norm().array().max(kNormFloor);
    unit[i] = g[i].array().rowwise() / norms[i].array();
  }
  const double pairs = static_cast<double>(n * (n - 1) / 2);
  const double scale = 1.0 / (pairs * static_cast<double>(b));
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) total += (unit[i].array() * unit[j].array()).sum();
  }
  out.value = total * scale;

  // d value / d g_i, then the parameter gradient of v_i . grad_a Q_i by a
  // central difference of grad_theta Q_i along v_i.
  constexpr double kStep = 1e-4;
  for (std::size_t i = 0; i < n; ++i) {
    Matrix v = Matrix::Zero(d, b);
    for (std::size_t j = 0; j < n; ++j) {
      if (j == i) continue;
      const RowVector cos = (unit[i].array() * unit[j].array()).colwise().sum();
      v += ((unit[j] - (unit[i].array().rowwise() * cos.array()).matrix()).array().rowwise() /
            norms[i].array())
               .matrix();
    }
    v *= scale;
    const RowVector vnorm = v.colwise().norm();
    Matrix dir = Matrix::Zero(d, b);
    for (Eigen::Index k = 0; k < b; ++k) {
      if (vnorm(k) > 0.0) dir.col(k) = v.col(k) / vnorm(k);
    }
    nn::Tape plus_tape;
    nn::Tape minus_tape;
    nn::forward(critics[i].params, critics[i].cfg, stack(batch.s, batch.a + kStep * dir), &plus_tape);
    nn::forward(critics[i].params, critics[i].cfg, stack(batch.s, batch.a - kStep * dir), &minus_tape);
    const RowVector w = vnorm / (2.0 * kStep);
    out.grads[i] = nn::backward(plus_tape, w).params;
    nn::axpy(out.grads[i], nn::backward(minus_tape, -w).params, 1.0);
  }
  return out;
}

LossReport bc_update(ActorCritic& ac, const Batch& batch) {
  const double b = static_cast<double>(batch.size());
  const double d = static_cast<double>(batch.a.rows());
  nn::Tape tape;
  const Matrix out = nn::forward(ac.actor.params, ac.actor.cfg, batch.s, &tape);
  Matrix d_out;
  double loss = 0.0;
  if (ac.gaussian_actor) {
    const nn::SquashedSample smp = nn::sample_squashed(out, ac.rng);
    const Matrix diff = smp.action - batch.a;
    loss = diff.squaredNorm() / (b * d);
    d_out = nn::squashed_backward(smp, 2.0 * diff / (b * d), RowVector::Zero(batch.s.cols()));
  } else {
    const Matrix pi = out.array().tanh();
    const Matrix diff = pi - batch.a;
    loss = diff.squaredNorm() / (b * d);
    d_out = (2.0 * diff / (b * d)).array() * (1.0 - pi.array().square());
  }
  const nn::Gradients g = nn::backward(tape, d_out);
  nn::adam_step(ac.actor.opt, ac.actor.params, g.params);
  ++ac.updates;
  LossReport r;
  r.losses["actor"] = loss;
  r.losses["bc"] = loss;
  r.grad_norms["actor"] = grad_norm(g.params);
  return r;
}

LossReport soft_bc_update(ActorCritic& ac, const Batch& batch, double temperature) {
  if (!ac.gaussian_actor) throw ConfigError("soft BC needs a stochastic actor");
  if (!(temperature >= 0.0)) throw ConfigError("soft BC temperature must be non-negative");
  const double b = static_cast<double>(batch.size());
  nn::Tape tape;
  const Matrix out = nn::forward(ac.actor.params, ac.actor.cfg, batch.s, &tape);
  const nn::SquashedSample smp = nn::sample_squashed(out, ac.rng);
  const nn::ActionLogProb data = nn::squashed_log_prob(out, batch.a);
  const double nll = -data.log_prob.mean();
  const double loss = temperature * smp.log_prob.mean() + nll;
  Matrix d_out = nn::squashed_backward(smp, Matrix::Zero(batch.a.rows(), batch.a.cols()),
                                       RowVector::Constant(batch.s.cols(), temperature / b));
  d_out -= data.grad / b;
  const nn::Gradients g = nn::backward(tape, d_out);
  nn::adam_step(ac.actor.opt, ac.actor.params, g.params);
  ++ac.updates;
  LossReport r;
  r.losses["actor"] = loss;
  r.losses["bc"] = nll;
  r.grad_norms["actor"] = grad_norm(g.params);
  return r;
}

RowVector clipped_double_q_target(const ActorCritic& ac, const Batch& batch,
                                  const Matrix& next_actions, double gamma) {
  RowVector q_min = ac.q_values(0, batch.s2, next_actions, true);
  for (std::size_t i = 1; i < member_count(ac); ++i) {
    q_min = q_min.cwiseMin(ac.q_values(i, batch.s2, next_actions, true));
  }
  return batch.r.array() + gamma * batch.not_done.array() * q_min.array();
}

RowVector td3_target(const ActorCritic& ac, const Batch& batch, const AgentConfig& cfg,
                     nn::Rng& rng) {
  std::normal_distribution<double> normal(0.0, cfg.policy_noise);
  Matrix a2 = nn::forward(ac.actor.target, ac.actor.cfg, batch.s2).array().tanh();
  for (Eigen::Index k = 0; k < a2.size(); ++k) {
    const double eps = cfg.policy_noise > 0.0 ? normal(rng) : 0.0;
    a2.data()[k] = std::clamp(a2.data()[k] + std::clamp(eps, -cfg.noise_clip, cfg.noise_clip),
                              -1.0, 1.0);
  }
  return clipped_double_q_target(ac, batch, a2, cfg.gamma);
}

std::size_t greedy_discrete_action(const ActorCritic& ac, const Observation& s,
                                   const std::vector<bool>& legal) {
  if (!ac.feat.discrete_actions()) throw ConfigError("greedy actions need discrete actions");
  if (legal.size() != ac.feat.n_actions) throw ConfigError("legal mask has the wrong size");
  const Matrix obs = ac.feat.encode_obs(s).replicate(1, static_cast<Eigen::Index>(legal.size()));
  const Matrix acts = Matrix::Identity(static_cast<Eigen::Index>(legal.size()),
                                       static_cast<Eigen::Index>(legal.size()));
  RowVector q = ac.q_values(0, obs, acts);
  for (std::size_t i = 1; i < member_count(ac); ++i) q = q.cwiseMin(ac.q_values(i, obs, acts));
  std::optional<std::size_t> best;
  for (std::size_t a = 0; a < legal.size(); ++a) {
    if (!legal[a]) continue;
    if (!best || q(static_cast<Eigen::Index>(a)) > q(static_cast<Eigen::Index>(*best))) best = a;
  }
  if (!best) throw ConfigError("no legal action");
  return *best;
}

namespace {

struct CriticStep {
  double mse = 0.0;
  double cql = 0.0;
  double grad_norm = 0.0;
};

// One Adam step on member i toward fixed targets y, plus optional extra
// gradient and a CQL term combined by normalize_and_combine.
CriticStep step_critic(ActorCritic& ac, std::size_t i, const Batch& batch, const RowVector& y,
                       const nn::ParamTree* extra, std::optional<double> cql_weight,
                       const AgentConfig& agent) {
  Network& c = ac.critics[i];
  const double b = static_cast<double>(batch.size());
  nn::Tape tape;
  const RowVector q = nn::forward(c.params, c.cfg, stack(batch.s, batch.a), &tape);
  const RowVector diff = q - y;
  CriticStep out;
  out.mse = diff.squaredNorm() / b;
  nn::ParamTree grad = nn::backward(tape, 2.0 * diff / b).params;
  if (cql_weight) {
    const ValueAndGrad reg =
        cql_regularizer(c, batch, agent.cql_n_actions, agent.cql_temperature, ac.rng);
    out.cql = reg.value;
    const CombinedLoss comb = normalize_and_combine(out.mse, reg.value, *cql_weight);
    grad = scaled(grad, comb.primary_weight);
    nn::axpy(grad, reg.grad, comb.aux_weight);
  }
  if (extra) nn::axpy(grad, *extra, 1.0);
  out.grad_norm = grad_norm(grad);
  nn::adam_step(c.opt, c.params, grad);
  return out;
}

void polyak_critics(ActorCritic& ac, double tau) {
  for (auto& c : ac.critics) nn::polyak_update(c.target, c.params, tau);
}

void record_critic_steps(LossReport& r, const std::vector<CriticStep>& steps, bool with_cql) {
  double mse = 0.0;
  double cql = 0.0;
  double gn = 0.0;
  for (const auto& s : steps) {
    mse += s.mse;
    cql += s.cql;
    gn = std::max(gn, s.grad_norm);
  }
  r.losses["critic"] = mse / static_cast<double>(steps.size());
  if (with_cql) r.losses["cql"] = cql / static_cast<double>(steps.size());
  r.grad_norms["critic"] = gn;
}

bool ensemble_collapsed(const ActorCritic& ac, const Batch& batch) {
  if (ac.critics.size() < 2) return false;
  std::vector<RowVector> qs;
  for (std::size_t i = 0; i < ac.critics.size(); ++i) qs.push_back(ac.q_values(i, batch.s, batch.a));
  const double n = static_cast<double>(qs.size());
  double var = 0.0;
  for (Eigen::Index k = 0; k < batch.s.cols(); ++k) {
    double m = 0.0;
    for (const auto& q : qs) m += q(k);
    m /= n;
    double v = 0.0;
    for (const auto& q : qs) v += (q(k) - m) * (q(k) - m);
    var += v / n;
  }
  return var / static_cast<double>(batch.s.cols()) < 1e-8;
}

}  // namespace

LossReport critic_pretrain_update(ActorCritic& ac, const Batch& batch, const PretrainConfig& cfg,
                                  const AgentConfig& agent) {
  const bool soft = std::holds_alternative<bcmode::Soft>(cfg.bc_mode);
  if (soft && !batch.has_soft_rtg) throw ConfigError("soft critic pre-training needs soft_rtg");
  if (!soft && !batch.has_rtg) throw ConfigError("critic pre-training needs rtg annotations");
  const RowVector& mc = soft ? batch.soft_rtg : batch.rtg;

  RowVector y = mc;
  if (cfg.lambda_mix > 0.0) {
    RowVector q_next;
    RowVector entropy_bonus = RowVector::Zero(batch.s2.cols());
    const Matrix head = nn::forward(ac.actor.params, ac.actor.cfg, batch.s2);
    Matrix a2;
    if (ac.gaussian_actor) {
      const nn::SquashedSample smp = nn::sample_squashed(head, ac.rng);
      a2 = smp.action;
      if (soft) entropy_bonus = -agent.temperature * smp.log_prob;
    } else {
      a2 = head.array().tanh();
    }
    q_next = ac.q_values(0, batch.s2, a2, true);
    for (std::size_t i = 1; i < member_count(ac); ++i) {
      q_next = q_next.cwiseMin(ac.q_values(i, batch.s2, a2, true));
    }
    q_next += entropy_bonus;
    for (Eigen::Index k = 0; k < y.size(); ++k) {
      y(k) = compute_mixed_target(mc(k), batch.r(k), agent.gamma * batch.not_done(k), q_next(k),
                                  cfg.lambda_mix);
    }
  }

  LossReport r;
  std::optional<double> cql_weight;
  if (const auto* c = std::get_if<regularizer::CQL>(&cfg.value_regularizer)) cql_weight = c->weight;
  std::optional<DiversityTerm> div;
  double eta = 0.0;
  if (const auto* e = std::get_if<regularizer::EnsembleDiversify>(&cfg.value_regularizer)) {
    eta = e->eta;
    div = ensemble_diversity(ac.critics, batch);
    r.losses["div"] = div->value;
  }
  std::vector<CriticStep> steps;
  for (std::size_t i = 0; i < member_count(ac); ++i) {
    std::optional<nn::ParamTree> extra;
    if (div && eta > 0.0) extra = scaled(div->grads[i], eta);
    steps.push_back(step_critic(ac, i, batch, y, extra ? &*extra : nullptr, cql_weight, agent));
  }
  polyak_critics(ac, agent.tau);
  record_critic_steps(r, steps, cql_weight.has_value());
  ++ac.updates;
  return r;
}

LossReport td3bc_update(ActorCritic& ac, const Batch& batch, const AgentConfig& cfg) {
  if (ac.gaussian_actor) throw ConfigError("TD3-style updates need a deterministic actor");
  const bool with_cql = cfg.algorithm == Algorithm::CQLOnly || cfg.algorithm == Algorithm::TD3BC_CQL;
  const bool with_bc = cfg.algorithm == Algorithm::TD3BC || cfg.algorithm == Algorithm::TD3BC_CQL;
  const Eigen::Index b = batch.s.cols();
  const Eigen::Index d = batch.a.rows();

  const RowVector y = td3_target(ac, batch, cfg, ac.rng);

  LossReport r;
  std::vector<CriticStep> steps;
  std::optional<double> cql_weight;
  if (with_cql) cql_weight.emplace(cfg.cql_weight);
  for (std::size_t i = 0; i < member_count(ac); ++i) {
    steps.push_back(step_critic(ac, i, batch, y, nullptr, cql_weight, cfg));
  }
  record_critic_steps(r, steps, with_cql);

  if (ac.updates % cfg.policy_delay == 0) {
    nn::Tape actor_tape;
    const Matrix out = nn::forward(ac.actor.params, ac.actor.cfg, batch.s, &actor_tape);
    const Matrix pi = out.array().tanh();
    nn::Tape critic_tape;
    const RowVector q =
        nn::forward(ac.critics[0].params, ac.critics[0].cfg, stack(batch.s, pi), &critic_tape);
    const Matrix dq_da = action_input_grad(critic_tape, RowVector::Ones(b), d);
    const double mean_abs_q = std::max(q.cwiseAbs().mean(), 1e-12);
    const double lambda = (with_bc ? cfg.bc_alpha : 1.0) / mean_abs_q;
    const Matrix diff = pi - batch.a;
    const double bc = diff.squaredNorm() / static_cast<double>(b * d);
    const double bd = static_cast<double>(b);
    Matrix d_pi = -lambda / bd * dq_da;
    double loss = -lambda * q.mean();
    if (with_bc) {
      d_pi += 2.0 * diff / static_cast<double>(b * d);
      loss += bc;
    }
    const Matrix d_out = d_pi.array() * (1.0 - pi.array().square());
    const nn::Gradients g = nn::backward(actor_tape, d_out);
    nn::adam_step(ac.actor.opt, ac.actor.params, g.params);
    nn::polyak_update(ac.actor.target, ac.actor.params, cfg.tau);
    polyak_critics(ac, cfg.tau);
    r.losses["actor"] = loss;
    r.losses["bc"] = bc;
    r.grad_norms["actor"] = grad_norm(g.params);
  }
  ++ac.updates;
  return r;
}

LossReport ensemble_soft_update(ActorCritic& ac, const Batch& batch, const AgentConfig& cfg) {
  if (!ac.gaussian_actor) throw ConfigError("soft actor-critic updates need a stochastic actor");
  const bool with_bc = cfg.algorithm == Algorithm::EnsembleSoftAC_BC;
  const Eigen::Index b = batch.s.cols();
  const Eigen::Index d = batch.a.rows();
  const double bd = static_cast<double>(b);

  const Matrix head2 = nn::forward(ac.actor.params, ac.actor.cfg, batch.s2);
  const nn::SquashedSample next = nn::sample_squashed(head2, ac.rng);
  RowVector y = clipped_double_q_target(ac, batch, next.action, cfg.gamma);
  y.array() -= cfg.gamma * batch.not_done.array() * cfg.temperature * next.log_prob.array();

  LossReport r;
  std::optional<DiversityTerm> div;
  if (cfg.eta > 0.0 && member_count(ac) >= 2) {
    div = ensemble_diversity(ac.critics, batch);
    r.losses["div"] = div->value;
  }
  std::vector<CriticStep> steps;
  for (std::size_t i = 0; i < member_count(ac); ++i) {
    std::optional<nn::ParamTree> extra;
    if (div) extra = scaled(div->grads[i], cfg.eta);
    steps.push_back(step_critic(ac, i, batch, y, extra ? &*extra : nullptr, std::nullopt, cfg));
  }
  record_critic_steps(r, steps, false);
  r.ensemble_collapse_warning = ensemble_collapsed(ac, batch);

  nn::Tape actor_tape;
  const Matrix head = nn::forward(ac.actor.params, ac.actor.cfg, batch.s, &actor_tape);
  const nn::SquashedSample smp = nn::sample_squashed(head, ac.rng);
  const Matrix x = stack(batch.s, smp.action);
  std::vector<nn::Tape> tapes(member_count(ac));
  std::vector<RowVector> qs(member_count(ac));
  for (std::size_t i = 0; i < member_count(ac); ++i) {
    qs[i] = nn::forward(ac.critics[i].params, ac.critics[i].cfg, x, &tapes[i]);
  }
  RowVector q_min = qs[0];
  std::vector<std::size_t> arg(static_cast<std::size_t>(b), 0);
  for (std::size_t i = 1; i < qs.size(); ++i) {
    for (Eigen::Index k = 0; k < b; ++k) {
      if (qs[i](k) < q_min(k)) {
        q_min(k) = qs[i](k);
        arg[static_cast<std::size_t>(k)] = i;
      }
    }
  }
  Matrix dq_da = Matrix::Zero(d, b);
  for (std::size_t i = 0; i < qs.size(); ++i) {
    RowVector sel = RowVector::Zero(b);
    bool any = false;
    for (Eigen::Index k = 0; k < b; ++k) {
      if (arg[static_cast<std::size_t>(k)] == i) {
        sel(k) = 1.0;
        any = true;
      }
    }
    if (any) dq_da += action_input_grad(tapes[i], sel, d);
  }
  const double policy_loss = (cfg.temperature * smp.log_prob - q_min).mean();
  Matrix d_action = -dq_da / bd;
  double d_lp = cfg.temperature / bd;
  double loss = policy_loss;
  if (with_bc) {
    const Matrix diff = smp.action - batch.a;
    const double bc = diff.squaredNorm() / (bd * static_cast<double>(d));
    const CombinedLoss comb = normalize_and_combine(policy_loss, bc, cfg.bc_weight);
    d_action = comb.primary_weight * d_action +
               comb.aux_weight * 2.0 * diff / (bd * static_cast<double>(d));
    d_lp *= comb.primary_weight;
    loss = comb.value;
    r.losses["bc"] = bc;
  }
  const Matrix d_head = nn::squashed_backward(smp, d_action, RowVector::Constant(b, d_lp));
  const nn::Gradients g = nn::backward(actor_tape, d_head);
  nn::adam_step(ac.actor.opt, ac.actor.params, g.params);
  polyak_critics(ac, cfg.tau);
  r.losses["actor"] = loss;
  r.grad_norms["actor"] = grad_norm(g.params);
  ++ac.updates;
  return r;
}

EntropyEstimator make_entropy_estimator(const ActorCritic& ac, std::size_t samples) {
  if (!ac.gaussian_actor) throw ConfigError("entropy estimates need a stochastic actor");
  if (samples == 0) throw ConfigError("entropy estimator needs at least one sample");
  return [params = ac.actor.params, cfg = ac.actor.cfg, feat = ac.feat, seed = ac.seed,
          samples](const Observation& o) {
    const Vector x = feat.encode_obs(o);
    // Seeded from the state itself so repeated annotation is reproducible.
    const std::uint64_t h =
        fnv1a(x.data(), static_cast<std::size_t>(x.size()) * sizeof(double), seed ^ 0x9e3779b97f4a7c15ULL);
    nn::Rng rng(h);
    const Matrix xs = x.replicate(1, static_cast<Eigen::Index>(samples));
    const nn::SquashedSample smp = nn::sample_squashed(nn::forward(params, cfg, xs), rng);
    return -smp.log_prob.mean();
  };
}

// ---------------------------------------------------------------------------
// Orchestration

Phase phase_from_string(const std::string& s) {
  for (auto p : {Phase::ActorPretrain, Phase::CriticPretrain, Phase::RL}) {
    if (to_string(p) == s) return p;
  }
  throw ConfigError("unknown phase '" + s + "'");
}

std::string to_string(Phase p) {
  switch (p) {
    case Phase::ActorPretrain: return "ActorPretrain";
    case Phase::CriticPretrain: return "CriticPretrain";
    case Phase::RL: return "RL";
  }
  return "?";
}

bool PlateauDetector::add(double loss) {
  sum_ += loss;
  if (++count_ < window_) return plateaued_;
  const double m = sum_ / static_cast<double>(count_);
  if (previous_) {
    const double rel = (*previous_ - m) / std::max(std::abs(*previous_), 1e-12);
    if (rel < tol_) plateaued_ = true;
  }
  previous_ = m;
  sum_ = 0.0;
  count_ = 0;
  return plateaued_;
}

namespace {

void merge_into(LossReport& dst, const LossReport& src) {
  for (const auto& [k, v] : src.losses) dst.losses[k] = v;
  for (const auto& [k, v] : src.grad_norms) dst.grad_norms[k] = v;
  dst.ensemble_collapse_warning = dst.ensemble_collapse_warning || src.ensemble_collapse_warning;
}

}  // namespace

TrainResult pretrain_then_train(ActorCritic& ac, const OfflineDataset& ds,
                                const std::optional<PretrainConfig>& pre,
                                const AgentConfig& agent, std::size_t total_steps,
                                const TrainOptions& options) {
  agent.validate();
  if (pre) pre->validate();
  if (uses_gaussian_actor(agent.algorithm) != ac.gaussian_actor) {
    throw ConfigError("agent actor type does not match the algorithm");
  }
  const ReturnConfig rc{agent.gamma, pre ? pre->lambda_mix : 0.0,
                        pre ? pre->timeout_mode : TimeoutMode::TreatAsTerminal,
                        VisitMode::EveryVisit};
  OfflineDataset data = ds;
  if (agent.reward_scale != 1.0) {
    for (auto& traj : data.trajectories) {
      for (auto& tr : traj.transitions) {
        tr.reward *= agent.reward_scale;
        tr.rtg.reset();
        tr.soft_rtg.reset();
      }
    }
    data.annotation_gamma.reset();
  }
  if (!data.annotation_gamma || *data.annotation_gamma != agent.gamma) {
    data = annotate_dataset(data, rc, AnnotationMode::Hard);
  }
  TransitionTable table = make_table(data, ac.feat, rc);

  TrainResult res;
  std::size_t step = 0;
  LossReport last;

  auto emit = [&](Phase ph, bool end) {
    if (options.observer) options.observer(StepInfo{step, ph, &last, &ac, end});
  };
  auto run = [&](Phase ph, auto&& fn) {
    try {
      last = fn();
    } catch (const nn::NonFiniteError& e) {
      throw PhaseError(to_string(ph), std::string(e.what()) + " during " + to_string(ph));
    }
    for (const auto& [k, v] : last.losses) {
      if (!std::isfinite(v)) {
        throw PhaseError(to_string(ph), "non-finite " + k + " loss during " + to_string(ph));
      }
    }
    ++step;
    if (options.log_every > 0 && step % options.log_every == 0) emit(ph, false);
  };
  auto close_phase = [&](Phase ph, std::size_t begin) {
    res.phases.push_back({ph, begin, step});
    emit(ph, true);
  };

  if (pre) {
    const auto* soft = std::get_if<bcmode::Soft>(&pre->bc_mode);
    if (!soft) {
      const Phase ph = pre->skip_critic ? Phase::ActorPretrain : Phase::CriticPretrain;
      PlateauDetector actor_plateau(pre->plateau_window, pre->plateau_tol);
      PlateauDetector critic_plateau(pre->plateau_window, pre->plateau_tol);
      const std::size_t begin = step;
      for (std::size_t k = 0; k < pre->pretrain_steps; ++k) {
        run(ph, [&] {
          LossReport r = bc_update(ac, sample_batch(table, agent.batch_size, ac.rng));
          if (!pre->skip_critic) {
            merge_into(r, critic_pretrain_update(
                              ac, sample_batch(table, agent.batch_size, ac.rng, true), *pre, agent));
          }
          return r;
        });
        actor_plateau.add(last.get("actor"));
        if (!pre->skip_critic) critic_plateau.add(last.get("critic"));
        if (actor_plateau.plateaued() && (pre->skip_critic || critic_plateau.plateaued())) break;
      }
      copy_into(ac.actor.target, ac.actor.params);
      if (!pre->skip_critic) {
        for (auto& c : ac.critics) copy_into(c.target, c.params);
      }
      close_phase(ph, begin);
    } else {
      PlateauDetector plateau(pre->plateau_window, pre->plateau_tol);
      std::size_t begin = step;
      for (std::size_t k = 0; k < pre->pretrain_steps; ++k) {
        run(Phase::ActorPretrain, [&] {
          return soft_bc_update(ac, sample_batch(table, agent.batch_size, ac.rng), soft->temperature);
        });
        if (plateau.add(last.get("actor"))) break;
      }
      copy_into(ac.actor.target, ac.actor.params);
      close_phase(Phase::ActorPretrain, begin);

      if (!pre->skip_critic) {
        data = annotate_dataset(data, rc, AnnotationMode::Soft, agent.temperature,
                                make_entropy_estimator(ac));
        ++res.soft_annotations;
        table = make_table(data, ac.feat, rc);
        PlateauDetector critic_plateau(pre->plateau_window, pre->plateau_tol);
        begin = step;
        for (std::size_t k = 0; k < pre->pretrain_steps; ++k) {
          run(Phase::CriticPretrain, [&] {
            return critic_pretrain_update(ac, sample_batch(table, agent.batch_size, ac.rng, true),
                                          *pre, agent);
          });
          if (critic_plateau.add(last.get("critic"))) break;
        }
        for (auto& c : ac.critics) copy_into(c.target, c.params);
        close_phase(Phase::CriticPretrain, begin);
      }
    }
  }

  const std::size_t begin = step;
  for (std::size_t k = 0; k < total_steps; ++k) {
    run(Phase::RL, [&] {
      const Batch batch = sample_batch(table, agent.batch_size, ac.rng);
      switch (agent.algorithm) {
        case Algorithm::BC: return bc_update(ac, batch);
        case Algorithm::TD3BC:
        case Algorithm::CQLOnly:
        case Algorithm::TD3BC_CQL: return td3bc_update(ac, batch, agent);
        case Algorithm::EnsembleSoftAC:
        case Algorithm::EnsembleSoftAC_BC: return ensemble_soft_update(ac, batch, agent);
      }
      throw ConfigError("unhandled algorithm");
    });
  }
  close_phase(Phase::RL, begin);
  res.total_updates = step;
  return res;
}

}  // namespace offrl::agents
