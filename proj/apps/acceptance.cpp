// Acceptance run: one PASS/FAIL line per criterion.
//   acceptance [criterion ...]   (default: all ten)
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "offrl/agents.hpp"
#include "offrl/harness.hpp"
#include "offrl/nn.hpp"
#include "offrl/tabular.hpp"

using namespace offrl;
using namespace offrl::agents;
using Clock = std::chrono::steady_clock;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

// ---------------------------------------------------------------------------
// shared desk-scale experiment settings

harness::ExperimentConfig pointmass_medium(const std::string& name, Algorithm algo, std::size_t episodes) {
  harness::ExperimentConfig c;
  c.name = name;
  c.env = "pointmass1";
  c.dataset.behavior.kind = BehaviorKind::ScriptedProportional;
  c.dataset.behavior.quality = 0.5;
  c.dataset.behavior.noise_scale = 0.6;
  c.dataset.behavior.seed = 1;
  c.dataset.episodes = episodes;
  c.agent.algorithm = algo;
  c.agent.bc_alpha = 2.5;
  c.agent.actor_lr = 1e-3;
  c.agent.critic_lr = 1e-3;
  c.agent.batch_size = 64;
  c.agent.reward_scale = 0.1;
  c.eval_episodes = 10;
  c.seeds = {0, 1, 2, 3, 4};
  return c;
}

PretrainConfig desk_pretrain() {
  PretrainConfig p;
  p.pretrain_steps = 500;
  p.plateau_window = 250;
  return p;
}

// ---------------------------------------------------------------------------

// Q(0,R) Q(1,L) Q(1,R) Q(2,R) for zero init then MC init, epochs 0..3
const double kTable1[4][8] = {
    {0, 0, 0, 0, 0.5, 0, 1, 3},
    {0, -1, -2, 3, 1, 0, 1, 3},
    {-2, -2, 1, 3, 1, 0, 1, 3},
    {1, 0, 1, 3, 1, 0, 1, 3},
};

Verdict table1_exact() {
  const auto t0 = Clock::now();
  std::size_t cells = 0, matched = 0;
  for (VisitMode mode : {VisitMode::EveryVisit, VisitMode::FirstVisit}) {
    const Table1Grid got = table1_compute(mode);
    for (std::size_t e = 0; e < 4; ++e) {
      for (std::size_t c = 0; c < 8; ++c) {
        double want = kTable1[e][c];
        // first-visit MC sees only the first pass through (0, R)
        if (mode == VisitMode::FirstVisit && e == 0 && c == 4) want = 0.0;
        ++cells;
        matched += got[e][c] == want;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {matched == cells && secs < 1.0,
          std::to_string(matched) + "/" + std::to_string(cells) + " cells (both visit modes), " +
              fmt("%.4f s", secs)};
}

Verdict convergence_epochs() {
  const auto [mdp, ds] = motivational_mdp();
  const QTable star = solve_optimal_tabular(mdp, 1.0);
  auto first = [](const std::vector<QTable>& h, auto pred) {
    for (std::size_t e = 0; e < h.size(); ++e) {
      if (pred(h[e])) return e;
    }
    return h.size();
  };
  auto values = [&](const QTable& q) { return values_match_on_visited(q, star); };
  auto policy = [&](const QTable& q) { return greedy_policy_matches(q, star); };
  const auto zero = run_q_learning(mdp, ds, init::Zero{}, 1.0, 1.0, 10);
  const auto mc = run_q_learning(mdp, ds, init::MCEveryVisit{}, 1.0, 1.0, 10);
  const std::size_t zv = first(zero, values), zp = first(zero, policy);
  const std::size_t mv = first(mc, values), mp = first(mc, policy);
  return {zv == 3 && zp == 2 && mv == 1 && mp == 0,
          "zero init values@" + std::to_string(zv) + " policy@" + std::to_string(zp) +
              ", mc init values@" + std::to_string(mv) + " policy@" + std::to_string(mp)};
}

QTable random_q(const TabularMDP& mdp, double gamma, std::mt19937_64& rng) {
  QTable q(mdp.n_states, mdp.n_actions, gamma);
  q.set_available_from(mdp);
  std::uniform_real_distribution<double> u(-10.0, 10.0);
  for (auto& v : q.values) v = u(rng);
  return q;
}

// max over available actions, terminal states valued 0; written out here rather than taken from the library
QTable bellman_oracle(const TabularMDP& mdp, const QTable& q, double gamma) {
  std::vector<double> v(mdp.n_states, 0.0);
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    if (mdp.terminal[s]) continue;
    v[s] = -INFINITY;
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      if (mdp.available[s][a]) v[s] = std::max(v[s], q.at(s, a));
    }
  }
  QTable out = q;
  for (std::size_t s = 0; s < mdp.n_states; ++s) {
    for (std::size_t a = 0; a < mdp.n_actions; ++a) {
      double x = 0.0;
      if (!mdp.terminal[s]) {
        x = mdp.reward[s][a];
        for (std::size_t s2 = 0; s2 < mdp.n_states; ++s2) x += gamma * mdp.transition[s][a][s2] * v[s2];
      }
      out.at(s, a) = x;
    }
  }
  return out;
}

Verdict fqi_theory() {
  const auto t0 = Clock::now();
  // (a) contraction on 1000 random pairs
  std::mt19937_64 rng(17);
  std::size_t contraction_ok = 0, operator_ok = 0;
  for (int trial = 0; trial < 1000; ++trial) {
    const auto mdp = random_tabular_mdp(2 + trial % 7, 2 + trial % 3, 100 + trial % 25);
    const double gamma = 0.5 + 0.49 * std::uniform_real_distribution<double>(0, 1)(rng);
    const QTable a = random_q(mdp, gamma, rng), b = random_q(mdp, gamma, rng);
    const QTable ta = bellman_optimality(mdp, a, gamma), tb = bellman_optimality(mdp, b, gamma);
    contraction_ok += sup_norm_distance(ta, tb) <= gamma * sup_norm_distance(a, b) + 1e-12;
    operator_ok += sup_norm_distance(ta, bellman_oracle(mdp, a, gamma)) <= 1e-12;
  }
  // (b) error bound at every iteration, right-hand side recomputed from measured epsilons
  std::size_t bound_checks = 0, bound_ok = 0;
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto mdp = random_tabular_mdp(10, 4, 500 + seed);
    const double gamma = 0.9;
    QTable zero(10, 4, gamma);
    zero.set_available_from(mdp);
    const FqiReport r = fitted_q_iteration(mdp, gamma, zero, 1e-3, 1000, FqiNoise{1e-4, seed});
    for (std::size_t k = 0; k < r.errors.size(); ++k) {
      double rhs = std::pow(gamma, static_cast<double>(k)) * r.init_error;
      for (std::size_t i = 0; i < k; ++i) rhs += std::pow(gamma, static_cast<double>(i)) * r.epsilons[k - i - 1];
      ++bound_checks;
      bound_ok += r.errors[k] <= rhs + 1e-12;
    }
  }
  // (c) median iterations along the interpolation sweep
  const std::vector<double> betas = {0.0, 0.25, 0.5, 0.75, 1.0};
  std::vector<std::vector<double>> ks(betas.size());
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto mdp = random_tabular_mdp(10, 4, seed);
    const QTable star = solve_optimal_tabular(mdp, 0.9, 1e-12);
    std::vector<InitStrategy> anchors;
    for (double b : betas) anchors.push_back(init::Interpolated{b, star});
    const auto reps = fqi_init_sweep(mdp, 0.9, anchors, 1e-3, FqiNoise{}, 10000);
    for (std::size_t j = 0; j < reps.size(); ++j) ks[j].push_back(static_cast<double>(reps[j].iterations));
  }
  bool monotone = true;
  std::string medians;
  for (std::size_t j = 0; j < betas.size(); ++j) {
    const double m = harness::median(ks[j]);
    if (j > 0 && m > harness::median(ks[j - 1])) monotone = false;
    medians += (j ? "," : "") + fmt("%g", m);
  }
  const double secs = seconds_since(t0);
  const bool pass = contraction_ok == 1000 && operator_ok == 1000 && bound_ok == bound_checks && monotone &&
                    secs < 10.0;
  return {pass, "contraction " + std::to_string(contraction_ok) + "/1000, bound " + std::to_string(bound_ok) +
                    "/" + std::to_string(bound_checks) + ", median k by beta [" + medians + "], " +
                    fmt("%.2f s", secs)};
}

// ---------------------------------------------------------------------------

nn::Matrix randn(Eigen::Index r, Eigen::Index c, nn::Rng& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  nn::Matrix m(r, c);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

double gradient_check_worst(std::size_t configs) {
  nn::Rng rng(2024);
  const double h = 1e-5;
  double worst = 0.0;
  for (std::size_t trial = 0; trial < configs; ++trial) {
    nn::MLPConfig cfg;
    cfg.input_dim = 1 + rng() % 5;
    cfg.output_dim = 1 + rng() % 3;
    cfg.hidden_dims.clear();
    const std::size_t depth = 1 + rng() % 3;
    for (std::size_t i = 0; i < depth; ++i) cfg.hidden_dims.push_back(2 + rng() % 7);
    cfg.layernorm = true;
    nn::ParamTree p = nn::init_mlp(cfg, rng);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (p.name(i).find("ln_") != std::string::npos) p.at(i) += 0.3 * randn(p.at(i).rows(), 1, rng);
    }
    const nn::Matrix x = randn(static_cast<Eigen::Index>(cfg.input_dim), 3, rng);
    const nn::Matrix up = randn(static_cast<Eigen::Index>(cfg.output_dim), 3, rng);
    auto f = [&](const nn::ParamTree& q, const nn::Matrix& in) {
      return (nn::forward(q, cfg, in).array() * up.array()).sum();
    };
    nn::Tape tape;
    nn::forward(p, cfg, x, &tape);
    const nn::Gradients g = nn::backward(tape, up);
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      for (Eigen::Index k = 0; k < p.at(i).size(); ++k) {
        nn::ParamTree plus = p, minus = p;
        plus.at(i).data()[k] += h;
        minus.at(i).data()[k] -= h;
        const double fd = (f(plus, x) - f(minus, x)) / (2 * h);
        diff = std::max(diff, std::abs(fd - g.params.at(i).data()[k]));
        scale = std::max({scale, std::abs(fd), std::abs(g.params.at(i).data()[k])});
      }
    }
    for (Eigen::Index k = 0; k < x.size(); ++k) {
      nn::Matrix xp = x, xm = x;
      xp.data()[k] += h;
      xm.data()[k] -= h;
      const double fd = (f(p, xp) - f(p, xm)) / (2 * h);
      diff = std::max(diff, std::abs(fd - g.input.data()[k]));
      scale = std::max(scale, std::abs(fd));
    }
    worst = std::max(worst, diff / std::max(scale, 1e-8));
  }
  return worst;
}

Verdict numerical_stack() {
  const double worst = gradient_check_worst(120);

  // layernorm: zero mean, unit variance, and a hand example
  nn::Rng rng(8);
  bool ln_ok = true;
  for (int i = 0; i < 50; ++i) {
    const nn::Vector x = 5.0 * randn(7, 1, rng);
    const nn::Vector z = nn::layernorm(x, nn::Vector::Ones(7), nn::Vector::Zero(7), 0.0);
    ln_ok &= std::abs(z.mean()) < 1e-6 && std::abs((z.array() - z.mean()).square().mean() - 1.0) < 1e-6;
  }
  const nn::Vector ex = nn::layernorm((nn::Vector(3) << 1, 2, 3).finished(), nn::Vector::Ones(3),
                                      nn::Vector::Zero(3), 0.0);
  ln_ok &= std::abs(ex(0) + std::sqrt(1.5)) < 1e-12 && std::abs(ex(1)) < 1e-12;

  // polyak: tau * target + (1 - tau) * online
  bool polyak_ok = true;
  for (int i = 0; i < 100; ++i) {
    nn::ParamTree t, o;
    t.add("w", randn(3, 3, rng));
    o.add("w", randn(3, 3, rng));
    const double tau = std::uniform_real_distribution<double>(0, 1)(rng);
    const nn::Matrix want = tau * t["w"] + (1.0 - tau) * o["w"];
    nn::polyak_update(t, o, tau);
    polyak_ok &= (t["w"] - want).cwiseAbs().maxCoeff() <= 1e-12;
  }

  // normalize_and_combine: value 1 + c for positive losses, gradient weights 1/|.|
  std::mt19937_64 u_rng(1);
  std::uniform_real_distribution<double> u(0.01, 50.0);
  bool nc_ok = true;
  for (int i = 0; i < 200; ++i) {
    const double a = u(u_rng), b = u(u_rng), c = u(u_rng) / 10.0;
    const auto w = normalize_and_combine(a, b, c);
    nc_ok &= std::abs(w.value - (1.0 + c)) < 1e-12;
    nc_ok &= std::abs(w.primary_weight - 1.0 / a) < 1e-15 && std::abs(w.aux_weight - c / b) < 1e-15;
  }
  return {worst <= 1e-4 && ln_ok && polyak_ok && nc_ok,
          fmt("gradient check max rel err %.2e over 120 configs", worst) + ", layernorm " +
              (ln_ok ? "ok" : "bad") + ", polyak " + (polyak_ok ? "ok" : "bad") + ", normalize_and_combine " +
              (nc_ok ? "ok" : "bad")};
}

// ---------------------------------------------------------------------------

Verdict efficiency(double& runtime) {
  const auto t0 = Clock::now();
  auto scratch = pointmass_medium("scratch", Algorithm::TD3BC, 200);
  scratch.total_steps = 6000;
  scratch.eval_every = 250;
  auto pre = scratch;
  pre.name = "pretrained";
  pre.pretrain = desk_pretrain();
  const OfflineDataset ds = harness::load_dataset(scratch);
  const auto rs = harness::run_experiment(scratch, ds);
  const auto rp = harness::run_experiment(pre, ds);
  const auto cmp = harness::compare_efficiency(rs, rp, 0.9);
  runtime += seconds_since(t0);
  const double ratio = cmp.pretrained_median / cmp.scratch_median;
  return {ratio <= 0.6, fmt("median steps-to-threshold pretrained %.0f", cmp.pretrained_median) +
                            fmt(" vs scratch %.0f", cmp.scratch_median) + fmt(" (ratio %.3f, need <= 0.6)", ratio)};
}

// smoothed score over evaluations after the RL start, trailing 3
std::vector<double> smoothed_rl_scores(const harness::SeedResult& s, std::size_t last_step) {
  std::vector<double> raw, out;
  for (const auto& r : s.records) {
    if (r.normalized_score && r.step > s.rl_begin_step && r.step <= last_step) {
      raw.push_back(*r.normalized_score);
      const std::size_t n = std::min<std::size_t>(3, raw.size());
      double m = 0.0;
      for (std::size_t k = raw.size() - n; k < raw.size(); ++k) m += raw[k];
      out.push_back(m / static_cast<double>(n));
    }
  }
  return out;
}

// trailing 3 evaluations up to and including the end of pre-training
double smoothed_pretrain_end(const harness::SeedResult& s) {
  std::vector<double> raw;
  for (const auto& r : s.records) {
    if (r.normalized_score && r.step <= s.rl_begin_step) raw.push_back(*r.normalized_score);
  }
  const std::size_t n = std::min<std::size_t>(3, raw.size());
  double m = 0.0;
  for (std::size_t k = raw.size() - n; k < raw.size(); ++k) m += raw[k];
  return m / static_cast<double>(n);
}

// median over seeds of the largest relative drop below the pre-training end
double median_early_drop(const harness::ExperimentResult& res) {
  std::vector<double> drops;
  for (const auto& s : res.seeds) {
    if (!s.ok) return INFINITY;
    const double ref = smoothed_pretrain_end(s);
    const std::size_t rl_steps = res.config.total_steps;
    const auto sm = smoothed_rl_scores(s, s.rl_begin_step + rl_steps / 10);
    const double lo = *std::min_element(sm.begin(), sm.end());
    drops.push_back((ref - lo) / std::abs(ref));
  }
  return harness::median(drops);
}

harness::ExperimentConfig ablation_config(bool skip_critic) {
  auto c = pointmass_medium(skip_critic ? "bc_only_pretrain" : "full_pretrain", Algorithm::TD3BC, 200);
  c.total_steps = 3000;
  c.eval_every = 50;
  c.pretrain = desk_pretrain();
  c.pretrain->skip_critic = skip_critic;
  return c;
}

Verdict critic_ablation(double& runtime) {
  const auto t0 = Clock::now();
  const auto bc_only = ablation_config(true), full = ablation_config(false);
  const OfflineDataset ds = harness::load_dataset(full);
  const double d_bc = median_early_drop(harness::run_experiment(bc_only, ds));
  const double d_full = median_early_drop(harness::run_experiment(full, ds));
  runtime += seconds_since(t0);
  return {d_bc >= 0.2 && d_full <= 0.1,
          fmt("median early drop: actor-only pre-training %.1f%%", 100 * d_bc) +
              fmt(" (need >= 20%%), actor+critic %.1f%%", 100 * d_full) + " (need <= 10%)"};
}

Verdict lambda_sweep(double& runtime) {
  const auto t0 = Clock::now();
  // endpoint targets against values computed here
  BehaviorPolicySpec spec;
  spec.quality = 0.5;
  spec.noise_scale = 0.6;
  spec.seed = 1;
  const OfflineDataset small = generate_dataset(pointmass_env(1), spec, 3);
  const Featurizer f = Featurizer::continuous(2, 1);
  AgentConfig agent;
  agent.hidden_dims = {16, 16};
  ReturnConfig rc;
  rc.gamma = agent.gamma;
  const OfflineDataset ann = annotate_dataset(small, rc, AnnotationMode::Hard);
  const TransitionTable table = make_table(ann, f, rc);
  nn::Rng rng(1);
  const Batch b = sample_batch(table, 32, rng, true);
  // Monte-Carlo returns by forward summation over each trajectory
  std::vector<double> mc_all;
  for (const auto& t : small.trajectories) {
    for (std::size_t i = 0; i < t.horizon(); ++i) {
      double g = 0.0, p = 1.0;
      for (std::size_t n = i; n < t.horizon(); ++n, p *= agent.gamma) g += p * t.transitions[n].reward;
      mc_all.push_back(g);
    }
  }
  double max_rtg_err = 0.0;
  for (Eigen::Index k = 0; k < table.rtg.size(); ++k) {
    max_rtg_err = std::max(max_rtg_err, std::abs(table.rtg(k) - mc_all[static_cast<std::size_t>(k)]));
  }
  bool endpoints_ok = max_rtg_err <= 1e-12;
  for (double lambda : {0.0, 1.0}) {
    ActorCritic ac = make_actor_critic(f, agent);
    PretrainConfig pre;
    pre.lambda_mix = lambda;
    nn::RowVector y = b.rtg;
    if (lambda == 1.0) {
      const nn::Matrix a2 = ac.act_batch(b.s2);
      const nn::RowVector q0 = ac.q_values(0, b.s2, a2, true), q1 = ac.q_values(1, b.s2, a2, true);
      for (Eigen::Index k = 0; k < y.size(); ++k) {
        y(k) = b.r(k) + agent.gamma * b.not_done(k) * std::min(q0(k), q1(k));
      }
    }
    const double want = 0.5 * ((ac.q_values(0, b.s, b.a) - y).squaredNorm() +
                               (ac.q_values(1, b.s, b.a) - y).squaredNorm()) / static_cast<double>(b.size());
    const double got = critic_pretrain_update(ac, b, pre, agent).get("critic");
    endpoints_ok &= std::abs(got - want) <= 1e-12 * std::max(1.0, std::abs(want));
  }

  // full runs on pointmass-medium
  std::size_t runs = 0, finite = 0;
  auto base = pointmass_medium("lambda", Algorithm::TD3BC, 200);
  base.total_steps = 2000;
  base.eval_every = 250;
  base.eval_episodes = 5;
  base.seeds = {0, 1, 2};
  const OfflineDataset ds = harness::load_dataset(base);
  for (double lambda : {0.0, 0.1, 0.5, 1.0}) {
    auto c = base;
    c.pretrain = desk_pretrain();
    c.pretrain->lambda_mix = lambda;
    const auto res = harness::run_experiment(c, ds);
    for (const auto& s : res.seeds) {
      ++runs;
      bool ok = s.ok;
      for (const auto& r : s.records) {
        for (const auto& v : {r.loss_actor, r.loss_critic, r.loss_bc}) ok &= !v || std::isfinite(*v);
      }
      finite += ok;
    }
  }
  runtime += seconds_since(t0);
  return {endpoints_ok && finite == runs,
          std::string("lambda endpoint targets ") + (endpoints_ok ? "exact" : "mismatch") + ", " +
              std::to_string(finite) + "/" + std::to_string(runs) + " sweep runs finite"};
}

Verdict cql_behavior() {
  const Featurizer f = Featurizer::continuous(2, 1);
  BehaviorPolicySpec spec;
  spec.quality = 0.5;
  spec.noise_scale = 0.6;
  spec.seed = 1;
  const OfflineDataset ds = generate_dataset(pointmass_env(1), spec, 3);
  AgentConfig agent;
  agent.algorithm = Algorithm::TD3BC_CQL;
  agent.hidden_dims = {16, 16};
  ActorCritic ac = make_actor_critic(f, agent);
  ReturnConfig rc;
  rc.gamma = agent.gamma;
  nn::Rng rng(6);
  const Batch b = sample_batch(make_table(annotate_dataset(ds, rc, AnnotationMode::Hard), f, rc), 32, rng);

  // constant critic: zero weights, constant output bias
  Network constant = ac.critics[0];
  for (std::size_t i = 0; i < constant.params.size(); ++i) {
    if (constant.params.name(i).find("ln_gain") == std::string::npos) constant.params.at(i).setZero();
  }
  constant.params["layer" + std::to_string(constant.cfg.num_layers() - 1) + ".bias"].setConstant(3.7);
  constant.params.touch();
  double const_err = 0.0;
  for (double t : {1.0, 0.5}) {
    nn::Rng r(1);
    const_err = std::max(const_err, std::abs(cql_regularizer(constant, b, 10, t, r).value - t * std::log(10.0)));
  }

  Network net = ac.critics[0];
  net.opt.learning_rate = agent.critic_lr;
  double first = 0.0, prev = 0.0, worst_rise = 0.0;
  for (int i = 0; i < 500; ++i) {
    nn::Rng r(42);
    const ValueAndGrad vg = cql_regularizer(net, b, 10, 1.0, r);
    if (i == 0) first = vg.value;
    if (i > 0) worst_rise = std::max(worst_rise, (vg.value - prev) / std::abs(prev));
    prev = vg.value;
    nn::adam_step(net.opt, net.params, vg.grad);
  }
  return {const_err <= 1e-9 && worst_rise <= 0.05 && prev < first,
          fmt("constant-critic error %.1e", const_err) + fmt(", regularizer %.4f", first) +
              fmt(" -> %.4f over 500 steps", prev) + fmt(", worst step rise %.2f%%", 100 * worst_rise)};
}

harness::ExperimentConfig hybrid_config(Algorithm algo) {
  auto c = pointmass_medium(to_string(algo), algo, 25);
  c.total_steps = 3000;
  c.eval_every = 250;
  if (algo == Algorithm::EnsembleSoftAC_BC) {
    c.agent.num_critics = 5;
    c.agent.temperature = 0.01;
  }
  return c;
}

Verdict hybrids(double& runtime) {
  const auto t0 = Clock::now();
  const auto bc = hybrid_config(Algorithm::BC);
  const OfflineDataset ds = harness::load_dataset(bc);
  auto window_median = [](const harness::ExperimentResult& r) {
    std::vector<double> w;
    for (const auto& s : r.seeds) w.push_back(s.ok ? s.window_score : -INFINITY);
    return harness::median(w);
  };
  const double m_bc = window_median(harness::run_experiment(bc, ds));
  const double m_cql = window_median(harness::run_experiment(hybrid_config(Algorithm::TD3BC_CQL), ds));
  const double m_edac = window_median(harness::run_experiment(hybrid_config(Algorithm::EnsembleSoftAC_BC), ds));
  runtime += seconds_since(t0);
  return {m_cql >= m_bc - 0.05 && m_edac >= m_bc - 0.05,
          fmt("median window score BC %.3f", m_bc) + fmt(", TD3+BC+CQL %.3f", m_cql) +
              fmt(", EnsembleSoftAC+BC %.3f", m_edac) + fmt(" (floor %.3f)", m_bc - 0.05)};
}

Verdict determinism(double& runtime) {
  const auto t0 = Clock::now();
  std::size_t compared = 0, identical = 0;
  auto repeat = [&](harness::ExperimentConfig c) {
    const OfflineDataset ds = harness::load_dataset(c);
    const auto a = harness::run_experiment(c, ds);
    const auto b = harness::run_experiment(c, ds);
    for (std::size_t i = 0; i < a.seeds.size(); ++i) {
      ++compared;
      identical += harness::metrics_to_csv(a.seeds[i].records, false) ==
                   harness::metrics_to_csv(b.seeds[i].records, false);
    }
  };
  repeat(ablation_config(false));
  auto soft = hybrid_config(Algorithm::EnsembleSoftAC_BC);
  soft.total_steps = 500;
  soft.pretrain = desk_pretrain();
  soft.pretrain->bc_mode = bcmode::Soft{0.01};
  soft.seeds = {0, 1};
  repeat(soft);
  auto cql = hybrid_config(Algorithm::TD3BC_CQL);
  cql.total_steps = 500;
  cql.seeds = {3};
  repeat(cql);
  runtime += seconds_since(t0);
  return {compared > 0 && identical == compared,
          std::to_string(identical) + "/" + std::to_string(compared) + " repeated seed CSVs byte-identical"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> only;
  for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
  auto wanted = [&](int n) { return only.empty() || only.count(n) > 0; };

  const auto t0 = Clock::now();
  double experiment_secs = 0.0;
  int failures = 0;
  auto report = [&](int n, const std::function<Verdict()>& run) {
    if (!wanted(n)) return;
    const auto c0 = Clock::now();
    Verdict v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failures += !v.pass;
    std::printf("criterion %2d %s: %s [%.1f s]\n", n, v.pass ? "PASS" : "FAIL", v.detail.c_str(),
                seconds_since(c0));
    std::fflush(stdout);
  };

  report(1, table1_exact);
  report(2, convergence_epochs);
  report(3, fqi_theory);
  report(4, numerical_stack);
  report(5, [&] {
    Verdict v = efficiency(experiment_secs);
    const double total = seconds_since(t0);
    v.detail += fmt(", suite so far %.0f s", total);
    v.pass = v.pass && total <= 1800.0;
    return v;
  });
  report(6, [&] { return critic_ablation(experiment_secs); });
  report(7, [&] { return lambda_sweep(experiment_secs); });
  report(8, cql_behavior);
  report(9, [&] { return hybrids(experiment_secs); });
  report(10, [&] { return determinism(experiment_secs); });
  std::printf("total %.1f s, %d failing\n", seconds_since(t0), failures);
  return failures == 0 ? 0 : 1;
}
