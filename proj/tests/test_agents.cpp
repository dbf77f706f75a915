#include <cmath>

#include "doctest.h"
#include "offrl/agents.hpp"

using namespace offrl;
using namespace offrl::agents;

namespace {

// straight-line continuous trajectory with hand-picked rewards
OfflineDataset line_dataset(const std::vector<double>& rewards, double action = 0.3) {
  OfflineDataset ds;
  Trajectory t;
  for (std::size_t i = 0; i < rewards.size(); ++i) {
    Transition tr;
    tr.state = Observation{std::vector<double>{0.2 * static_cast<double>(i), -0.1}};
    tr.next_state = Observation{std::vector<double>{0.2 * static_cast<double>(i + 1), -0.1}};
    tr.action = ActionValue{std::vector<double>{action}};
    tr.reward = rewards[i];
    tr.done_kind = i + 1 == rewards.size() ? DoneKind::Termination : DoneKind::NotDone;
    t.transitions.push_back(tr);
  }
  ds.trajectories.push_back(t);
  return ds;
}

OfflineDataset medium_dataset(std::size_t episodes, std::uint64_t seed = 1) {
  BehaviorPolicySpec spec;
  spec.quality = 0.5;
  spec.noise_scale = 0.6;
  spec.seed = seed;
  return generate_dataset(pointmass_env(1), spec, episodes);
}

AgentConfig small_agent(Algorithm algo, std::uint64_t seed = 0) {
  AgentConfig a;
  a.algorithm = algo;
  a.hidden_dims = {16, 16};
  a.actor_lr = 1e-3;
  a.critic_lr = 1e-3;
  a.batch_size = 32;
  a.seed = seed;
  return a;
}

TransitionTable table_for(const OfflineDataset& ds, const Featurizer& f, double gamma) {
  ReturnConfig rc;
  rc.gamma = gamma;
  return make_table(annotate_dataset(ds, rc, AnnotationMode::Hard), f, rc);
}

Batch all_of(const TransitionTable& t) {
  std::vector<std::size_t> idx(t.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  return gather(t, idx);
}

void set_constant(Network& n, double c) {
  for (nn::ParamTree* p : {&n.params, &n.target}) {
    for (std::size_t i = 0; i < p->size(); ++i) {
      if (p->name(i).find("ln_gain") == std::string::npos) p->at(i).setZero();
    }
    (*p)["layer" + std::to_string(n.cfg.num_layers() - 1) + ".bias"].setConstant(c);
    p->touch();
  }
}

double max_abs_diff(const nn::ParamTree& a, const nn::ParamTree& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, (a.at(i) - b.at(i)).cwiseAbs().maxCoeff());
  return m;
}

}  // namespace

TEST_CASE("config validation") {
  AgentConfig a = small_agent(Algorithm::TD3BC);
  a.num_critics = 1;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a.algorithm = Algorithm::EnsembleSoftAC;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  a.algorithm = Algorithm::BC;
  CHECK_NOTHROW(a.validate());
  a = small_agent(Algorithm::TD3BC_CQL);
  a.cql_weight = -1.0;
  CHECK_THROWS_AS(a.validate(), ConfigError);
  PretrainConfig p;
  p.lambda_mix = 1.5;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  p.lambda_mix = 0.5;
  p.pretrain_steps = 0;
  CHECK_THROWS_AS(p.validate(), ConfigError);
  for (auto algo : {Algorithm::BC, Algorithm::TD3BC, Algorithm::CQLOnly, Algorithm::TD3BC_CQL,
                    Algorithm::EnsembleSoftAC, Algorithm::EnsembleSoftAC_BC}) {
    CHECK(algorithm_from_string(to_string(algo)) == algo);
  }
}

TEST_CASE("normalize and combine") {
  const auto v = normalize_and_combine(4.0, 2.0, 0.5);
  CHECK(v.value == doctest::Approx(1.5).epsilon(1e-15));
  CHECK(v.primary_weight == 0.25);
  CHECK(v.aux_weight == 0.25);
  CHECK(normalize_and_combine(4.0, 2.0, 0.0).aux_weight == 0.0);
  const auto raw = normalize_and_combine(1e-14, 3.0, 1.0);
  CHECK(raw.primary_weight == 1.0);
  CHECK(raw.value == doctest::Approx(1e-14 + 1.0));

  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0.01, 50.0);
  for (int i = 0; i < 200; ++i) {
    const double c = u(rng) / 10.0;
    CHECK(std::abs(normalize_and_combine(u(rng), u(rng), c).value - (1.0 + c)) < 1e-12);
  }

  // finite differences on a 2-parameter toy with detached magnitudes
  auto alpha = [](double x, double y) { return x * x + 3.0 * y + 0.5; };
  auto beta = [](double x, double y) { return std::sin(x) * y + 2.0; };
  for (int i = 0; i < 50; ++i) {
    const double x = u(rng) / 25.0, y = u(rng) / 25.0, c = u(rng) / 25.0;
    const auto w = normalize_and_combine(alpha(x, y), beta(x, y), c);
    auto L = [&](double px, double py) {
      return w.primary_weight * alpha(px, py) + w.aux_weight * beta(px, py);
    };
    const double h = 1e-6;
    const double gx = (L(x + h, y) - L(x - h, y)) / (2 * h);
    const double gy = (L(x, y + h) - L(x, y - h)) / (2 * h);
    const double ax = 2 * x / std::abs(alpha(x, y)) + c * std::cos(x) * y / std::abs(beta(x, y));
    const double ay = 3.0 / std::abs(alpha(x, y)) + c * std::sin(x) / std::abs(beta(x, y));
    CHECK(std::abs(gx - ax) <= 1e-6 * std::max(1.0, std::abs(ax)));
    CHECK(std::abs(gy - ay) <= 1e-6 * std::max(1.0, std::abs(ay)));
  }
}

TEST_CASE("bc on a single datapoint") {
  const auto ds = line_dataset({1.0}, 0.6);
  const Featurizer f = Featurizer::continuous(2, 1);
  ActorCritic ac = make_actor_critic(f, small_agent(Algorithm::BC));
  const Batch b = all_of(table_for(ds, f, 0.99));
  for (int i = 0; i < 3000; ++i) bc_update(ac, b);
  CHECK(std::abs(ac.act(b.s.col(0))(0) - 0.6) < 1e-3);
  CHECK(bc_update(ac, b).get("bc") < 1e-6);

  // exact fit: the action equals the current prediction
  Batch exact = b;
  exact.a = ac.act_batch(b.s);
  CHECK(bc_update(ac, exact).grad_norms.at("actor") < 1e-12);
}

TEST_CASE("bc matches the behavior score on pointmass") {
  const auto env = pointmass_env(1);
  const auto ds = medium_dataset(200);
  const auto anchors = measure_anchors(env, 100, 0);
  // BC regresses onto E[a|s], the behavior controller without its action noise
  BehaviorPolicySpec spec;
  spec.quality = 0.5;
  spec.noise_scale = 0.0;
  const double behavior = mean_return(rollout(env, scripted_behavior(env, spec), 100, 3));
  const Featurizer f = Featurizer::continuous(env.obs_dim, env.act_dim);
  AgentConfig cfg = small_agent(Algorithm::BC);
  cfg.batch_size = 64;
  ActorCritic ac = make_actor_critic(f, cfg);
  nn::Rng rng(5);
  const auto table = table_for(ds, f, 0.99);
  for (int i = 0; i < 5000; ++i) bc_update(ac, sample_batch(table, 64, rng));
  const ContinuousPolicy pi = [&](const std::vector<double>& s, Rng&) {
    const Vector a = ac.act(Eigen::Map<const Vector>(s.data(), static_cast<Eigen::Index>(s.size())));
    return std::vector<double>(a.data(), a.data() + a.size());
  };
  const double got = mean_return(rollout(env, pi, 100, 3));
  auto norm = [&](double r) { return (r - anchors.random) / (anchors.expert - anchors.random); };
  CHECK(norm(got) > 0.0);
  CHECK(norm(got) < 1.0);
  CHECK(std::abs(norm(got) - norm(behavior)) <= 0.15);
}

TEST_CASE("soft bc") {
  const Featurizer f = Featurizer::continuous(2, 1);
  {
    const auto ds = line_dataset({0.0}, 0.5);
    ActorCritic ac = make_actor_critic(f, small_agent(Algorithm::EnsembleSoftAC));
    const Batch b = all_of(table_for(ds, f, 0.99));
    for (int i = 0; i < 4000; ++i) soft_bc_update(ac, b, 0.0);
    const Matrix head = nn::forward(ac.actor.params, ac.actor.cfg, b.s);
    CHECK(std::abs(head(0, 0) - std::atanh(0.5)) < 0.02);
  }
  {
    const auto ds = line_dataset({0.0, 0.0}, 1.0);
    ActorCritic ac = make_actor_critic(f, small_agent(Algorithm::EnsembleSoftAC));
    const Batch b = all_of(table_for(ds, f, 0.99));
    for (int i = 0; i < 50; ++i) CHECK(std::isfinite(soft_bc_update(ac, b, 0.1).get("bc")));
  }

  const auto ds = medium_dataset(20);
  const auto table = table_for(ds, f, 0.99);
  const Batch all = all_of(table);
  std::vector<double> entropies;
  for (double t : {0.0, 0.1, 1.0}) {
    ActorCritic ac = make_actor_critic(f, small_agent(Algorithm::EnsembleSoftAC));
    nn::Rng rng(2);
    for (int i = 0; i < 2000; ++i) soft_bc_update(ac, sample_batch(table, 64, rng), t);
    nn::Rng er(9);
    double h = 0.0;
    for (int k = 0; k < 8; ++k) {
      h -= nn::sample_squashed(nn::forward(ac.actor.params, ac.actor.cfg, all.s), er).log_prob.mean();
    }
    entropies.push_back(h / 8.0);
  }
  CHECK(entropies[1] >= entropies[0]);
  CHECK(entropies[2] >= entropies[1]);
}

TEST_CASE("critic pre-training regresses onto returns") {
  const auto ds = line_dataset({0.5, -0.25, 1.0, 0.0, 0.75});
  const Featurizer f = Featurizer::continuous(2, 1);
  AgentConfig agent = small_agent(Algorithm::TD3BC);
  ActorCritic ac = make_actor_critic(f, agent);
  const auto table = table_for(ds, f, agent.gamma);
  const Batch b = all_of(table);
  PretrainConfig pre;
  for (int i = 0; i < 4000; ++i) critic_pretrain_update(ac, b, pre, agent);
  for (std::size_t m = 0; m < ac.critics.size(); ++m) {
    CHECK((ac.q_values(m, b.s, b.a) - b.rtg).cwiseAbs().maxCoeff() < 1e-2);
  }

  Batch bare = b;
  bare.has_rtg = false;
  CHECK_THROWS_AS(critic_pretrain_update(ac, bare, pre, agent), ConfigError);
}

TEST_CASE("lambda one is a td(0) regression") {
  const auto ds = medium_dataset(3);
  const Featurizer f = Featurizer::continuous(2, 1);
  AgentConfig agent = small_agent(Algorithm::TD3BC);
  ActorCritic ac = make_actor_critic(f, agent);
  nn::Rng rng(1);
  const Batch b = sample_batch(table_for(ds, f, agent.gamma), 32, rng);
  PretrainConfig pre;
  pre.lambda_mix = 1.0;
  const Matrix a2 = ac.act_batch(b.s2);
  RowVector y = b.r;
  const RowVector q0 = ac.q_values(0, b.s2, a2, true), q1 = ac.q_values(1, b.s2, a2, true);
  for (Eigen::Index k = 0; k < y.size(); ++k) y(k) += agent.gamma * b.not_done(k) * std::min(q0(k), q1(k));
  const double want = 0.5 * ((ac.q_values(0, b.s, b.a) - y).squaredNorm() +
                             (ac.q_values(1, b.s, b.a) - y).squaredNorm()) / 32.0;
  CHECK(critic_pretrain_update(ac, b, pre, agent).get("critic") == doctest::Approx(want).epsilon(1e-12));
}

TEST_CASE("pre-training makes the motivational greedy policy optimal") {
  const auto [mdp, ds] = motivational_mdp();
  const Featurizer f = Featurizer::discrete(4, 2);
  AgentConfig agent = small_agent(Algorithm::TD3BC);
  agent.gamma = 1.0;
  agent.batch_size = 5;
  ActorCritic ac = make_actor_critic(f, agent);
  PretrainConfig pre;
  pre.pretrain_steps = 1500;
  pre.plateau_tol = 0.0;
  pretrain_then_train(ac, ds, pre, agent, 0);
  const QTable star = solve_optimal_tabular(mdp, 1.0);
  for (std::size_t s : {0u, 1u, 2u}) {
    CHECK(greedy_discrete_action(ac, Observation{s}, mdp.available[s]) == star.greedy_action(s));
  }
  CHECK_THROWS_AS(greedy_discrete_action(ac, Observation{std::size_t{0}}, {true}), ConfigError);
}

TEST_CASE("td3 targets") {
  const auto ds = medium_dataset(3);
  const Featurizer f = Featurizer::continuous(2, 1);
  AgentConfig agent = small_agent(Algorithm::TD3BC);
  ActorCritic ac = make_actor_critic(f, agent);
  nn::Rng rng(4);
  const Batch b = sample_batch(table_for(ds, f, agent.gamma), 16, rng);

  ActorCritic hand = ac;
  set_constant(hand.critics[0], 1.0);
  set_constant(hand.critics[1], 0.5);
  const RowVector y = clipped_double_q_target(hand, b, hand.act_batch(b.s2), 0.9);
  for (Eigen::Index k = 0; k < y.size(); ++k) CHECK(y(k) == doctest::Approx(b.r(k) + 0.9 * b.not_done(k) * 0.5));

  nn::Rng r1(3), r2(3);
  const RowVector before = td3_target(ac, b, agent, r1);
  ActorCritic zeroed = ac;
  for (auto* p : {&zeroed.actor.params, &zeroed.critics[0].params, &zeroed.critics[1].params}) {
    for (std::size_t i = 0; i < p->size(); ++i) p->at(i).setZero();
    p->touch();
  }
  CHECK(td3_target(zeroed, b, agent, r2) == before);
}

TEST_CASE("td3+bc limits of the trade-off") {
  const auto ds = medium_dataset(10);
  const Featurizer f = Featurizer::continuous(2, 1);
  const auto table = table_for(ds, f, 0.99);

  AgentConfig bc_cfg = small_agent(Algorithm::BC);
  AgentConfig td3 = small_agent(Algorithm::TD3BC);
  td3.bc_alpha = 0.0;
  ActorCritic a = make_actor_critic(f, bc_cfg);
  ActorCritic b = make_actor_critic(f, td3);
  nn::Rng r1(7), r2(7);
  for (int i = 0; i < 4000; ++i) {
    bc_update(a, sample_batch(table, 32, r1));
    const Batch batch = sample_batch(table, 32, r2);
    td3bc_update(b, batch, td3);
    if (i % 2 == 1) td3bc_update(b, batch, td3);
  }
  const Batch all = all_of(table);
  CHECK((a.act_batch(all.s) - b.act_batch(all.s)).squaredNorm() / static_cast<double>(all.size()) < 1e-2);

  // large alpha: the BC term is negligible next to the normalized Q term
  AgentConfig q_only = small_agent(Algorithm::TD3BC);
  q_only.bc_alpha = 1e8;
  q_only.critic_lr = 1e-300;  // critics step before the actor
  ActorCritic c = make_actor_critic(f, q_only);
  nn::Rng r3(1);
  const Batch batch = sample_batch(table, 32, r3);
  const RowVector q = c.q_values(0, batch.s, c.act_batch(batch.s));
  const double lambda = 1e8 / q.cwiseAbs().mean();
  const auto rep = td3bc_update(c, batch, q_only);
  CHECK(rep.get("actor") / lambda == doctest::Approx(-q.mean()).epsilon(1e-6));
}

TEST_CASE("cql regularizer") {
  const Featurizer f = Featurizer::continuous(2, 1);
  const auto ds = medium_dataset(3);
  AgentConfig agent = small_agent(Algorithm::TD3BC_CQL);
  ActorCritic ac = make_actor_critic(f, agent);
  nn::Rng rng(6);
  const Batch b = sample_batch(table_for(ds, f, 0.99), 32, rng);

  Network constant = ac.critics[0];
  set_constant(constant, 3.7);
  for (double t : {1.0, 0.5}) {
    nn::Rng r(1);
    CHECK(std::abs(cql_regularizer(constant, b, 10, t, r).value - t * std::log(10.0)) <= 1e-9);
  }

  std::vector<double> vals;
  for (double t : {1.0, 1e-3, 1e-6}) {
    nn::Rng r(2);
    vals.push_back(cql_regularizer(ac.critics[0], b, 10, t, r).value);
  }
  CHECK(vals[1] <= vals[0]);
  CHECK(vals[2] <= vals[1]);
  CHECK(vals[1] - vals[2] <= 1e-3 * std::log(10.0) + 1e-9);

  // descent on the regularizer alone, frozen batch and frozen samples
  Network net = ac.critics[0];
  net.opt.learning_rate = 3e-4;
  auto gap = [&](const Network& n) {
    nn::Rng r(99);
    Matrix u(1, 32 * 10);
    std::uniform_real_distribution<double> ud(-1, 1);
    for (Eigen::Index k = 0; k < u.size(); ++k) u(k) = ud(r);
    const Matrix s = b.s.replicate(1, 10);
    const double q_rand = nn::forward(n.params, n.cfg, Matrix((Matrix(s.rows() + 1, s.cols()) << s, u).finished())).mean();
    const double q_data = nn::forward(n.params, n.cfg, Matrix((Matrix(b.s.rows() + 1, b.s.cols()) << b.s, b.a).finished())).mean();
    return q_data - q_rand;
  };
  const double gap0 = gap(net);
  double prev = 0.0;
  bool monotone = true;
  for (int i = 0; i < 500; ++i) {
    nn::Rng r(42);
    const ValueAndGrad vg = cql_regularizer(net, b, 10, 1.0, r);
    if (i > 0 && vg.value > prev + 0.05 * std::abs(prev)) monotone = false;
    prev = vg.value;
    nn::adam_step(net.opt, net.params, vg.grad);
  }
  CHECK(monotone);
  CHECK(gap(net) > gap0);
}

TEST_CASE("ensemble diversity gradient") {
  const Featurizer f = Featurizer::continuous(3, 2);
  AgentConfig agent = small_agent(Algorithm::EnsembleSoftAC);
  agent.num_critics = 3;
  agent.hidden_dims = {6, 5};
  ActorCritic ac = make_actor_critic(f, agent);
  Rng rng(3);
  std::normal_distribution<double> n(0, 1);
  Batch b;
  b.s = Matrix(3, 4);
  b.a = Matrix(2, 4);
  for (Eigen::Index k = 0; k < b.s.size(); ++k) b.s(k) = n(rng);
  for (Eigen::Index k = 0; k < b.a.size(); ++k) b.a(k) = std::tanh(n(rng));
  const DiversityTerm d = ensemble_diversity(ac.critics, b);
  CHECK(d.value >= -1.0);
  CHECK(d.value <= 1.0);
  const double h = 1e-6;
  for (std::size_t m = 0; m < 3; ++m) {
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < ac.critics[m].params.size(); ++i) {
      for (Eigen::Index k = 0; k < ac.critics[m].params.at(i).size(); ++k) {
        auto plus = ac.critics, minus = ac.critics;
        plus[m].params.at(i)(k) += h;
        plus[m].params.touch();
        minus[m].params.at(i)(k) -= h;
        minus[m].params.touch();
        const double fd = (ensemble_diversity(plus, b).value - ensemble_diversity(minus, b).value) / (2 * h);
        diff = std::max(diff, std::abs(fd - d.grads[m].at(i)(k)));
        scale = std::max(scale, std::abs(fd));
      }
    }
    CHECK(diff <= 1e-4 * std::max(scale, 1e-3));
  }

  // one action dimension: cosine similarity is +-1, nothing to learn
  ActorCritic one = make_actor_critic(Featurizer::continuous(3, 1), agent);
  Batch b1 = b;
  b1.a = b.a.topRows(1);
  const DiversityTerm d1 = ensemble_diversity(one.critics, b1);
  for (const auto& g : d1.grads) {
    for (std::size_t i = 0; i < g.size(); ++i) CHECK(g.at(i).cwiseAbs().maxCoeff() < 1e-6);
  }
}

TEST_CASE("ensemble soft update") {
  const Featurizer f = Featurizer::continuous(2, 1);
  const auto ds = medium_dataset(3);
  AgentConfig agent = small_agent(Algorithm::EnsembleSoftAC);
  agent.num_critics = 3;
  ActorCritic ac = make_actor_critic(f, agent);
  nn::Rng rng(8);
  const Batch b = sample_batch(table_for(ds, f, 0.99), 16, rng);

  ActorCritic hand = ac;
  set_constant(hand.critics[0], 1.0);
  set_constant(hand.critics[1], 0.5);
  set_constant(hand.critics[2], 2.0);
  const RowVector y = clipped_double_q_target(hand, b, b.a, 1.0);
  for (Eigen::Index k = 0; k < y.size(); ++k) CHECK(y(k) == doctest::Approx(b.r(k) + b.not_done(k) * 0.5));

  // temperature 0 and two members: the plain clipped double-Q regression
  AgentConfig two = small_agent(Algorithm::EnsembleSoftAC);
  two.temperature = 0.0;
  two.eta = 0.0;
  ActorCritic ac2 = make_actor_critic(f, two);
  ActorCritic mirror = ac2;
  const nn::SquashedSample next =
      nn::sample_squashed(nn::forward(mirror.actor.params, mirror.actor.cfg, b.s2), mirror.rng);
  const RowVector y2 = clipped_double_q_target(mirror, b, next.action, two.gamma);
  const double want = 0.5 * ((mirror.q_values(0, b.s, b.a) - y2).squaredNorm() +
                             (mirror.q_values(1, b.s, b.a) - y2).squaredNorm()) / 16.0;
  CHECK(ensemble_soft_update(ac2, b, two).get("critic") == doctest::Approx(want).epsilon(1e-12));

  ActorCritic same = ac;
  same.critics[1] = same.critics[0];
  same.critics[2] = same.critics[0];
  agent.eta = 0.0;
  CHECK(ensemble_soft_update(same, b, agent).ensemble_collapse_warning);
  CHECK_FALSE(ensemble_soft_update(ac, b, agent).ensemble_collapse_warning);
}

TEST_CASE("larger ensembles are more pessimistic off the data") {
  const Featurizer f = Featurizer::continuous(2, 1);
  const auto ds = line_dataset({0.5, -0.25, 1.0, 0.0, 0.75}, 0.9);
  std::vector<double> off;
  for (std::size_t n : {2u, 10u}) {
    AgentConfig agent = small_agent(Algorithm::EnsembleSoftAC);
    agent.num_critics = n;
    ActorCritic ac = make_actor_critic(f, agent);
    const Batch b = all_of(table_for(ds, f, agent.gamma));
    PretrainConfig pre;
    for (int i = 0; i < 1000; ++i) critic_pretrain_update(ac, b, pre, agent);
    Rng rng(0);
    std::uniform_real_distribution<double> u(-1, 0.5);
    Matrix s = b.s.replicate(1, 40), a(1, s.cols());
    for (Eigen::Index k = 0; k < a.size(); ++k) a(k) = u(rng);
    RowVector q = ac.q_values(0, s, a);
    for (std::size_t m = 1; m < n; ++m) q = q.cwiseMin(ac.q_values(m, s, a));
    off.push_back(q.mean());
  }
  CHECK(off[1] < off[0]);
}

TEST_CASE("plateau detector") {
  PlateauDetector flat(10, 0.01);
  bool hit = false;
  for (int i = 0; i < 20; ++i) hit = flat.add(1.0);
  CHECK(hit);
  PlateauDetector falling(10, 0.01);
  for (int i = 0; i < 100; ++i) CHECK_FALSE(falling.add(std::exp(-0.05 * i)));
}

TEST_CASE("phase structure") {
  const auto ds = medium_dataset(5);
  const Featurizer f = Featurizer::continuous(2, 1);
  AgentConfig agent = small_agent(Algorithm::EnsembleSoftAC);
  PretrainConfig pre;
  pre.pretrain_steps = 200;
  pre.plateau_window = 50;
  pre.bc_mode = bcmode::Soft{0.1};
  ActorCritic ac = make_actor_critic(f, agent);
  const auto critics0 = ac.critics;
  std::vector<Phase> seen;
  bool critic_untouched = false;
  TrainOptions opts;
  opts.log_every = 10;
  opts.observer = [&](const StepInfo& info) {
    if (seen.empty() || seen.back() != info.phase) seen.push_back(info.phase);
    if (info.phase_end && info.phase == Phase::ActorPretrain) {
      critic_untouched = max_abs_diff(info.agent->critics[0].params, critics0[0].params) == 0.0;
    }
  };
  const auto res = pretrain_then_train(ac, ds, pre, agent, 100, opts);
  CHECK(seen == std::vector<Phase>{Phase::ActorPretrain, Phase::CriticPretrain, Phase::RL});
  CHECK(critic_untouched);
  CHECK(res.soft_annotations == 1);
  REQUIRE(res.phases.size() == 3);
  CHECK(res.phases[2].end_step - res.phases[2].begin_step == 100);
  CHECK(res.total_updates == res.phases[2].end_step);
  for (std::size_t i = 1; i < 3; ++i) CHECK(res.phases[i].begin_step == res.phases[i - 1].end_step);

  // hard mode: one joint phase, and a skip-critic ablation labelled as actor-only
  ActorCritic h = make_actor_critic(f, small_agent(Algorithm::TD3BC));
  PretrainConfig hard;
  hard.pretrain_steps = 100;
  const auto hr = pretrain_then_train(h, ds, hard, small_agent(Algorithm::TD3BC), 10);
  REQUIRE(hr.phases.size() == 2);
  CHECK(hr.phases[0].phase == Phase::CriticPretrain);
  hard.skip_critic = true;
  ActorCritic h2 = make_actor_critic(f, small_agent(Algorithm::TD3BC));
  const auto c0 = h2.critics[0].params;
  const auto hr2 = pretrain_then_train(h2, ds, hard, small_agent(Algorithm::TD3BC), 0);
  CHECK(hr2.phases[0].phase == Phase::ActorPretrain);
  CHECK(max_abs_diff(h2.critics[0].params, c0) == 0.0);
}

TEST_CASE("non-finite losses abort with the phase") {
  auto ds = medium_dataset(2);
  ds.trajectories[0].transitions[3].reward = std::nan("");
  const Featurizer f = Featurizer::continuous(2, 1);
  ActorCritic ac = make_actor_critic(f, small_agent(Algorithm::TD3BC));
  PretrainConfig pre;
  pre.pretrain_steps = 200;
  try {
    pretrain_then_train(ac, ds, pre, small_agent(Algorithm::TD3BC), 10);
    FAIL("expected a phase error");
  } catch (const PhaseError& e) {
    CHECK(e.phase() == "CriticPretrain");
  }
  ActorCritic rl = make_actor_critic(f, small_agent(Algorithm::TD3BC));
  try {
    pretrain_then_train(rl, ds, std::nullopt, small_agent(Algorithm::TD3BC), 200);
    FAIL("expected a phase error");
  } catch (const PhaseError& e) {
    CHECK(e.phase() == "RL");
  }
}

TEST_CASE("training is bit-reproducible") {
  const auto ds = medium_dataset(5);
  const Featurizer f = Featurizer::continuous(2, 1);
  for (auto algo : {Algorithm::TD3BC_CQL, Algorithm::EnsembleSoftAC_BC}) {
    AgentConfig agent = small_agent(algo, 3);
    PretrainConfig pre;
    pre.pretrain_steps = 60;
    pre.lambda_mix = 0.5;
    ActorCritic a = make_actor_critic(f, agent), b = make_actor_critic(f, agent);
    pretrain_then_train(a, ds, pre, agent, 60);
    pretrain_then_train(b, ds, pre, agent, 60);
    CHECK(max_abs_diff(a.actor.params, b.actor.params) == 0.0);
    CHECK(max_abs_diff(a.critics[1].target, b.critics[1].target) == 0.0);
  }
}
