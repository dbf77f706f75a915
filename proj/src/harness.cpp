#include "offrl/harness.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <thread>

#include "offrl/dataset_io.hpp"

namespace offrl::harness {

using nlohmann::json;

namespace {

constexpr std::uint64_t kAnchorSeed = 0;

std::uint64_t eval_seed_for(std::uint64_t seed) {
  return seed * 0x9E3779B97F4A7C15ULL + 0x632BE59BD9B4E019ULL;
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    if (!ok) throw ConfigError(std::string("unknown key '") + key + "' in " + where);
  }
}

template <class T>
void read_opt(const json& j, const char* key, T& out) {
  if (j.contains(key) && !j.at(key).is_null()) out = j.at(key).get<T>();
}

std::string fmt9(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

std::string timeout_mode_name(TimeoutMode m) {
  return m == TimeoutMode::TreatAsTerminal ? "treat_as_terminal" : "bootstrap_excluded";
}

TimeoutMode timeout_mode_from(const std::string& s) {
  if (s == "treat_as_terminal") return TimeoutMode::TreatAsTerminal;
  if (s == "bootstrap_excluded") return TimeoutMode::BootstrapExcluded;
  throw ConfigError("unknown timeout_mode '" + s + "'");
}

}  // namespace

// ---------------------------------------------------------------------------
// Evaluation

double evaluate_policy(const ContinuousEnvSpec& env, const ContinuousPolicy& policy,
                       std::size_t n_episodes, std::uint64_t seed) {
  if (n_episodes == 0) throw ConfigError("evaluation needs at least one episode");
  return mean_return(rollout(env, policy, n_episodes, seed));
}

double evaluate_policy(const ContinuousEnvSpec& env, const agents::ActorCritic& agent,
                       std::size_t n_episodes, std::uint64_t seed) {
  if (agent.feat.obs_dim != env.obs_dim || agent.feat.act_dim != env.act_dim) {
    throw ConfigError("agent dimensions do not match env " + env.name);
  }
  const ContinuousPolicy policy = [&agent](const std::vector<double>& s, Rng&) {
    const nn::Vector obs = Eigen::Map<const nn::Vector>(s.data(), static_cast<Eigen::Index>(s.size()));
    const nn::Vector a = agent.act(obs);
    return std::vector<double>(a.data(), a.data() + a.size());
  };
  return evaluate_policy(env, policy, n_episodes, seed);
}

double normalized_score(double raw, double random_anchor, double expert_anchor) {
  if (!(expert_anchor > random_anchor)) {
    throw ConfigError("expert anchor must exceed the random anchor");
  }
  return (raw - random_anchor) / (expert_anchor - random_anchor);
}

double median(std::vector<double> v) {
  if (v.empty()) throw ConfigError("median of an empty set");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---------------------------------------------------------------------------
// Config JSON

json to_json(const BehaviorPolicySpec& spec) {
  return {{"kind", to_string(spec.kind)},
          {"quality", spec.quality},
          {"noise_scale", spec.noise_scale},
          {"seed", spec.seed}};
}

BehaviorPolicySpec behavior_from_json(const json& j) {
  check_keys(j, {"kind", "quality", "noise_scale", "seed"}, "behavior");
  BehaviorPolicySpec spec;
  if (j.contains("kind")) spec.kind = behavior_kind_from_string(j.at("kind").get<std::string>());
  read_opt(j, "quality", spec.quality);
  read_opt(j, "noise_scale", spec.noise_scale);
  read_opt(j, "seed", spec.seed);
  spec.validate();
  return spec;
}

json to_json(const agents::AgentConfig& c) {
  return {{"algorithm", agents::to_string(c.algorithm)},
          {"bc_alpha", c.bc_alpha},
          {"cql_weight", c.cql_weight},
          {"cql_n_actions", c.cql_n_actions},
          {"cql_temperature", c.cql_temperature},
          {"num_critics", c.num_critics},
          {"eta", c.eta},
          {"temperature", c.temperature},
          {"bc_weight", c.bc_weight},
          {"gamma", c.gamma},
          {"reward_scale", c.reward_scale},
          {"tau", c.tau},
          {"batch_size", c.batch_size},
          {"policy_noise", c.policy_noise},
          {"noise_clip", c.noise_clip},
          {"policy_delay", c.policy_delay},
          {"actor_lr", c.actor_lr},
          {"critic_lr", c.critic_lr},
          {"hidden_dims", c.hidden_dims},
          {"actor_layernorm", c.actor_layernorm},
          {"critic_layernorm", c.critic_layernorm},
          {"seed", c.seed}};
}

agents::AgentConfig agent_from_json(const json& j) {
  check_keys(j,
             {"algorithm", "bc_alpha", "cql_weight", "cql_n_actions", "cql_temperature",
              "num_critics", "eta", "temperature", "bc_weight", "gamma", "reward_scale", "tau", "batch_size",
              "policy_noise", "noise_clip", "policy_delay", "actor_lr", "critic_lr", "hidden_dims",
              "actor_layernorm", "critic_layernorm", "seed"},
             "agent");
  agents::AgentConfig c;
  try {
    if (j.contains("algorithm")) {
      c.algorithm = agents::algorithm_from_string(j.at("algorithm").get<std::string>());
    }
    read_opt(j, "bc_alpha", c.bc_alpha);
    read_opt(j, "cql_weight", c.cql_weight);
    read_opt(j, "cql_n_actions", c.cql_n_actions);
    read_opt(j, "cql_temperature", c.cql_temperature);
    read_opt(j, "num_critics", c.num_critics);
    read_opt(j, "eta", c.eta);
    read_opt(j, "temperature", c.temperature);
    read_opt(j, "bc_weight", c.bc_weight);
    read_opt(j, "gamma", c.gamma);
    read_opt(j, "reward_scale", c.reward_scale);
    read_opt(j, "tau", c.tau);
    read_opt(j, "batch_size", c.batch_size);
    read_opt(j, "policy_noise", c.policy_noise);
    read_opt(j, "noise_clip", c.noise_clip);
    read_opt(j, "policy_delay", c.policy_delay);
    read_opt(j, "actor_lr", c.actor_lr);
    read_opt(j, "critic_lr", c.critic_lr);
    read_opt(j, "hidden_dims", c.hidden_dims);
    read_opt(j, "actor_layernorm", c.actor_layernorm);
    read_opt(j, "critic_layernorm", c.critic_layernorm);
    read_opt(j, "seed", c.seed);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("agent config: ") + e.what());
  }
  c.validate();
  return c;
}

json to_json(const agents::PretrainConfig& c) {
  json reg;
  if (const auto* q = std::get_if<agents::regularizer::CQL>(&c.value_regularizer)) {
    reg = {{"kind", "cql"}, {"weight", q->weight}};
  } else if (const auto* d =
                 std::get_if<agents::regularizer::EnsembleDiversify>(&c.value_regularizer)) {
    reg = {{"kind", "ensemble_diversify"}, {"eta", d->eta}};
  } else {
    reg = {{"kind", "none"}};
  }
  json mode;
  if (const auto* s = std::get_if<agents::bcmode::Soft>(&c.bc_mode)) {
    mode = {{"kind", "soft"}, {"temperature", s->temperature}};
  } else {
    mode = {{"kind", "hard"}};
  }
  return {{"lambda_mix", c.lambda_mix},
          {"pretrain_steps", c.pretrain_steps},
          {"plateau_tol", c.plateau_tol},
          {"plateau_window", c.plateau_window},
          {"value_regularizer", reg},
          {"bc_mode", mode},
          {"skip_critic", c.skip_critic},
          {"timeout_mode", timeout_mode_name(c.timeout_mode)}};
}

agents::PretrainConfig pretrain_from_json(const json& j) {
  check_keys(j,
             {"lambda_mix", "pretrain_steps", "plateau_tol", "plateau_window", "value_regularizer",
              "bc_mode", "skip_critic", "timeout_mode"},
             "pretrain");
  agents::PretrainConfig c;
  try {
    read_opt(j, "lambda_mix", c.lambda_mix);
    read_opt(j, "pretrain_steps", c.pretrain_steps);
    read_opt(j, "plateau_tol", c.plateau_tol);
    read_opt(j, "plateau_window", c.plateau_window);
    read_opt(j, "skip_critic", c.skip_critic);
    if (j.contains("timeout_mode")) {
      c.timeout_mode = timeout_mode_from(j.at("timeout_mode").get<std::string>());
    }
    if (j.contains("value_regularizer")) {
      const json& r = j.at("value_regularizer");
      check_keys(r, {"kind", "weight", "eta"}, "value_regularizer");
      const std::string kind = r.value("kind", "none");
      if (kind == "none") {
        c.value_regularizer = agents::regularizer::None{};
      } else if (kind == "cql") {
        c.value_regularizer = agents::regularizer::CQL{r.value("weight", 1.0)};
      } else if (kind == "ensemble_diversify") {
        c.value_regularizer = agents::regularizer::EnsembleDiversify{r.value("eta", 1.0)};
      } else {
        throw ConfigError("unknown value_regularizer kind '" + kind + "'");
      }
    }
    if (j.contains("bc_mode")) {
      const json& m = j.at("bc_mode");
      check_keys(m, {"kind", "temperature"}, "bc_mode");
      const std::string kind = m.value("kind", "hard");
      if (kind == "hard") {
        c.bc_mode = agents::bcmode::Hard{};
      } else if (kind == "soft") {
        c.bc_mode = agents::bcmode::Soft{m.value("temperature", 0.1)};
      } else {
        throw ConfigError("unknown bc_mode kind '" + kind + "'");
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("pretrain config: ") + e.what());
  }
  c.validate();
  return c;
}

void ExperimentConfig::validate() const {
  if (seeds.empty()) throw ConfigError("seeds must not be empty");
  if (eval_every == 0) throw ConfigError("eval_every must be positive");
  if (total_steps % eval_every != 0) throw ConfigError("eval_every must divide total_steps");
  if (eval_episodes == 0) throw ConfigError("eval_episodes must be positive");
  if (!(window_fraction > 0.0 && window_fraction <= 1.0)) {
    throw ConfigError("window_fraction must lie in (0, 1]");
  }
  if (dataset.path.empty() && dataset.episodes == 0) {
    throw ConfigError("generated datasets need at least one episode");
  }
  if (anchors && !(anchors->expert > anchors->random)) {
    throw ConfigError("expert anchor must exceed the random anchor");
  }
  std::vector<std::uint64_t> sorted = seeds;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw ConfigError("seeds must be distinct");
  }
  agent.validate();
  if (pretrain) pretrain->validate();
}

json to_json(const ExperimentConfig& c) {
  json j = {{"name", c.name},
            {"env", c.env},
            {"dataset",
             {{"path", c.dataset.path},
              {"behavior", to_json(c.dataset.behavior)},
              {"episodes", c.dataset.episodes}}},
            {"agent", to_json(c.agent)},
            {"pretrain", c.pretrain ? to_json(*c.pretrain) : json(nullptr)},
            {"total_steps", c.total_steps},
            {"eval_every", c.eval_every},
            {"eval_episodes", c.eval_episodes},
            {"seeds", c.seeds},
            {"output_dir", c.output_dir},
            {"window_fraction", c.window_fraction},
            {"anchor_episodes", c.anchor_episodes},
            {"anchors", c.anchors ? json{{"random", c.anchors->random}, {"expert", c.anchors->expert}}
                                  : json(nullptr)},
            {"threshold", c.threshold ? json(*c.threshold) : json(nullptr)}};
  return j;
}

ExperimentConfig experiment_from_json(const json& j) {
  check_keys(j,
             {"name", "env", "dataset", "agent", "pretrain", "total_steps", "eval_every",
              "eval_episodes", "seeds", "output_dir", "window_fraction", "anchor_episodes",
              "anchors", "threshold"},
             "experiment");
  ExperimentConfig c;
  try {
    read_opt(j, "name", c.name);
    read_opt(j, "env", c.env);
    if (j.contains("dataset")) {
      const json& d = j.at("dataset");
      check_keys(d, {"path", "behavior", "episodes"}, "dataset");
      read_opt(d, "path", c.dataset.path);
      read_opt(d, "episodes", c.dataset.episodes);
      if (d.contains("behavior")) c.dataset.behavior = behavior_from_json(d.at("behavior"));
    }
    if (j.contains("agent")) c.agent = agent_from_json(j.at("agent"));
    if (j.contains("pretrain") && !j.at("pretrain").is_null()) {
      c.pretrain = pretrain_from_json(j.at("pretrain"));
    }
    read_opt(j, "total_steps", c.total_steps);
    read_opt(j, "eval_every", c.eval_every);
    read_opt(j, "eval_episodes", c.eval_episodes);
    read_opt(j, "seeds", c.seeds);
    read_opt(j, "output_dir", c.output_dir);
    read_opt(j, "window_fraction", c.window_fraction);
    read_opt(j, "anchor_episodes", c.anchor_episodes);
    if (j.contains("anchors") && !j.at("anchors").is_null()) {
      const json& a = j.at("anchors");
      check_keys(a, {"random", "expert"}, "anchors");
      c.anchors = ScoreAnchors{a.at("random").get<double>(), a.at("expert").get<double>()};
    }
    if (j.contains("threshold") && !j.at("threshold").is_null()) {
      c.threshold = j.at("threshold").get<double>();
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("experiment config: ") + e.what());
  }
  env_by_name(c.env);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Metrics CSV

std::string metrics_to_csv(const std::vector<MetricsRecord>& records, bool include_wall_clock) {
  std::string out = kMetricsHeader;
  out += '\n';
  auto cell = [&out](const std::optional<double>& v) {
    out += ',';
    if (v) out += fmt9(*v);
  };
  for (const auto& r : records) {
    out += std::to_string(r.step);
    out += ',';
    out += agents::to_string(r.phase);
    out += ',';
    out += std::to_string(r.seed);
    cell(r.loss_actor);
    cell(r.loss_critic);
    cell(r.loss_bc);
    cell(r.loss_cql);
    cell(r.loss_div);
    cell(r.eval_return);
    cell(r.normalized_score);
    out += ',';
    if (include_wall_clock) out += fmt9(r.wall_clock_s);
    out += '\n';
  }
  return out;
}

void write_metrics(const std::vector<MetricsRecord>& records, const std::string& path) {
  if (records.empty()) throw ConfigError("no metrics records to write");
  std::ofstream os(path, std::ios::binary);
  if (!os) throw ConfigError("cannot open " + path + " for writing");
  os << metrics_to_csv(records);
  if (!os) throw ConfigError("failed writing " + path);
}

std::vector<MetricsRecord> metrics_from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line) || line != kMetricsHeader) {
    throw ConfigError("metrics CSV header does not match");
  }
  std::vector<MetricsRecord> out;
  std::size_t lineno = 1;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::string cellv;
    std::istringstream ls(line);
    while (std::getline(ls, cellv, ',')) f.push_back(cellv);
    if (!line.empty() && line.back() == ',') f.emplace_back();
    if (f.size() != 11) {
      throw ConfigError("metrics line " + std::to_string(lineno) + " has " +
                        std::to_string(f.size()) + " fields");
    }
    auto opt = [](const std::string& s) -> std::optional<double> {
      if (s.empty()) return std::nullopt;
      return std::stod(s);
    };
    try {
      MetricsRecord r;
      r.step = std::stoull(f[0]);
      r.phase = agents::phase_from_string(f[1]);
      r.seed = std::stoull(f[2]);
      r.loss_actor = opt(f[3]);
      r.loss_critic = opt(f[4]);
      r.loss_bc = opt(f[5]);
      r.loss_cql = opt(f[6]);
      r.loss_div = opt(f[7]);
      r.eval_return = opt(f[8]);
      r.normalized_score = opt(f[9]);
      r.wall_clock_s = f[10].empty() ? 0.0 : std::stod(f[10]);
      out.push_back(r);
    } catch (const std::logic_error& e) {
      throw ConfigError("metrics line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

std::vector<MetricsRecord> read_metrics(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ConfigError("cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return metrics_from_csv(ss.str());
}

// ---------------------------------------------------------------------------
// Runs

std::optional<std::size_t> steps_to_threshold(const std::vector<MetricsRecord>& records,
                                              double threshold) {
  std::vector<const MetricsRecord*> evals;
  for (const auto& r : records) {
    if (r.normalized_score) evals.push_back(&r);
  }
  for (std::size_t i = 0; i < evals.size(); ++i) {
    const std::size_t lo = i >= 2 ? i - 2 : 0;
    double s = 0.0;
    for (std::size_t k = lo; k <= i; ++k) s += *evals[k]->normalized_score;
    if (s / static_cast<double>(i - lo + 1) >= threshold) return evals[i]->step;
  }
  return std::nullopt;
}

namespace {

std::vector<double> window_scores(const SeedResult& s, const ExperimentConfig& cfg) {
  std::vector<double> w;
  if (cfg.total_steps == 0) {
    if (!s.records.empty() && s.records.back().normalized_score) {
      w.push_back(*s.records.back().normalized_score);
    }
    return w;
  }
  const double cut = static_cast<double>(s.rl_begin_step) +
                     (1.0 - cfg.window_fraction) * static_cast<double>(cfg.total_steps);
  for (const auto& r : s.records) {
    if (r.normalized_score && r.step > s.rl_begin_step && static_cast<double>(r.step) >= cut) {
      w.push_back(*r.normalized_score);
    }
  }
  return w;
}

SeedResult run_seed(const ExperimentConfig& cfg, const ContinuousEnvSpec& env,
                    const OfflineDataset& ds, const ScoreAnchors& anchors, std::uint64_t seed) {
  SeedResult out;
  out.seed = seed;
  const auto t0 = std::chrono::steady_clock::now();
  try {
    agents::AgentConfig agent = cfg.agent;
    agent.seed = seed;
    agents::ActorCritic ac =
        agents::make_actor_critic(agents::Featurizer::continuous(env.obs_dim, env.act_dim), agent);
    const std::uint64_t eval_seed = eval_seed_for(seed);

    auto record = [&](std::size_t step, agents::Phase phase, const agents::LossReport* losses,
                      bool evaluate) {
      if (!out.records.empty() && out.records.back().step == step) return;
      MetricsRecord r;
      r.step = step;
      r.phase = phase;
      r.seed = seed;
      if (losses) {
        auto get = [&](const char* k) -> std::optional<double> {
          const auto it = losses->losses.find(k);
          if (it == losses->losses.end()) return std::nullopt;
          return it->second;
        };
        r.loss_actor = get("actor");
        r.loss_critic = get("critic");
        r.loss_bc = get("bc");
        r.loss_cql = get("cql");
        r.loss_div = get("div");
      }
      if (evaluate) {
        r.eval_return = evaluate_policy(env, ac, cfg.eval_episodes, eval_seed);
        r.normalized_score = normalized_score(*r.eval_return, anchors.random, anchors.expert);
      }
      r.wall_clock_s =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      out.records.push_back(r);
    };

    const agents::Phase first =
        !cfg.pretrain ? agents::Phase::RL
        : (std::holds_alternative<agents::bcmode::Soft>(cfg.pretrain->bc_mode) ||
           cfg.pretrain->skip_critic)
            ? agents::Phase::ActorPretrain
            : agents::Phase::CriticPretrain;
    record(0, first, nullptr, true);

    agents::TrainOptions opts;
    opts.log_every = cfg.eval_every;
    opts.observer = [&](const agents::StepInfo& info) {
      record(info.step, info.phase, info.losses, true);
      if (info.phase_end && info.phase != agents::Phase::RL) {
        out.pretrain_end_score = out.records.back().normalized_score;
      }
    };
    out.train = agents::pretrain_then_train(ac, ds, cfg.pretrain, agent, cfg.total_steps, opts);
    for (const auto& span : out.train.phases) {
      if (span.phase == agents::Phase::RL) out.rl_begin_step = span.begin_step;
    }
    if (!out.pretrain_end_score) out.pretrain_end_score = out.records.front().normalized_score;

    const std::vector<double> window = window_scores(out, cfg);
    if (window.empty()) throw ConfigError("no evaluations fell inside the report window");
    out.window_score = std::accumulate(window.begin(), window.end(), 0.0) /
                       static_cast<double>(window.size());
    if (cfg.threshold) out.steps_to_threshold = steps_to_threshold(out.records, *cfg.threshold);
    out.actor_checkpoint = nn::checkpoint_to_json(ac.actor.params, ac.actor.cfg);
    out.ok = true;
  } catch (const std::exception& e) {
    out.ok = false;
    out.error = e.what();
  }
  return out;
}

}  // namespace

EvalReport aggregate(const std::vector<SeedResult>& seeds, const ExperimentConfig& cfg) {
  EvalReport rep;
  std::vector<double> pooled;
  std::vector<double> steps;
  for (const auto& s : seeds) {
    if (!s.ok) {
      ++rep.failed_seeds;
      continue;
    }
    const auto w = window_scores(s, cfg);
    pooled.insert(pooled.end(), w.begin(), w.end());
    if (s.steps_to_threshold) steps.push_back(static_cast<double>(*s.steps_to_threshold));
  }
  // Sorting first makes the sums independent of seed order.
  std::sort(pooled.begin(), pooled.end());
  rep.n_evals = pooled.size();
  if (!pooled.empty()) {
    const double n = static_cast<double>(pooled.size());
    rep.mean = std::accumulate(pooled.begin(), pooled.end(), 0.0) / n;
    double ss = 0.0;
    for (double v : pooled) ss += (v - rep.mean) * (v - rep.mean);
    rep.std = std::sqrt(ss / n);
  }
  if (!steps.empty()) rep.steps_to_threshold = median(steps);
  return rep;
}

OfflineDataset load_dataset(const ExperimentConfig& cfg) {
  if (!cfg.dataset.path.empty()) return read_dataset_jsonl(cfg.dataset.path);
  return generate_dataset(env_by_name(cfg.env), cfg.dataset.behavior, cfg.dataset.episodes);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, std::size_t jobs) {
  cfg.validate();
  return run_experiment(cfg, load_dataset(cfg), jobs);
}

ExperimentResult run_experiment(const ExperimentConfig& cfg, const OfflineDataset& ds,
                                std::size_t jobs) {
  cfg.validate();
  const ContinuousEnvSpec env = env_by_name(cfg.env);
  ExperimentResult res;
  res.config = cfg;
  res.anchors = cfg.anchors ? *cfg.anchors : measure_anchors(env, cfg.anchor_episodes, kAnchorSeed);
  std::ostringstream ser;
  write_dataset_jsonl(ds, ser);
  res.dataset_sha1 = git_blob_sha1(ser.str());
  res.seeds.resize(cfg.seeds.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < cfg.seeds.size(); i = next++) {
      res.seeds[i] = run_seed(cfg, env, ds, res.anchors, cfg.seeds[i]);
    }
  };
  const std::size_t n_threads = std::clamp<std::size_t>(jobs, 1, cfg.seeds.size());
  if (n_threads == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n_threads; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  res.report = aggregate(res.seeds, cfg);
  if (!cfg.output_dir.empty()) write_outputs(res, cfg.output_dir);
  return res;
}

EfficiencyComparison compare_efficiency(const ExperimentResult& scratch,
                                        const ExperimentResult& pretrained, double fraction) {
  if (scratch.seeds.size() != pretrained.seeds.size()) {
    throw ConfigError("efficiency comparison needs the same number of seeds");
  }
  EfficiencyComparison out;
  std::vector<double> s_steps;
  std::vector<double> p_steps;
  auto censored = [](const SeedResult& r, const std::optional<std::size_t>& v) {
    if (v) return static_cast<double>(*v);
    return static_cast<double>(r.records.empty() ? 0 : r.records.back().step + 1);
  };
  for (std::size_t i = 0; i < scratch.seeds.size(); ++i) {
    const SeedResult& s = scratch.seeds[i];
    const SeedResult& p = pretrained.seeds[i];
    if (!s.ok || !p.ok) {
      throw ConfigError("efficiency comparison needs every seed to succeed");
    }
    const double thr = fraction * s.window_score;
    out.thresholds.push_back(thr);
    out.scratch_steps.push_back(steps_to_threshold(s.records, thr));
    out.pretrained_steps.push_back(steps_to_threshold(p.records, thr));
    s_steps.push_back(censored(s, out.scratch_steps.back()));
    p_steps.push_back(censored(p, out.pretrained_steps.back()));
  }
  out.scratch_median = median(s_steps);
  out.pretrained_median = median(p_steps);
  return out;
}

ContinuousPolicy policy_from_checkpoint(const std::string& text, std::size_t act_dim) {
  nn::ParamTree params;
  nn::MLPConfig cfg;
  nn::checkpoint_from_json(text, params, cfg);
  const bool gaussian = cfg.output_dim == 2 * act_dim;
  if (!gaussian && cfg.output_dim != act_dim) {
    throw ConfigError("checkpoint output size does not match the action dimension");
  }
  return [params, cfg, gaussian](const std::vector<double>& s, Rng&) {
    const nn::Matrix x = Eigen::Map<const nn::Vector>(s.data(), static_cast<Eigen::Index>(s.size()));
    const nn::Matrix out = nn::forward(params, cfg, x);
    const nn::Matrix a = gaussian ? nn::squashed_mean_action(out) : nn::Matrix(out.array().tanh());
    return std::vector<double>(a.data(), a.data() + a.size());
  };
}

// ---------------------------------------------------------------------------
// Outputs

std::string git_blob_sha1(const std::string& content) {
  const std::string blob = "blob " + std::to_string(content.size()) + '\0' + content;
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(blob.data(), blob.size(), digest, &len, EVP_sha1(), nullptr) != 1) {
    throw std::runtime_error("SHA-1 digest failed");
  }
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    const unsigned char c = digest[i];
    out += hex[c >> 4];
    out += hex[c & 15];
  }
  return out;
}

json run_manifest(const ExperimentResult& result) {
  json seeds = json::array();
  for (const auto& s : result.seeds) {
    json j = {{"seed", s.seed},
              {"ok", s.ok},
              {"metrics", result.config.name + "_seed" + std::to_string(s.seed) + ".csv"}};
    if (!s.ok) j["error"] = s.error;
    if (s.ok) {
      j["actor"] = result.config.name + "_seed" + std::to_string(s.seed) + "_actor.json";
      j["window_score"] = s.window_score;
      j["rl_begin_step"] = s.rl_begin_step;
      j["pretrain_end_score"] = s.pretrain_end_score ? json(*s.pretrain_end_score) : json(nullptr);
      j["steps_to_threshold"] = s.steps_to_threshold ? json(*s.steps_to_threshold) : json(nullptr);
      json phases = json::array();
      for (const auto& p : s.train.phases) {
        phases.push_back({{"phase", agents::to_string(p.phase)},
                          {"begin_step", p.begin_step},
                          {"end_step", p.end_step}});
      }
      j["phases"] = phases;
    }
    seeds.push_back(std::move(j));
  }
  const EvalReport& r = result.report;
  return {{"config", to_json(result.config)},
          {"dataset_sha1", result.dataset_sha1},
          {"anchors", {{"random", result.anchors.random}, {"expert", result.anchors.expert}}},
          {"seeds", seeds},
          {"report",
           {{"mean", r.mean},
            {"std", r.std},
            {"n_evals", r.n_evals},
            {"failed_seeds", r.failed_seeds},
            {"steps_to_threshold",
             r.steps_to_threshold ? json(*r.steps_to_threshold) : json(nullptr)}}}};
}

void write_outputs(const ExperimentResult& result, const std::string& dir) {
  std::filesystem::create_directories(dir);
  for (const auto& s : result.seeds) {
    if (s.records.empty()) continue;
    const std::string stem = result.config.name + "_seed" + std::to_string(s.seed);
    write_metrics(s.records, (std::filesystem::path(dir) / (stem + ".csv")).string());
    if (!s.actor_checkpoint.empty()) {
      std::ofstream(std::filesystem::path(dir) / (stem + "_actor.json")) << s.actor_checkpoint << '\n';
    }
  }
  const auto path = std::filesystem::path(dir) / (result.config.name + "_manifest.json");
  std::ofstream os(path);
  if (!os) throw ConfigError("cannot write " + path.string());
  os << run_manifest(result).dump(2) << '\n';
}

}  // namespace offrl::harness
