// offrl command-line entry point.
//   exit 0: success, 2: a checked property failed, 3: bad configuration
#include <algorithm>
#include <atomic>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include "CLI11.hpp"
#include "json.hpp"
#include "offrl/dataset_io.hpp"
#include "offrl/harness.hpp"
#include "offrl/plot.hpp"
#include "offrl/tabular.hpp"

using json = nlohmann::json;
using namespace offrl;
namespace fs = std::filesystem;

namespace {

constexpr int kPropertyFailure = 2;
constexpr int kConfigError = 3;

json read_json_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read " + path);
  try {
    return json::parse(is);
  } catch (const json::exception& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

void echo(const char* cmd, const json& resolved) {
  std::cout << "config " << cmd << ' ' << resolved.dump() << '\n';
}

std::string fmt(double v, const char* spec = "%.6g") {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// ---------------------------------------------------------------------------

struct GenDataArgs {
  std::string config, env = "pointmass1", kind = "scripted_proportional", out;
  double quality = 0.5, noise = 0.6;
  std::uint64_t seed = 0;
  std::size_t episodes = 200, anchor_episodes = 200;
};

int gen_data(const GenDataArgs& a, const CLI::App& sub) {
  std::string env_name = a.env;
  BehaviorPolicySpec spec;
  spec.kind = behavior_kind_from_string(a.kind);
  spec.quality = a.quality;
  spec.noise_scale = a.noise;
  spec.seed = a.seed;
  std::size_t episodes = a.episodes;
  if (!a.config.empty()) {
    const auto cfg = harness::experiment_from_json(read_json_file(a.config));
    if (!sub.count("--env")) env_name = cfg.env;
    if (!sub.count("--episodes")) episodes = cfg.dataset.episodes;
    const BehaviorPolicySpec& b = cfg.dataset.behavior;
    if (!sub.count("--kind")) spec.kind = b.kind;
    if (!sub.count("--quality")) spec.quality = b.quality;
    if (!sub.count("--noise")) spec.noise_scale = b.noise_scale;
    if (!sub.count("--seed")) spec.seed = b.seed;
  }
  spec.validate();
  const auto env = env_by_name(env_name);
  echo("gen-data", {{"env", env_name},
                    {"behavior", harness::to_json(spec)},
                    {"episodes", episodes},
                    {"anchor_episodes", a.anchor_episodes},
                    {"out", a.out}});
  const OfflineDataset ds = generate_dataset(env, spec, episodes);
  std::ostringstream ser;
  write_dataset_jsonl(ds, ser);
  {
    std::ofstream os(a.out);
    if (!os) throw ConfigError("cannot write " + a.out);
    os << ser.str();
  }
  const ScoreAnchors anchors = measure_anchors(env, a.anchor_episodes, 0);
  fs::path manifest_path(a.out);
  manifest_path.replace_extension(".manifest.json");
  const json manifest = {{"env", env_name},
                         {"policy", harness::to_json(spec)},
                         {"seed", spec.seed},
                         {"episodes", episodes},
                         {"transitions", ds.num_transitions()},
                         {"anchors", {{"random", anchors.random}, {"expert", anchors.expert}}},
                         {"sha1", harness::git_blob_sha1(ser.str())}};
  std::ofstream(manifest_path) << manifest.dump(2) << '\n';
  std::cout << "wrote " << ds.num_transitions() << " transitions to " << a.out << " (manifest "
            << manifest_path.string() << ")\n";
  return 0;
}

// ---------------------------------------------------------------------------

int table1(const std::string& visit, double lr) {
  if (visit != "every" && visit != "first") throw ConfigError("--visit-mode must be every or first");
  if (!(lr > 0.0 && lr <= 1.0)) throw ConfigError("--lr must lie in (0, 1]");
  const VisitMode mode = visit == "every" ? VisitMode::EveryVisit : VisitMode::FirstVisit;
  echo("table1", {{"visit_mode", visit}, {"lr", lr}, {"gamma", 1.0}});
  const auto t0 = std::chrono::steady_clock::now();
  const Table1Grid got = table1_compute(mode, lr);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const auto& names = table1_column_names();
  std::printf("%-6s", "epoch");
  for (std::size_t c = 0; c < 8; ++c) std::printf(" %10s", names[c].c_str());
  std::printf("\n");
  for (std::size_t e = 0; e < 4; ++e) {
    std::printf("%-6zu", e);
    for (std::size_t c = 0; c < 8; ++c) std::printf(" %10s", fmt(got[e][c], "%+.4g").c_str());
    std::printf("\n");
  }
  std::printf("runtime %.4f s\n", secs);
  if (lr != 1.0) {
    std::printf("non-paper setting (lr=%g): no PASS/FAIL verdict\n", lr);
    return 0;
  }
  const auto want = table1_expected(mode);
  if (const auto cell = table1_first_mismatch(got, want)) {
    std::printf("FAIL first differing cell: epoch %zu %s got %g want %g\n", cell->epoch,
                names[cell->column].c_str(), got[cell->epoch][cell->column],
                want[cell->epoch][cell->column]);
    return kPropertyFailure;
  }
  std::printf("PASS all 32 cells match\n");
  return 0;
}

// ---------------------------------------------------------------------------

struct FqiArgs {
  std::size_t states = 10, actions = 4, seeds = 20, max_iters = 10000;
  std::uint64_t seed = 0;
  std::vector<double> betas = {0.0, 0.25, 0.5, 0.75, 1.0};
  double delta = 1e-3, gamma = 0.9, noise = 0.0;
  std::string out;
};

int fqi_study(FqiArgs a) {
  if (a.betas.empty()) throw ConfigError("--betas must not be empty");
  if (a.seeds == 0) throw ConfigError("--seeds must be positive");
  std::sort(a.betas.begin(), a.betas.end());
  for (double b : a.betas) {
    if (!(b >= 0.0 && b <= 1.0)) throw ConfigError("betas must lie in [0, 1]");
  }
  echo("fqi-study", {{"states", a.states}, {"actions", a.actions}, {"seeds", a.seeds},
                     {"seed", a.seed}, {"betas", a.betas}, {"delta", a.delta},
                     {"gamma", a.gamma}, {"noise", a.noise}, {"max_iters", a.max_iters},
                     {"out", a.out}});
  const auto t0 = std::chrono::steady_clock::now();
  std::ostringstream csv;
  csv << "beta,seed,k,init_error,final_error\n";
  std::vector<std::vector<double>> ks(a.betas.size()), predicted(a.betas.size());
  std::size_t failures = 0;
  for (std::size_t i = 0; i < a.seeds; ++i) {
    const std::uint64_t s = a.seed + i;
    const TabularMDP mdp = random_tabular_mdp(a.states, a.actions, s);
    const QTable star = solve_optimal_tabular(mdp, a.gamma, 1e-12);
    std::vector<InitStrategy> anchors;
    for (double b : a.betas) anchors.push_back(init::Interpolated{b, star});
    const auto reps = fqi_init_sweep(mdp, a.gamma, anchors, a.delta, FqiNoise{a.noise, s}, a.max_iters);
    for (std::size_t j = 0; j < reps.size(); ++j) {
      if (!reps[j].success) ++failures;
      ks[j].push_back(static_cast<double>(reps[j].iterations));
      // log(delta / e0) / log(gamma), exact only for a constant per-step error
      const double e0 = reps[j].init_error;
      predicted[j].push_back(e0 <= a.delta ? 0.0 : std::ceil(std::log(a.delta / e0) / std::log(a.gamma)));
      csv << fmt(a.betas[j], "%.9g") << ',' << s << ',' << reps[j].iterations << ','
          << fmt(reps[j].init_error, "%.9g") << ',' << fmt(reps[j].final_error, "%.9g") << '\n';
    }
  }
  if (a.out.empty()) {
    std::cout << csv.str();
  } else {
    std::ofstream os(a.out);
    if (!os) throw ConfigError("cannot write " + a.out);
    os << csv.str();
  }
  bool monotone = true;
  std::printf("median k:");
  double prev = 0.0;
  for (std::size_t j = 0; j < a.betas.size(); ++j) {
    const double m = harness::median(ks[j]);
    std::printf(" beta=%g:%g(predicted %g)", a.betas[j], m, harness::median(predicted[j]));
    if (j > 0 && m > prev) monotone = false;
    prev = m;
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  std::printf("\nruntime %.3f s, %zu runs did not reach delta\n", secs, failures);
  if (!monotone) {
    std::printf("FAIL median iterations increase along beta\n");
    return kPropertyFailure;
  }
  std::printf("PASS median iterations non-increasing in beta\n");
  return 0;
}

// ---------------------------------------------------------------------------

void print_result(const harness::ExperimentResult& res) {
  for (const auto& s : res.seeds) {
    if (s.ok) {
      std::printf("seed %llu window_score %.4f", static_cast<unsigned long long>(s.seed), s.window_score);
      if (s.pretrain_end_score) std::printf(" pretrain_end %.4f", *s.pretrain_end_score);
      if (s.steps_to_threshold) std::printf(" steps_to_threshold %zu", *s.steps_to_threshold);
      std::printf("\n");
    } else {
      std::printf("seed %llu FAILED: %s\n", static_cast<unsigned long long>(s.seed), s.error.c_str());
    }
  }
  std::printf("report mean %.4f std %.4f over %zu evaluations, %zu failed seeds\n", res.report.mean,
              res.report.std, res.report.n_evals, res.report.failed_seeds);
}

harness::ExperimentConfig load_experiment(const std::string& path, const CLI::App& sub,
                                          std::uint64_t seed, const std::string& out) {
  harness::ExperimentConfig cfg = harness::experiment_from_json(read_json_file(path));
  if (sub.count("--seed")) cfg.seeds = {seed};
  if (sub.count("--out")) cfg.output_dir = out;
  cfg.validate();
  return cfg;
}

int train(const std::string& config, std::uint64_t seed, std::size_t jobs, const std::string& out,
          const CLI::App& sub) {
  const auto cfg = load_experiment(config, sub, seed, out);
  echo("train", harness::to_json(cfg));
  const auto res = harness::run_experiment(cfg, jobs);
  print_result(res);
  return res.report.failed_seeds > 0 ? kPropertyFailure : 0;
}

int evaluate(const std::string& checkpoint, const std::string& env_name, std::size_t episodes,
             std::uint64_t seed, std::size_t anchor_episodes) {
  if (episodes == 0) throw ConfigError("--episodes must be positive");
  echo("evaluate", {{"checkpoint", checkpoint}, {"env", env_name}, {"episodes", episodes},
                    {"seed", seed}, {"anchor_episodes", anchor_episodes}});
  const auto env = env_by_name(env_name);
  std::ifstream is(checkpoint);
  if (!is) throw ConfigError("cannot read " + checkpoint);
  std::stringstream text;
  text << is.rdbuf();
  const auto policy = harness::policy_from_checkpoint(text.str(), env.act_dim);
  const double ret = harness::evaluate_policy(env, policy, episodes, seed);
  const auto anchors = measure_anchors(env, anchor_episodes, 0);
  std::printf("mean_return %.6f normalized_score %.6f (anchors random %.4f expert %.4f)\n", ret,
              harness::normalized_score(ret, anchors.random, anchors.expert), anchors.random,
              anchors.expert);
  return 0;
}

// ---------------------------------------------------------------------------

void set_path(json& j, const std::string& dotted, const json& value) {
  json* node = &j;
  std::size_t start = 0;
  while (true) {
    const auto dot = dotted.find('.', start);
    const std::string key = dotted.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (dot == std::string::npos) {
      (*node)[key] = value;
      return;
    }
    if (!node->contains(key) || (*node)[key].is_null()) (*node)[key] = json::object();
    node = &(*node)[key];
    start = dot + 1;
  }
}

int sweep(const std::string& config, std::uint64_t seed, std::size_t jobs, const std::string& out,
          const CLI::App& sub) {
  const json doc = read_json_file(config);
  for (const auto& [k, v] : doc.items()) {
    if (k != "base" && k != "grid") throw ConfigError("unknown sweep key '" + k + "'");
  }
  if (!doc.contains("base")) throw ConfigError("sweep config needs a 'base' experiment");
  const json grid = doc.value("grid", json::object());
  if (!grid.is_object() || grid.empty()) throw ConfigError("sweep grid is empty");
  std::vector<std::string> keys;
  for (const auto& [k, v] : grid.items()) {
    if (!v.is_array() || v.empty()) throw ConfigError("grid entry '" + k + "' needs a non-empty list");
    keys.push_back(k);
  }
  json base = doc.at("base");
  if (sub.count("--seed")) base["seeds"] = {seed};
  const std::string out_dir = sub.count("--out") ? out : base.value("output_dir", std::string());
  if (out_dir.empty()) throw ConfigError("sweep needs --out or base.output_dir");

  // cross product in key order, last key fastest
  std::vector<std::vector<json>> points(1);
  for (const auto& k : keys) {
    std::vector<std::vector<json>> next;
    for (const auto& p : points) {
      for (const auto& v : grid.at(k)) {
        auto q = p;
        q.push_back(v);
        next.push_back(std::move(q));
      }
    }
    points = std::move(next);
  }
  std::vector<harness::ExperimentConfig> cfgs;
  const std::string name = base.value("name", std::string("sweep"));
  for (std::size_t i = 0; i < points.size(); ++i) {
    json j = base;
    for (std::size_t k = 0; k < keys.size(); ++k) set_path(j, keys[k], points[i][k]);
    j["name"] = name + "_p" + std::to_string(i);
    j["output_dir"] = (fs::path(out_dir) / ("p" + std::to_string(i))).string();
    auto cfg = harness::experiment_from_json(j);
    cfg.validate();
    cfgs.push_back(std::move(cfg));
  }
  echo("sweep", {{"base", base}, {"grid", grid}, {"out", out_dir}, {"jobs", jobs},
                 {"runs", cfgs.size() * cfgs.front().seeds.size()}});

  std::vector<harness::ExperimentResult> results(cfgs.size());
  std::vector<std::string> errors(cfgs.size());
  const std::size_t workers = std::clamp<std::size_t>(jobs, 1, cfgs.size());
  const std::size_t inner = std::max<std::size_t>(1, jobs / workers);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i = next++; i < cfgs.size(); i = next++) {
      try {
        results[i] = harness::run_experiment(cfgs[i], inner);
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < workers; ++t) pool.emplace_back(work);
  for (auto& t : pool) t.join();

  fs::create_directories(out_dir);
  std::ostringstream csv;
  csv << "point";
  for (const auto& k : keys) csv << ',' << k;
  csv << ",mean,std,n_evals,failed_seeds,steps_to_threshold\n";
  std::size_t failed = 0;
  for (std::size_t i = 0; i < cfgs.size(); ++i) {
    csv << 'p' << i;
    for (const auto& v : points[i]) csv << ',' << v.dump();
    if (!errors[i].empty()) {
      csv << ",,,0," << cfgs[i].seeds.size() << ",\n";
      std::printf("p%zu FAILED: %s\n", i, errors[i].c_str());
      failed += cfgs[i].seeds.size();
      continue;
    }
    const auto& r = results[i].report;
    failed += r.failed_seeds;
    csv << ',' << fmt(r.mean, "%.9g") << ',' << fmt(r.std, "%.9g") << ',' << r.n_evals << ','
        << r.failed_seeds << ',' << (r.steps_to_threshold ? fmt(*r.steps_to_threshold, "%.9g") : "")
        << '\n';
    std::printf("p%zu mean %.4f std %.4f failed %zu\n", i, r.mean, r.std, r.failed_seeds);
  }
  const fs::path agg = fs::path(out_dir) / "sweep.csv";
  std::ofstream(agg) << csv.str();
  std::printf("wrote %s (%zu runs, %zu failed)\n", agg.string().c_str(),
              cfgs.size() * cfgs.front().seeds.size(), failed);
  return failed > 0 ? kPropertyFailure : 0;
}

// ---------------------------------------------------------------------------

int plot_cmd(const plot::PlotSpec& spec) {
  echo("plot", {{"inputs", spec.inputs}, {"x", spec.x_column}, {"y", spec.y_column},
                {"group_by", spec.group_by}, {"smoothing", spec.smoothing},
                {"out", spec.output}, {"title", spec.title}});
  plot::write_plot(spec);
  std::printf("wrote %s\n", spec.output.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Offline RL with pre-trained actors and critics"};
  app.require_subcommand(1);

  GenDataArgs gd;
  auto* gen = app.add_subcommand("gen-data", "Generate a behavior dataset (JSON lines + manifest)");
  gen->add_option("--config", gd.config, "Experiment config supplying env and dataset fields");
  gen->add_option("--env", gd.env, "Environment name");
  gen->add_option("--episodes", gd.episodes, "Number of trajectories");
  gen->add_option("--kind", gd.kind, "Behavior kind");
  gen->add_option("--quality", gd.quality, "Behavior quality in [0, 1]");
  gen->add_option("--noise", gd.noise, "Action noise scale");
  gen->add_option("--seed", gd.seed, "Dataset seed");
  gen->add_option("--anchor-episodes", gd.anchor_episodes, "Episodes per score anchor");
  gen->add_option("--out", gd.out, "Output .jsonl path")->required();

  std::string visit = "every";
  double lr = 1.0;
  auto* t1 = app.add_subcommand("table1", "Tabular Q-learning grid for zero and MC initialization");
  t1->add_option("--visit-mode", visit, "every or first");
  t1->add_option("--lr", lr, "Q-learning step size");

  FqiArgs fa;
  auto* fqi = app.add_subcommand("fqi-study", "Fitted Q-iteration initialization sweep");
  fqi->add_option("--states", fa.states);
  fqi->add_option("--actions", fa.actions);
  fqi->add_option("--seeds", fa.seeds, "Number of random MDPs");
  fqi->add_option("--seed", fa.seed, "First MDP seed");
  fqi->add_option("--betas", fa.betas)->delimiter(',');
  fqi->add_option("--delta", fa.delta);
  fqi->add_option("--gamma", fa.gamma);
  fqi->add_option("--noise", fa.noise, "Half-width of per-iteration uniform noise");
  fqi->add_option("--max-iters", fa.max_iters);
  fqi->add_option("--out", fa.out, "CSV path (stdout when omitted)");

  std::string config, out;
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  auto* tr = app.add_subcommand("train", "Run an experiment config");
  tr->add_option("--config", config)->required();
  tr->add_option("--seed", seed, "Run this single seed");
  tr->add_option("--jobs", jobs);
  tr->add_option("--out", out, "Output directory");

  std::string checkpoint, env_name = "pointmass1";
  std::size_t episodes = 10, anchor_episodes = 200;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a saved actor checkpoint");
  ev->add_option("--checkpoint", checkpoint)->required();
  ev->add_option("--env", env_name);
  ev->add_option("--episodes", episodes);
  ev->add_option("--seed", seed);
  ev->add_option("--anchor-episodes", anchor_episodes);

  auto* sw = app.add_subcommand("sweep", "Grid x seeds over an experiment config");
  sw->add_option("--config", config, "{\"base\": experiment, \"grid\": {path: [values]}}")->required();
  sw->add_option("--seed", seed, "Run this single seed");
  sw->add_option("--jobs", jobs);
  sw->add_option("--out", out, "Output directory");

  plot::PlotSpec ps;
  auto* pl = app.add_subcommand("plot", "SVG mean +- std chart from metrics CSVs");
  pl->add_option("--input", ps.inputs, "CSV path or label=path (repeatable)")->required();
  pl->add_option("--x", ps.x_column);
  pl->add_option("--y", ps.y_column);
  pl->add_option("--group-by", ps.group_by);
  pl->add_option("--smoothing", ps.smoothing);
  pl->add_option("--title", ps.title);
  pl->add_option("--out", ps.output)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }

  try {
    if (*gen) return gen_data(gd, *gen);
    if (*t1) return table1(visit, lr);
    if (*fqi) return fqi_study(fa);
    if (*tr) return train(config, seed, jobs, out, *tr);
    if (*ev) return evaluate(checkpoint, env_name, episodes, seed, anchor_episodes);
    if (*sw) return sweep(config, seed, jobs, out, *sw);
    if (*pl) return plot_cmd(ps);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const json::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
