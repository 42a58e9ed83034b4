// Acceptance suite: one PASS/FAIL line per criterion.
//
//   acceptance            run all criteria
//   acceptance 3 5        run a subset
//   acceptance -v 6       also print measurements

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <unistd.h>

#include "tlgrpo/harness.hpp"

namespace fs = std::filesystem;
using namespace tlgrpo;
using Clock = std::chrono::steady_clock;

namespace {

bool verbose = false;

struct Outcome {
  bool pass = true;
  std::string detail;

  void require(bool ok, const std::string& what) {
    if (!ok && pass) {
      pass = false;
      detail = what;
    }
  }
};

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("tlgrpo-acceptance-" + std::to_string(::getpid())) / name;
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

// ---------------------------------------------------------------- 1

Outcome reward_math() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(101);
  double worst = 0.0;
  auto gap = [&](auto f, double b, double tau) {
    const double d = 1e-9 * tau;
    const double g = std::abs(f(b - d) - f(b + d));
    worst = std::max(worst, g);
    return g < 1e-6;
  };
  for (int k = 0; k < 1000; ++k) {
    const double s = rng.uniform(-1e3, 1e3);
    const double tl = rng.uniform(1e-3, 1e2);
    const double tu = rng.uniform(1e-3, 1e2);
    const double width = rng.uniform(0.0, 1e2);
    const double u = s + width;
    auto lower = [&](double v) { return score::score_lower(v, s, tl); };
    auto upper = [&](double v) { return score::score_upper(v, s, tu); };
    auto range = [&](double v) { return score::score_range(v, s, u, tl, tu); };
    o.require(gap(lower, s - tl, tl) && gap(lower, s, tl), "score_lower discontinuous");
    o.require(gap(upper, s, tu) && gap(upper, s + tu, tu), "score_upper discontinuous");
    o.require(gap(range, s - tl, tl) && gap(range, s, tl) && gap(range, u, tu) && gap(range, u + tu, tu),
              "score_range discontinuous");

    // Boundedness and monotonicity over a sorted sweep.
    std::vector<double> vs(64);
    for (auto& v : vs) v = rng.uniform(s - 3 * tl - 10, u + 3 * tu + 10);
    std::sort(vs.begin(), vs.end());
    double prev_l = -1.0, prev_u = 2.0;
    for (double v : vs) {
      const double l = lower(v), up = upper(v), r = range(v);
      o.require(l >= 0 && l <= 1 && up >= 0 && up <= 1 && r >= 0 && r <= 1, "score out of [0,1]");
      o.require(l >= prev_l, "score_lower not nondecreasing");
      o.require(up <= prev_u, "score_upper not nonincreasing");
      prev_l = l;
      prev_u = up;
    }
  }
  // Aggregation properties.
  for (int k = 0; k < 1000; ++k) {
    const int m = 2 + static_cast<int>(rng.below(7));
    std::vector<double> p(static_cast<std::size_t>(m));
    for (auto& x : p) x = rng.uniform() < 0.1 ? 0.0 : rng.uniform();
    const double P = score::geometric_mean(p);
    const bool any_zero = std::find(p.begin(), p.end(), 0.0) != p.end();
    o.require(P <= *std::max_element(p.begin(), p.end()) + 1e-15, "P exceeds max p_j");
    o.require((P == 0.0) == any_zero, "P = 0 iff some p_j = 0 violated");
    o.require(score::final_reward(P, -1.0, score::RewardMode::Eval) == P, "eval reward differs from P");
    for (double f : {0.0, -0.5, -1.0}) {
      const double r = score::final_reward(P, f, score::RewardMode::Train);
      o.require(r >= 0.0 && r <= 1.0, "train reward out of [0,1]");
    }
  }
  const double secs = seconds_since(t0);
  o.require(secs < 5.0, "runtime " + std::to_string(secs) + " s");
  if (verbose) std::cout << "    worst breakpoint gap " << worst << ", " << secs << " s\n";
  return o;
}

// ---------------------------------------------------------------- 2

Outcome advantages() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(202);
  double worst_mean = 0.0, worst_std = 0.0;
  for (int k = 0; k < 10000; ++k) {
    const std::size_t g = 2 + rng.below(15);
    std::vector<double> r(g);
    const double scale = std::pow(10.0, rng.uniform(-3.0, 1.0));
    for (auto& x : r) x = scale * rng.uniform();
    const auto a = rl::group_advantages(r);
    double mean = 0.0;
    for (double x : a) mean += x;
    mean /= static_cast<double>(g);
    double var = 0.0;
    for (double x : a) var += (x - mean) * (x - mean);
    const double sd = std::sqrt(var / static_cast<double>(g));
    worst_mean = std::max(worst_mean, std::abs(mean));
    worst_std = std::max(worst_std, std::abs(sd - 1.0));

    std::vector<double> flat(g, rng.uniform());
    const auto z = rl::group_advantages(flat);
    o.require(std::all_of(z.begin(), z.end(), [](double x) { return x == 0.0; }), "constant group not all zero");
  }
  o.require(worst_mean < 1e-9, "|mean| = " + std::to_string(worst_mean));
  o.require(worst_std < 1e-9, "|popstd - 1| = " + std::to_string(worst_std));
  const double secs = seconds_since(t0);
  o.require(secs < 5.0, "runtime " + std::to_string(secs) + " s");
  if (verbose) std::cout << "    worst |mean| " << worst_mean << ", worst |sd-1| " << worst_std << ", " << secs << " s\n";
  return o;
}

// ---------------------------------------------------------------- 3

Outcome gradient_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(303);
  double worst = 0.0;
  for (int k = 0; k < 100; ++k) {
    const std::size_t d = 2 + rng.below(9);
    const auto task = env::build_task(derive_seed(303, {static_cast<std::uint64_t>(k)}), d, 3 + rng.below(3));
    const auto q = env::synthesize_queries(task, 1, static_cast<std::uint64_t>(k), 0.1).front();
    policy::PolicyParameters w;
    for (auto& x : w.weights) x = rng.normal() * 0.5;
    // A short random history so every feature slot is exercised.
    policy::History h{rl::initial_entry(q, task, score::RewardMode::Train, env::local_simulator())};
    const int turns = static_cast<int>(rng.below(4));
    for (int t = 0; t < turns; ++t) {
      std::vector<int> ch(d);
      for (auto& c : ch) c = static_cast<int>(rng.below(policy::kNumChoices));
      auto p = policy::realize(ch, h.back().params, task);
      auto res = env::step(q, task, p, t, score::RewardMode::Train);
      h.push_back({p, res.observation, res.reward, ch});
    }
    const auto feats = policy::featurize(h, q, task);
    const double temp = rng.uniform(0.5, 2.0);
    std::vector<int> choices(d);
    for (auto& c : choices) c = static_cast<int>(rng.below(policy::kNumChoices));
    const auto g = policy::grad_log_prob(w, feats, choices, temp);
    // Relative error of the whole gradient: max_i |g_i - fd_i| / max_i |g_i|.
    // Per-component ratios on entries near 1e-6 only measure the round-off of
    // the difference quotient itself.
    double diff = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < w.weights.size(); ++i) {
      policy::PolicyParameters plus = w, minus = w;
      plus.weights[i] += 1e-5;
      minus.weights[i] -= 1e-5;
      const double fd = (policy::log_prob(plus, feats, choices, temp) - policy::log_prob(minus, feats, choices, temp)) / 2e-5;
      diff = std::max(diff, std::abs(g[i] - fd));
      scale = std::max({scale, std::abs(g[i]), std::abs(fd)});
    }
    worst = std::max(worst, diff / std::max(scale, 1e-12));
  }
  o.require(worst < 1e-5, "max relative error " + std::to_string(worst));
  const double secs = seconds_since(t0);
  o.require(secs < 10.0, "runtime " + std::to_string(secs) + " s");
  if (verbose) std::cout << "    max relative error " << worst << ", " << secs << " s\n";
  return o;
}

// ---------------------------------------------------------------- 4

Outcome budget() {
  Outcome o;
  const auto task = env::build_task(404, 6, 4, "audit");
  const auto queries = env::synthesize_queries(task, 10, 404, 0.1);
  const std::vector<env::TaskDefinition> tasks{task};
  const std::pair<rl::Algorithm, std::uint64_t> cases[] = {
      {rl::Algorithm::TLGRPO, 45}, {rl::Algorithm::TrajGRPO, 40}, {rl::Algorithm::SingleTurnGRPO, 8}};
  for (const auto& [algo, expected] : cases) {
    rl::TrainConfig cfg;
    cfg.algorithm = algo;
    cfg.batch_queries = 10;
    cfg.group_size = 8;
    cfg.max_turns = 5;
    cfg.iterations = 1;
    cfg.seed = 4;
    const auto result = rl::train(cfg, tasks, queries);
    const auto audit = rl::budget_audit(result.budget, cfg);
    o.require(result.budget.size() == 10, rl::to_string(algo) + ": expected 10 audited queries");
    o.require(audit.passed(), rl::to_string(algo) + ": audit failed");
    for (const auto& b : result.budget) {
      o.require(b.total_samples() == expected && b.total_simulations() == expected,
                rl::to_string(algo) + ": " + std::to_string(b.total_samples()) + " samples / " +
                    std::to_string(b.total_simulations()) + " simulations, expected " + std::to_string(expected));
      if (algo == rl::Algorithm::TLGRPO)
        o.require(b.seed.samples == 5 && b.seed.simulations == 5 && b.group.samples == 40 && b.group.simulations == 40,
                  "tl-grpo phase split is not 5 + 40");
    }
    if (verbose) std::cout << audit.table();
  }
  return o;
}

// ---------------------------------------------------------------- 5 and 7

struct LocalCluster {
  std::unique_ptr<simnet::Master> master;
  std::vector<std::unique_ptr<simnet::Worker>> workers;

  LocalCluster(const std::vector<env::TaskDefinition>& tasks, int n, simnet::SchedulerConfig sched = {},
               simnet::WorkerConfig base = {}) {
    master = simnet::master_serve({"127.0.0.1", 0}, sched);
    for (int i = 0; i < n; ++i) {
      auto wc = base;
      wc.worker_id = "w" + std::to_string(i);
      workers.push_back(simnet::worker_serve({"127.0.0.1", master->port()}, tasks, wc));
    }
    wait_for_workers(static_cast<std::size_t>(n));
  }

  void wait_for_workers(std::size_t n) const {
    const auto deadline = Clock::now() + std::chrono::seconds(10);
    while (Clock::now() < deadline) {
      const auto s = master->status();
      const auto alive = std::count_if(s.workers.begin(), s.workers.end(),
                                       [](const auto& w) { return w.state != simnet::WorkerState::Dead; });
      if (static_cast<std::size_t>(alive) >= n) return;
      std::this_thread::sleep_for(std::chrono::milliseconds(5));
    }
    throw std::runtime_error("workers did not register");
  }

  ~LocalCluster() {
    for (auto& w : workers) w->stop();
    master->stop();
  }
};

struct PipelineRun {
  std::string train_hash;
  std::string checkpoint_hash;
  std::string eval_hash;
  std::string report_hash;
  fs::path eval_log;
  fs::path eval_report;
  harness::RunConfig config;
};

harness::RunConfig pipeline_config(const fs::path& root) {
  harness::RunConfig c;
  c.seed = 55;
  c.env.train_queries = 200;
  c.env.eval_queries_per_task = 13;  // 104 in-domain queries, first 100 evaluated
  c.train.iterations = 50;
  c.eval.max_queries = 100;
  c.paths.data_dir = (root / "data").string();
  c.paths.run_dir = (root / "run").string();
  return c;
}

PipelineRun full_pipeline(const fs::path& root) {
  PipelineRun r;
  r.config = pipeline_config(root);
  harness::cmd_synth(r.config);
  const auto trained = harness::cmd_train(r.config);
  r.train_hash = trained.log_hash;
  r.checkpoint_hash = io::file_hash(trained.checkpoint_path);
  const auto ev = harness::cmd_eval(r.config, trained.checkpoint_path);
  r.eval_hash = ev.log_hash;
  r.report_hash = io::file_hash(ev.report_path);
  r.eval_log = ev.log_path;
  r.eval_report = ev.report_path;
  return r;
}

PipelineRun first_pipeline;

Outcome determinism() {
  Outcome o;
  const auto a = full_pipeline(scratch("pipeline-a"));
  const auto b = full_pipeline(scratch("pipeline-b"));
  first_pipeline = a;
  o.require(a.train_hash == b.train_hash, "train log hashes differ");
  o.require(a.checkpoint_hash == b.checkpoint_hash, "checkpoint hashes differ");
  o.require(a.eval_hash == b.eval_hash, "eval log hashes differ");
  o.require(a.report_hash == b.report_hash, "eval report hashes differ");

  // Same evaluation through the master-worker service, four lanes in flight.
  auto remote = a.config;
  remote.paths.run_dir = scratch("pipeline-remote").string();
  const auto tasks = io::read_tasks(fs::path(a.config.paths.data_dir) / "tasks.json");
  LocalCluster cluster(tasks, 4);
  remote.execution.simulator = "remote";
  remote.execution.master = "127.0.0.1:" + std::to_string(cluster.master->port());
  remote.execution.lanes = 4;
  const auto ev = harness::cmd_eval(remote, fs::path(a.config.paths.run_dir) / "checkpoint-final.json");
  o.require(io::read_text(ev.report_path) == io::read_text(a.eval_report), "remote eval report differs from local");
  o.require(ev.log_hash == a.eval_hash, "remote eval log differs from local");
  if (verbose)
    std::cout << "    train " << a.train_hash << "  eval " << a.eval_hash << "  report " << a.report_hash << "\n";
  return o;
}

Outcome turn_analysis() {
  Outcome o;
  if (first_pipeline.eval_log.empty()) first_pipeline = full_pipeline(scratch("pipeline-a"));
  auto c = first_pipeline.config;
  const auto tasks = io::read_tasks(fs::path(c.paths.data_dir) / "tasks.json");
  const auto queries = io::read_queries(fs::path(c.paths.data_dir) / "eval_in_domain.jsonl");

  std::vector<fs::path> logs{first_pipeline.eval_log};
  std::vector<fs::path> reports{first_pipeline.eval_report};
  for (const auto& [method, protocol] : std::vector<std::pair<std::string, std::string>>{
           {"policy", "st-iter"}, {"bo", "multi-turn"}, {"random", "multi-turn"}}) {
    c.eval.method = method;
    c.eval.protocol = protocol;
    c.eval.max_queries = 40;
    const auto ev = harness::cmd_eval(
        c, method == "policy" ? fs::path(c.paths.run_dir) / "checkpoint-final.json" : fs::path());
    logs.push_back(ev.log_path);
    reports.push_back(ev.report_path);
  }

  std::size_t checked = 0;
  for (std::size_t k = 0; k < logs.size(); ++k) {
    const auto v = harness::verify_log(logs[k], reports[k]);
    o.require(v.ok(), logs[k].filename().string() + ": " + (v.failures.empty() ? "" : v.failures.front()));
    const auto log = harness::load_eval_log(logs[k], true);
    for (std::size_t i = 0; i < log.traces.size(); ++i) {
      const auto& tr = log.traces[i];
      ++checked;
      o.require(log.logged_best[i] == *std::max_element(tr.rewards.begin(), tr.rewards.end()),
                tr.query_id + ": reported score is not the max turn reward");
      double running = -1.0, prev = -1.0;
      for (double r : tr.rewards) {
        running = std::max(running, r);
        o.require(running >= prev, tr.query_id + ": history-best decreases");
        prev = running;
      }
      const auto& q = *std::find_if(queries.begin(), queries.end(), [&](const auto& x) { return x.query_id == tr.query_id; });
      const double initial = env::observe_initial(q, env::find_task(tasks, q.task_id), score::RewardMode::Eval).reward;
      o.require(tr.rewards.front() == initial, tr.query_id + ": turn-0 reward is not the initial-point reward");
    }
    const auto report = harness::EvalReport::from_json(io::Json::parse(io::read_text(reports[k])));
    for (std::size_t t = 1; t < report.turn_history_best.size(); ++t)
      o.require(report.turn_history_best[t] >= report.turn_history_best[t - 1], "aggregate history-best decreases");
  }
  const auto table = harness::cmd_report(logs);
  o.require(table.skipped_lines == 0, "report skipped log lines");
  if (verbose) std::cout << "    " << checked << " trajectories checked\n" << table.text;
  return o;
}

// ---------------------------------------------------------------- 6

struct LearningFixture {
  std::vector<env::TaskDefinition> tasks;
  std::vector<env::QueryInstance> train;
  std::vector<env::QueryInstance> eval;
};

LearningFixture learning_fixture() {
  LearningFixture f;
  const std::size_t dims[] = {4, 6, 8, 10};
  for (std::size_t k = 0; k < 4; ++k) {
    auto t = env::build_task(derive_seed(6006, {k}), dims[k], 4, "fixture-" + std::to_string(dims[k]));
    auto tq = env::synthesize_queries(t, 256, 61, 0.1);
    auto eq = env::synthesize_queries(t, 50, 62, 0.1);
    for (auto& q : eq) q.query_id += "-eval";
    f.train.insert(f.train.end(), tq.begin(), tq.end());
    f.eval.insert(f.eval.end(), eq.begin(), eq.end());
    f.tasks.push_back(std::move(t));
  }
  return f;
}

double eval_score(const LearningFixture& f, const policy::PolicyParameters& w, std::uint64_t seed,
                  policy::Protocol protocol) {
  harness::RunConfig c;
  c.seed = seed;
  const auto traces = harness::run_eval(c, f.tasks, f.eval, w, harness::Method::Policy, protocol, env::local_simulator());
  return harness::summarize(traces, "policy", harness::to_string(protocol), "fixture", c.train.max_turns).overall_mean;
}

Outcome learning_ordering() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto f = learning_fixture();
  std::vector<double> untrained, tl, traj, single;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    auto run = [&](rl::Algorithm algo) {
      rl::TrainConfig cfg;
      cfg.algorithm = algo;
      cfg.batch_queries = 32;
      cfg.group_size = 8;
      cfg.max_turns = 5;
      cfg.iterations = 300;
      cfg.seed = seed;
      return rl::train(cfg, f.tasks, f.train).policy;
    };
    untrained.push_back(eval_score(f, {}, seed, policy::Protocol::MultiTurn));
    tl.push_back(eval_score(f, run(rl::Algorithm::TLGRPO), seed, policy::Protocol::MultiTurn));
    traj.push_back(eval_score(f, run(rl::Algorithm::TrajGRPO), seed, policy::Protocol::MultiTurn));
    const auto st = run(rl::Algorithm::SingleTurnGRPO);
    single.push_back(std::max(eval_score(f, st, seed, policy::Protocol::MultiTurn),
                              eval_score(f, st, seed, policy::Protocol::SingleTurnIterative)));
    if (verbose)
      std::cout << "    seed " << seed << ": untrained " << untrained.back() << "  tl-grpo " << tl.back()
                << "  traj-grpo " << traj.back() << "  single-turn " << single.back() << "  (" << seconds_since(t0)
                << " s)\n";
  }
  const double mu = median(untrained), mtl = median(tl), mtr = median(traj), mst = median(single);
  std::ostringstream medians;
  medians << "medians: untrained " << mu << ", tl-grpo " << mtl << ", traj-grpo " << mtr << ", single-turn " << mst;
  o.require(mtl >= mu + 0.15, "tl-grpo below untrained + 0.15; " + medians.str());
  o.require(mtl >= mtr - 0.02, "tl-grpo below traj-grpo - 0.02; " + medians.str());
  o.require(mtl >= mst - 0.02, "tl-grpo below single-turn - 0.02; " + medians.str());
  const double secs = seconds_since(t0);
  o.require(secs < 900.0, "runtime " + std::to_string(secs) + " s");
  if (verbose) std::cout << "    " << medians.str() << ", " << secs << " s\n";
  return o;
}

// ---------------------------------------------------------------- 8

Outcome bo_sanity() {
  Outcome o;
  const auto t0 = Clock::now();
  const auto task = env::single_bowl_task();
  const auto queries = env::synthesize_queries(task, 20, 808, 0.0);
  std::vector<double> bo_best, rnd_best;
  for (std::size_t s = 0; s < 20; ++s) {
    bo::AcquisitionConfig ac;
    ac.seed = s;
    const auto a = bo::run_bo(queries[s], task, 5, ac);
    const auto again = bo::run_bo(queries[s], task, 5, ac);
    o.require(a.best_reward == again.best_reward && a.history.size() == again.history.size(), "BO not deterministic");
    for (std::size_t k = 0; k < a.history.size() && k < again.history.size(); ++k)
      o.require(a.history[k].params == again.history[k].params, "BO proposals not deterministic");
    bo_best.push_back(a.best_reward);
    rnd_best.push_back(bo::run_random(queries[s], task, 5, s).best_reward);
  }
  const double mb = median(bo_best), mr = median(rnd_best);
  o.require(mb >= mr, "BO median " + std::to_string(mb) + " < random median " + std::to_string(mr));
  const double secs = seconds_since(t0);
  o.require(secs < 30.0, "runtime " + std::to_string(secs) + " s");
  if (verbose) std::cout << "    median best: bo " << mb << ", random " << mr << ", " << secs << " s\n";
  return o;
}

// ---------------------------------------------------------------- 9

Outcome simnet_faults() {
  Outcome o;
  const auto t0 = Clock::now();
  std::vector<env::TaskDefinition> tasks{env::build_task(909, 6, 4, "net-a"), env::build_task(910, 8, 4, "net-b")};
  auto designs = [&](std::size_t n, std::uint64_t seed) {
    std::vector<std::pair<const env::TaskDefinition*, std::vector<double>>> out;
    Rng rng(seed);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& t = tasks[i % tasks.size()];
      std::vector<double> p(t.dim());
      for (std::size_t k = 0; k < p.size(); ++k) p[k] = rng.uniform(t.lower[k], t.upper[k]);
      out.emplace_back(&t, std::move(p));
    }
    return out;
  };
  auto submit_all = [&](simnet::Client& client, const auto& jobs, std::vector<std::string>& errors) {
    std::vector<score::MetricVector> results(jobs.size());
    std::vector<std::thread> threads;
    std::mutex mu;
    for (std::size_t i = 0; i < jobs.size(); ++i)
      threads.emplace_back([&, i] {
        try {
          results[i] = client.submit(jobs[i].first->task_id, jobs[i].second);
        } catch (const std::exception& e) {
          std::lock_guard lock(mu);
          errors.push_back(e.what());
        }
      });
    for (auto& t : threads) t.join();
    return results;
  };
  auto identical = [](const score::MetricVector& a, const score::MetricVector& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t k = 0; k < a.size(); ++k)
      if (a.entries()[k].name != b.entries()[k].name ||
          std::memcmp(&a.entries()[k].value, &b.entries()[k].value, sizeof(double)) != 0)
        return false;
    return true;
  };

  {
    // 64 concurrent jobs over 4 workers, checked bit for bit.
    LocalCluster cluster(tasks, 4);
    simnet::Client client({"127.0.0.1", cluster.master->port()});
    const auto jobs = designs(64, 1);
    std::vector<std::string> errors;
    const auto results = submit_all(client, jobs, errors);
    o.require(errors.empty(), "concurrent jobs failed: " + (errors.empty() ? "" : errors.front()));
    for (std::size_t i = 0; i < jobs.size() && errors.empty(); ++i)
      o.require(identical(results[i], env::simulate(*jobs[i].first, jobs[i].second)), "remote result differs from local");
    o.require(cluster.master->status().double_assignments == 0, "a job was assigned twice");
    if (verbose) std::cout << "    64 jobs done in " << seconds_since(t0) << " s\n";
  }
  {
    // Kill a worker while it holds a job; the job must be retried elsewhere.
    simnet::SchedulerConfig sched;
    sched.retry_limit = 2;
    simnet::WorkerConfig slow;
    slow.job_delay = simnet::Millis(150);
    LocalCluster cluster(tasks, 4, sched, slow);
    simnet::Client client({"127.0.0.1", cluster.master->port()});
    const auto jobs = designs(16, 2);
    std::vector<std::string> errors;
    std::thread killer([&] {
      std::this_thread::sleep_for(std::chrono::milliseconds(60));
      cluster.workers[1]->kill();
    });
    const auto results = submit_all(client, jobs, errors);
    killer.join();
    o.require(errors.empty(), "jobs lost after a worker died: " + (errors.empty() ? "" : errors.front()));
    for (std::size_t i = 0; i < jobs.size() && errors.empty(); ++i)
      o.require(identical(results[i], env::simulate(*jobs[i].first, jobs[i].second)), "retried result differs");
    const auto st = cluster.master->status();
    o.require(st.requeues >= 1, "killed worker held no job; nothing was retried");
    o.require(st.jobs_done == jobs.size() && st.jobs_failed == 0, "job accounting mismatch");
    if (verbose) std::cout << "    kill test: " << st.requeues << " requeue(s), " << seconds_since(t0) << " s\n";
  }
  {
    // A hung worker stops heartbeating and must be declared dead in time.
    LocalCluster cluster(tasks, 2);
    const auto frozen_at = Clock::now();
    cluster.workers[0]->freeze();
    double detected = -1.0;
    while (seconds_since(frozen_at) < 25.0) {
      const auto st = cluster.master->status();
      const auto it = std::find_if(st.workers.begin(), st.workers.end(), [](const auto& w) { return w.worker_id == "w0"; });
      if (it != st.workers.end() && it->state == simnet::WorkerState::Dead) {
        detected = seconds_since(frozen_at);
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(50));
    }
    o.require(detected >= 0.0 && detected <= 20.0, "hung worker not marked dead within 20 s");
    // Work still flows through the surviving worker.
    simnet::Client client({"127.0.0.1", cluster.master->port()});
    const auto& t = tasks[0];
    o.require(identical(client.submit(t.task_id, t.feasible_point), env::simulate(t, t.feasible_point)),
              "surviving worker result differs");
    if (verbose) std::cout << "    hung worker marked dead after " << detected << " s\n";
  }
  const double secs = seconds_since(t0);
  o.require(secs < 60.0, "runtime " + std::to_string(secs) + " s");
  return o;
}

}  // namespace

int main(int argc, char** argv) {
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"reward math: continuity, boundedness, monotonicity", reward_math},
      {"advantage normalization", advantages},
      {"gradient oracle vs central differences", gradient_oracle},
      {"budget audit 45 / 40 / 8", budget},
      {"determinism: repeated runs and local vs remote", determinism},
      {"learning ordering on the fixture suite", learning_ordering},
      {"trajectory value and turn analysis", turn_analysis},
      {"BO sanity on the single-bowl task", bo_sanity},
      {"simnet fault suite", simnet_faults},
  };
  std::set<int> selected;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "-v") verbose = true;
    else selected.insert(std::stoi(a));
  }
  int failures = 0;
  for (std::size_t k = 0; k < criteria.size(); ++k) {
    const int id = static_cast<int>(k) + 1;
    if (!selected.empty() && !selected.count(id)) continue;
    const auto t0 = Clock::now();
    Outcome out;
    try {
      out = criteria[k].second();
    } catch (const std::exception& e) {
      out.pass = false;
      out.detail = std::string("exception: ") + e.what();
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.1f s", seconds_since(t0));
    std::cout << (out.pass ? "PASS" : "FAIL") << "  criterion " << id << ": " << criteria[k].first << " (" << buf
              << ")" << (out.detail.empty() ? "" : "  -- " + out.detail) << std::endl;
    failures += out.pass ? 0 : 1;
  }
  std::error_code ec;
  fs::remove_all(fs::temp_directory_path() / ("tlgrpo-acceptance-" + std::to_string(::getpid())), ec);
  return failures == 0 ? 0 : 1;
}
