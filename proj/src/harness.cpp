#include "tlgrpo/harness.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <map>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace tlgrpo::harness {

namespace fs = std::filesystem;
using io::Json;

// ---------------------------------------------------------------- config

namespace {

/// Reads fields out of one JSON object and rejects keys nobody asked for.
class Section {
 public:
  Section(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_ + ": expected an object");
  }

  template <class T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->get<T>();
    } catch (const Json::exception&) {
      throw ConfigError(path_ + "." + key + ": wrong type " + it->dump());
    }
  }

  template <class T>
  void get(const char* key, std::optional<T>& out) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end() || it->is_null()) return;
    T v{};
    get(key, v);
    out = v;
  }

  std::optional<Section> sub(const char* key) {
    seen_.insert(key);
    const auto it = j_.find(key);
    if (it == j_.end()) return std::nullopt;
    return Section(*it, path_ + "." + key);
  }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) throw ConfigError(path_ + ": unknown key '" + it.key() + "'");
  }

 private:
  const Json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

std::string ratio_level_name(rl::RatioLevel r) { return r == rl::RatioLevel::Action ? "action" : "component"; }

rl::RatioLevel ratio_level_from(const std::string& s) {
  if (s == "action") return rl::RatioLevel::Action;
  if (s == "component") return rl::RatioLevel::Component;
  throw ConfigError("train.ratio_level: expected 'action' or 'component', got '" + s + "'");
}

}  // namespace

void RunConfig::validate() const {
  try {
    train.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("train: ") + e.what());
  }
  if (env.train_tasks < 1) throw ConfigError("env.train_tasks must be >= 1");
  if (env.ood_tasks < 0) throw ConfigError("env.ood_tasks must be >= 0");
  if (env.dims.empty()) throw ConfigError("env.dims must not be empty");
  for (int d : env.dims)
    if (d < 2 || d > 40) throw ConfigError("env.dims entries must be in [2, 40]");
  if (env.num_objectives < 2 || env.num_objectives > static_cast<int>(policy::kMaxObjectiveSlots))
    throw ConfigError("env.num_objectives must be in [2, " + std::to_string(policy::kMaxObjectiveSlots) + "]");
  if (!(env.offset_scale >= 0.0 && env.offset_scale < 1.0)) throw ConfigError("env.offset_scale must be in [0, 1)");
  if (env.train_queries < 1) throw ConfigError("env.train_queries must be >= 1");
  if (env.eval_queries_per_task < 1) throw ConfigError("env.eval_queries_per_task must be >= 1");
  if (!(env.spread > 0.0)) throw ConfigError("env.spread must be positive");
  if (!(env.max_margin >= 0.0 && env.max_margin < 0.5)) throw ConfigError("env.max_margin must be in [0, 0.5)");
  if (!env.train_task_ids.empty() && static_cast<int>(env.train_task_ids.size()) != env.train_tasks)
    throw ConfigError("env.train_task_ids must list exactly env.train_tasks ids");
  if (!env.ood_task_ids.empty() && static_cast<int>(env.ood_task_ids.size()) != env.ood_tasks)
    throw ConfigError("env.ood_task_ids must list exactly env.ood_tasks ids");
  std::set<std::string> ids;
  for (const auto& id : env.train_task_ids)
    if (!ids.insert(id).second) throw ConfigError("env.train_task_ids repeats '" + id + "'");
  for (const auto& id : env.ood_task_ids)
    if (!ids.insert(id).second) throw ConfigError("task id '" + id + "' appears in both train and eval task lists");
  if (execution.simulator != "local" && execution.simulator != "remote")
    throw ConfigError("execution.simulator must be 'local' or 'remote'");
  if (execution.simulator == "remote") {
    try {
      simnet::parse_endpoint(execution.master);
    } catch (const std::exception& e) {
      throw ConfigError(std::string("execution.master: ") + e.what());
    }
  }
  if (execution.lanes < 1) throw ConfigError("execution.lanes must be >= 1");
  if (execution.request_timeout_ms < 1) throw ConfigError("execution.request_timeout_ms must be >= 1");
  try {
    method_from_string(eval.method);
    protocol_from_string(eval.protocol);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (eval.split != "in-domain" && eval.split != "ood") throw ConfigError("eval.split must be 'in-domain' or 'ood'");
  if (eval.max_queries < 0) throw ConfigError("eval.max_queries must be >= 0");
  if (eval.bo_candidate_pool < 1) throw ConfigError("eval.bo_candidate_pool must be >= 1");
  if (paths.data_dir.empty() || paths.run_dir.empty()) throw ConfigError("paths must not be empty");
}

RunConfig config_from_json(const std::string& text, const std::string& source) {
  Json j;
  try {
    j = Json::parse(text);
  } catch (const Json::parse_error& e) {
    const auto upto = text.substr(0, std::min<std::size_t>(e.byte, text.size()));
    const auto line = 1 + std::count(upto.begin(), upto.end(), '\n');
    throw ConfigError(source + ":" + std::to_string(line) + ": malformed JSON");
  }
  RunConfig c;
  Section root(j, "config");
  root.get("seed", c.seed);
  if (auto s = root.sub("train")) {
    std::string algorithm = rl::to_string(c.train.algorithm);
    std::string ratio = ratio_level_name(c.train.ratio_level);
    s->get("algorithm", algorithm);
    s->get("batch_queries", c.train.batch_queries);
    s->get("group_size", c.train.group_size);
    s->get("max_turns", c.train.max_turns);
    s->get("eps_low", c.train.eps_low);
    s->get("eps_high", c.train.eps_high);
    s->get("beta_kl", c.train.beta_kl);
    s->get("temperature", c.train.temperature);
    s->get("top_p", c.train.top_p);
    s->get("learning_rate", c.train.learning_rate);
    s->get("epochs", c.train.epochs);
    s->get("iterations", c.train.iterations);
    s->get("ratio_level", ratio);
    s->get("checkpoint_every", c.train.checkpoint_every);
    s->finish();
    try {
      c.train.algorithm = rl::algorithm_from_string(algorithm);
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("train.algorithm: ") + e.what());
    }
    c.train.ratio_level = ratio_level_from(ratio);
  }
  if (auto s = root.sub("env")) {
    s->get("train_tasks", c.env.train_tasks);
    s->get("ood_tasks", c.env.ood_tasks);
    s->get("dims", c.env.dims);
    s->get("num_objectives", c.env.num_objectives);
    s->get("offset_scale", c.env.offset_scale);
    s->get("train_queries", c.env.train_queries);
    s->get("eval_queries_per_task", c.env.eval_queries_per_task);
    s->get("spread", c.env.spread);
    s->get("max_margin", c.env.max_margin);
    s->get("train_task_ids", c.env.train_task_ids);
    s->get("ood_task_ids", c.env.ood_task_ids);
    s->finish();
  }
  if (auto s = root.sub("execution")) {
    s->get("simulator", c.execution.simulator);
    s->get("master", c.execution.master);
    s->get("lanes", c.execution.lanes);
    s->get("request_timeout_ms", c.execution.request_timeout_ms);
    s->finish();
  }
  if (auto s = root.sub("eval")) {
    s->get("method", c.eval.method);
    s->get("protocol", c.eval.protocol);
    s->get("split", c.eval.split);
    s->get("st_iter_best_so_far", c.eval.st_iter_best_so_far);
    s->get("max_queries", c.eval.max_queries);
    s->get("bo_candidate_pool", c.eval.bo_candidate_pool);
    s->get("bo_xi", c.eval.bo_xi);
    s->finish();
  }
  if (auto s = root.sub("paths")) {
    s->get("data_dir", c.paths.data_dir);
    s->get("run_dir", c.paths.run_dir);
    s->finish();
  }
  root.finish();
  c.train.seed = c.seed;
  c.train.lanes = c.execution.lanes;
  c.validate();
  return c;
}

std::string config_to_json(const RunConfig& c) {
  Json train{{"algorithm", rl::to_string(c.train.algorithm)},
             {"batch_queries", c.train.batch_queries},
             {"group_size", c.train.group_size},
             {"max_turns", c.train.max_turns},
             {"eps_low", c.train.eps_low},
             {"eps_high", c.train.eps_high},
             {"beta_kl", c.train.beta_kl},
             {"temperature", c.train.temperature},
             {"top_p", c.train.top_p},
             {"learning_rate", c.train.learning_rate},
             {"epochs", c.train.epochs},
             {"iterations", c.train.iterations ? Json(*c.train.iterations) : Json()},
             {"ratio_level", ratio_level_name(c.train.ratio_level)},
             {"checkpoint_every", c.train.checkpoint_every}};
  Json env{{"train_tasks", c.env.train_tasks},
           {"ood_tasks", c.env.ood_tasks},
           {"dims", c.env.dims},
           {"num_objectives", c.env.num_objectives},
           {"offset_scale", c.env.offset_scale},
           {"train_queries", c.env.train_queries},
           {"eval_queries_per_task", c.env.eval_queries_per_task},
           {"spread", c.env.spread},
           {"max_margin", c.env.max_margin},
           {"train_task_ids", c.env.train_task_ids},
           {"ood_task_ids", c.env.ood_task_ids}};
  Json exec{{"simulator", c.execution.simulator},
            {"master", c.execution.master},
            {"lanes", c.execution.lanes},
            {"request_timeout_ms", c.execution.request_timeout_ms}};
  Json eval{{"method", c.eval.method},
            {"protocol", c.eval.protocol},
            {"split", c.eval.split},
            {"st_iter_best_so_far", c.eval.st_iter_best_so_far},
            {"max_queries", c.eval.max_queries},
            {"bo_candidate_pool", c.eval.bo_candidate_pool},
            {"bo_xi", c.eval.bo_xi}};
  Json paths{{"data_dir", c.paths.data_dir}, {"run_dir", c.paths.run_dir}};
  return Json{{"seed", c.seed}, {"train", train}, {"env", env}, {"execution", exec}, {"eval", eval}, {"paths", paths}}
             .dump(2) +
         "\n";
}

RunConfig load_config(const fs::path& path) {
  if (!fs::exists(path)) throw ConfigError("config file not found: " + path.string());
  return config_from_json(io::read_text(path), path.string());
}

void apply_env_overrides(RunConfig& config) {
  if (const char* d = std::getenv("TLGRPO_DATA_DIR"); d && *d) config.paths.data_dir = d;
  if (const char* r = std::getenv("TLGRPO_RUN_DIR"); r && *r) config.paths.run_dir = r;
}

SimulatorHandle::SimulatorHandle(const ExecutionSettings& exec) {
  if (exec.simulator != "remote") return;
  simnet::ClientConfig cc;
  cc.timeout = simnet::Millis(exec.request_timeout_ms);
  client_ = std::make_unique<simnet::Client>(simnet::parse_endpoint(exec.master), cc);
  remote_ = std::make_unique<simnet::RemoteSimulator>(*client_);
}

SimulatorHandle::~SimulatorHandle() = default;

const env::Simulator& SimulatorHandle::get() const {
  if (remote_) return *remote_;
  return env::local_simulator();
}

// ---------------------------------------------------------------- synth

namespace {

std::string numbered(const std::string& prefix, int k) {
  std::ostringstream os;
  os << prefix << (k < 9 ? "0" : "") << k + 1;
  return os.str();
}

constexpr std::uint64_t kTaskKey = 0x7461736bULL;
constexpr std::uint64_t kOodKey = 0x6f6f64ULL;
constexpr std::uint64_t kTrainQueryKey = 0x747261696eULL;
constexpr std::uint64_t kEvalQueryKey = 0x6576616cULL;
constexpr std::uint64_t kEvalRolloutKey = 0x726f6c6cULL;

std::vector<env::QueryInstance> eval_queries(const env::TaskDefinition& task, const RunConfig& c) {
  auto qs = env::synthesize_queries(task, static_cast<std::size_t>(c.env.eval_queries_per_task),
                                    derive_seed(c.seed, {kEvalQueryKey}), c.env.offset_scale, c.train.max_turns);
  // Evaluation ids must never collide with training ids of the same task.
  for (auto& q : qs) q.query_id.replace(task.task_id.size() + 1, 1, "e");
  return qs;
}

}  // namespace

SynthOutput synthesize(const RunConfig& c) {
  c.validate();
  SynthOutput out;
  env::TaskOptions opts;
  opts.spread = c.env.spread;
  opts.max_margin = c.env.max_margin;
  const auto M = static_cast<std::size_t>(c.env.num_objectives);
  std::vector<std::size_t> dims;
  for (int k = 0; k < c.env.train_tasks; ++k) {
    const auto d = static_cast<std::size_t>(c.env.dims[static_cast<std::size_t>(k) % c.env.dims.size()]);
    dims.push_back(d);
    const std::string id = c.env.train_task_ids.empty() ? numbered("task-", k) : c.env.train_task_ids[k];
    out.tasks.push_back(env::build_task(derive_seed(c.seed, {kTaskKey, static_cast<std::uint64_t>(k)}), d, M, id, opts));
  }
  for (int k = 0; k < c.env.ood_tasks; ++k) {
    const std::string id = c.env.ood_task_ids.empty() ? numbered("ood-", k) : c.env.ood_task_ids[k];
    const auto d = dims[static_cast<std::size_t>(k) % dims.size()];
    out.tasks.push_back(env::build_task(derive_seed(c.seed, {kOodKey, static_cast<std::uint64_t>(k)}), d, M, id, opts));
  }
  std::set<std::string> ids;
  for (const auto& t : out.tasks)
    if (!ids.insert(t.task_id).second) throw ConfigError("task id '" + t.task_id + "' is used twice");

  const int n_train = c.env.train_tasks;
  for (int k = 0; k < n_train; ++k) {
    const auto& task = out.tasks[static_cast<std::size_t>(k)];
    const int share = c.env.train_queries / n_train + (k < c.env.train_queries % n_train ? 1 : 0);
    if (share == 0) continue;
    auto qs = env::synthesize_queries(task, static_cast<std::size_t>(share), derive_seed(c.seed, {kTrainQueryKey}),
                                      c.env.offset_scale, c.train.max_turns);
    out.train.insert(out.train.end(), qs.begin(), qs.end());
    auto ev = eval_queries(task, c);
    out.eval_in_domain.insert(out.eval_in_domain.end(), ev.begin(), ev.end());
  }
  for (std::size_t k = static_cast<std::size_t>(n_train); k < out.tasks.size(); ++k) {
    auto ev = eval_queries(out.tasks[k], c);
    out.eval_ood.insert(out.eval_ood.end(), ev.begin(), ev.end());
  }
  return out;
}

SynthOutput cmd_synth(const RunConfig& c) {
  auto out = synthesize(c);
  const fs::path dir = c.paths.data_dir;
  io::write_tasks(dir / "tasks.json", out.tasks);
  io::write_queries(dir / "train.jsonl", out.train, "train");
  io::write_queries(dir / "eval_in_domain.jsonl", out.eval_in_domain, "in-domain");
  io::write_queries(dir / "eval_ood.jsonl", out.eval_ood, "ood");
  return out;
}

// ---------------------------------------------------------------- logs

namespace {

Json observation_fields(Json j, const std::vector<double>& params, const env::Observation& obs, double reward) {
  j["params"] = params;
  j["valid"] = obs.valid;
  j["metrics"] = obs.metrics ? io::to_json(*obs.metrics) : Json();
  if (!obs.violation.empty()) j["violation"] = obs.violation;
  j["reward"] = reward;
  return j;
}

class JsonlWriter {
 public:
  explicit JsonlWriter(const fs::path& path) : path_(path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    out_.open(path, std::ios::binary | std::ios::trunc);
    if (!out_) throw std::runtime_error("cannot write " + path.string());
  }
  void write(const Json& j) { out_ << j.dump() << '\n'; }
  void close() {
    out_.close();
    if (!out_) throw std::runtime_error("write failed for " + path_.string());
  }

 private:
  fs::path path_;
  std::ofstream out_;
};

}  // namespace

// ---------------------------------------------------------------- train

TrainSummary cmd_train(const RunConfig& c, std::ostream* progress) {
  c.validate();
  const fs::path data = c.paths.data_dir;
  const fs::path run = c.paths.run_dir;
  const auto tasks = io::read_tasks(data / "tasks.json");
  const auto queries = io::read_queries(data / "train.jsonl");
  SimulatorHandle sim(c.execution);

  rl::TrainConfig tc = c.train;
  tc.seed = c.seed;
  tc.lanes = c.execution.lanes;

  TrainSummary summary;
  summary.log_path = run / "train_log.jsonl";
  JsonlWriter log(summary.log_path);
  log.write(io::log_header("train", {{"algorithm", rl::to_string(tc.algorithm)},
                                     {"seed", c.seed},
                                     {"queries", queries.size()},
                                     {"iterations", rl::planned_iterations(tc, queries.size())},
                                     {"group_size", tc.group_size},
                                     {"max_turns", tc.max_turns}}));

  rl::TrainHooks hooks;
  hooks.on_record = [&](const rl::LogRecord& r) {
    Json j{{"record", "turn"},    {"iteration", r.iteration}, {"phase", r.phase}, {"query_id", r.query_id},
           {"task_id", r.task_id}, {"turn", r.turn},           {"member", r.member}};
    j = observation_fields(std::move(j), *r.params, *r.observation, r.reward);
    if (r.log_prob_old) j["log_prob_old"] = *r.log_prob_old;
    if (r.advantage) j["advantage"] = *r.advantage;
    log.write(j);
  };
  std::vector<double> pending_rewards;
  hooks.on_iteration = [&](int it, const rl::UpdateStats& s) {
    log.write(Json{{"record", "iteration"},
                   {"iteration", it},
                   {"objective", s.objective},
                   {"kl", s.kl},
                   {"clip_fraction", s.clip_fraction},
                   {"gradient_norm", s.gradient_norm},
                   {"samples", s.samples}});
    if (progress && (it % 10 == 0)) *progress << "iteration " << it << ": objective " << s.objective << '\n';
  };
  hooks.on_checkpoint = [&](int it, const policy::PolicyParameters& p, const policy::OptimizerState& o) {
    io::write_checkpoint(run / ("checkpoint-" + std::to_string(it) + ".json"), {p, o, it});
  };

  summary.result = rl::train(tc, tasks, queries, sim.get(), hooks);
  summary.audit = rl::budget_audit(summary.result.budget, tc);
  log.write(Json{{"record", "audit"}, {"passed", summary.audit.passed()}, {"queries", summary.audit.queries}});
  log.close();

  summary.checkpoint_path = run / "checkpoint-final.json";
  io::write_checkpoint(summary.checkpoint_path,
                       {summary.result.policy, summary.result.optimizer, summary.result.iterations});
  io::write_text(run / "budget_audit.txt", summary.audit.table());
  summary.log_hash = io::file_hash(summary.log_path);
  if (progress) *progress << summary.audit.table();
  rl::require_audit(summary.audit);
  return summary;
}

// ---------------------------------------------------------------- eval

std::string to_string(Method m) {
  switch (m) {
    case Method::Policy: return "policy";
    case Method::BO: return "bo";
    case Method::Random: return "random";
  }
  return "?";
}

Method method_from_string(const std::string& s) {
  if (s == "policy") return Method::Policy;
  if (s == "bo") return Method::BO;
  if (s == "random") return Method::Random;
  throw std::invalid_argument("unknown eval method '" + s + "' (policy, bo, random)");
}

std::string to_string(policy::Protocol p) {
  return p == policy::Protocol::MultiTurn ? "multi-turn" : "st-iter";
}

policy::Protocol protocol_from_string(const std::string& s) {
  if (s == "multi-turn") return policy::Protocol::MultiTurn;
  if (s == "st-iter") return policy::Protocol::SingleTurnIterative;
  throw std::invalid_argument("unknown protocol '" + s + "' (multi-turn, st-iter)");
}

double QueryTrace::best() const {
  if (rewards.empty()) throw std::logic_error("empty trace");
  return *std::max_element(rewards.begin(), rewards.end());
}

std::vector<QueryTrace> run_eval(const RunConfig& c, std::span<const env::TaskDefinition> tasks,
                                 std::span<const env::QueryInstance> queries, const policy::PolicyParameters& weights,
                                 Method method, policy::Protocol protocol, const env::Simulator& simulator) {
  const int T = c.train.max_turns;
  std::vector<QueryTrace> traces(queries.size());
  rl::parallel_for(queries.size(), c.execution.lanes, [&](std::size_t i) {
    const auto& q = queries[i];
    const auto& task = env::find_task(tasks, q.task_id);
    QueryTrace& tr = traces[i];
    tr.query_id = q.query_id;
    tr.task_id = q.task_id;
    // The stream depends on the query alone, so protocols and lane counts share it.
    const std::uint64_t stream = derive_seed(c.seed, {kEvalRolloutKey, fnv1a64(q.query_id)});
    if (method == Method::Policy) {
      rl::SamplingSettings s;
      s.temperature = c.train.temperature;
      s.top_p = c.train.top_p;
      s.mode = score::RewardMode::Eval;
      s.features.protocol = protocol;
      s.features.st_iter_best_so_far = c.eval.st_iter_best_so_far;
      Rng rng(stream);
      const auto traj = rl::rollout_trajectory(weights, q, task, T, rng, s, simulator);
      tr.params.push_back(traj.initial.params);
      tr.observations.push_back(traj.initial.observation);
      tr.rewards.push_back(traj.initial.reward);
      for (const auto& t : traj.turns) {
        tr.params.push_back(t.params);
        tr.observations.push_back(t.observation);
        tr.rewards.push_back(t.reward);
      }
    } else {
      bo::SearchResult r;
      if (method == Method::BO) {
        bo::AcquisitionConfig ac;
        ac.candidate_pool = static_cast<std::size_t>(c.eval.bo_candidate_pool);
        ac.xi = c.eval.bo_xi;
        ac.seed = stream;
        r = bo::run_bo(q, task, T, ac, simulator);
      } else {
        r = bo::run_random(q, task, T, stream, simulator);
      }
      for (std::size_t k = 0; k < r.history.size(); ++k) {
        tr.params.push_back(r.history[k].params);
        tr.observations.push_back(r.observations[k]);
        tr.rewards.push_back(r.history[k].reward);
      }
    }
  });
  return traces;
}

EvalReport summarize(std::span<const QueryTrace> traces, const std::string& method, const std::string& protocol,
                     const std::string& split, int max_turns) {
  EvalReport r;
  r.method = method;
  r.protocol = protocol;
  r.split = split;
  r.max_turns = max_turns;
  r.queries = traces.size();
  std::map<std::string, std::size_t> index;
  std::vector<double> sums;
  const std::size_t turns = static_cast<std::size_t>(max_turns) + 1;
  r.turn_mean.assign(turns, 0.0);
  r.turn_history_best.assign(turns, 0.0);
  for (const auto& tr : traces) {
    if (tr.rewards.size() != turns)
      throw std::runtime_error("query " + tr.query_id + " has " + std::to_string(tr.rewards.size()) +
                               " turn rewards, expected " + std::to_string(turns));
    auto [it, fresh] = index.emplace(tr.task_id, r.per_task.size());
    if (fresh) {
      r.per_task.push_back({tr.task_id, 0, 0.0});
      sums.push_back(0.0);
    }
    ++r.per_task[it->second].queries;
    sums[it->second] += tr.best();
    double running = tr.rewards[0];
    for (std::size_t t = 0; t < turns; ++t) {
      running = std::max(running, tr.rewards[t]);
      r.turn_mean[t] += tr.rewards[t];
      r.turn_history_best[t] += running;
    }
  }
  const double n = traces.empty() ? 1.0 : static_cast<double>(traces.size());
  for (std::size_t t = 0; t < turns; ++t) {
    r.turn_mean[t] /= n;
    r.turn_history_best[t] /= n;
  }
  double total = 0.0;
  for (std::size_t k = 0; k < r.per_task.size(); ++k) {
    r.per_task[k].mean_best = sums[k] / static_cast<double>(r.per_task[k].queries);
    total += r.per_task[k].mean_best;
  }
  r.overall_mean = r.per_task.empty() ? 0.0 : total / static_cast<double>(r.per_task.size());
  return r;
}

Json EvalReport::to_json() const {
  Json tasks = Json::array();
  for (const auto& t : per_task) tasks.push_back({{"task_id", t.task_id}, {"queries", t.queries}, {"mean_best", t.mean_best}});
  return Json{{"schema", "tlgrpo-eval-report"},
              {"version", io::kFormatVersion},
              {"method", method},
              {"protocol", protocol},
              {"split", split},
              {"max_turns", max_turns},
              {"queries", queries},
              {"overall_mean", overall_mean},
              {"per_task", tasks},
              {"turn_mean", turn_mean},
              {"turn_history_best", turn_history_best}};
}

EvalReport EvalReport::from_json(const Json& j) {
  EvalReport r;
  r.method = j.at("method").get<std::string>();
  r.protocol = j.at("protocol").get<std::string>();
  r.split = j.at("split").get<std::string>();
  r.max_turns = j.at("max_turns").get<int>();
  r.queries = j.at("queries").get<std::size_t>();
  r.overall_mean = j.at("overall_mean").get<double>();
  for (const auto& t : j.at("per_task"))
    r.per_task.push_back({t.at("task_id").get<std::string>(), t.at("queries").get<std::size_t>(),
                          t.at("mean_best").get<double>()});
  r.turn_mean = j.at("turn_mean").get<std::vector<double>>();
  r.turn_history_best = j.at("turn_history_best").get<std::vector<double>>();
  return r;
}

EvalOutput cmd_eval(const RunConfig& c, const fs::path& checkpoint) {
  c.validate();
  EvalOutput out;
  const Method method = method_from_string(c.eval.method);
  const auto protocol = protocol_from_string(c.eval.protocol);
  if (method != Method::Policy && protocol != policy::Protocol::MultiTurn)
    out.warnings.push_back("method '" + c.eval.method + "' ignores the protocol setting");
  if (method != Method::Policy && !checkpoint.empty())
    out.warnings.push_back("method '" + c.eval.method + "' ignores the checkpoint");

  policy::PolicyParameters weights;
  if (method == Method::Policy && !checkpoint.empty()) weights = io::read_checkpoint(checkpoint).policy;

  const fs::path data = c.paths.data_dir;
  const auto tasks = io::read_tasks(data / "tasks.json");
  auto queries = io::read_queries(data / (c.eval.split == "ood" ? "eval_ood.jsonl" : "eval_in_domain.jsonl"));
  if (c.eval.max_queries > 0 && queries.size() > static_cast<std::size_t>(c.eval.max_queries))
    queries.resize(static_cast<std::size_t>(c.eval.max_queries));
  SimulatorHandle sim(c.execution);

  const std::string protocol_label = method == Method::Policy ? to_string(protocol) : "none";
  const auto traces = run_eval(c, tasks, queries, weights, method, protocol, sim.get());
  out.report = summarize(traces, to_string(method), protocol_label, c.eval.split, c.train.max_turns);

  const std::string stem = "eval-" + to_string(method) + "-" + protocol_label + "-" + c.eval.split;
  const fs::path run = c.paths.run_dir;
  out.log_path = run / (stem + ".jsonl");
  out.report_path = run / (stem + ".json");
  JsonlWriter log(out.log_path);
  log.write(io::log_header("eval", {{"method", out.report.method},
                                    {"protocol", out.report.protocol},
                                    {"split", out.report.split},
                                    {"seed", c.seed},
                                    {"max_turns", c.train.max_turns},
                                    {"queries", traces.size()},
                                    {"policy_version", weights.version}}));
  for (const auto& tr : traces) {
    for (std::size_t t = 0; t < tr.rewards.size(); ++t)
      log.write(observation_fields(Json{{"record", "turn"},
                                        {"phase", "eval"},
                                        {"query_id", tr.query_id},
                                        {"task_id", tr.task_id},
                                        {"turn", t}},
                                   tr.params[t], tr.observations[t], tr.rewards[t]));
    log.write(Json{{"record", "query"}, {"query_id", tr.query_id}, {"task_id", tr.task_id}, {"best", tr.best()}});
  }
  log.close();
  io::write_text(out.report_path, out.report.to_json().dump(2) + "\n");
  out.log_hash = io::file_hash(out.log_path);
  return out;
}

// ---------------------------------------------------------------- report

LoadedLog load_eval_log(const fs::path& path, bool strict) {
  const std::string source = path.string();
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + source);
  LoadedLog out;
  std::string line;
  std::size_t n = 0;
  std::map<std::string, std::size_t> open;  // query id -> trace index
  auto fail = [&](const std::string& msg) {
    if (strict) throw io::FormatError(source, n, msg);
    ++out.skipped_lines;
  };
  while (std::getline(in, line)) {
    ++n;
    Json j;
    try {
      j = Json::parse(line);
    } catch (const Json::parse_error&) {
      fail("malformed JSON");
      continue;
    }
    if (n == 1) {
      if (j.value("record", std::string()) != "header" || j.value("schema", std::string()) != "tlgrpo-log" ||
          j.value("kind", std::string()) != "eval")
        throw io::FormatError(source, 1, "not an evaluation log");
      if (j.value("version", 0) != io::kFormatVersion) throw io::FormatError(source, 1, "unsupported log version");
      out.header = j;
      continue;
    }
    try {
      const std::string record = j.at("record").get<std::string>();
      const std::string qid = j.at("query_id").get<std::string>();
      if (record == "turn") {
        auto [it, fresh] = open.emplace(qid, out.traces.size());
        if (fresh) {
          out.traces.push_back({qid, j.at("task_id").get<std::string>(), {}, {}, {}});
          out.logged_best.push_back(std::nan(""));
        }
        auto& tr = out.traces[it->second];
        if (j.at("turn").get<std::size_t>() != tr.rewards.size()) throw std::runtime_error("turn out of order");
        env::Observation obs;
        obs.turn_index = j.at("turn").get<int>();
        obs.valid = j.at("valid").get<bool>();
        if (!j.at("metrics").is_null()) obs.metrics = io::metrics_from_json(j.at("metrics"));
        obs.violation = j.value("violation", std::string());
        tr.params.push_back(j.at("params").get<std::vector<double>>());
        tr.observations.push_back(std::move(obs));
        tr.rewards.push_back(j.at("reward").get<double>());
      } else if (record == "query") {
        const auto it = open.find(qid);
        if (it == open.end()) throw std::runtime_error("summary for unknown query");
        out.logged_best[it->second] = j.at("best").get<double>();
      } else {
        throw std::runtime_error("unknown record '" + record + "'");
      }
    } catch (const io::FormatError&) {
      throw;
    } catch (const std::exception& e) {
      fail(e.what());
    }
  }
  if (out.header.is_null()) throw io::FormatError(source, 1, "empty log");
  return out;
}

VerifyResult verify_log(const fs::path& log_path, const fs::path& report_path) {
  VerifyResult v;
  const auto log = load_eval_log(log_path, true);
  const auto report = EvalReport::from_json(Json::parse(io::read_text(report_path)));
  v.queries = log.traces.size();
  for (std::size_t i = 0; i < log.traces.size(); ++i) {
    const auto& tr = log.traces[i];
    if (tr.rewards.empty()) {
      v.failures.push_back(tr.query_id + ": no turns");
      continue;
    }
    if (tr.best() != log.logged_best[i]) v.failures.push_back(tr.query_id + ": logged best is not the max turn reward");
    if (tr.observations.front().turn_index != 0) v.failures.push_back(tr.query_id + ": first record is not turn 0");
  }
  if (!v.ok()) return v;
  const auto recomputed = summarize(log.traces, log.header.value("method", std::string()),
                                    log.header.value("protocol", std::string()),
                                    log.header.value("split", std::string()), log.header.value("max_turns", 0));
  if (recomputed.to_json() != report.to_json()) {
    const auto a = recomputed.to_json();
    const auto b = report.to_json();
    for (auto it = a.begin(); it != a.end(); ++it)
      if (!b.contains(it.key()) || b[it.key()] != it.value())
        v.failures.push_back("report field '" + it.key() + "' differs from the log");
  }
  for (std::size_t t = 1; t < recomputed.turn_history_best.size(); ++t)
    if (recomputed.turn_history_best[t] < recomputed.turn_history_best[t - 1])
      v.failures.push_back("history-best decreases at turn " + std::to_string(t));
  return v;
}

std::string sparkline(std::span<const double> values) {
  static const char* const kBlocks[] = {"▁", "▂", "▃", "▄",
                                        "▅", "▆", "▇", "█"};
  std::string out;
  for (double v : values) {
    const double c = std::clamp(std::isfinite(v) ? v : 0.0, 0.0, 1.0);
    out += kBlocks[std::min<std::size_t>(7, static_cast<std::size_t>(c * 8.0))];
  }
  return out;
}

TurnReport cmd_report(const std::vector<fs::path>& logs) {
  TurnReport out;
  std::ostringstream csv;
  std::ostringstream text;
  csv << "method,protocol,split,turn,queries,mean_score,mean_history_best\n";
  for (const auto& path : logs) {
    const auto log = load_eval_log(path, false);
    out.skipped_lines += log.skipped_lines;
    // Only complete traces enter the aggregates.
    std::vector<QueryTrace> complete;
    const int T = log.header.value("max_turns", 0);
    for (const auto& tr : log.traces)
      if (tr.rewards.size() == static_cast<std::size_t>(T) + 1) complete.push_back(tr);
    const auto r = summarize(complete, log.header.value("method", std::string()),
                             log.header.value("protocol", std::string()), log.header.value("split", std::string()), T);
    for (std::size_t t = 0; t < r.turn_mean.size(); ++t)
      csv << r.method << ',' << r.protocol << ',' << r.split << ',' << t << ',' << r.queries << ','
          << io::format_double(r.turn_mean[t]) << ',' << io::format_double(r.turn_history_best[t]) << '\n';
    text << r.method << " / " << r.protocol << " / " << r.split << "  (" << r.queries << " queries)\n";
    text << "  turn-0 score     " << io::format_double(r.turn_mean.front()) << '\n';
    text << "  per-turn mean    " << sparkline(r.turn_mean) << "  ";
    for (double v : r.turn_mean) text << ' ' << std::round(v * 1000.0) / 1000.0;
    text << "\n  history-best     " << sparkline(r.turn_history_best) << "  ";
    for (double v : r.turn_history_best) text << ' ' << std::round(v * 1000.0) / 1000.0;
    text << "\n  mean best score  " << io::format_double(r.overall_mean) << '\n';
    if (log.skipped_lines) text << "  warning: skipped " << log.skipped_lines << " corrupt log line(s)\n";
  }
  out.csv = csv.str();
  out.text = text.str();
  return out;
}

score::ScoreBreakdown cmd_score(const fs::path& spec_file, const fs::path& metric_file, score::RewardMode mode) {
  const auto specs = io::parse_spec_text(io::read_text(spec_file), spec_file.string());
  const auto metrics = io::parse_metric_text(io::read_text(metric_file), metric_file.string());
  return score::score(metrics, specs, 0.0, mode);
}

}  // namespace tlgrpo::harness
