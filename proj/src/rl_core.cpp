#include "tlgrpo/rl_core.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

namespace tlgrpo::rl {

namespace {

struct Sampled {
  std::vector<int> choices;
  std::vector<double> params;
  double log_prob_old = 0.0;
  std::vector<double> component_log_prob_old;
};

Sampled sample_one(const policy::PolicyParameters& policy_old, const policy::HistoryFeatures& features,
                   std::span<const double> current, const env::TaskDefinition& task, Rng& rng,
                   const SamplingSettings& sampling) {
  const auto dist = policy::action_distribution(policy_old, features, sampling.temperature);
  auto sampled = policy::sample_choices(dist, rng, sampling.top_p);
  Sampled out;
  out.params = policy::realize(sampled.choices, current, task);
  // Importance ratios use the full softmax density, not the nucleus one.
  out.component_log_prob_old = policy::component_log_probs(policy_old, features, sampled.choices, sampling.temperature);
  out.log_prob_old = std::accumulate(out.component_log_prob_old.begin(), out.component_log_prob_old.end(), 0.0);
  out.choices = std::move(sampled.choices);
  return out;
}

Trajectory rollout_from(const policy::PolicyParameters& policy_old, const env::QueryInstance& query,
                        const env::TaskDefinition& task, int max_turns, Rng& rng, const SamplingSettings& sampling,
                        const env::Simulator& simulator, BudgetCounters* counters,
                        PhaseCount BudgetCounters::*phase, const policy::HistoryEntry& initial) {
  if (max_turns < 1) throw std::invalid_argument("rollout needs at least one turn");
  if (max_turns > query.max_turns) throw std::invalid_argument("rollout length exceeds the query's turn budget");
  Trajectory traj;
  traj.query_id = query.query_id;
  traj.initial = initial;
  policy::History history{initial};
  for (int t = 0; t < max_turns; ++t) {
    try {
      Turn turn;
      turn.features = policy::featurize(history, query, task, sampling.features);
      Sampled s = sample_one(policy_old, turn.features, history.back().params, task, rng, sampling);
      if (counters) ++(counters->*phase).samples;
      auto result = env::step(query, task, s.params, t, sampling.mode, simulator);
      if (counters && result.observation.valid) ++(counters->*phase).simulations;
      turn.choices = std::move(s.choices);
      turn.params = std::move(s.params);
      turn.log_prob_old = s.log_prob_old;
      turn.component_log_prob_old = std::move(s.component_log_prob_old);
      turn.observation = std::move(result.observation);
      turn.reward = result.reward;
      history.push_back({turn.params, turn.observation, turn.reward, turn.choices});
      traj.turns.push_back(std::move(turn));
    } catch (const std::exception& e) {
      throw RolloutError("query " + query.query_id + ", turn " + std::to_string(t) + ": " + e.what());
    }
  }
  return traj;
}

double mean_of(std::span<const double> xs) {
  if (xs.empty()) return 0.0;
  return std::accumulate(xs.begin(), xs.end(), 0.0) / static_cast<double>(xs.size());
}

}  // namespace

std::string to_string(Algorithm a) {
  switch (a) {
    case Algorithm::TLGRPO: return "tl-grpo";
    case Algorithm::TrajGRPO: return "traj-grpo";
    case Algorithm::SingleTurnGRPO: return "single-turn-grpo";
  }
  return "?";
}

Algorithm algorithm_from_string(const std::string& s) {
  if (s == "tl-grpo") return Algorithm::TLGRPO;
  if (s == "traj-grpo") return Algorithm::TrajGRPO;
  if (s == "single-turn-grpo" || s == "single-turn") return Algorithm::SingleTurnGRPO;
  throw std::invalid_argument("unknown algorithm '" + s + "'");
}

void TrainConfig::validate() const {
  if (batch_queries < 1) throw std::invalid_argument("batch_queries must be >= 1");
  if (group_size < 2) throw std::invalid_argument("group size must be >= 2");
  if (max_turns < 1) throw std::invalid_argument("max_turns must be >= 1");
  if (!(eps_low > 0.0) || !(eps_high > 0.0)) throw std::invalid_argument("clip ratios must be positive");
  if (!(beta_kl >= 0.0)) throw std::invalid_argument("beta_kl must be non-negative");
  if (!(temperature > 0.0)) throw std::invalid_argument("temperature must be positive");
  if (!(top_p > 0.0 && top_p <= 1.0)) throw std::invalid_argument("top_p must be in (0, 1]");
  if (!(learning_rate > 0.0)) throw std::invalid_argument("learning rate must be positive");
  if (epochs < 1) throw std::invalid_argument("epochs must be >= 1");
  if (iterations && *iterations < 0) throw std::invalid_argument("iterations must be >= 0");
  if (lanes < 1) throw std::invalid_argument("lanes must be >= 1");
  if (checkpoint_every < 0) throw std::invalid_argument("checkpoint_every must be >= 0");
}

policy::History Trajectory::prefix(std::size_t t) const {
  policy::History h{initial};
  for (std::size_t k = 0; k < t && k < turns.size(); ++k)
    h.push_back({turns[k].params, turns[k].observation, turns[k].reward, turns[k].choices});
  return h;
}

double Trajectory::value() const {
  if (turns.empty()) throw std::logic_error("empty trajectory has no value");
  double best = turns.front().reward;
  for (const auto& t : turns) best = std::max(best, t.reward);
  return best;
}

policy::HistoryEntry initial_entry(const env::QueryInstance& query, const env::TaskDefinition& task,
                                   score::RewardMode mode, const env::Simulator& simulator,
                                   BudgetCounters* counters) {
  auto result = env::observe_initial(query, task, mode, simulator);
  if (counters) ++counters->initial_simulations;
  return {query.initial_params, std::move(result.observation), result.reward, std::nullopt};
}

Trajectory rollout_trajectory(const policy::PolicyParameters& policy_old, const env::QueryInstance& query,
                              const env::TaskDefinition& task, int max_turns, Rng& rng,
                              const SamplingSettings& sampling, const env::Simulator& simulator,
                              BudgetCounters* counters, PhaseCount BudgetCounters::*phase) {
  const auto initial = initial_entry(query, task, sampling.mode, simulator, counters);
  return rollout_from(policy_old, query, task, max_turns, rng, sampling, simulator, counters, phase, initial);
}

std::vector<HistoryContext> split_history(const Trajectory& traj, const env::QueryInstance& query,
                                          const env::TaskDefinition& task, const policy::FeatureOptions& options) {
  if (traj.turns.empty()) throw std::invalid_argument("cannot split an empty trajectory");
  std::vector<HistoryContext> out;
  out.reserve(traj.turns.size());
  for (std::size_t t = 0; t < traj.turns.size(); ++t) {
    HistoryContext ctx;
    ctx.query_id = traj.query_id;
    ctx.turn_index = static_cast<int>(t);
    ctx.prefix = traj.prefix(t);
    ctx.features = policy::featurize(ctx.prefix, query, task, options);
    out.push_back(std::move(ctx));
  }
  return out;
}

TurnGroup sample_turn_group(const policy::PolicyParameters& policy_old, const HistoryContext& context,
                            const env::TaskDefinition& task, const env::QueryInstance& query, int group_size,
                            Rng& rng, const SamplingSettings& sampling, const env::Simulator& simulator,
                            BudgetCounters* counters) {
  if (group_size < 2) throw std::invalid_argument("group size must be >= 2");
  TurnGroup group;
  group.context = context;
  group.members.reserve(static_cast<std::size_t>(group_size));
  const auto& current = context.prefix.back().params;
  for (int i = 0; i < group_size; ++i) {
    Sampled s = sample_one(policy_old, context.features, current, task, rng, sampling);
    if (counters) ++counters->group.samples;
    auto result = env::step(query, task, s.params, context.turn_index, sampling.mode, simulator);
    if (counters && result.observation.valid) ++counters->group.simulations;
    GroupMember m;
    m.choices = std::move(s.choices);
    m.params = std::move(s.params);
    m.log_prob_old = s.log_prob_old;
    m.component_log_prob_old = std::move(s.component_log_prob_old);
    m.observation = std::move(result.observation);
    m.reward = result.reward;
    group.members.push_back(std::move(m));
  }
  std::vector<double> rewards;
  for (const auto& m : group.members) rewards.push_back(m.reward);
  const auto adv = group_advantages(rewards);
  for (std::size_t i = 0; i < adv.size(); ++i) group.members[i].advantage = adv[i];
  return group;
}

std::vector<double> group_advantages(std::span<const double> rewards) {
  if (rewards.size() < 2) throw std::invalid_argument("advantages need a group of at least two rewards");
  const double n = static_cast<double>(rewards.size());
  const double mean = std::accumulate(rewards.begin(), rewards.end(), 0.0) / n;
  double ss = 0.0;
  for (const double r : rewards) ss += (r - mean) * (r - mean);
  const double sd = std::sqrt(ss / n);
  std::vector<double> out(rewards.size(), 0.0);
  if (sd < 1e-8) return out;
  for (std::size_t i = 0; i < rewards.size(); ++i) out[i] = (rewards[i] - mean) / sd;
  return out;
}

double clipped_surrogate(double ratio, double advantage, double eps_low, double eps_high) {
  const double clipped = std::clamp(ratio, 1.0 - eps_low, 1.0 + eps_high);
  return std::min(ratio * advantage, clipped * advantage);
}

TrajectoryGroup traj_grpo_rollout_and_advantages(const policy::PolicyParameters& policy_old,
                                                 const env::QueryInstance& query, const env::TaskDefinition& task,
                                                 int group_size, int max_turns, Rng& rng,
                                                 const SamplingSettings& sampling, const env::Simulator& simulator,
                                                 BudgetCounters* counters) {
  if (group_size < 2) throw std::invalid_argument("group size must be >= 2");
  const auto initial = initial_entry(query, task, sampling.mode, simulator, counters);
  TrajectoryGroup out;
  for (int i = 0; i < group_size; ++i) {
    out.trajectories.push_back(rollout_from(policy_old, query, task, max_turns, rng, sampling, simulator, counters,
                                            &BudgetCounters::group, initial));
    out.values.push_back(out.trajectories.back().value());
  }
  out.advantages = group_advantages(out.values);
  return out;
}

TurnGroup single_turn_episodes(const policy::PolicyParameters& policy_old, const env::QueryInstance& query,
                               const env::TaskDefinition& task, int group_size, Rng& rng,
                               const SamplingSettings& sampling, const env::Simulator& simulator,
                               BudgetCounters* counters) {
  HistoryContext ctx;
  ctx.query_id = query.query_id;
  ctx.turn_index = 0;
  ctx.prefix = {initial_entry(query, task, sampling.mode, simulator, counters)};
  ctx.features = policy::featurize(ctx.prefix, query, task, sampling.features);
  return sample_turn_group(policy_old, ctx, task, query, group_size, rng, sampling, simulator, counters);
}

UpdateStats surrogate_objective(const policy::PolicyParameters& policy, std::span<const UpdateSample> batch,
                                const TrainConfig& config, const policy::PolicyParameters* reference,
                                std::vector<double>* gradient) {
  if (batch.empty()) throw std::invalid_argument("policy update needs a non-empty batch");
  UpdateStats stats;
  stats.samples = batch.size();
  const double inv_n = 1.0 / static_cast<double>(batch.size());
  if (gradient) gradient->assign(policy.weights.size(), 0.0);
  const bool use_kl = config.beta_kl > 0.0 && reference != nullptr;
  std::size_t clipped = 0;
  std::size_t terms = 0;
  std::vector<double> scale;

  for (const auto& s : batch) {
    if (!s.features || !s.choices) throw std::invalid_argument("update sample without features or action");
    if (!std::isfinite(s.log_prob_old)) throw std::invalid_argument("update sample is missing log_prob_old");
    const auto lp = policy::component_log_probs(policy, *s.features, *s.choices, config.temperature);
    const std::size_t d = lp.size();
    scale.assign(d, 0.0);
    const double lp_total = std::accumulate(lp.begin(), lp.end(), 0.0);

    if (config.ratio_level == RatioLevel::Action) {
      const double ratio = std::exp(lp_total - s.log_prob_old);
      const double unclipped = ratio * s.advantage;
      const double value = clipped_surrogate(ratio, s.advantage, config.eps_low, config.eps_high);
      stats.objective += value * inv_n;
      ++terms;
      const bool active = unclipped <= value;
      if (!active) ++clipped;
      if (active) std::fill(scale.begin(), scale.end(), s.advantage * ratio * inv_n);
    } else {
      if (!s.component_log_prob_old || s.component_log_prob_old->size() != d)
        throw std::invalid_argument("update sample is missing per-component log_prob_old");
      const double inv_d = 1.0 / static_cast<double>(d);
      for (std::size_t i = 0; i < d; ++i) {
        const double ratio = std::exp(lp[i] - (*s.component_log_prob_old)[i]);
        const double unclipped = ratio * s.advantage;
        const double value = clipped_surrogate(ratio, s.advantage, config.eps_low, config.eps_high);
        stats.objective += value * inv_d * inv_n;
        ++terms;
        const bool active = unclipped <= value;
        if (!active) ++clipped;
        if (active) scale[i] = s.advantage * ratio * inv_d * inv_n;
      }
    }

    if (use_kl) {
      // k3 estimator: exp(x) - x - 1 with x = log pi_ref - log pi.
      const double x = policy::log_prob(*reference, *s.features, *s.choices, config.temperature) - lp_total;
      const double kl = std::exp(x) - x - 1.0;
      stats.kl += kl * inv_n;
      stats.objective -= config.beta_kl * kl * inv_n;
      const double g = config.beta_kl * (std::exp(x) - 1.0) * inv_n;
      for (auto& v : scale) v += g;
    }
    if (gradient)
      policy::accumulate_grad_log_prob(policy, *s.features, *s.choices, config.temperature, scale, *gradient);
  }
  stats.loss = -stats.objective;
  stats.clip_fraction = terms ? static_cast<double>(clipped) / static_cast<double>(terms) : 0.0;
  if (gradient) {
    double sq = 0.0;
    for (const double g : *gradient) sq += g * g;
    stats.gradient_norm = std::sqrt(sq);
  }
  return stats;
}

namespace {

UpdateStats update_from_samples(policy::PolicyParameters& policy, policy::OptimizerState& opt,
                                std::span<const UpdateSample> samples, const TrainConfig& config,
                                const policy::PolicyParameters* reference) {
  std::vector<double> gradient;
  auto stats = surrogate_objective(policy, samples, config, reference, &gradient);
  policy::apply_update(policy, gradient, opt);
  return stats;
}

void append_group_samples(const TurnGroup& group, std::vector<UpdateSample>& out) {
  for (const auto& m : group.members)
    out.push_back({&group.context.features, &m.choices, m.log_prob_old, &m.component_log_prob_old, m.advantage});
}

}  // namespace

UpdateStats tl_grpo_update(policy::PolicyParameters& policy, policy::OptimizerState& opt,
                           std::span<const TurnGroup> batch, const TrainConfig& config,
                           const policy::PolicyParameters* reference) {
  std::vector<UpdateSample> samples;
  for (const auto& g : batch) append_group_samples(g, samples);
  return update_from_samples(policy, opt, samples, config, reference);
}

void parallel_for(std::size_t n, int lanes, const std::function<void(std::size_t)>& fn) {
  if (lanes <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mutex;
  std::vector<std::thread> threads;
  const auto count = std::min<std::size_t>(static_cast<std::size_t>(lanes), n);
  for (std::size_t l = 0; l < count; ++l) {
    threads.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!error) error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (error) std::rethrow_exception(error);
}

int planned_iterations(const TrainConfig& config, std::size_t num_queries) {
  if (config.iterations) return *config.iterations;
  const std::size_t total = static_cast<std::size_t>(config.epochs) * num_queries;
  const std::size_t b = static_cast<std::size_t>(config.batch_queries);
  return static_cast<int>((total + b - 1) / b);
}

namespace {

struct QueryWork {
  BudgetCounters counters;
  Trajectory seed;
  std::vector<TurnGroup> groups;
  TrajectoryGroup traj;
};

void emit_turn(const TrainHooks& hooks, std::int64_t iteration, const char* phase, const env::QueryInstance& q,
               int turn, int member, const std::vector<double>& params, const env::Observation& obs, double reward,
               std::optional<double> log_prob_old, std::optional<double> advantage) {
  if (!hooks.on_record) return;
  LogRecord r;
  r.iteration = iteration;
  r.phase = phase;
  r.query_id = q.query_id;
  r.task_id = q.task_id;
  r.turn = turn;
  r.member = member;
  r.params = &params;
  r.observation = &obs;
  r.reward = reward;
  r.log_prob_old = log_prob_old;
  r.advantage = advantage;
  hooks.on_record(r);
}

}  // namespace

TrainResult train(const TrainConfig& config, std::span<const env::TaskDefinition> tasks,
                  std::span<const env::QueryInstance> queries, const env::Simulator& simulator,
                  const TrainHooks& hooks, const policy::PolicyParameters& initial) {
  config.validate();
  if (queries.empty()) throw std::invalid_argument("training needs at least one query");
  TrainResult result;
  result.policy = initial;
  result.optimizer.learning_rate = config.learning_rate;
  const policy::PolicyParameters reference = initial;

  const std::size_t n = queries.size();
  const std::size_t b = static_cast<std::size_t>(config.batch_queries);
  const int iterations = planned_iterations(config, n);
  const std::size_t stream_end = config.iterations ? std::numeric_limits<std::size_t>::max()
                                                   : static_cast<std::size_t>(config.epochs) * n;

  std::vector<std::size_t> order;
  std::size_t order_epoch = std::numeric_limits<std::size_t>::max();
  auto query_at = [&](std::size_t stream_pos) {
    const std::size_t epoch = stream_pos / n;
    if (epoch != order_epoch) {
      order.resize(n);
      std::iota(order.begin(), order.end(), std::size_t{0});
      Rng shuffle_rng(derive_seed(config.seed, {0x5348554646ULL, epoch}));
      shuffle_rng.shuffle(order.begin(), order.end());
      order_epoch = epoch;
    }
    return order[stream_pos % n];
  };

  SamplingSettings sampling;
  sampling.temperature = config.temperature;
  sampling.top_p = config.top_p;
  sampling.mode = score::RewardMode::Train;

  const int T = config.max_turns;
  const int G = config.group_size;

  for (int it = 0; it < iterations; ++it) {
    const policy::PolicyParameters policy_old = result.policy;
    const std::size_t begin = static_cast<std::size_t>(it) * b;
    const std::size_t end = std::min(begin + b, stream_end);
    std::vector<std::size_t> batch;
    for (std::size_t pos = begin; pos < end; ++pos) batch.push_back(query_at(pos));
    std::vector<QueryWork> work(batch.size());
    const auto iter_key = static_cast<std::uint64_t>(it);

    parallel_for(batch.size(), config.lanes, [&](std::size_t slot) {
      const auto& query = queries[batch[slot]];
      const auto& task = env::find_task(tasks, query.task_id);
      QueryWork& w = work[slot];
      w.counters.query_id = query.query_id;
      switch (config.algorithm) {
        case Algorithm::TLGRPO: {
          Rng seed_rng(derive_seed(config.seed, {iter_key, slot, 1}));
          w.seed = rollout_trajectory(policy_old, query, task, T, seed_rng, sampling, simulator, &w.counters,
                                      &BudgetCounters::seed);
          const auto contexts = split_history(w.seed, query, task, sampling.features);
          for (const auto& ctx : contexts) {
            Rng group_rng(derive_seed(config.seed, {iter_key, slot, 2, static_cast<std::uint64_t>(ctx.turn_index)}));
            w.groups.push_back(sample_turn_group(policy_old, ctx, task, query, G, group_rng, sampling, simulator,
                                                 &w.counters));
          }
          break;
        }
        case Algorithm::TrajGRPO: {
          Rng rng(derive_seed(config.seed, {iter_key, slot, 3}));
          w.traj = traj_grpo_rollout_and_advantages(policy_old, query, task, G, T, rng, sampling, simulator,
                                                    &w.counters);
          break;
        }
        case Algorithm::SingleTurnGRPO: {
          Rng rng(derive_seed(config.seed, {iter_key, slot, 4}));
          w.groups.push_back(single_turn_episodes(policy_old, query, task, G, rng, sampling, simulator, &w.counters));
          break;
        }
      }
    });

    std::vector<UpdateSample> samples;
    std::vector<double> rewards;
    for (std::size_t slot = 0; slot < work.size(); ++slot) {
      const auto& query = queries[batch[slot]];
      const QueryWork& w = work[slot];
      switch (config.algorithm) {
        case Algorithm::TLGRPO: {
          emit_turn(hooks, it, "initial", query, 0, -1, w.seed.initial.params, w.seed.initial.observation,
                    w.seed.initial.reward, std::nullopt, std::nullopt);
          for (std::size_t t = 0; t < w.seed.turns.size(); ++t) {
            const auto& turn = w.seed.turns[t];
            emit_turn(hooks, it, "seed", query, static_cast<int>(t) + 1, -1, turn.params, turn.observation,
                      turn.reward, turn.log_prob_old, std::nullopt);
          }
          for (const auto& g : w.groups) {
            for (std::size_t i = 0; i < g.members.size(); ++i) {
              const auto& m = g.members[i];
              emit_turn(hooks, it, "group", query, g.context.turn_index + 1, static_cast<int>(i), m.params,
                        m.observation, m.reward, m.log_prob_old, m.advantage);
              rewards.push_back(m.reward);
            }
            append_group_samples(g, samples);
          }
          break;
        }
        case Algorithm::TrajGRPO: {
          const auto& initial = w.traj.trajectories.front().initial;
          emit_turn(hooks, it, "initial", query, 0, -1, initial.params, initial.observation, initial.reward,
                    std::nullopt, std::nullopt);
          for (std::size_t i = 0; i < w.traj.trajectories.size(); ++i) {
            const auto& tr = w.traj.trajectories[i];
            const double adv = w.traj.advantages[i];
            for (std::size_t t = 0; t < tr.turns.size(); ++t) {
              const auto& turn = tr.turns[t];
              emit_turn(hooks, it, "traj", query, static_cast<int>(t) + 1, static_cast<int>(i), turn.params,
                        turn.observation, turn.reward, turn.log_prob_old, adv);
              rewards.push_back(turn.reward);
              samples.push_back({&turn.features, &turn.choices, turn.log_prob_old, &turn.component_log_prob_old, adv});
            }
          }
          break;
        }
        case Algorithm::SingleTurnGRPO: {
          const auto& g = w.groups.front();
          const auto& initial = g.context.prefix.front();
          emit_turn(hooks, it, "initial", query, 0, -1, initial.params, initial.observation, initial.reward,
                    std::nullopt, std::nullopt);
          for (std::size_t i = 0; i < g.members.size(); ++i) {
            const auto& m = g.members[i];
            emit_turn(hooks, it, "single", query, 1, static_cast<int>(i), m.params, m.observation, m.reward,
                      m.log_prob_old, m.advantage);
            rewards.push_back(m.reward);
          }
          append_group_samples(g, samples);
          break;
        }
      }
      result.budget.push_back(w.counters);
    }

    const auto stats = update_from_samples(result.policy, result.optimizer, samples, config, &reference);
    result.mean_rewards.push_back(mean_of(rewards));
    if (hooks.on_iteration) hooks.on_iteration(it, stats);
    if (hooks.on_checkpoint && config.checkpoint_every > 0 && (it + 1) % config.checkpoint_every == 0)
      hooks.on_checkpoint(it + 1, result.policy, result.optimizer);
    ++result.iterations;
  }
  return result;
}

std::string AuditReport::table() const {
  std::ostringstream os;
  os << "budget audit: " << to_string(algorithm) << ", " << queries << " queries\n";
  os << "phase                 expected   observed(min..max)\n";
  for (const auto& r : rows) {
    os << r.phase;
    for (std::size_t k = r.phase.size(); k < 22; ++k) os << ' ';
    os << r.expected;
    for (std::size_t k = std::to_string(r.expected).size(); k < 11; ++k) os << ' ';
    os << r.observed_min << ".." << r.observed_max << '\n';
  }
  if (algorithm == Algorithm::TLGRPO)
    os << "G x T group rollouts per query: " << claimed_per_query
       << " (the seed trajectory adds T more policy samples and simulations)\n";
  for (const auto& f : failures) os << "FAILED: " << f << '\n';
  return os.str();
}

AuditReport budget_audit(std::span<const BudgetCounters> counters, const TrainConfig& config) {
  AuditReport report;
  report.algorithm = config.algorithm;
  report.queries = counters.size();
  const auto G = static_cast<std::uint64_t>(config.group_size);
  const auto T = static_cast<std::uint64_t>(config.max_turns);

  struct Expect {
    const char* phase;
    std::uint64_t expected;
    std::uint64_t (*get)(const BudgetCounters&);
  };
  std::vector<Expect> expects;
  switch (config.algorithm) {
    case Algorithm::TLGRPO:
      expects = {{"seed/samples", T, [](const BudgetCounters& c) { return c.seed.samples; }},
                 {"seed/simulations", T, [](const BudgetCounters& c) { return c.seed.simulations; }},
                 {"group/samples", G * T, [](const BudgetCounters& c) { return c.group.samples; }},
                 {"group/simulations", G * T, [](const BudgetCounters& c) { return c.group.simulations; }},
                 {"total/samples", T * (G + 1), [](const BudgetCounters& c) { return c.total_samples(); }},
                 {"total/simulations", T * (G + 1), [](const BudgetCounters& c) { return c.total_simulations(); }}};
      report.claimed_per_query = G * T;
      break;
    case Algorithm::TrajGRPO:
      expects = {{"total/samples", G * T, [](const BudgetCounters& c) { return c.total_samples(); }},
                 {"total/simulations", G * T, [](const BudgetCounters& c) { return c.total_simulations(); }}};
      report.claimed_per_query = G * T;
      break;
    case Algorithm::SingleTurnGRPO:
      expects = {{"total/samples", G, [](const BudgetCounters& c) { return c.total_samples(); }},
                 {"total/simulations", G, [](const BudgetCounters& c) { return c.total_simulations(); }}};
      report.claimed_per_query = G;
      break;
  }
  for (const auto& e : expects) {
    AuditRow row{e.phase, e.expected, std::numeric_limits<std::uint64_t>::max(), 0};
    for (const auto& c : counters) {
      const auto v = e.get(c);
      row.observed_min = std::min(row.observed_min, v);
      row.observed_max = std::max(row.observed_max, v);
      if (v != e.expected)
        report.failures.push_back(std::string(e.phase) + ": query " + c.query_id + " has " + std::to_string(v) +
                                  ", expected " + std::to_string(e.expected));
    }
    if (counters.empty()) row.observed_min = 0;
    report.rows.push_back(row);
  }
  return report;
}

void require_audit(const AuditReport& report) {
  if (!report.passed()) throw AuditFailure("budget audit failed: " + report.failures.front());
}

}  // namespace tlgrpo::rl
