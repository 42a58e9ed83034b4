#pragma once

// Rollouts and the three group-relative training algorithms.
//
//  * TL-GRPO: one seed trajectory per query from the frozen policy, split into
//    T history contexts; G fresh actions are sampled at every context and the
//    advantage is normalized within each turn-level group.
//  * Trajectory GRPO: G full trajectories per query, each scored by its best
//    turn reward; the trajectory advantage is shared by all of its turns.
//  * Single-turn GRPO: one group of G actions at the bare query context.
//
// All three share one clipped-surrogate policy update per collected batch.

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tlgrpo/policy.hpp"
#include "tlgrpo/rng.hpp"
#include "tlgrpo/surrogate_env.hpp"

namespace tlgrpo::rl {

enum class Algorithm { TLGRPO, TrajGRPO, SingleTurnGRPO };

std::string to_string(Algorithm a);
/// Accepts "tl-grpo", "traj-grpo", "single-turn-grpo".
Algorithm algorithm_from_string(const std::string& s);

enum class RatioLevel { Action, Component };

struct TrainConfig {
  Algorithm algorithm = Algorithm::TLGRPO;
  int batch_queries = 32;
  int group_size = 8;
  int max_turns = 5;
  double eps_low = 0.2;
  double eps_high = 0.28;
  double beta_kl = 0.0;
  double temperature = 1.0;
  double top_p = 0.95;
  double learning_rate = 1e-2;
  std::uint64_t seed = 0;
  int epochs = 1;
  /// Overrides the epoch-derived iteration count when set.
  std::optional<int> iterations;
  RatioLevel ratio_level = RatioLevel::Action;
  /// Parallel rollout lanes (queries processed concurrently).
  int lanes = 1;
  int checkpoint_every = 0;

  void validate() const;
};

class RolloutError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class AuditFailure : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct PhaseCount {
  std::uint64_t samples = 0;
  std::uint64_t simulations = 0;
};

/// Per-query inference budget. The query's initial design is simulated once
/// to produce o_0; that evaluation is tracked separately from both phases.
struct BudgetCounters {
  std::string query_id;
  PhaseCount seed;
  PhaseCount group;
  std::uint64_t initial_simulations = 0;

  std::uint64_t total_samples() const { return seed.samples + group.samples; }
  std::uint64_t total_simulations() const { return seed.simulations + group.simulations; }
};

struct SamplingSettings {
  double temperature = 1.0;
  double top_p = 0.95;
  policy::FeatureOptions features{};
  score::RewardMode mode = score::RewardMode::Train;
};

struct Turn {
  policy::HistoryFeatures features;
  std::vector<int> choices;
  std::vector<double> params;
  double log_prob_old = 0.0;
  std::vector<double> component_log_prob_old;
  env::Observation observation;
  double reward = 0.0;
};

struct Trajectory {
  std::string query_id;
  policy::HistoryEntry initial;
  std::vector<Turn> turns;

  /// History prefix (q, o_0, a_0, ..., o_t): the initial entry plus the first t turns.
  policy::History prefix(std::size_t t) const;
  /// Best turn reward.
  double value() const;
};

struct HistoryContext {
  std::string query_id;
  int turn_index = 0;
  policy::History prefix;
  policy::HistoryFeatures features;
};

struct GroupMember {
  std::vector<int> choices;
  std::vector<double> params;
  double log_prob_old = 0.0;
  std::vector<double> component_log_prob_old;
  env::Observation observation;
  double reward = 0.0;
  double advantage = 0.0;
};

struct TurnGroup {
  HistoryContext context;
  std::vector<GroupMember> members;
};

struct TrajectoryGroup {
  std::vector<Trajectory> trajectories;
  std::vector<double> values;
  std::vector<double> advantages;
};

/// Scores the query's initial design and returns it as a history entry.
policy::HistoryEntry initial_entry(const env::QueryInstance& query, const env::TaskDefinition& task,
                                   score::RewardMode mode, const env::Simulator& simulator,
                                   BudgetCounters* counters = nullptr);

Trajectory rollout_trajectory(const policy::PolicyParameters& policy_old, const env::QueryInstance& query,
                              const env::TaskDefinition& task, int max_turns, Rng& rng,
                              const SamplingSettings& sampling = {},
                              const env::Simulator& simulator = env::local_simulator(),
                              BudgetCounters* counters = nullptr, PhaseCount BudgetCounters::*phase =
                                                                      &BudgetCounters::seed);

std::vector<HistoryContext> split_history(const Trajectory& traj, const env::QueryInstance& query,
                                          const env::TaskDefinition& task,
                                          const policy::FeatureOptions& options = {});

TurnGroup sample_turn_group(const policy::PolicyParameters& policy_old, const HistoryContext& context,
                            const env::TaskDefinition& task, const env::QueryInstance& query, int group_size,
                            Rng& rng, const SamplingSettings& sampling = {},
                            const env::Simulator& simulator = env::local_simulator(),
                            BudgetCounters* counters = nullptr);

/// (R_i - mean) / population std; all zeros when std < 1e-8.
std::vector<double> group_advantages(std::span<const double> rewards);

double clipped_surrogate(double ratio, double advantage, double eps_low, double eps_high);

TrajectoryGroup traj_grpo_rollout_and_advantages(const policy::PolicyParameters& policy_old,
                                                 const env::QueryInstance& query, const env::TaskDefinition& task,
                                                 int group_size, int max_turns, Rng& rng,
                                                 const SamplingSettings& sampling = {},
                                                 const env::Simulator& simulator = env::local_simulator(),
                                                 BudgetCounters* counters = nullptr);

TurnGroup single_turn_episodes(const policy::PolicyParameters& policy_old, const env::QueryInstance& query,
                               const env::TaskDefinition& task, int group_size, Rng& rng,
                               const SamplingSettings& sampling = {},
                               const env::Simulator& simulator = env::local_simulator(),
                               BudgetCounters* counters = nullptr);

/// One member of the policy-gradient batch.
struct UpdateSample {
  const policy::HistoryFeatures* features = nullptr;
  const std::vector<int>* choices = nullptr;
  double log_prob_old = 0.0;
  const std::vector<double>* component_log_prob_old = nullptr;
  double advantage = 0.0;
};

struct UpdateStats {
  double objective = 0.0;
  double loss = 0.0;  // -objective
  double kl = 0.0;
  double clip_fraction = 0.0;
  double gradient_norm = 0.0;
  std::size_t samples = 0;
};

/// Objective (1/N) sum clipped_surrogate(ratio, A) - beta_kl * KL and its
/// gradient with respect to the weights.
UpdateStats surrogate_objective(const policy::PolicyParameters& policy, std::span<const UpdateSample> batch,
                                const TrainConfig& config, const policy::PolicyParameters* reference,
                                std::vector<double>* gradient);

/// Collects every member of every group and takes one ascent step.
UpdateStats tl_grpo_update(policy::PolicyParameters& policy, policy::OptimizerState& opt,
                           std::span<const TurnGroup> batch, const TrainConfig& config,
                           const policy::PolicyParameters* reference = nullptr);

/// One record per (phase, query, turn, member) for the run log.
struct LogRecord {
  std::int64_t iteration = -1;
  std::string phase;  // initial, seed, group, traj, single, eval
  std::string query_id;
  std::string task_id;
  int turn = 0;
  int member = -1;
  const std::vector<double>* params = nullptr;
  const env::Observation* observation = nullptr;
  double reward = 0.0;
  std::optional<double> log_prob_old;
  std::optional<double> advantage;
};

struct TrainHooks {
  std::function<void(const LogRecord&)> on_record;
  std::function<void(int iteration, const UpdateStats&)> on_iteration;
  std::function<void(int iteration, const policy::PolicyParameters&, const policy::OptimizerState&)> on_checkpoint;
};

struct TrainResult {
  policy::PolicyParameters policy;
  policy::OptimizerState optimizer;
  std::vector<BudgetCounters> budget;  // one entry per processed query
  int iterations = 0;
  std::vector<double> mean_rewards;  // per iteration, over all sampled actions
};

int planned_iterations(const TrainConfig& config, std::size_t num_queries);

TrainResult train(const TrainConfig& config, std::span<const env::TaskDefinition> tasks,
                  std::span<const env::QueryInstance> queries, const env::Simulator& simulator = env::local_simulator(),
                  const TrainHooks& hooks = {}, const policy::PolicyParameters& initial = {});

struct AuditRow {
  std::string phase;
  std::uint64_t expected = 0;
  std::uint64_t observed_min = 0;
  std::uint64_t observed_max = 0;
};

struct AuditReport {
  Algorithm algorithm = Algorithm::TLGRPO;
  std::size_t queries = 0;
  std::vector<AuditRow> rows;
  std::vector<std::string> failures;
  /// Group-phase rollouts per query as counted by the G x T claim.
  std::uint64_t claimed_per_query = 0;

  bool passed() const { return failures.empty(); }
  std::string table() const;
};

AuditReport budget_audit(std::span<const BudgetCounters> counters, const TrainConfig& config);
/// Throws AuditFailure naming the first mismatching phase.
void require_audit(const AuditReport& report);

/// Runs fn(0..n-1) over `lanes` threads; results must go to per-index slots.
void parallel_for(std::size_t n, int lanes, const std::function<void(std::size_t)>& fn);

}  // namespace tlgrpo::rl
