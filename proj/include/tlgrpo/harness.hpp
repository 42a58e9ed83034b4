#pragma once

// Experiment plumbing behind the command-line tool: run configuration, query
// synthesis, training and evaluation runs, turn-analysis reports and log
// verification.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "tlgrpo/baseline_bo.hpp"
#include "tlgrpo/io.hpp"
#include "tlgrpo/rl_core.hpp"
#include "tlgrpo/simnet.hpp"

namespace tlgrpo::harness {

class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EnvSettings {
  int train_tasks = 8;
  int ood_tasks = 4;
  /// Parameter counts, cycled over the in-domain tasks. OOD task k reuses the
  /// dimension of in-domain task k with re-seeded coefficients.
  std::vector<int> dims{4, 5, 6, 7, 8, 9, 10, 12};
  int num_objectives = 4;
  double offset_scale = 0.1;
  int train_queries = 10000;
  int eval_queries_per_task = 100;
  double spread = 0.3;
  double max_margin = 0.05;
  /// Optional explicit ids; must not overlap.
  std::vector<std::string> train_task_ids;
  std::vector<std::string> ood_task_ids;
};

struct ExecutionSettings {
  std::string simulator = "local";  // local | remote
  std::string master = "127.0.0.1:7070";
  int lanes = 1;
  int request_timeout_ms = 30000;
};

struct EvalSettings {
  std::string method = "policy";        // policy | bo | random
  std::string protocol = "multi-turn";  // multi-turn | st-iter
  std::string split = "in-domain";      // in-domain | ood
  bool st_iter_best_so_far = false;
  int max_queries = 0;  // 0 = all
  int bo_candidate_pool = 2048;
  double bo_xi = 0.01;
};

struct PathSettings {
  std::string data_dir = "data";
  std::string run_dir = "runs/default";
};

struct RunConfig {
  std::uint64_t seed = 0;
  rl::TrainConfig train;
  EnvSettings env;
  ExecutionSettings execution;
  EvalSettings eval;
  PathSettings paths;

  /// Throws ConfigError.
  void validate() const;
};

/// Parses a JSON config; unknown keys anywhere are rejected.
RunConfig config_from_json(const std::string& text, const std::string& source = "<config>");
std::string config_to_json(const RunConfig& config);
RunConfig load_config(const std::filesystem::path& path);
/// TLGRPO_DATA_DIR and TLGRPO_RUN_DIR override the path settings.
void apply_env_overrides(RunConfig& config);

/// Owns whatever backs the configured simulate mode.
class SimulatorHandle {
 public:
  explicit SimulatorHandle(const ExecutionSettings& exec);
  ~SimulatorHandle();
  const env::Simulator& get() const;

 private:
  std::unique_ptr<simnet::Client> client_;
  std::unique_ptr<simnet::RemoteSimulator> remote_;
};

struct SynthOutput {
  std::vector<env::TaskDefinition> tasks;  // in-domain first, then OOD
  std::vector<env::QueryInstance> train;
  std::vector<env::QueryInstance> eval_in_domain;
  std::vector<env::QueryInstance> eval_ood;
};

SynthOutput synthesize(const RunConfig& config);
/// Writes tasks.json, train.jsonl, eval_in_domain.jsonl and eval_ood.jsonl.
SynthOutput cmd_synth(const RunConfig& config);

struct TrainSummary {
  rl::TrainResult result;
  rl::AuditReport audit;
  std::filesystem::path log_path;
  std::filesystem::path checkpoint_path;
  std::string log_hash;
};

/// Trains on data_dir/train.jsonl, writes the run log, checkpoints and the
/// budget audit into run_dir. Throws rl::AuditFailure after writing if the
/// audit fails.
TrainSummary cmd_train(const RunConfig& config, std::ostream* progress = nullptr);

enum class Method { Policy, BO, Random };
std::string to_string(Method m);
Method method_from_string(const std::string& s);
std::string to_string(policy::Protocol p);
policy::Protocol protocol_from_string(const std::string& s);

/// Everything observed for one evaluation query; index 0 is the initial design.
struct QueryTrace {
  std::string query_id;
  std::string task_id;
  std::vector<std::vector<double>> params;
  std::vector<env::Observation> observations;
  std::vector<double> rewards;

  double best() const;
};

struct TaskScore {
  std::string task_id;
  std::size_t queries = 0;
  double mean_best = 0.0;
};

struct EvalReport {
  std::string method;
  std::string protocol;
  std::string split;
  int max_turns = 0;
  std::size_t queries = 0;
  std::vector<TaskScore> per_task;  // in order of first appearance
  /// Mean over tasks of the per-task mean best score.
  double overall_mean = 0.0;
  std::vector<double> turn_mean;          // entry t: mean reward at turn t (0 = initial)
  std::vector<double> turn_history_best;  // entry t: mean of max reward over turns 0..t

  io::Json to_json() const;
  static EvalReport from_json(const io::Json& j);
};

std::vector<QueryTrace> run_eval(const RunConfig& config, std::span<const env::TaskDefinition> tasks,
                                 std::span<const env::QueryInstance> queries, const policy::PolicyParameters& weights,
                                 Method method, policy::Protocol protocol, const env::Simulator& simulator);

EvalReport summarize(std::span<const QueryTrace> traces, const std::string& method, const std::string& protocol,
                     const std::string& split, int max_turns);

struct EvalOutput {
  EvalReport report;
  std::filesystem::path log_path;
  std::filesystem::path report_path;
  std::string log_hash;
  std::vector<std::string> warnings;
};

/// Evaluates `checkpoint` (empty path = untrained zero weights) on the
/// configured split. Writes eval-<method>-<protocol>-<split>.{jsonl,json}.
EvalOutput cmd_eval(const RunConfig& config, const std::filesystem::path& checkpoint);

struct LoadedLog {
  io::Json header;
  std::vector<QueryTrace> traces;
  std::vector<double> logged_best;  // per trace, from the query summary records
  std::size_t skipped_lines = 0;
};

/// Reads an evaluation log. Corrupt lines are skipped and counted unless `strict`.
LoadedLog load_eval_log(const std::filesystem::path& path, bool strict = false);

struct VerifyResult {
  std::vector<std::string> failures;
  std::size_t queries = 0;
  bool ok() const { return failures.empty(); }
};

/// Recomputes every aggregate of `report` from `log` and checks the per-query
/// invariants: best = max over turns, history-best nondecreasing, turn 0 = initial.
VerifyResult verify_log(const std::filesystem::path& log, const std::filesystem::path& report);

/// Turn-analysis CSV (columns: method,protocol,split,turn,queries,mean_score,
/// mean_history_best) plus a text rendering with sparklines.
struct TurnReport {
  std::string csv;
  std::string text;
  std::size_t skipped_lines = 0;
};

TurnReport cmd_report(const std::vector<std::filesystem::path>& logs);

/// Renders values in [0,1] as a block-character sparkline.
std::string sparkline(std::span<const double> values);

/// Scores a metric file against a spec file.
score::ScoreBreakdown cmd_score(const std::filesystem::path& spec_file, const std::filesystem::path& metric_file,
                                score::RewardMode mode = score::RewardMode::Eval);

}  // namespace tlgrpo::harness
