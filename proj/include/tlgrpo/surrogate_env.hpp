#pragma once

// Deterministic surrogate circuit simulator and the single-state environment
// built on it.
//
// A task is a smooth multi-objective function of d strictly positive sizing
// parameters:
//
//   metric_k(w) = c_k + sum_i a_ki ln(w_i/lo_i) - sum_i b_ki (w_i - mu_ki)^2
//               + sum_(i,j) g_kij ln(w_i/lo_i) ln(w_j/lo_j)
//
// The generator plants a known construction point that meets every base
// target, and makes the power-like upper-bound metric grow with the same
// devices that raise gain so at least one pair of objectives conflicts.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "tlgrpo/spec_score.hpp"

namespace tlgrpo::env {

using score::MetricVector;
using score::RewardMode;
using score::SpecSet;

class BoundsError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

class BudgetExceeded : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class TaskConstructionError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Coupling {
  std::size_t i = 0;
  std::size_t j = 0;
  double gamma = 0.0;
};

struct MetricModel {
  std::string name;
  double offset = 0.0;
  std::vector<double> log_weights;
  std::vector<double> bowl_centers;
  std::vector<double> bowl_weights;
  std::vector<Coupling> couplings;
};

struct TaskDefinition {
  std::string task_id;
  std::uint64_t seed = 0;
  std::vector<double> lower;
  std::vector<double> upper;
  std::vector<MetricModel> metrics;
  SpecSet base_specs;
  /// Construction point known to satisfy every base target.
  std::vector<double> feasible_point;
  double threshold_alpha = score::kDefaultAlpha;
  double threshold_beta = score::kDefaultBeta;

  std::size_t dim() const { return lower.size(); }
  /// Throws std::invalid_argument when shapes or bounds are inconsistent.
  void validate() const;
};

/// Name of parameter i on the wire and in logs: "w1", "w2", ...
std::string parameter_name(std::size_t i);

struct TaskOptions {
  /// Typical relative spread of each metric across the design box.
  double spread = 0.3;
  /// Relative slack between the construction point and its targets.
  double max_margin = 0.05;
};

/// Builds a deterministic task. dim >= 2, num_objectives >= 2.
TaskDefinition build_task(std::uint64_t seed, std::size_t dim, std::size_t num_objectives,
                          std::string task_id = {}, const TaskOptions& options = {});

/// One-parameter task with a single lower-bound objective whose score peaks
/// around `center` (a single quadratic bowl). Used as a small BO fixture.
TaskDefinition single_bowl_task(double center = 1.3, std::string task_id = "single-bowl");

/// Evaluates the surrogate. Throws BoundsError for out-of-box parameters.
MetricVector simulate(const TaskDefinition& task, std::span<const double> params);

struct QueryInstance {
  std::string query_id;
  std::string task_id;
  std::vector<double> initial_params;
  SpecSet specs;
  int max_turns = 5;
};

std::vector<QueryInstance> synthesize_queries(const TaskDefinition& task, std::size_t n, std::uint64_t seed,
                                              double offset_scale, int max_turns = 5);

struct ActionCheck {
  enum class Status { Ok, OutOfBounds, Malformed };
  Status status = Status::Ok;
  std::vector<std::size_t> indices;  // offending components for OutOfBounds

  bool ok() const { return status == Status::Ok; }
};

ActionCheck validate_action(const TaskDefinition& task, std::span<const double> params);

struct Observation {
  std::optional<MetricVector> metrics;  // present iff valid
  int turn_index = 0;
  bool valid = false;
  std::string violation;
};

/// Source of metric vectors: local evaluation or a remote service.
class Simulator {
 public:
  virtual ~Simulator() = default;
  virtual MetricVector simulate(const TaskDefinition& task, std::span<const double> params) const = 0;
};

class LocalSimulator final : public Simulator {
 public:
  MetricVector simulate(const TaskDefinition& task, std::span<const double> params) const override {
    return env::simulate(task, params);
  }
};

const Simulator& local_simulator();

struct StepResult {
  Observation observation;
  double reward = 0.0;
  double performance = 0.0;
};

/// One environment interaction. The state never changes: the result depends
/// on the action only, never on the turn index beyond the budget check.
StepResult step(const QueryInstance& query, const TaskDefinition& task, std::span<const double> action, int turn,
                RewardMode mode, const Simulator& simulator = local_simulator());

/// Scores the query's initial design (the observation o_0 shown with the query).
StepResult observe_initial(const QueryInstance& query, const TaskDefinition& task, RewardMode mode,
                           const Simulator& simulator = local_simulator());

/// Finds a task by id; throws std::out_of_range if absent.
const TaskDefinition& find_task(std::span<const TaskDefinition> tasks, const std::string& task_id);

}  // namespace tlgrpo::env
