#include "tlgrpo/surrogate_env.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "tlgrpo/rng.hpp"

namespace tlgrpo::env {

namespace {

constexpr double kDefaultLower = 0.4;  // um
constexpr double kDefaultUpper = 2.0;  // um
constexpr int kMaxConstructionAttempts = 16;

enum class Role { Gain, Bandwidth, Power, PhaseMargin, Extra };

struct RoleInfo {
  const char* name;
  score::SpecKind kind;
  double unit_scale;
  const char* unit;
};

RoleInfo role_info(Role role) {
  switch (role) {
    case Role::Gain: return {"gain", score::SpecKind::LowerBound, 70.0, "dB"};
    case Role::Bandwidth: return {"gbw", score::SpecKind::LowerBound, 1.0e6, "Hz"};
    case Role::Power: return {"pw", score::SpecKind::UpperBound, 1.5e-5, "W"};
    case Role::PhaseMargin: return {"pm", score::SpecKind::LowerBound, 75.0, "deg"};
    case Role::Extra: break;
  }
  return {"", score::SpecKind::Range, 1.0, ""};
}

std::vector<Role> roles_for(std::size_t m) {
  if (m == 2) return {Role::Gain, Role::Power};
  if (m == 3) return {Role::Gain, Role::Bandwidth, Role::Power};
  std::vector<Role> roles{Role::Gain, Role::Bandwidth, Role::Power, Role::PhaseMargin};
  while (roles.size() < m) roles.push_back(Role::Extra);
  return roles;
}

double evaluate_metric(const MetricModel& m, std::span<const double> w, std::span<const double> lo) {
  double value = m.offset;
  for (std::size_t i = 0; i < w.size(); ++i) {
    const double z = std::log(w[i] / lo[i]);
    const double dw = w[i] - m.bowl_centers[i];
    value += m.log_weights[i] * z - m.bowl_weights[i] * dw * dw;
  }
  for (const auto& c : m.couplings) value += c.gamma * std::log(w[c.i] / lo[c.i]) * std::log(w[c.j] / lo[c.j]);
  return value;
}

TaskDefinition try_build(std::uint64_t seed, std::size_t dim, std::size_t num_objectives, const TaskOptions& opt,
                         Rng& rng) {
  TaskDefinition task;
  task.seed = seed;
  task.lower.resize(dim);
  task.upper.resize(dim);
  task.feasible_point.resize(dim);
  for (std::size_t i = 0; i < dim; ++i) {
    const double scale = std::exp(rng.uniform(std::log(0.5), std::log(2.0)));
    task.lower[i] = kDefaultLower * scale;
    task.upper[i] = kDefaultUpper * scale;
    const double span = std::log(task.upper[i] / task.lower[i]);
    task.feasible_point[i] = task.lower[i] * std::exp(rng.uniform(0.3, 0.7) * span);
  }

  // Typical |z - z*| is about 0.5 on a 5x box; scale weights so the sum over
  // d devices moves a normalized metric by roughly `spread`.
  const double dim_d = static_cast<double>(dim);
  const double a = opt.spread / (0.5 * std::sqrt(dim_d));
  const auto roles = roles_for(num_objectives);
  std::vector<double> gain_weights(dim, 0.0);
  std::vector<score::Objective> objectives;

  for (std::size_t k = 0; k < roles.size(); ++k) {
    const Role role = roles[k];
    MetricModel m;
    RoleInfo info = role_info(role);
    std::string name = role == Role::Extra ? "m" + std::to_string(k + 1) : info.name;
    if (role == Role::Extra) {
      static constexpr score::SpecKind kExtraKinds[] = {score::SpecKind::Range, score::SpecKind::UpperBound,
                                                        score::SpecKind::LowerBound};
      info.kind = kExtraKinds[(k - 4) % 3];
    }
    m.name = name;
    m.log_weights.resize(dim);
    m.bowl_centers.resize(dim);
    m.bowl_weights.resize(dim);

    const double bowl_scale = (role == Role::PhaseMargin ? 0.5 : 0.15) * opt.spread;
    for (std::size_t i = 0; i < dim; ++i) {
      const double mag = a * rng.uniform(0.3, 1.7);
      double w = 0.0;
      switch (role) {
        case Role::Gain: w = rng.uniform() < 0.15 ? -0.5 * mag : mag; break;
        case Role::Bandwidth: w = mag; break;
        case Role::Power: w = 0.7 * std::abs(gain_weights[i]) + 0.3 * mag; break;
        case Role::PhaseMargin: w = rng.uniform() < 0.2 ? 0.3 * mag : -mag; break;
        case Role::Extra: w = rng.uniform() < 0.5 ? -mag : mag; break;
      }
      if (role == Role::Gain) gain_weights[i] = w;
      m.log_weights[i] = w;
      const double width = task.upper[i] - task.lower[i];
      m.bowl_centers[i] = rng.uniform(task.lower[i], task.upper[i]);
      m.bowl_weights[i] = bowl_scale * rng.uniform() / (dim_d * width * width);
    }
    const std::size_t pairs = dim / 2;
    for (std::size_t p = 0; p < pairs; ++p) {
      std::size_t i = rng.below(dim);
      std::size_t j = rng.below(dim - 1);
      if (j >= i) ++j;
      if (i > j) std::swap(i, j);
      const double g = 0.3 * a * rng.uniform(-1.0, 1.0) / std::log(kDefaultUpper / kDefaultLower);
      m.couplings.push_back({i, j, g});
    }

    // Normalize so the construction point evaluates to 1, then apply units.
    m.offset = 0.0;
    m.offset = 1.0 - evaluate_metric(m, task.feasible_point, task.lower);
    m.offset *= info.unit_scale;
    for (auto& x : m.log_weights) x *= info.unit_scale;
    for (auto& x : m.bowl_weights) x *= info.unit_scale;
    for (auto& c : m.couplings) c.gamma *= info.unit_scale;

    const double at_point = evaluate_metric(m, task.feasible_point, task.lower);
    const double margin = rng.uniform(0.0, opt.max_margin);
    switch (info.kind) {
      case score::SpecKind::LowerBound:
        objectives.push_back(score::make_objective(name, info.kind, at_point * (1.0 - margin), 0.0, info.unit));
        break;
      case score::SpecKind::UpperBound:
        objectives.push_back(score::make_objective(name, info.kind, at_point * (1.0 + margin), 0.0, info.unit));
        break;
      case score::SpecKind::Range: {
        const double lo = at_point * (1.0 - rng.uniform(0.05, 0.15));
        const double hi = at_point * (1.0 + rng.uniform(0.05, 0.15));
        objectives.push_back(score::make_objective(name, info.kind, lo, hi, info.unit));
        break;
      }
    }
    task.metrics.push_back(std::move(m));
  }
  task.base_specs = SpecSet(std::move(objectives));
  return task;
}

bool has_conflict(const TaskDefinition& task) {
  for (std::size_t a = 0; a < task.metrics.size(); ++a) {
    if (task.base_specs[a].kind != score::SpecKind::UpperBound) continue;
    for (std::size_t b = 0; b < task.metrics.size(); ++b) {
      if (task.base_specs[b].kind != score::SpecKind::LowerBound) continue;
      for (std::size_t i = 0; i < task.dim(); ++i)
        if (task.metrics[a].log_weights[i] > 0.0 && task.metrics[b].log_weights[i] > 0.0) return true;
    }
  }
  return false;
}

bool satisfiable(const TaskDefinition& task) {
  const auto metrics = simulate(task, task.feasible_point);
  for (const double p : score::objective_scores(metrics, task.base_specs))
    if (p < 0.9) return false;
  return true;
}

}  // namespace

void TaskDefinition::validate() const {
  if (lower.empty() || lower.size() != upper.size()) throw std::invalid_argument("task bounds shape mismatch");
  for (std::size_t i = 0; i < lower.size(); ++i)
    if (!(lower[i] > 0.0) || !(lower[i] < upper[i])) throw std::invalid_argument("task bounds must satisfy 0 < lo < hi");
  if (metrics.size() != base_specs.size()) throw std::invalid_argument("metric model count differs from spec count");
  for (std::size_t k = 0; k < metrics.size(); ++k) {
    const auto& m = metrics[k];
    if (m.name != base_specs[k].name) throw std::invalid_argument("metric model order differs from specs");
    if (m.log_weights.size() != dim() || m.bowl_centers.size() != dim() || m.bowl_weights.size() != dim())
      throw std::invalid_argument("metric model '" + m.name + "' has wrong dimension");
    for (const auto& c : m.couplings)
      if (c.i >= dim() || c.j >= dim()) throw std::invalid_argument("coupling index out of range");
  }
  base_specs.validate();
  if (feasible_point.size() != dim()) throw std::invalid_argument("construction point has wrong dimension");
}

std::string parameter_name(std::size_t i) { return "w" + std::to_string(i + 1); }

TaskDefinition build_task(std::uint64_t seed, std::size_t dim, std::size_t num_objectives, std::string task_id,
                          const TaskOptions& options) {
  if (dim < 2 || dim > 40) throw std::invalid_argument("task dimension must be in [2, 40]");
  if (num_objectives < 2) throw std::invalid_argument("a task needs at least two objectives");
  for (int attempt = 0; attempt < kMaxConstructionAttempts; ++attempt) {
    Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(attempt), dim, num_objectives}));
    TaskDefinition task = try_build(seed, dim, num_objectives, options, rng);
    task.task_id = task_id.empty() ? "task-" + std::to_string(seed) : task_id;
    if (has_conflict(task) && satisfiable(task)) {
      task.validate();
      return task;
    }
  }
  throw TaskConstructionError("surrogate construction failed after 16 attempts (seed " + std::to_string(seed) + ")");
}

TaskDefinition single_bowl_task(double center, std::string task_id) {
  TaskDefinition task;
  task.task_id = std::move(task_id);
  task.lower = {kDefaultLower};
  task.upper = {kDefaultUpper};
  if (!(center > kDefaultLower && center < kDefaultUpper)) throw std::invalid_argument("bowl center outside the box");
  MetricModel m;
  m.name = "gain";
  m.offset = 1.0;
  m.log_weights = {0.0};
  m.bowl_centers = {center};
  m.bowl_weights = {4.0};
  task.metrics.push_back(std::move(m));
  task.base_specs = SpecSet({score::make_objective("gain", score::SpecKind::LowerBound, 0.9)});
  task.feasible_point = {center};
  task.validate();
  return task;
}

MetricVector simulate(const TaskDefinition& task, std::span<const double> params) {
  if (params.size() != task.dim())
    throw BoundsError("expected " + std::to_string(task.dim()) + " parameters, got " + std::to_string(params.size()));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!(params[i] >= task.lower[i] && params[i] <= task.upper[i]))
      throw BoundsError("parameter " + parameter_name(i) + " outside [" + std::to_string(task.lower[i]) + ", " +
                        std::to_string(task.upper[i]) + "]");
  }
  std::vector<score::Metric> out;
  out.reserve(task.metrics.size());
  for (const auto& m : task.metrics) out.push_back({m.name, evaluate_metric(m, params, task.lower)});
  return MetricVector(std::move(out));
}

std::vector<QueryInstance> synthesize_queries(const TaskDefinition& task, std::size_t n, std::uint64_t seed,
                                              double offset_scale, int max_turns) {
  if (!(offset_scale >= 0.0 && offset_scale < 1.0)) throw std::invalid_argument("offset_scale must be in [0, 1)");
  if (max_turns < 1) throw std::invalid_argument("max_turns must be at least 1");
  const std::uint64_t task_key = fnv1a64(task.task_id);
  std::vector<QueryInstance> out;
  out.reserve(n);
  for (std::size_t q = 0; q < n; ++q) {
    Rng rng(derive_seed(seed, {task_key, q}));
    QueryInstance query;
    std::ostringstream id;
    id << task.task_id << "-q" << std::setw(5) << std::setfill('0') << q;
    query.query_id = id.str();
    query.task_id = task.task_id;
    query.max_turns = max_turns;
    query.initial_params.resize(task.dim());
    for (std::size_t i = 0; i < task.dim(); ++i) query.initial_params[i] = rng.uniform(task.lower[i], task.upper[i]);

    std::vector<score::Objective> objectives;
    for (const auto& base : task.base_specs.objectives()) {
      const double factor = rng.uniform(1.0 - offset_scale, 1.0 + offset_scale);
      score::Objective o = base;
      o.target = base.target * factor;
      if (o.kind == score::SpecKind::Range) o.target_upper = base.target_upper * factor;
      const auto t = score::default_thresholds(o.kind, o.target, o.target_upper, task.threshold_alpha,
                                               task.threshold_beta);
      o.tau_lower = t.tau_lower;
      o.tau_upper = t.tau_upper;
      objectives.push_back(std::move(o));
    }
    query.specs = SpecSet(std::move(objectives));
    out.push_back(std::move(query));
  }
  return out;
}

ActionCheck validate_action(const TaskDefinition& task, std::span<const double> params) {
  ActionCheck check;
  if (params.size() != task.dim()) {
    check.status = ActionCheck::Status::Malformed;
    return check;
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!std::isfinite(params[i])) {
      check.status = ActionCheck::Status::Malformed;
      check.indices.clear();
      return check;
    }
    if (params[i] < task.lower[i] || params[i] > task.upper[i]) check.indices.push_back(i);
  }
  if (!check.indices.empty()) check.status = ActionCheck::Status::OutOfBounds;
  return check;
}

const Simulator& local_simulator() {
  static const LocalSimulator instance;
  return instance;
}

StepResult step(const QueryInstance& query, const TaskDefinition& task, std::span<const double> action, int turn,
                RewardMode mode, const Simulator& simulator) {
  if (turn < 0 || turn >= query.max_turns)
    throw BudgetExceeded("turn " + std::to_string(turn) + " exceeds the budget of " +
                         std::to_string(query.max_turns) + " turns");
  StepResult out;
  out.observation.turn_index = turn + 1;
  const auto check = validate_action(task, action);
  if (!check.ok()) {
    out.observation.valid = false;
    if (check.status == ActionCheck::Status::Malformed) {
      out.observation.violation = "malformed";
    } else {
      std::string v = "out of bounds:";
      for (const auto i : check.indices) v += " " + parameter_name(i);
      out.observation.violation = v;
    }
    out.performance = 0.0;
    out.reward = score::final_reward(0.0, score::format_penalty(score::FormatViolation::Malformed), mode);
    return out;
  }
  out.observation.valid = true;
  out.observation.metrics = simulator.simulate(task, action);
  out.performance = score::performance_reward(*out.observation.metrics, query.specs);
  out.reward = score::final_reward(out.performance, 0.0, mode);
  return out;
}

StepResult observe_initial(const QueryInstance& query, const TaskDefinition& task, RewardMode mode,
                           const Simulator& simulator) {
  StepResult out;
  out.observation.turn_index = 0;
  out.observation.valid = true;
  out.observation.metrics = simulator.simulate(task, query.initial_params);
  out.performance = score::performance_reward(*out.observation.metrics, query.specs);
  out.reward = score::final_reward(out.performance, 0.0, mode);
  return out;
}

const TaskDefinition& find_task(std::span<const TaskDefinition> tasks, const std::string& task_id) {
  for (const auto& t : tasks)
    if (t.task_id == task_id) return t;
  throw std::out_of_range("unknown task id '" + task_id + "'");
}

}  // namespace tlgrpo::env
