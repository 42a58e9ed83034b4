#include "tlgrpo/spec_score.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace tlgrpo::score {

namespace {

void require_finite(double x, const char* what) {
  if (!std::isfinite(x)) throw InvalidInput(std::string("non-finite ") + what);
}

void require_positive_tau(double tau, const char* what) {
  require_finite(tau, what);
  if (tau <= 0.0) throw InvalidInput(std::string(what) + " must be positive");
}

// Quadratic rise over [s - tau, s).
double lower_transition(double v, double s, double tau) {
  if (v < s - tau) return 0.0;
  if (v >= s) return 1.0;
  const double x = (v - (s - tau)) / tau;
  return std::clamp(x * x, 0.0, 1.0);
}

// Cubic fall over (s, s + tau].
double upper_transition(double v, double s, double tau) {
  if (v <= s) return 1.0;
  if (v > s + tau) return 0.0;
  const double x = (s + tau - v) / tau;
  return std::clamp(x * x * x, 0.0, 1.0);
}

}  // namespace

std::string_view to_string(SpecKind kind) {
  switch (kind) {
    case SpecKind::LowerBound: return "lower";
    case SpecKind::UpperBound: return "upper";
    case SpecKind::Range: return "range";
  }
  return "?";
}

SpecKind spec_kind_from_string(std::string_view s) {
  if (s == "lower") return SpecKind::LowerBound;
  if (s == "upper") return SpecKind::UpperBound;
  if (s == "range") return SpecKind::Range;
  throw InvalidSpec("unknown spec kind '" + std::string(s) + "'");
}

void Objective::validate() const {
  if (name.empty()) throw InvalidSpec("objective with empty name");
  if (!std::isfinite(target)) throw InvalidSpec("objective '" + name + "': non-finite target");
  if (kind == SpecKind::Range) {
    if (!std::isfinite(target_upper)) throw InvalidSpec("objective '" + name + "': non-finite upper target");
    if (target > target_upper) throw InvalidSpec("objective '" + name + "': range lower edge exceeds upper edge");
  }
  if (uses_lower_transition() && !(tau_lower > 0.0 && std::isfinite(tau_lower)))
    throw InvalidSpec("objective '" + name + "': tau_lower must be positive");
  if (uses_upper_transition() && !(tau_upper > 0.0 && std::isfinite(tau_upper)))
    throw InvalidSpec("objective '" + name + "': tau_upper must be positive");
}

Thresholds default_thresholds(SpecKind kind, double target, double target_upper, double alpha, double beta) {
  if (!(alpha > 0.0) || !(beta > 0.0)) throw InvalidSpec("alpha and beta must be positive");
  auto proportional = [](double factor, double value) {
    const double tau = factor * std::abs(value);
    return tau > 0.0 ? tau : kAbsoluteThresholdFloor;
  };
  const double upper_ref = kind == SpecKind::Range ? target_upper : target;
  return {proportional(alpha, target), proportional(beta, upper_ref)};
}

Objective make_objective(std::string name, SpecKind kind, double target, double target_upper, std::string unit,
                         double alpha, double beta) {
  const auto t = default_thresholds(kind, target, target_upper, alpha, beta);
  Objective o{std::move(name), kind, target, kind == SpecKind::Range ? target_upper : 0.0,
              t.tau_lower, t.tau_upper, std::move(unit)};
  o.validate();
  return o;
}

SpecSet::SpecSet(std::vector<Objective> objectives) : objectives_(std::move(objectives)) { validate(); }

void SpecSet::validate() const {
  if (objectives_.empty()) throw InvalidSpec("spec set needs at least one objective");
  std::set<std::string_view> names;
  for (const auto& o : objectives_) {
    o.validate();
    if (!names.insert(o.name).second) throw InvalidSpec("duplicate objective name '" + o.name + "'");
  }
}

void MetricVector::set(std::string name, double value) {
  for (auto& e : entries_) {
    if (e.name == name) {
      e.value = value;
      return;
    }
  }
  entries_.push_back({std::move(name), value});
}

const double* MetricVector::find(std::string_view name) const {
  for (const auto& e : entries_)
    if (e.name == name) return &e.value;
  return nullptr;
}

double MetricVector::at(std::string_view name) const {
  if (const double* v = find(name)) return *v;
  throw MissingMetric(std::string(name));
}

bool operator==(const MetricVector& a, const MetricVector& b) {
  if (a.entries_.size() != b.entries_.size()) return false;
  for (std::size_t i = 0; i < a.entries_.size(); ++i) {
    if (a.entries_[i].name != b.entries_[i].name) return false;
    // Bitwise equality of values; NaN never appears in a valid vector.
    if (a.entries_[i].value != b.entries_[i].value) return false;
  }
  return true;
}

double score_lower(double v, double s, double tau_l) {
  require_finite(v, "value");
  require_finite(s, "target");
  require_positive_tau(tau_l, "tau_lower");
  return lower_transition(v, s, tau_l);
}

double score_upper(double v, double s, double tau_u) {
  require_finite(v, "value");
  require_finite(s, "target");
  require_positive_tau(tau_u, "tau_upper");
  return upper_transition(v, s, tau_u);
}

double score_range(double v, double l, double u, double tau_l, double tau_u) {
  require_finite(v, "value");
  require_finite(l, "range lower edge");
  require_finite(u, "range upper edge");
  if (l > u) throw InvalidSpec("range lower edge exceeds upper edge");
  require_positive_tau(tau_l, "tau_lower");
  require_positive_tau(tau_u, "tau_upper");
  if (v < l) return lower_transition(v, l, tau_l);
  if (v > u) return upper_transition(v, u, tau_u);
  return 1.0;
}

double score_objective(const Objective& objective, double v) {
  switch (objective.kind) {
    case SpecKind::LowerBound: return score_lower(v, objective.target, objective.tau_lower);
    case SpecKind::UpperBound: return score_upper(v, objective.target, objective.tau_upper);
    case SpecKind::Range:
      return score_range(v, objective.target, objective.target_upper, objective.tau_lower, objective.tau_upper);
  }
  throw InvalidSpec("unknown spec kind");
}

std::vector<double> objective_scores(const MetricVector& metrics, const SpecSet& specs) {
  std::vector<double> out;
  out.reserve(specs.size());
  for (const auto& o : specs.objectives()) out.push_back(score_objective(o, metrics.at(o.name)));
  return out;
}

double geometric_mean(const std::vector<double>& scores) {
  if (scores.empty()) throw InvalidInput("geometric mean of no scores");
  double log_sum = 0.0;
  for (const double p : scores) {
    if (p <= 0.0) return 0.0;
    log_sum += std::log(p);
  }
  return std::clamp(std::exp(log_sum / static_cast<double>(scores.size())), 0.0, 1.0);
}

double performance_reward(const MetricVector& metrics, const SpecSet& specs) {
  return geometric_mean(objective_scores(metrics, specs));
}

double format_penalty(FormatViolation violation) {
  switch (violation) {
    case FormatViolation::None: return 0.0;
    case FormatViolation::BudgetOverrun: return -0.5;
    case FormatViolation::Malformed: return -1.0;
  }
  return -1.0;
}

double final_reward(double performance, double penalty, RewardMode mode) {
  if (mode == RewardMode::Eval) return performance;
  return std::max(0.0, std::min(1.0, performance + penalty));
}

ScoreBreakdown score(const MetricVector& metrics, const SpecSet& specs, double penalty, RewardMode mode) {
  ScoreBreakdown out;
  const auto p = objective_scores(metrics, specs);
  for (std::size_t j = 0; j < p.size(); ++j) out.per_objective.emplace_back(specs[j].name, p[j]);
  out.performance = geometric_mean(p);
  out.format_penalty = penalty;
  out.final = final_reward(out.performance, penalty, mode);
  return out;
}

}  // namespace tlgrpo::score
