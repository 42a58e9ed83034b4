#pragma once

// Scoring of measured metrics against multi-objective performance targets.
//
// Each objective maps its measured value to p in [0, 1] through a piecewise
// constant / quadratic / cubic transition governed by two tolerance widths.
// The performance reward is the geometric mean of the per-objective scores,
// and the turn reward applies the format penalty in training mode only.

#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace tlgrpo::score {

class InvalidInput : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class InvalidSpec : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class MissingMetric : public std::runtime_error {
 public:
  explicit MissingMetric(std::string objective)
      : std::runtime_error("missing metric for objective '" + objective + "'"), objective_(std::move(objective)) {}
  const std::string& objective() const { return objective_; }

 private:
  std::string objective_;
};

enum class SpecKind { LowerBound, UpperBound, Range };

std::string_view to_string(SpecKind kind);
SpecKind spec_kind_from_string(std::string_view s);

inline constexpr double kDefaultAlpha = 0.2;
inline constexpr double kDefaultBeta = 0.2;
/// Tolerance used when a target is exactly zero and proportional widths degenerate.
inline constexpr double kAbsoluteThresholdFloor = 1e-6;

struct Objective {
  std::string name;
  SpecKind kind = SpecKind::LowerBound;
  double target = 0.0;        // s, or the lower edge l for Range
  double target_upper = 0.0;  // u for Range; unused otherwise
  double tau_lower = 1.0;
  double tau_upper = 1.0;
  std::string unit;

  bool uses_lower_transition() const { return kind != SpecKind::UpperBound; }
  bool uses_upper_transition() const { return kind != SpecKind::LowerBound; }

  /// Throws InvalidSpec if the objective violates its invariants.
  void validate() const;
};

struct Thresholds {
  double tau_lower;
  double tau_upper;
};

/// Proportional tolerance widths: alpha*|s| and beta*|s| (alpha*|l|, beta*|u|
/// for a range). A zero target side falls back to kAbsoluteThresholdFloor.
Thresholds default_thresholds(SpecKind kind, double target, double target_upper, double alpha = kDefaultAlpha,
                              double beta = kDefaultBeta);

/// Builds a validated objective with default_thresholds applied.
Objective make_objective(std::string name, SpecKind kind, double target, double target_upper = 0.0,
                         std::string unit = {}, double alpha = kDefaultAlpha, double beta = kDefaultBeta);

class SpecSet {
 public:
  SpecSet() = default;
  explicit SpecSet(std::vector<Objective> objectives);

  const std::vector<Objective>& objectives() const { return objectives_; }
  std::size_t size() const { return objectives_.size(); }
  const Objective& operator[](std::size_t j) const { return objectives_[j]; }

  /// Throws InvalidSpec on empty sets, duplicate names or invalid objectives.
  void validate() const;

 private:
  std::vector<Objective> objectives_;
};

struct Metric {
  std::string name;
  double value;
};

/// Measured values keyed by objective name, in insertion order.
class MetricVector {
 public:
  MetricVector() = default;
  explicit MetricVector(std::vector<Metric> entries) : entries_(std::move(entries)) {}

  void set(std::string name, double value);
  const double* find(std::string_view name) const;
  /// Throws MissingMetric if absent.
  double at(std::string_view name) const;

  const std::vector<Metric>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

  friend bool operator==(const MetricVector& a, const MetricVector& b);

 private:
  std::vector<Metric> entries_;
};

double score_lower(double v, double s, double tau_l);
double score_upper(double v, double s, double tau_u);
double score_range(double v, double l, double u, double tau_l, double tau_u);
double score_objective(const Objective& objective, double v);

/// Per-objective scores in SpecSet order.
std::vector<double> objective_scores(const MetricVector& metrics, const SpecSet& specs);

/// Geometric mean of the scores; 0 when any score is 0.
double geometric_mean(const std::vector<double>& scores);

double performance_reward(const MetricVector& metrics, const SpecSet& specs);

enum class RewardMode { Train, Eval };

enum class FormatViolation { None, BudgetOverrun, Malformed };

/// Penalty magnitudes: malformed -1, budget overrun -0.5, well formed 0.
double format_penalty(FormatViolation violation);

/// Train: clamp(P + F, 0, 1). Eval: P unchanged.
double final_reward(double performance, double penalty, RewardMode mode);

struct ScoreBreakdown {
  std::vector<std::pair<std::string, double>> per_objective;
  double performance = 0.0;
  double format_penalty = 0.0;
  double final = 0.0;
};

ScoreBreakdown score(const MetricVector& metrics, const SpecSet& specs, double penalty, RewardMode mode);

}  // namespace tlgrpo::score
